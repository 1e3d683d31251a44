//! Moving-average trend/seasonality split and the residual linear refinement
//! applied to each component.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Dense;
use crate::tensor::{Tape, Tensor, Var};

/// Which decomposed components keep their residual path around the linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    None,
    #[serde(alias = "trend")]
    TrendOnly,
    #[serde(alias = "season")]
    SeasonOnly,
    Both,
}

impl ResidualMode {
    pub fn trend(self) -> bool {
        matches!(self, ResidualMode::TrendOnly | ResidualMode::Both)
    }

    pub fn season(self) -> bool {
        matches!(self, ResidualMode::SeasonOnly | ResidualMode::Both)
    }
}

/// Trend and seasonality of an `L_H x V` window.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompPair {
    pub trend: Tensor,
    pub seasonality: Tensor,
}

pub struct RefineParams {
    pub trend: Dense,
    pub season: Dense,
    pub mode: ResidualMode,
}

fn check_kernel(kernel: usize, len: usize) -> Result<()> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "moving-average kernel must be odd and positive, got {kernel}"
        )));
    }
    if kernel > 2 * len - 1 {
        return Err(Error::Config(format!(
            "moving-average kernel {kernel} exceeds 2 * {len} - 1"
        )));
    }
    Ok(())
}

/// Centered moving average of one series with edge-value padding.
pub fn moving_average_series(x: &[f64], kernel: usize) -> Result<Vec<f64>> {
    check_kernel(kernel, x.len())?;
    let half = (kernel - 1) / 2;
    let n = x.len() as isize;
    let half = half as isize;
    let at = |i: isize| x[i.clamp(0, n - 1) as usize];
    Ok((0..n)
        .map(|t| (t - half..=t + half).map(at).sum::<f64>() / kernel as f64)
        .collect())
}

/// Column-wise moving average of an `L_H x V` window.
pub fn moving_average(x: &Tensor, kernel: usize) -> Result<Tensor> {
    let (len, v) = matrix_dims(x)?;
    let mut out = vec![0.0; len * v];
    for c in 0..v {
        let col: Vec<f64> = (0..len).map(|t| x.data()[t * v + c]).collect();
        for (t, m) in moving_average_series(&col, kernel)?.into_iter().enumerate() {
            out[t * v + c] = m;
        }
    }
    Tensor::new([len, v], out)
}

pub fn st_decompose(x: &Tensor, kernel: usize) -> Result<DecompPair> {
    let trend = moving_average(x, kernel)?;
    let seasonality = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(trend.data()).map(|(a, b)| a - b).collect(),
    )?;
    Ok(DecompPair { trend, seasonality })
}

/// `x + Linear(x)` with the residual, `Linear(x)` without; `x` holds one
/// series per row and the linear maps along time.
pub fn refine_rows(tape: &mut Tape, x: Var, w: Var, b: Var, residual: bool) -> Result<Var> {
    let lin = tape.linear(x, w, Some(b))?;
    if residual {
        tape.add(x, lin)
    } else {
        Ok(lin)
    }
}

pub fn refine(pair: &DecompPair, params: &RefineParams) -> Result<DecompPair> {
    let mut tape = Tape::new();
    let mut run = |comp: &Tensor, dense: &Dense, residual: bool| -> Result<Tensor> {
        let len = comp.shape()[0];
        if dense.weight.shape() != [len, len] {
            return Err(Error::Dimension {
                op: "refine",
                lhs: comp.shape().to_vec(),
                rhs: dense.weight.shape().to_vec(),
            });
        }
        let rows = tape.constant(comp.transpose()?);
        let (w, b) = dense.constants(&mut tape);
        let out = refine_rows(&mut tape, rows, w, b, residual)?;
        tape.value(out).transpose()
    };
    Ok(DecompPair {
        trend: run(&pair.trend, &params.trend, params.mode.trend())?,
        seasonality: run(&pair.seasonality, &params.season, params.mode.season())?,
    })
}

fn matrix_dims(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        &[len, v] => Ok((len, v)),
        s => Err(Error::Shape {
            shape: s.to_vec(),
            reason: "expected an L_H x V window".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_padded_example() {
        let got = moving_average_series(&[1.0, 2.0, 3.0, 4.0], 3).unwrap();
        let want = [4.0 / 3.0, 2.0, 3.0, 11.0 / 3.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_one_is_identity() {
        let x = [3.0, -1.0, 2.5];
        assert_eq!(moving_average_series(&x, 1).unwrap(), x.to_vec());
    }

    #[test]
    fn constant_series_is_fixed_point() {
        let x = vec![7.25; 10];
        for k in [1, 3, 5, 19] {
            for m in moving_average_series(&x, k).unwrap() {
                assert!((m - 7.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_kernels() {
        assert!(moving_average_series(&[1.0; 4], 2).is_err());
        assert!(moving_average_series(&[1.0; 4], 0).is_err());
        assert!(moving_average_series(&[1.0; 4], 9).is_err());
        assert!(moving_average_series(&[1.0; 4], 7).is_ok());
    }

    #[test]
    fn refine_modes() {
        let x = Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let pair = st_decompose(&x, 3).unwrap();
        let zero = || Dense {
            weight: Tensor::zeros([3, 3]),
            bias: Tensor::vector(vec![0.5, 0.5, 0.5]),
        };
        let both = refine(
            &pair,
            &RefineParams {
                trend: Dense {
                    weight: Tensor::zeros([3, 3]),
                    bias: Tensor::zeros([3]),
                },
                season: Dense {
                    weight: Tensor::zeros([3, 3]),
                    bias: Tensor::zeros([3]),
                },
                mode: ResidualMode::Both,
            },
        )
        .unwrap();
        assert_eq!(both, pair);
        let none = refine(
            &pair,
            &RefineParams {
                trend: zero(),
                season: zero(),
                mode: ResidualMode::None,
            },
        )
        .unwrap();
        assert!(none.trend.data().iter().all(|&v| v == 0.5));
        assert!(none.seasonality.data().iter().all(|&v| v == 0.5));
    }
}
