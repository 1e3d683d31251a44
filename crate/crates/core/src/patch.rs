//! Temporal patching, patch embedding and the fixed sinusoidal position table.

use crate::error::{Error, Result};
use crate::nn::Dense;
use crate::tensor::{Tape, Tensor};

/// `floor((L_H - L_P) / S) + 1`.
pub fn patch_count(lookback: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::Config("patch length and stride must be positive".into()));
    }
    if patch_len > lookback {
        return Err(Error::Config(format!(
            "patch length {patch_len} exceeds lookback {lookback}"
        )));
    }
    Ok((lookback - patch_len) / stride + 1)
}

/// Splits an `L_H x V` window into an `L_N x V x L_P` tensor; patch `p` of
/// variate `v` holds rows `p*S .. p*S + L_P` of column `v`.
pub fn patch(x: &Tensor, patch_len: usize, stride: usize) -> Result<Tensor> {
    let &[len, v] = x.shape() else {
        return Err(Error::Shape {
            shape: x.shape().to_vec(),
            reason: "expected an L_H x V window".into(),
        });
    };
    let n = patch_count(len, patch_len, stride)?;
    let mut out = Vec::with_capacity(n * v * patch_len);
    for p in 0..n {
        for c in 0..v {
            for j in 0..patch_len {
                out.push(x.data()[(p * stride + j) * v + c]);
            }
        }
    }
    Tensor::new([n, v, patch_len], out)
}

/// Flat source positions for patching a batch stored as `(B*V) x L_H` rows
/// (row `b*V + v`), emitted in `(b, p, v, j)` order.
pub fn patch_gather_indices(
    batch: usize,
    variates: usize,
    lookback: usize,
    patch_len: usize,
    stride: usize,
) -> Result<Vec<usize>> {
    let n = patch_count(lookback, patch_len, stride)?;
    let mut idx = Vec::with_capacity(batch * n * variates * patch_len);
    for b in 0..batch {
        for p in 0..n {
            for v in 0..variates {
                let row = (b * variates + v) * lookback;
                idx.extend((0..patch_len).map(|j| row + p * stride + j));
            }
        }
    }
    Ok(idx)
}

/// `PE[p, 2i] = sin(p / 10000^(2i/D))`, `PE[p, 2i+1] = cos(...)`.
pub fn positional_encoding(patches: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("model dim must be even, got {dim}")));
    }
    let mut out = Vec::with_capacity(patches * dim);
    for p in 0..patches {
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    Tensor::new([patches, dim], out)
}

pub struct EmbedParams {
    pub dense: Dense,
    pub pos_encoding: Tensor,
}

/// Embedded tokens, `L_N x V x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokens {
    pub tokens: Tensor,
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchTokens {
    pub fn num_patches(&self) -> usize {
        self.tokens.shape()[0]
    }
}

/// `tokens[p, v] = patches[p, v] W + b + PE[p]`.
pub fn embed(patches: &Tensor, params: &EmbedParams, stride: usize) -> Result<PatchTokens> {
    let &[n, v, lp] = patches.shape() else {
        return Err(Error::Shape {
            shape: patches.shape().to_vec(),
            reason: "expected L_N x V x L_P patches".into(),
        });
    };
    let d = params.dense.bias.len();
    if params.dense.weight.shape() != [lp, d] || params.pos_encoding.shape() != [n, d] {
        return Err(Error::Dimension {
            op: "embed",
            lhs: patches.shape().to_vec(),
            rhs: params.dense.weight.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(patches.reshape([n * v, lp])?);
    let (w, b) = params.dense.constants(&mut tape);
    let z = tape.linear(x, w, Some(b))?;
    let pe = tape.constant(repeat_rows(&params.pos_encoding, 1, v)?);
    let z = tape.add(z, pe)?;
    Ok(PatchTokens {
        tokens: tape.value(z).reshape([n, v, d])?,
        patch_len: lp,
        stride,
    })
}

/// Lays out `L_N x D` table rows for a `(B, L_N, V)` token grid.
pub fn repeat_rows(pe: &Tensor, batch: usize, variates: usize) -> Result<Tensor> {
    let (n, d) = (pe.shape()[0], pe.shape()[1]);
    let mut out = Vec::with_capacity(batch * n * variates * d);
    for _ in 0..batch {
        for p in 0..n {
            for _ in 0..variates {
                out.extend_from_slice(pe.row(p));
            }
        }
    }
    Tensor::new([batch * n * variates, d], out)
}
