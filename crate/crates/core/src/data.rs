//! Series ingestion, chronological splits, sliding windows and instance
//! normalization.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to per-variate standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Raw multivariate series: `len()` time points by `num_variates()` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrame {
    variate_names: Vec<String>,
    timestamps: Vec<String>,
    /// row-major `T x V`
    values: Vec<f64>,
}

impl SeriesFrame {
    pub fn new(variate_names: Vec<String>, timestamps: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let v = variate_names.len();
        if v == 0 {
            return Err(Error::Data("a series needs at least one variate".into()));
        }
        if values.len() != timestamps.len() * v {
            return Err(Error::Data(format!(
                "{} values do not fill {} rows of {v} variates",
                values.len(),
                timestamps.len()
            )));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, variate {}",
                i / v,
                i % v
            )));
        }
        Ok(Self {
            variate_names,
            timestamps,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_variates(&self) -> usize {
        self.variate_names.len()
    }

    pub fn variate_names(&self) -> &[String] {
        &self.variate_names
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: usize, v: usize) -> f64 {
        self.values[t * self.num_variates() + v]
    }

    pub fn column(&self, v: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.value(t, v)).collect()
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> SeriesFrame {
        let v = self.num_variates();
        SeriesFrame {
            variate_names: self.variate_names.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values[start * v..end * v].to_vec(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
        let mut header = vec!["date".to_string()];
        header.extend(self.variate_names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
        let v = self.num_variates();
        for (t, stamp) in self.timestamps.iter().enumerate() {
            let mut rec = Vec::with_capacity(v + 1);
            rec.push(stamp.clone());
            // `{}` on f64 prints the shortest string that parses back exactly
            rec.extend(self.values[t * v..(t + 1) * v].iter().map(|x| format!("{x}")));
            w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a comma-separated file whose first column is an opaque timestamp and
/// whose remaining columns are numeric.
pub fn load_csv(path: &Path) -> Result<SeriesFrame> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(Error::Data(format!(
            "{}: need a timestamp column and at least one value column, found {} column(s)",
            path.display(),
            header.len()
        )));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut stamps = Vec::new();
    let mut values = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        // 1-based data row numbers; the header is row 0
        let row = r + 1;
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "row {row}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        stamps.push(rec[0].to_string());
        for (c, cell) in rec.iter().enumerate().skip(1) {
            let x: f64 = cell.trim().parse().map_err(|_| Error::ParseCell {
                row,
                column: c,
                value: cell.to_string(),
            })?;
            if !x.is_finite() {
                return Err(Error::ParseCell {
                    row,
                    column: c,
                    value: cell.to_string(),
                });
            }
            values.push(x);
        }
    }
    SeriesFrame::new(names, stamps, values)
}

/// Lengths of the train, validation and test segments, in time points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSpec {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Self { train, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Three contiguous, non-overlapping segments in time order.
pub fn chronological_split(
    frame: &SeriesFrame,
    spec: SplitSpec,
) -> Result<(SeriesFrame, SeriesFrame, SeriesFrame)> {
    if spec.total() > frame.len() {
        return Err(Error::Data(format!(
            "split ({}, {}, {}) needs {} points, series has {}",
            spec.train,
            spec.val,
            spec.test,
            spec.total(),
            frame.len()
        )));
    }
    let a = spec.train;
    let b = a + spec.val;
    let c = b + spec.test;
    Ok((frame.slice(0, a), frame.slice(a, b), frame.slice(b, c)))
}

/// Per-variate affine scaler fitted on one segment and applied to others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(frame: &SeriesFrame) -> Self {
        let (mean, std) = (0..frame.num_variates())
            .map(|v| mean_std(&frame.column(v)))
            .unzip();
        Self { mean, std }
    }

    pub fn apply(&self, frame: &SeriesFrame) -> SeriesFrame {
        let v = frame.num_variates();
        let values = frame
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| (x - self.mean[i % v]) / self.std[i % v])
            .collect();
        SeriesFrame {
            variate_names: frame.variate_names.clone(),
            timestamps: frame.timestamps.clone(),
            values,
        }
    }
}

/// Population mean and standard deviation, std floored at [`STD_FLOOR`].
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

/// Per-variate statistics of one lookback window.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Z-scores each column of a row-major `len x num_variates` window.
pub fn instance_normalize(window: &[f64], num_variates: usize) -> (Vec<f64>, NormStats) {
    let v = num_variates;
    let len = window.len() / v;
    let (mean, std): (Vec<f64>, Vec<f64>) = (0..v)
        .map(|c| {
            let col: Vec<f64> = (0..len).map(|t| window[t * v + c]).collect();
            mean_std(&col)
        })
        .unzip();
    let out = window
        .iter()
        .enumerate()
        .map(|(i, x)| (x - mean[i % v]) / std[i % v])
        .collect();
    (out, NormStats { mean, std })
}

/// Inverse of [`instance_normalize`] for a row-major `len x V` array.
pub fn denormalize(pred: &[f64], stats: &NormStats) -> Vec<f64> {
    let v = stats.mean.len();
    pred.iter()
        .enumerate()
        .map(|(i, x)| x * stats.std[i % v] + stats.mean[i % v])
        .collect()
}

pub fn window_count(segment_len: usize, lookback: usize, horizon: usize) -> usize {
    (segment_len + 1).saturating_sub(lookback + horizon)
}

/// All stride-1 (lookback, horizon) windows of one segment.
#[derive(Clone, Debug)]
pub struct WindowSet {
    frame: SeriesFrame,
    lookback: usize,
    horizon: usize,
}

/// A materialized mini-batch. `inputs` is `B x L_H x V`, `targets` is
/// `B x L_F x V`, both row-major; `stats[b]` normalizes sample `b`.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub size: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub num_variates: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub starts: Vec<usize>,
    pub stats: Vec<NormStats>,
}

impl WindowBatch {
    pub fn input(&self, b: usize) -> &[f64] {
        let w = self.lookback * self.num_variates;
        &self.inputs[b * w..(b + 1) * w]
    }

    pub fn target(&self, b: usize) -> &[f64] {
        let w = self.horizon * self.num_variates;
        &self.targets[b * w..(b + 1) * w]
    }
}

pub fn make_windows(frame: &SeriesFrame, lookback: usize, horizon: usize) -> Result<WindowSet> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::Data("lookback and horizon must be positive".into()));
    }
    if frame.len() < lookback + horizon {
        return Err(Error::Data(format!(
            "segment of {} points is shorter than lookback {lookback} + horizon {horizon}",
            frame.len()
        )));
    }
    Ok(WindowSet {
        frame: frame.clone(),
        lookback,
        horizon,
    })
}

impl WindowSet {
    pub fn len(&self) -> usize {
        window_count(self.frame.len(), self.lookback, self.horizon)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_variates(&self) -> usize {
        self.frame.num_variates()
    }

    pub fn frame(&self) -> &SeriesFrame {
        &self.frame
    }

    /// Window `i` covers rows `i .. i + L_H + L_F`; the target follows the
    /// input immediately.
    pub fn batch(&self, starts: &[usize]) -> WindowBatch {
        let v = self.num_variates();
        let (lh, lf) = (self.lookback, self.horizon);
        let mut inputs = Vec::with_capacity(starts.len() * lh * v);
        let mut targets = Vec::with_capacity(starts.len() * lf * v);
        let mut stats = Vec::with_capacity(starts.len());
        let vals = self.frame.values();
        for &s in starts {
            assert!(s < self.len(), "window {s} out of range ({})", self.len());
            let input = &vals[s * v..(s + lh) * v];
            inputs.extend_from_slice(input);
            targets.extend_from_slice(&vals[(s + lh) * v..(s + lh + lf) * v]);
            stats.push(instance_normalize(input, v).1);
        }
        WindowBatch {
            size: starts.len(),
            lookback: lh,
            horizon: lf,
            num_variates: v,
            inputs,
            targets,
            starts: starts.to_vec(),
            stats,
        }
    }

    pub fn all(&self) -> WindowBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

/// Parameters of the synthetic lead-lag generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadLagSpec {
    pub variates: usize,
    pub len: usize,
    pub lag: usize,
    pub coupling: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Variate 0 drives the rest: it is a sum of two sinusoids plus Gaussian
/// noise, and variate `v >= 1` equals `coupling * driver(t - v * lag)` plus
/// its own independent noise.
pub fn synth_leadlag(spec: &LeadLagSpec) -> Result<SeriesFrame> {
    let LeadLagSpec {
        variates,
        len,
        lag,
        coupling,
        noise_std,
        seed,
    } = *spec;
    if variates < 2 {
        return Err(Error::Data("lead-lag series needs at least 2 variates".into()));
    }
    if lag == 0 {
        return Err(Error::Data("lag must be at least 1".into()));
    }
    if lag * (variates - 1) >= len {
        return Err(Error::Data(format!(
            "largest shift {} must be shorter than the series ({len})",
            lag * (variates - 1)
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite() && coupling.is_finite()) {
        return Err(Error::Data("noise_std must be finite and non-negative".into()));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Data(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let burn = lag * (variates - 1);
    // driver[t + burn] is the driver at time t; negative times are burn-in
    let driver: Vec<f64> = (0..len + burn)
        .map(|i| {
            let t = i as f64 - burn as f64;
            (2.0 * PI * t / 24.0).sin() + 0.5 * (2.0 * PI * t / 57.0).sin() + noise.sample(&mut rng)
        })
        .collect();
    let mut values = Vec::with_capacity(len * variates);
    for t in 0..len {
        values.push(driver[t + burn]);
        for v in 1..variates {
            values.push(coupling * driver[t + burn - v * lag] + noise.sample(&mut rng));
        }
    }
    let names = (0..variates).map(|v| format!("x{v}")).collect();
    let stamps = (0..len).map(|t| t.to_string()).collect();
    SeriesFrame::new(names, stamps, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(rows: usize, v: usize) -> SeriesFrame {
        SeriesFrame::new(
            (0..v).map(|i| format!("c{i}")).collect(),
            (0..rows).map(|t| t.to_string()).collect(),
            (0..rows * v).map(|i| i as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn split_lengths() {
        let f = frame(3, 2);
        let (a, b, c) = chronological_split(&f, SplitSpec::new(1, 1, 1)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1, 1, 1));
        assert_eq!(b.value(0, 0), 2.0);
        assert!(chronological_split(&frame(10, 1), SplitSpec::new(5, 5, 5)).is_err());
    }

    #[test]
    fn window_counts() {
        let f = frame(10, 1);
        assert_eq!(make_windows(&f, 3, 2).unwrap().len(), 6);
        assert_eq!(make_windows(&frame(5, 1), 3, 2).unwrap().len(), 1);
        assert!(make_windows(&frame(4, 1), 3, 2).is_err());
    }

    #[test]
    fn window_target_follows_input() {
        let f = frame(10, 2);
        let w = make_windows(&f, 3, 2).unwrap();
        let b = w.batch(&[4]);
        assert_eq!(b.input(0), &f.values()[8..14]);
        assert_eq!(b.target(0), &f.values()[14..18]);
    }

    #[test]
    fn normalize_known_values() {
        let (n, s) = instance_normalize(&[1.0, 2.0, 3.0], 1);
        assert!((s.mean[0] - 2.0).abs() < 1e-15);
        assert!((s.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        for (got, want) in n.iter().zip([-1.224744871391589, 0.0, 1.224744871391589]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_constant_variate() {
        let (n, s) = instance_normalize(&[4.0, 4.0, 4.0], 1);
        assert_eq!(s.std[0], STD_FLOOR);
        assert!(n.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn leadlag_exact_without_noise() {
        let f = synth_leadlag(&LeadLagSpec {
            variates: 3,
            len: 100,
            lag: 5,
            coupling: 1.0,
            noise_std: 0.0,
            seed: 1,
        })
        .unwrap();
        for t in 5..100 {
            assert_eq!(f.value(t, 1), f.value(t - 5, 0));
        }
        for t in 10..100 {
            assert_eq!(f.value(t, 2), f.value(t - 10, 0));
        }
    }

    #[test]
    fn leadlag_rejects_long_shift() {
        let spec = LeadLagSpec {
            variates: 3,
            len: 10,
            lag: 5,
            coupling: 1.0,
            noise_std: 0.1,
            seed: 0,
        };
        assert!(synth_leadlag(&spec).is_err());
        assert!(synth_leadlag(&LeadLagSpec { variates: 1, ..spec }).is_err());
        assert!(synth_leadlag(&LeadLagSpec { lag: 0, ..spec }).is_err());
    }
}
