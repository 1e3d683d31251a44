//! Adam, the epoch loop with early stopping, evaluation and ablation sweeps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::WindowSet;
use crate::decompose::ResidualMode;
use crate::error::{Error, Result};
use crate::ja::{mix_seed, AttentionMode, OffsetMode, Sampler, SamplingMode};
use crate::model::{ModelConfig, TiVaT};
use crate::par;
use crate::tensor::{Tape, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment buffers of the optimizer, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + EPSILON);
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Loop controls that are not part of the model definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    /// Caps mini-batches per epoch; `None` uses every window.
    pub max_batches_per_epoch: Option<usize>,
    /// Caps evaluation windows (evenly spaced); `None` uses every window.
    pub max_eval_windows: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_epochs: 10,
            patience: 3,
            clip_norm: 5.0,
            max_batches_per_epoch: None,
            max_eval_windows: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    pub horizon: usize,
    pub dataset: String,
    pub config_fingerprint: String,
}

/// First 16 hex digits of the SHA-256 of the config's JSON form.
pub fn config_fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Evenly spaced window indices, at most `cap` of them.
pub fn eval_indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len && c > 0 => (0..c).map(|i| i * len / c).collect(),
        _ => (0..len).collect(),
    }
}

fn error_sums_of(pred: &[f64], target: &[f64]) -> (f64, f64) {
    pred.iter().zip(target).fold((0.0, 0.0), |(se, ae), (p, t)| {
        (se + (p - t) * (p - t), ae + (p - t).abs())
    })
}

/// `(mse, mae)` of two equally long arrays.
pub fn error_metrics(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Dimension {
            op: "error_metrics",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    let (se, ae) = error_sums_of(pred, target);
    let n = pred.len() as f64;
    Ok((se / n, ae / n))
}

/// Sum of squared and absolute errors over `idx` windows plus element count.
fn error_sums(model: &TiVaT, set: &WindowSet, idx: &[usize]) -> Result<(f64, f64, usize)> {
    let bs = model.config.batch_size.max(1);
    let chunks: Vec<&[usize]> = idx.chunks(bs).collect();
    let parts = par::map_range(chunks.len(), |i| -> Result<(f64, f64, usize)> {
        let batch = set.batch(chunks[i]);
        let pred = model.predict_batch(&batch)?;
        let (se, ae) = error_sums_of(pred.data(), &batch.targets);
        Ok((se, ae, batch.targets.len()))
    });
    let mut total = (0.0, 0.0, 0);
    for part in parts {
        let (se, ae, n) = part?;
        total.0 += se;
        total.1 += ae;
        total.2 += n;
    }
    Ok(total)
}

/// MSE and MAE over every element of every window in `set`, data scale.
pub fn evaluate(model: &TiVaT, set: &WindowSet, dataset: &str) -> Result<EvalReport> {
    evaluate_capped(model, set, dataset, None)
}

pub fn evaluate_capped(model: &TiVaT, set: &WindowSet, dataset: &str, cap: Option<usize>) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::Data("evaluation set has no windows".into()));
    }
    let idx = eval_indices(set.len(), cap);
    let (se, ae, n) = error_sums(model, set, &idx)?;
    Ok(EvalReport {
        mse: se / n as f64,
        mae: ae / n as f64,
        horizon: model.config.horizon,
        dataset: dataset.to_string(),
        config_fingerprint: config_fingerprint(&model.config),
    })
}

/// Mini-batch Adam with per-epoch shuffling, validation-based early stopping
/// and restoration of the best parameters.
pub fn fit(model: &mut TiVaT, train: &WindowSet, val: &WindowSet, opts: &TrainOptions) -> Result<History> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets need at least one window".into()));
    }
    let cfg = model.config.clone();
    let mut state = AdamState::new(model.store.tensors());
    let mut history = History {
        best_val_mse: f64::INFINITY,
        ..History::default()
    };
    let mut best = model.store.clone();
    let mut stale = 0;
    for epoch in 0..opts.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if let Some(cap) = opts.max_batches_per_epoch {
            batches.truncate(cap);
        }
        let mut loss_sum = 0.0;
        for starts in &batches {
            let step = state.step;
            let batch = train.batch(starts);
            let diverged = |loss: f64| Error::Diverged {
                epoch,
                step: step as usize,
                loss,
            };
            let mut tape = Tape::new();
            let params = model.store.bind(&mut tape);
            let loss = match model.loss(&mut tape, &params, &batch, mix_seed(cfg.seed, step)) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(diverged(value));
            }
            let grads = match tape.backward(loss) {
                Ok(g) => g,
                Err(Error::NonFinite { .. }) => return Err(diverged(value)),
                Err(e) => return Err(e),
            };
            let mut g: Vec<Vec<f64>> = params
                .vars()
                .iter()
                .map(|&v| grads.wrt(&tape, v).into_data())
                .collect();
            clip_global_norm(&mut g, opts.clip_norm);
            adam_step(model.store.tensors_mut(), &g, &mut state, cfg.learning_rate)?;
            if model.store.tensors().iter().any(|t| !t.is_finite()) {
                return Err(diverged(value));
            }
            loss_sum += value;
        }
        let report = evaluate_capped(model, val, "val", opts.max_eval_windows)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len().max(1) as f64,
            val_mse: report.mse,
            val_mae: report.mae,
        });
        if report.mse < history.best_val_mse {
            history.best_val_mse = report.mse;
            history.best_epoch = epoch;
            best = model.store.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    history.steps = state.step;
    model.store = best;
    Ok(history)
}

/// The five switch families that can be swept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Attention,
    Offset,
    Sampler,
    SamplingMode,
    Residual,
}

impl AblationAxis {
    pub const NAMES: [&'static str; 5] = ["attention", "offset", "sampler", "sampling_mode", "residual"];

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "attention" => Self::Attention,
            "offset" => Self::Offset,
            "sampler" => Self::Sampler,
            "sampling_mode" => Self::SamplingMode,
            "residual" => Self::Residual,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation axis `{other}`; valid axes: {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }
}

/// Named config variants for one axis, all derived from `base`.
pub fn ablation_variants(base: &ModelConfig, axis: AblationAxis) -> Vec<(String, ModelConfig)> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let sampled = |c: &mut ModelConfig| {
        c.attention_mode = AttentionMode::Ja;
        c.offset_mode = OffsetMode::GuidelinesWithSampling;
    };
    match axis {
        AblationAxis::Attention => [("full", AttentionMode::Full), ("ja", AttentionMode::Ja)]
            .into_iter()
            .map(|(n, m)| (n.to_string(), with(&|c| c.attention_mode = m)))
            .collect(),
        AblationAxis::Offset => [
            ("points", OffsetMode::Points),
            ("guidelines_no_sampling", OffsetMode::GuidelinesNoSampling),
            ("guidelines_with_sampling", OffsetMode::GuidelinesWithSampling),
        ]
        .into_iter()
        .map(|(n, m)| {
            (
                n.to_string(),
                with(&|c| {
                    c.attention_mode = AttentionMode::Ja;
                    c.offset_mode = m;
                }),
            )
        })
        .collect(),
        AblationAxis::Sampler => {
            let mut out = Vec::new();
            for s in [Sampler::Random, Sampler::Dtv] {
                for x in [Sampler::Random, Sampler::Dtv] {
                    let name = format!("self_{}_cross_{}", sampler_name(s), sampler_name(x));
                    out.push((
                        name,
                        with(&|c| {
                            sampled(c);
                            c.sampling_mode = SamplingMode::Separate;
                            c.sampler_self = s;
                            c.sampler_cross = x;
                        }),
                    ));
                }
            }
            out
        }
        AblationAxis::SamplingMode => [
            ("none", SamplingMode::None),
            ("common", SamplingMode::Common),
            ("separate", SamplingMode::Separate),
        ]
        .into_iter()
        .map(|(n, m)| {
            (
                n.to_string(),
                with(&|c| {
                    sampled(c);
                    c.sampling_mode = m;
                }),
            )
        })
        .collect(),
        AblationAxis::Residual => [
            ("none", ResidualMode::None),
            ("trend", ResidualMode::TrendOnly),
            ("season", ResidualMode::SeasonOnly),
            ("both", ResidualMode::Both),
        ]
        .into_iter()
        .map(|(n, m)| (n.to_string(), with(&|c| c.residual_mode = m)))
        .collect(),
    }
}

fn sampler_name(s: Sampler) -> &'static str {
    match s {
        Sampler::Dtv => "dtv",
        Sampler::Random => "random",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
    pub history: History,
}

/// Train and evaluate one model per variant. Every variant sees the same
/// windows, shuffling and initialization seed.
pub fn run_ablation(
    base: &ModelConfig,
    axis: AblationAxis,
    train: &WindowSet,
    val: &WindowSet,
    test: &WindowSet,
    dataset: &str,
    opts: &TrainOptions,
) -> Result<Vec<AblationRow>> {
    let variants = ablation_variants(base, axis);
    let v = train.num_variates();
    par::map_range(variants.len(), |i| {
        let (name, cfg) = &variants[i];
        let mut model = TiVaT::new(cfg.clone(), v)?;
        let history = fit(&mut model, train, val, opts)?;
        let report = evaluate_capped(&model, test, dataset, opts.max_eval_windows)?;
        Ok(AblationRow {
            variant: name.clone(),
            report,
            history,
        })
    })
    .into_iter()
    .collect()
}

/// `variant,mse,mae` table.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(["variant", "mse", "mae"]).map_err(io)?;
    for r in rows {
        w.write_record([r.variant.clone(), r.report.mse.to_string(), r.report.mae.to_string()])
            .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
}
