//! Dual-branch forecaster: per-window normalization, trend/seasonality split,
//! patch tokens, stacked joint-axis blocks and a flatten head per branch,
//! with the two branch forecasts summed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{instance_normalize, NormStats, WindowBatch};
use crate::decompose::{refine_rows, st_decompose, ResidualMode};
use crate::error::{Error, Result};
use crate::ja::{
    block_forward, mix_seed, offset_count, AttentionMode, BlockOptions, Grid, JaBlock, OffsetMode,
    Sampler, SamplingConfig, SamplingMode,
};
use crate::nn::{Bound, Dense, Linear, ParamStore};
use crate::patch::{patch_count, patch_gather_indices, positional_encoding, repeat_rows};
use crate::tensor::{Tape, Tensor, Var};

fn yes() -> bool {
    true
}

/// Architecture, optimization and ablation switches of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub patch: usize,
    pub stride: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub learning_rate: f64,
    pub per_delta_t: f64,
    pub per_delta_v: f64,
    pub num_rq_self: usize,
    pub num_rq: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub ma_kernel: usize,
    pub batch_size: usize,
    pub attention_mode: AttentionMode,
    pub offset_mode: OffsetMode,
    pub sampler_self: Sampler,
    pub sampler_cross: Sampler,
    pub sampling_mode: SamplingMode,
    pub residual_mode: ResidualMode,
    pub soft_scores: bool,
    pub seed: u64,
    /// Off only for the self-axis-only comparison; never read from files.
    #[serde(skip, default = "yes")]
    pub cross_pool: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            patch: 8,
            stride: 4,
            model_dim: 128,
            ffn_dim: 1024,
            learning_rate: 1e-4,
            per_delta_t: 0.2,
            per_delta_v: 0.2,
            num_rq_self: 40,
            num_rq: 20,
            lookback: 96,
            horizon: 96,
            ma_kernel: 25,
            batch_size: 32,
            attention_mode: AttentionMode::Ja,
            offset_mode: OffsetMode::GuidelinesWithSampling,
            sampler_self: Sampler::Dtv,
            sampler_cross: Sampler::Dtv,
            sampling_mode: SamplingMode::Separate,
            residual_mode: ResidualMode::Both,
            soft_scores: false,
            seed: 2024,
            cross_pool: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lookback == 0 || self.horizon == 0 {
            return bad("lookback and horizon must be positive".into());
        }
        patch_count(self.lookback, self.patch, self.stride)?;
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(2) {
            return bad(format!("model_dim must be even and positive, got {}", self.model_dim));
        }
        if self.num_blocks == 0 || self.ffn_dim == 0 || self.batch_size == 0 {
            return bad("num_blocks, ffn_dim and batch_size must be positive".into());
        }
        if self.num_rq_self == 0 || self.num_rq == 0 {
            return bad("num_rq_self and num_rq must be at least 1".into());
        }
        for (name, p) in [("per_delta_t", self.per_delta_t), ("per_delta_v", self.per_delta_v)] {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {p}"));
            }
        }
        if self.ma_kernel == 0 || self.ma_kernel.is_multiple_of(2) || self.ma_kernel > 2 * self.lookback - 1 {
            return bad(format!(
                "ma_kernel must be odd and at most 2 * lookback - 1, got {}",
                self.ma_kernel
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        patch_count(self.lookback, self.patch, self.stride).unwrap_or(0)
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            offset_mode: self.offset_mode,
            sampling_mode: self.sampling_mode,
            sampler_self: self.sampler_self,
            sampler_cross: self.sampler_cross,
            k_self: self.num_rq_self,
            k_cross: self.num_rq,
            cross_pool: self.cross_pool,
        }
    }
}

/// Parameters of one branch (trend or seasonality).
#[derive(Clone, Debug)]
pub struct Branch {
    pub refine: Linear,
    pub embed: Linear,
    pub blocks: Vec<JaBlock>,
    pub head: Linear,
}

impl Branch {
    fn init(store: &mut ParamStore, name: &str, cfg: &ModelConfig, variates: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = cfg.num_patches();
        let d = cfg.model_dim;
        let refine = Linear::init(store, &format!("{name}.refine"), cfg.lookback, cfg.lookback, rng);
        let embed = Linear::init(store, &format!("{name}.embed"), cfg.patch, d, rng);
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                JaBlock::init(
                    store,
                    &format!("{name}.block{i}"),
                    d,
                    cfg.ffn_dim,
                    offset_count(cfg.per_delta_t, n),
                    offset_count(cfg.per_delta_v, variates),
                    rng,
                )
            })
            .collect();
        let head = Linear::init(store, &format!("{name}.head"), n * d, cfg.horizon, rng);
        Self {
            refine,
            embed,
            blocks,
            head,
        }
    }
}

/// Which branch a computation belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Trend,
    Seasonality,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Trend => "trend",
            BranchKind::Seasonality => "seasonality",
        }
    }
}

/// A model instance: configuration, variate count and parameters.
#[derive(Clone, Debug)]
pub struct TiVaT {
    pub config: ModelConfig,
    pub num_variates: usize,
    pub store: ParamStore,
    pub trend: Branch,
    pub season: Branch,
    pos_encoding: Tensor,
}

/// Normalized, decomposed inputs laid out as `(B*V) x L_H` rows.
pub struct Prepared {
    pub trend_rows: Tensor,
    pub season_rows: Tensor,
    pub stats: Vec<NormStats>,
    pub batch: usize,
}

impl TiVaT {
    pub fn new(config: ModelConfig, num_variates: usize) -> Result<Self> {
        config.validate()?;
        if num_variates == 0 {
            return Err(Error::Config("at least one variate is required".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let trend = Branch::init(&mut store, "trend", &config, num_variates, &mut rng);
        let season = Branch::init(&mut store, "season", &config, num_variates, &mut rng);
        let pos_encoding = positional_encoding(config.num_patches(), config.model_dim)?;
        Ok(Self {
            config,
            num_variates,
            store,
            trend,
            season,
            pos_encoding,
        })
    }

    pub fn branch(&self, kind: BranchKind) -> &Branch {
        match kind {
            BranchKind::Trend => &self.trend,
            BranchKind::Seasonality => &self.season,
        }
    }

    pub fn grid(&self, batch: usize) -> Grid {
        Grid {
            batch,
            patches: self.config.num_patches(),
            variates: self.num_variates,
            dim: self.config.model_dim,
        }
    }

    pub(crate) fn block_options(&self, step_seed: u64, kind: BranchKind, block: usize) -> BlockOptions {
        BlockOptions {
            attention: self.config.attention_mode,
            sampling: self.config.sampling(),
            soft_scores: self.config.soft_scores,
            seed: mix_seed(mix_seed(step_seed, kind as u64), block as u64),
        }
    }

    /// Normalizes each window, decomposes it and transposes to one row per
    /// (sample, variate).
    pub fn prepare(&self, inputs: &[f64], batch: usize) -> Result<Prepared> {
        let (lh, v) = (self.config.lookback, self.num_variates);
        if inputs.len() != batch * lh * v || batch == 0 {
            return Err(Error::Dimension {
                op: "forward",
                lhs: vec![inputs.len()],
                rhs: vec![batch, lh, v],
            });
        }
        let mut trend = vec![0.0; batch * v * lh];
        let mut season = vec![0.0; batch * v * lh];
        let mut stats = Vec::with_capacity(batch);
        for b in 0..batch {
            let (normed, st) = instance_normalize(&inputs[b * lh * v..(b + 1) * lh * v], v);
            let pair = st_decompose(&Tensor::new([lh, v], normed)?, self.config.ma_kernel)?;
            for t in 0..lh {
                for c in 0..v {
                    let dst = (b * v + c) * lh + t;
                    trend[dst] = pair.trend.data()[t * v + c];
                    season[dst] = pair.seasonality.data()[t * v + c];
                }
            }
            stats.push(st);
        }
        Ok(Prepared {
            trend_rows: Tensor::new([batch * v, lh], trend)?,
            season_rows: Tensor::new([batch * v, lh], season)?,
            stats,
            batch,
        })
    }

    /// Token grid after embedding, `(B*L_N*V) x D`.
    pub fn embed_tokens(&self, tape: &mut Tape, params: &Bound, kind: BranchKind, rows: Var, batch: usize) -> Result<Var> {
        let cfg = &self.config;
        let br = self.branch(kind);
        let residual = match kind {
            BranchKind::Trend => cfg.residual_mode.trend(),
            BranchKind::Seasonality => cfg.residual_mode.season(),
        };
        let refined = refine_rows(tape, rows, params.var(br.refine.weight), params.var(br.refine.bias), residual)?;
        let idx = patch_gather_indices(batch, self.num_variates, cfg.lookback, cfg.patch, cfg.stride)?;
        let flat = tape.reshape(refined, [batch * self.num_variates * cfg.lookback])?;
        let patches = tape.gather(flat, &idx)?;
        let grid = self.grid(batch);
        let patches = tape.reshape(patches, [grid.rows(), cfg.patch])?;
        let z = br.embed.forward(tape, params, patches)?;
        let pe = tape.constant(repeat_rows(&self.pos_encoding, batch, self.num_variates)?);
        tape.add(z, pe)
    }

    /// Runs the stacked blocks of one branch.
    pub fn encode(&self, tape: &mut Tape, params: &Bound, kind: BranchKind, mut z: Var, batch: usize, step_seed: u64) -> Result<Var> {
        let grid = self.grid(batch);
        for (i, block) in self.branch(kind).blocks.iter().enumerate() {
            let opts = self.block_options(step_seed, kind, i);
            z = block_forward(tape, &self.store, params, block, z, grid, &opts)?;
        }
        Ok(z)
    }

    /// Flatten each variate's tokens and map them to the horizon:
    /// `(B*L_N*V) x D` in, `(B*V) x L_F` out.
    pub fn head(&self, tape: &mut Tape, params: &Bound, kind: BranchKind, z: Var, batch: usize) -> Result<Var> {
        let g = self.grid(batch);
        let z = tape.reshape(z, [batch, g.patches, g.variates, g.dim])?;
        let z = tape.permute(z, &[0, 2, 1, 3])?;
        let z = tape.reshape(z, [batch * g.variates, g.patches * g.dim])?;
        self.branch(kind).head.forward(tape, params, z)
    }

    /// One branch end to end, normalized scale, `(B*V) x L_F`.
    pub fn branch_forward(&self, tape: &mut Tape, params: &Bound, kind: BranchKind, prep: &Prepared, step_seed: u64) -> Result<Var> {
        let rows = match kind {
            BranchKind::Trend => &prep.trend_rows,
            BranchKind::Seasonality => &prep.season_rows,
        };
        let rows = tape.constant(rows.clone());
        let z = self.embed_tokens(tape, params, kind, rows, prep.batch)?;
        let z = self.encode(tape, params, kind, z, prep.batch, step_seed)?;
        self.head(tape, params, kind, z, prep.batch)
    }

    /// Sum of both branches, denormalized, shaped `B x L_F x V`.
    pub fn forward_tape(&self, tape: &mut Tape, params: &Bound, inputs: &[f64], batch: usize, step_seed: u64) -> Result<Var> {
        let prep = self.prepare(inputs, batch)?;
        let t = self.branch_forward(tape, params, BranchKind::Trend, &prep, step_seed)?;
        let s = self.branch_forward(tape, params, BranchKind::Seasonality, &prep, step_seed)?;
        let y = tape.add(t, s)?;
        self.denormalize(tape, y, &prep.stats)
    }

    /// `(B*V) x L_F` normalized rows to `B x L_F x V` on the data scale.
    pub fn denormalize(&self, tape: &mut Tape, y: Var, stats: &[NormStats]) -> Result<Var> {
        let (b, v, lf) = (stats.len(), self.num_variates, self.config.horizon);
        let y = tape.reshape(y, [b, v, lf])?;
        let y = tape.permute(y, &[0, 2, 1])?;
        let mut std = Vec::with_capacity(b * lf * v);
        let mut mean = Vec::with_capacity(b * lf * v);
        for st in stats {
            for _ in 0..lf {
                std.extend_from_slice(&st.std);
                mean.extend_from_slice(&st.mean);
            }
        }
        let std = tape.constant(Tensor::new([b, lf, v], std)?);
        let mean = tape.constant(Tensor::new([b, lf, v], mean)?);
        let y = tape.mul(y, std)?;
        tape.add(y, mean)
    }

    /// Predictions for `B x L_H x V` row-major inputs, `B x L_F x V`.
    pub fn predict(&self, inputs: &[f64], batch: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.store.bind_frozen(&mut tape);
        let y = self.forward_tape(&mut tape, &params, inputs, batch, self.config.seed)?;
        Ok(tape.value(y).clone())
    }

    pub fn predict_batch(&self, batch: &WindowBatch) -> Result<Tensor> {
        self.predict(&batch.inputs, batch.size)
    }

    /// Predictions of a single branch on the normalized scale, `B x L_F x V`.
    pub fn branch_predict(&self, kind: BranchKind, inputs: &[f64], batch: usize) -> Result<Tensor> {
        let prep = self.prepare(inputs, batch)?;
        let mut tape = Tape::new();
        let params = self.store.bind_frozen(&mut tape);
        let y = self.branch_forward(&mut tape, &params, kind, &prep, self.config.seed)?;
        let y = tape.reshape(y, [batch, self.num_variates, self.config.horizon])?;
        let y = tape.permute(y, &[0, 2, 1])?;
        Ok(tape.value(y).clone())
    }

    /// Mean squared error of a batch on the data scale, recorded on `tape`.
    pub fn loss(&self, tape: &mut Tape, params: &Bound, batch: &WindowBatch, step_seed: u64) -> Result<Var> {
        let pred = self.forward_tape(tape, params, &batch.inputs, batch.size, step_seed)?;
        let target = tape.constant(Tensor::new(
            [batch.size, batch.horizon, batch.num_variates],
            batch.targets.clone(),
        )?);
        loss_mse(tape, pred, target)
    }
}

/// Mean of squared differences over every element.
pub fn loss_mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// Flatten-projector on a single `L_N x V x D` grid, returning `L_F x V`.
pub fn project(tokens: &Tensor, head: &Dense) -> Result<Tensor> {
    let &[n, v, d] = tokens.shape() else {
        return Err(Error::Shape {
            shape: tokens.shape().to_vec(),
            reason: "expected L_N x V x D tokens".into(),
        });
    };
    if head.weight.shape()[0] != n * d {
        return Err(Error::Dimension {
            op: "project",
            lhs: vec![n * d],
            rhs: head.weight.shape().to_vec(),
        });
    }
    let flat = tokens.permute(&[1, 0, 2])?;
    let lf = head.bias.len();
    let mut out = vec![0.0; lf * v];
    for c in 0..v {
        let y = head.apply_row(&flat.data()[c * n * d..(c + 1) * n * d]);
        for (t, val) in y.into_iter().enumerate() {
            out[t * v + c] = val;
        }
    }
    Tensor::new([lf, v], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_blocks: 1,
            patch: 4,
            stride: 2,
            model_dim: 4,
            ffn_dim: 8,
            lookback: 8,
            horizon: 3,
            ma_kernel: 3,
            batch_size: 2,
            num_rq_self: 3,
            num_rq: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_shape() {
        let m = TiVaT::new(tiny(), 2).unwrap();
        let x: Vec<f64> = (0..2 * 8 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = m.predict(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert!(y.is_finite());
    }

    #[test]
    fn zero_heads_give_lookback_mean() {
        let mut m = TiVaT::new(tiny(), 2).unwrap();
        for id in [m.trend.head.weight, m.trend.head.bias, m.season.head.weight, m.season.head.bias] {
            m.store.get_mut(id).data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let x: Vec<f64> = (0..8 * 2).map(|i| i as f64 + if i % 2 == 0 { 0.0 } else { 10.0 }).collect();
        let y = m.predict(&x, 1).unwrap();
        let mean0 = (0..8).map(|t| x[t * 2]).sum::<f64>() / 8.0;
        let mean1 = (0..8).map(|t| x[t * 2 + 1]).sum::<f64>() / 8.0;
        for t in 0..3 {
            assert!((y.get(&[0, t, 0]) - mean0).abs() < 1e-12);
            assert!((y.get(&[0, t, 1]) - mean1).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_hand_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![1.0, 3.0]));
        let t = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let l = loss_mse(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(l).data(), &[2.5]);
    }

    #[test]
    fn project_scalar_identity() {
        let tokens = Tensor::new([1, 1, 1], vec![0.75]).unwrap();
        let head = Dense {
            weight: Tensor::new([1, 1], vec![1.0]).unwrap(),
            bias: Tensor::zeros([1]),
        };
        assert_eq!(project(&tokens, &head).unwrap().data(), &[0.75]);
        assert!(project(&tokens, &Dense::zeros(1, 4)).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.model_dim = 5;
        assert!(TiVaT::new(c, 2).is_err());
        let mut c = tiny();
        c.patch = 9;
        assert!(TiVaT::new(c, 2).is_err());
        let mut c = tiny();
        c.per_delta_t = 0.0;
        assert!(c.validate().is_err());
    }
}
