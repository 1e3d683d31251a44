//! Joint-axis attention: offset points, cross-axis and self-axis candidate
//! pools, distance-aware top-K sampling in a learned 2D space, and the
//! pre-norm encoder block built around the resulting sparse cross-attention.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Dense, LayerNorm, Linear, ParamStore};
use crate::par;
use crate::tensor::{RaggedIndex, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Joint-axis attention over sampled candidates.
    Ja,
    /// Dense self-attention over every token of the sample.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    /// Keys are the offset points themselves.
    Points,
    /// Keys are every candidate in both pools.
    GuidelinesNoSampling,
    /// Keys are drawn from both pools according to the sampling mode.
    GuidelinesWithSampling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Dtv,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Top-K from each pool independently.
    Separate,
    /// Top-(K_self + K_cross) over the concatenated pools.
    Common,
    /// Every candidate of both pools.
    None,
}

/// Position on the `L_N x V` token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub patch: usize,
    pub variate: usize,
}

impl GridPoint {
    pub fn new(patch: usize, variate: usize) -> Self {
        Self { patch, variate }
    }

    /// Row of this point in a `(L_N, V)` row-major token layout.
    pub fn flat(self, variates: usize) -> usize {
        self.patch * variates + self.variate
    }

    pub fn from_flat(id: usize, variates: usize) -> Self {
        Self::new(id / variates, id % variates)
    }
}

/// Everything that decides which keys a query attends to.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub offset_mode: OffsetMode,
    pub sampling_mode: SamplingMode,
    pub sampler_self: Sampler,
    pub sampler_cross: Sampler,
    pub k_self: usize,
    pub k_cross: usize,
    /// When false the cross-axis pool is always empty.
    pub cross_pool: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            offset_mode: OffsetMode::GuidelinesWithSampling,
            sampling_mode: SamplingMode::Separate,
            sampler_self: Sampler::Dtv,
            sampler_cross: Sampler::Dtv,
            k_self: 40,
            k_cross: 20,
            cross_pool: true,
        }
    }
}

/// `max(1, round(per * axis_len))`, capped at the axis length.
pub fn offset_count(per: f64, axis_len: usize) -> usize {
    ((per * axis_len as f64).round() as usize).clamp(1, axis_len.max(1))
}

pub struct OffsetParams {
    pub temporal: Dense,
    pub variate: Dense,
}

/// Raw (unbounded) temporal and variate offsets for one query feature.
pub fn extract_offsets(q: &[f64], params: &OffsetParams) -> (Vec<f64>, Vec<f64>) {
    (params.temporal.apply_row(q), params.variate.apply_row(q))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps a raw offset into `[0, axis_len - 1]` and rounds to the nearest index.
pub fn normalize_discretize(raw: f64, axis_len: usize) -> usize {
    let top = axis_len.saturating_sub(1);
    ((sigmoid(raw) * top as f64).round() as usize).min(top)
}

/// Full variate rows at each temporal offset, then full temporal columns at
/// each variate offset; duplicates dropped, first occurrence kept.
pub fn build_cross_axis_pool(
    temporal: &[usize],
    variate: &[usize],
    patches: usize,
    variates: usize,
) -> Vec<GridPoint> {
    let mut seen = vec![false; patches * variates];
    let mut out = Vec::new();
    let mut put = |g: GridPoint| {
        let f = g.flat(variates);
        if !seen[f] {
            seen[f] = true;
            out.push(g);
        }
    };
    for &p in temporal {
        (0..variates).for_each(|v| put(GridPoint::new(p, v)));
    }
    for &v in variate {
        (0..patches).for_each(|p| put(GridPoint::new(p, v)));
    }
    out
}

/// The reference's own column followed by the rest of its row.
pub fn build_self_axis_pool(reference: GridPoint, patches: usize, variates: usize) -> Vec<GridPoint> {
    let mut out: Vec<GridPoint> = (0..patches)
        .map(|p| GridPoint::new(p, reference.variate))
        .collect();
    out.extend(
        (0..variates)
            .filter(|&v| v != reference.variate)
            .map(|v| GridPoint::new(reference.patch, v)),
    );
    out
}

/// Offset coordinates used directly as candidates: each temporal offset
/// paired with the reference variate, each variate offset with the
/// reference patch.
pub fn offset_points(reference: GridPoint, temporal: &[usize], variate: &[usize]) -> Vec<GridPoint> {
    let mut out: Vec<GridPoint> = Vec::new();
    let cands = temporal
        .iter()
        .map(|&p| GridPoint::new(p, reference.variate))
        .chain(variate.iter().map(|&v| GridPoint::new(reference.patch, v)));
    for g in cands {
        if !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt()
}

/// Indices of the `k` pool points nearest to `query` (Euclidean), nearest
/// first, ties going to the lower index. `k` is clamped to the pool size.
pub fn dtv_select(query: [f64; 2], pool: &[[f64; 2]], k: usize) -> Vec<usize> {
    let k = k.min(pool.len());
    if k == 0 {
        return Vec::new();
    }
    let d: Vec<f64> = pool.iter().map(|&p| dist2(query, p)).collect();
    let cmp = |a: &usize, b: &usize| d[*a].total_cmp(&d[*b]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Uniform draw of `min(k, len)` distinct indices.
pub fn random_select(len: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    index::sample(rng, len, k.min(len)).into_vec()
}

fn select(sampler: Sampler, query: [f64; 2], pool: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match sampler {
        Sampler::Dtv => dtv_select(query, pool, k),
        Sampler::Random => random_select(pool.len(), k, rng),
    }
}

/// Chosen positions within the cross-axis and self-axis pools.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PoolSelection {
    pub cross: Vec<usize>,
    pub self_axis: Vec<usize>,
}

/// Applies the sampling mode to two pools given their 2D projections.
/// `Common` ranks the concatenation (cross first) with `sampler_cross`.
pub fn sample_pools(
    query: [f64; 2],
    cross: &[[f64; 2]],
    self_axis: &[[f64; 2]],
    cfg: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> PoolSelection {
    match cfg.sampling_mode {
        SamplingMode::None => PoolSelection {
            cross: (0..cross.len()).collect(),
            self_axis: (0..self_axis.len()).collect(),
        },
        SamplingMode::Separate => PoolSelection {
            cross: select(cfg.sampler_cross, query, cross, cfg.k_cross, rng),
            self_axis: select(cfg.sampler_self, query, self_axis, cfg.k_self, rng),
        },
        SamplingMode::Common => {
            let union: Vec<[f64; 2]> = cross.iter().chain(self_axis).copied().collect();
            let picked = select(cfg.sampler_cross, query, &union, cfg.k_self + cfg.k_cross, rng);
            let mut out = PoolSelection::default();
            for i in picked {
                if i < cross.len() {
                    out.cross.push(i);
                } else {
                    out.self_axis.push(i - cross.len());
                }
            }
            out
        }
    }
}

/// Projects `q` and each row of `pool_features` with `proj_2d` and gathers
/// the `k` nearest rows.
pub fn dtv_sample(
    q: &[f64],
    pool_features: &Tensor,
    proj_2d: &Dense,
    k: usize,
) -> Result<(Vec<usize>, Tensor)> {
    let m = pool_features.shape()[0];
    if pool_features.is_empty() || m == 0 {
        return Err(Error::Data("sampling from an empty pool".into()));
    }
    let to2 = |r: &[f64]| {
        let v = proj_2d.apply_row(r);
        [v[0], v[1]]
    };
    let pool2: Vec<[f64; 2]> = (0..m).map(|i| to2(pool_features.row(i))).collect();
    let idx = dtv_select(to2(q), &pool2, k);
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| pool_features.row(i).to_vec()).collect();
    Ok((idx, Tensor::from_rows(&rows)?))
}

/// The query/key/value projections of one attention layer.
pub struct AttentionParams {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
}

/// `softmax(Q K^T / sqrt(D)) V` for a single query against `N x D` keys,
/// composed from generic tape ops.
pub fn cross_attend(q: &[f64], keys_values: &Tensor, params: &AttentionParams) -> Result<Vec<f64>> {
    if keys_values.shape()[0] == 0 {
        return Err(Error::Data("cross-attention needs at least one key".into()));
    }
    let d = q.len();
    let mut tape = Tape::new();
    let qv = tape.constant(Tensor::new([1, d], q.to_vec())?);
    let kv = tape.constant(keys_values.clone());
    let (wq, bq) = params.query.constants(&mut tape);
    let (wk, bk) = params.key.constants(&mut tape);
    let (wv, bv) = params.value.constants(&mut tape);
    let qp = tape.linear(qv, wq, Some(bq))?;
    let kp = tape.linear(kv, wk, Some(bk))?;
    let vp = tape.linear(kv, wv, Some(bv))?;
    let kt = tape.transpose(kp)?;
    let scores = tape.matmul(qp, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax(scores, 1)?;
    let out = tape.matmul(weights, vp)?;
    Ok(tape.value(out).data().to_vec())
}

/// Layout of a batch of token grids stored as `(B * L_N * V) x D` rows,
/// ordered by `(b, p, v)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub batch: usize,
    pub patches: usize,
    pub variates: usize,
    pub dim: usize,
}

impl Grid {
    pub fn tokens_per_sample(&self) -> usize {
        self.patches * self.variates
    }

    pub fn rows(&self) -> usize {
        self.batch * self.tokens_per_sample()
    }
}

/// Parameter handles of one joint-axis attention block.
#[derive(Clone, Debug)]
pub struct JaBlock {
    pub norm_attn: LayerNorm,
    pub offset_t: Linear,
    pub offset_v: Linear,
    pub proj_2d: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl JaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ffn_dim: usize,
        n_offset_t: usize,
        n_offset_v: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        Self {
            norm_attn: LayerNorm::init(store, &n("norm_attn"), dim),
            offset_t: Linear::init(store, &n("offset_t"), dim, n_offset_t, rng),
            offset_v: Linear::init(store, &n("offset_v"), dim, n_offset_v, rng),
            proj_2d: Linear::init(store, &n("proj_2d"), dim, 2, rng),
            query: Linear::init(store, &n("query"), dim, dim, rng),
            key: Linear::init(store, &n("key"), dim, dim, rng),
            value: Linear::init(store, &n("value"), dim, dim, rng),
            norm_ffn: LayerNorm::init(store, &n("norm_ffn"), dim),
            ffn_in: Linear::init(store, &n("ffn_in"), dim, ffn_dim, rng),
            ffn_out: Linear::init(store, &n("ffn_out"), ffn_dim, dim, rng),
        }
    }
}

/// Block-level switches shared by every query.
#[derive(Clone, Debug)]
pub struct BlockOptions {
    pub attention: AttentionMode,
    pub sampling: SamplingConfig,
    pub soft_scores: bool,
    /// Seeds the random sampler; each query derives its own stream from it.
    pub seed: u64,
}

/// Pools and keys of one query, as token ids within its sample.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QueryKeys {
    pub cross_pool: Vec<usize>,
    pub self_pool: Vec<usize>,
    /// Selected cross-pool tokens followed by selected self-pool tokens.
    pub selected: Vec<usize>,
}

/// Builds pools and picks keys for the query at `reference`.
/// `pos2d` holds the 2D projection of every token of the sample.
pub fn query_keys(
    reference: GridPoint,
    raw_t: &[f64],
    raw_v: &[f64],
    pos2d: &[[f64; 2]],
    grid: Grid,
    cfg: &SamplingConfig,
    seed: u64,
) -> QueryKeys {
    let (np, nv) = (grid.patches, grid.variates);
    let dt: Vec<usize> = raw_t.iter().map(|&r| normalize_discretize(r, np)).collect();
    let dv: Vec<usize> = raw_v.iter().map(|&r| normalize_discretize(r, nv)).collect();
    let flat = |pts: Vec<GridPoint>| -> Vec<usize> { pts.into_iter().map(|g| g.flat(nv)).collect() };
    let ref_id = reference.flat(nv);

    if cfg.offset_mode == OffsetMode::Points {
        let pts = if cfg.cross_pool {
            flat(offset_points(reference, &dt, &dv))
        } else {
            Vec::new()
        };
        let selected = if pts.is_empty() { vec![ref_id] } else { pts.clone() };
        return QueryKeys {
            cross_pool: pts,
            self_pool: Vec::new(),
            selected,
        };
    }

    let cross_pool = if cfg.cross_pool {
        flat(build_cross_axis_pool(&dt, &dv, np, nv))
    } else {
        Vec::new()
    };
    let self_pool = flat(build_self_axis_pool(reference, np, nv));
    let effective = if cfg.offset_mode == OffsetMode::GuidelinesNoSampling {
        SamplingConfig {
            sampling_mode: SamplingMode::None,
            ..cfg.clone()
        }
    } else {
        cfg.clone()
    };
    let q2 = pos2d[ref_id];
    let c2: Vec<[f64; 2]> = cross_pool.iter().map(|&t| pos2d[t]).collect();
    let s2: Vec<[f64; 2]> = self_pool.iter().map(|&t| pos2d[t]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = sample_pools(q2, &c2, &s2, &effective, &mut rng);
    let mut selected: Vec<usize> = pick.cross.iter().map(|&i| cross_pool[i]).collect();
    selected.extend(pick.self_axis.iter().map(|&i| self_pool[i]));
    QueryKeys {
        cross_pool,
        self_pool,
        selected,
    }
}

/// SplitMix64 finalizer; derives independent seeds from a base seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn rows_to_2d(rows: &[f64]) -> Vec<[f64; 2]> {
    rows.chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Key sets for every query of the batch, as global row indices.
pub fn key_sets(
    store: &ParamStore,
    block: &JaBlock,
    normed: &Tensor,
    pos2d: &[f64],
    grid: Grid,
    opts: &BlockOptions,
) -> Vec<Vec<usize>> {
    let n = grid.tokens_per_sample();
    if opts.attention == AttentionMode::Full {
        return (0..grid.rows())
            .map(|g| {
                let base = (g / n) * n;
                (base..base + n).collect()
            })
            .collect();
    }
    let raw_t = block.offset_t.apply_rows(store, normed.data());
    let raw_v = block.offset_v.apply_rows(store, normed.data());
    let (nt, nv) = (block.offset_t.outputs(store), block.offset_v.outputs(store));
    let pos = rows_to_2d(pos2d);
    par::map_range(grid.rows(), |g| {
        let b = g / n;
        let base = b * n;
        let keys = query_keys(
            GridPoint::from_flat(g - base, grid.variates),
            &raw_t[g * nt..(g + 1) * nt],
            &raw_v[g * nv..(g + 1) * nv],
            &pos[base..base + n],
            grid,
            &opts.sampling,
            mix_seed(opts.seed, g as u64),
        );
        keys.selected.into_iter().map(|t| base + t).collect()
    })
}

/// `Z1 = Z + Attn(LN(Z))`, `Z2 = Z1 + FFN(LN(Z1))` over `(B*L_N*V) x D` rows.
pub fn block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &Bound,
    block: &JaBlock,
    z: Var,
    grid: Grid,
    opts: &BlockOptions,
) -> Result<Var> {
    let h = block.norm_attn.forward(tape, params, z)?;
    let soft = opts.soft_scores && opts.attention == AttentionMode::Ja;
    let (pos_var, pos2d) = if soft {
        let p = block.proj_2d.forward(tape, params, h)?;
        (Some(p), tape.value(p).data().to_vec())
    } else if opts.attention == AttentionMode::Ja {
        (None, block.proj_2d.apply_rows(store, tape.value(h).data()))
    } else {
        (None, Vec::new())
    };
    let sets = key_sets(store, block, tape.value(h), &pos2d, grid, opts);
    let q = block.query.forward(tape, params, h)?;
    let k = block.key.forward(tape, params, h)?;
    let v = block.value.forward(tape, params, h)?;
    let att = tape.indexed_attention(q, k, v, RaggedIndex::from_lists(&sets), pos_var)?;
    let z1 = tape.add(z, att)?;
    let h2 = block.norm_ffn.forward(tape, params, z1)?;
    let f = block.ffn_in.forward(tape, params, h2)?;
    let f = tape.gelu(f)?;
    let f = block.ffn_out.forward(tape, params, f)?;
    tape.add(z1, f)
}

/// A single block with its own parameters, for standalone use and testing.
pub struct JaLayer {
    pub store: ParamStore,
    pub block: JaBlock,
    pub opts: BlockOptions,
    pub patches: usize,
    pub variates: usize,
    pub dim: usize,
}

impl JaLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        patches: usize,
        variates: usize,
        dim: usize,
        ffn_dim: usize,
        per_delta_t: f64,
        per_delta_v: f64,
        opts: BlockOptions,
        seed: u64,
    ) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = JaBlock::init(
            &mut store,
            "block",
            dim,
            ffn_dim,
            offset_count(per_delta_t, patches),
            offset_count(per_delta_v, variates),
            &mut rng,
        );
        Self {
            store,
            block,
            opts,
            patches,
            variates,
            dim,
        }
    }

    /// Runs the block on an `L_N x V x D` grid.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let expect = [self.patches, self.variates, self.dim];
        if z.shape() != expect {
            return Err(Error::Dimension {
                op: "ja_block",
                lhs: z.shape().to_vec(),
                rhs: expect.to_vec(),
            });
        }
        let mut tape = Tape::new();
        let params = self.store.bind_frozen(&mut tape);
        let zv = tape.constant(z.reshape([self.patches * self.variates, self.dim])?);
        let out = block_forward(&mut tape, &self.store, &params, &self.block, zv, self.grid(1), &self.opts)?;
        tape.value(out).reshape(expect)
    }

    pub fn grid(&self, batch: usize) -> Grid {
        Grid {
            batch,
            patches: self.patches,
            variates: self.variates,
            dim: self.dim,
        }
    }
}
