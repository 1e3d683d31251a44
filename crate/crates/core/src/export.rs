//! Data behind the 2D-embedding scatter and the guideline mask plots: what
//! the first block of each branch sees for one input window.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ja::{mix_seed, query_keys, rows_to_2d, GridPoint};
use crate::model::{BranchKind, TiVaT};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub grid: [usize; 2],
    pub xy: [f64; 2],
    pub cosine_to_ref: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidelineExport {
    pub reference: [usize; 2],
    pub cross_axis: Vec<[usize; 2]>,
    pub self_axis: Vec<[usize; 2]>,
    pub selected: Vec<[usize; 2]>,
}

/// Normalized block input, 2D projection and key choice of the reference.
struct BlockView {
    features: Tensor,
    xy: Vec<[f64; 2]>,
    guide: GuidelineExport,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn view(model: &TiVaT, kind: BranchKind, window: &[f64], reference: GridPoint) -> Result<BlockView> {
    let grid = model.grid(1);
    if reference.patch >= grid.patches || reference.variate >= grid.variates {
        return Err(Error::Config(format!(
            "reference ({}, {}) lies outside the {} x {} token grid",
            reference.patch, reference.variate, grid.patches, grid.variates
        )));
    }
    let prep = model.prepare(window, 1)?;
    let mut tape = Tape::new();
    let params = model.store.bind_frozen(&mut tape);
    let rows = match kind {
        BranchKind::Trend => &prep.trend_rows,
        BranchKind::Seasonality => &prep.season_rows,
    };
    let rows = tape.constant(rows.clone());
    let z = model.embed_tokens(&mut tape, &params, kind, rows, 1)?;
    let block = &model.branch(kind).blocks[0];
    let h = block.norm_attn.forward(&mut tape, &params, z)?;
    let features = tape.value(h).clone();
    let xy = rows_to_2d(&block.proj_2d.apply_rows(&model.store, features.data()));
    let id = reference.flat(grid.variates);
    let raw_t = block.offset_t.apply_rows(&model.store, features.row(id));
    let raw_v = block.offset_v.apply_rows(&model.store, features.row(id));
    let opts = model.block_options(model.config.seed, kind, 0);
    let keys = query_keys(reference, &raw_t, &raw_v, &xy, grid, &opts.sampling, mix_seed(opts.seed, id as u64));
    let pts = |ids: &[usize]| -> Vec<[usize; 2]> {
        ids.iter()
            .map(|&t| {
                let g = GridPoint::from_flat(t, grid.variates);
                [g.patch, g.variate]
            })
            .collect()
    };
    Ok(BlockView {
        guide: GuidelineExport {
            reference: [reference.patch, reference.variate],
            cross_axis: pts(&keys.cross_pool),
            self_axis: pts(&keys.self_pool),
            selected: pts(&keys.selected),
        },
        features,
        xy,
    })
}

const BRANCHES: [BranchKind; 2] = [BranchKind::Trend, BranchKind::Seasonality];

/// One row per token, keyed by branch name.
pub fn export_embeddings(
    model: &TiVaT,
    window: &[f64],
    reference: GridPoint,
) -> Result<BTreeMap<String, Vec<EmbeddingRow>>> {
    let v = model.num_variates;
    let mut out = BTreeMap::new();
    for kind in BRANCHES {
        let bv = view(model, kind, window, reference)?;
        let r = bv.features.row(reference.flat(v)).to_vec();
        let rows = (0..bv.xy.len())
            .map(|t| {
                let g = GridPoint::from_flat(t, v);
                EmbeddingRow {
                    grid: [g.patch, g.variate],
                    xy: bv.xy[t],
                    cosine_to_ref: cosine(bv.features.row(t), &r),
                }
            })
            .collect();
        out.insert(kind.name().to_string(), rows);
    }
    Ok(out)
}

pub fn export_guidelines(
    model: &TiVaT,
    window: &[f64],
    reference: GridPoint,
) -> Result<BTreeMap<String, GuidelineExport>> {
    let mut out = BTreeMap::new();
    for kind in BRANCHES {
        out.insert(kind.name().to_string(), view(model, kind, window, reference)?.guide);
    }
    Ok(out)
}
