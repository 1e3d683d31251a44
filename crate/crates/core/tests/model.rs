mod common;

use common::{random_tensor, rng};
use tivat_core::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
use tivat_core::data::{denormalize, instance_normalize};
use tivat_core::decompose::ResidualMode;
use tivat_core::export::{export_embeddings, export_guidelines};
use tivat_core::ja::{AttentionMode, BlockOptions, GridPoint, JaLayer, OffsetMode, SamplingConfig, SamplingMode};
use tivat_core::model::{project, BranchKind};
use tivat_core::nn::Dense;
use tivat_core::{ModelConfig, Tensor, TiVaT};

fn small() -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        patch: 4,
        stride: 2,
        model_dim: 8,
        ffn_dim: 12,
        per_delta_t: 0.3,
        per_delta_v: 0.5,
        num_rq_self: 3,
        num_rq: 3,
        lookback: 16,
        horizon: 5,
        ma_kernel: 5,
        batch_size: 2,
        ..ModelConfig::default()
    }
}

fn inputs(cfg: &ModelConfig, batch: usize, v: usize, seed: u64) -> Vec<f64> {
    random_tensor(&[batch, cfg.lookback, v], &mut rng(seed)).into_data()
}

#[test]
fn output_shape_over_configurations() {
    for (lookback, patch, stride, v, blocks) in [(16, 4, 2, 3, 1), (12, 12, 1, 1, 2), (20, 3, 3, 5, 1), (8, 1, 1, 2, 1)] {
        for attention in [AttentionMode::Ja, AttentionMode::Full] {
            let cfg = ModelConfig {
                lookback,
                patch,
                stride,
                num_blocks: blocks,
                attention_mode: attention,
                ..small()
            };
            let model = TiVaT::new(cfg.clone(), v).unwrap();
            let y = model.predict(&inputs(&cfg, 3, v, 1), 3).unwrap();
            assert_eq!(y.shape(), &[3, cfg.horizon, v]);
            assert!(y.is_finite());
        }
    }
}

#[test]
fn prediction_is_deterministic_per_sample() {
    let cfg = small();
    let model = TiVaT::new(cfg.clone(), 3).unwrap();
    let x = inputs(&cfg, 2, 3, 4);
    let both = model.predict(&x, 2).unwrap();
    let again = model.predict(&x, 2).unwrap();
    assert_eq!(both.data(), again.data());
    let per = cfg.lookback * 3;
    let first = model.predict(&x[..per], 1).unwrap();
    let n = cfg.horizon * 3;
    for (a, b) in first.data().iter().zip(&both.data()[..n]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn prediction_is_sum_of_branches() {
    for residual in [ResidualMode::None, ResidualMode::Both] {
        let cfg = ModelConfig { residual_mode: residual, ..small() };
        let v = 2;
        let model = TiVaT::new(cfg.clone(), v).unwrap();
        let x = inputs(&cfg, 1, v, 8);
        let full = model.predict(&x, 1).unwrap();
        let t = model.branch_predict(BranchKind::Trend, &x, 1).unwrap();
        let s = model.branch_predict(BranchKind::Seasonality, &x, 1).unwrap();
        let sum: Vec<f64> = t.data().iter().zip(s.data()).map(|(a, b)| a + b).collect();
        let (_, stats) = instance_normalize(&x, v);
        let want = denormalize(&sum, &stats);
        for (a, b) in full.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn denormalization_is_affine_in_the_input() {
    let cfg = small();
    let model = TiVaT::new(cfg.clone(), 2).unwrap();
    let x = inputs(&cfg, 1, 2, 12);
    let y = model.predict(&x, 1).unwrap();
    let scaled: Vec<f64> = x.iter().map(|e| 3.0 * e + 7.0).collect();
    let ys = model.predict(&scaled, 1).unwrap();
    for (a, b) in y.data().iter().zip(ys.data()) {
        assert!((3.0 * a + 7.0 - b).abs() < 1e-8);
    }
}

#[test]
fn projector_keeps_variates_apart() {
    let mut r = rng(2);
    let tokens = random_tensor(&[3, 4, 5], &mut r);
    let head = Dense {
        weight: random_tensor(&[15, 6], &mut r),
        bias: random_tensor(&[6], &mut r),
    };
    let base = project(&tokens, &head).unwrap();
    assert_eq!(base.shape(), &[6, 4]);
    let mut moved = tokens.clone();
    for p in 0..3 {
        for d in 0..5 {
            moved.data_mut()[(p * 4 + 2) * 5 + d] += 1.0;
        }
    }
    let out = project(&moved, &head).unwrap();
    for f in 0..6 {
        for v in 0..4 {
            let same = out.get(&[f, v]) == base.get(&[f, v]);
            assert_eq!(same, v != 2);
        }
    }
}

#[test]
fn block_with_silent_value_and_ffn_is_identity() {
    for attention in [AttentionMode::Ja, AttentionMode::Full] {
        let opts = BlockOptions {
            attention,
            sampling: SamplingConfig::default(),
            soft_scores: false,
            seed: 0,
        };
        let mut layer = JaLayer::new(5, 3, 4, 8, 0.4, 0.5, opts, 3);
        for name in ["block.value.weight", "block.ffn_out.weight"] {
            let id = layer.store.find(name).unwrap();
            layer.store.get_mut(id).data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let z = random_tensor(&[5, 3, 4], &mut rng(5));
        let out = layer.forward(&z).unwrap();
        assert_eq!(out.data(), z.data());
    }
}

#[test]
fn single_token_full_attention() {
    let opts = BlockOptions {
        attention: AttentionMode::Full,
        sampling: SamplingConfig::default(),
        soft_scores: false,
        seed: 0,
    };
    let layer = JaLayer::new(1, 1, 4, 4, 0.2, 0.2, opts, 1);
    let z = random_tensor(&[1, 1, 4], &mut rng(6));
    let out = layer.forward(&z).unwrap();
    assert_eq!(out.shape(), &[1, 1, 4]);
    assert!(out.is_finite());
}

#[test]
fn block_modes_run_on_a_grid() {
    for offset in [OffsetMode::Points, OffsetMode::GuidelinesNoSampling, OffsetMode::GuidelinesWithSampling] {
        for mode in [SamplingMode::None, SamplingMode::Common, SamplingMode::Separate] {
            let opts = BlockOptions {
                attention: AttentionMode::Ja,
                sampling: SamplingConfig {
                    offset_mode: offset,
                    sampling_mode: mode,
                    k_self: 2,
                    k_cross: 3,
                    ..SamplingConfig::default()
                },
                soft_scores: true,
                seed: 9,
            };
            let layer = JaLayer::new(6, 4, 4, 8, 0.3, 0.5, opts, 2);
            let z = random_tensor(&[6, 4, 4], &mut rng(7));
            let a = layer.forward(&z).unwrap();
            let b = layer.forward(&z).unwrap();
            assert_eq!(a.shape(), &[6, 4, 4]);
            assert_eq!(a.data(), b.data());
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small();
    let model = TiVaT::new(cfg.clone(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&model, None, &path).unwrap();
    let (back, data) = load_checkpoint(&path).unwrap();
    assert!(data.is_none());
    assert_eq!(back.config, model.config);
    for (a, b) in model.store.tensors().iter().zip(back.store.tensors()) {
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let x = inputs(&cfg, 2, 3, 3);
    assert_eq!(model.predict(&x, 2).unwrap().data(), back.predict(&x, 2).unwrap().data());

    let mut raw = read_checkpoint(&path).unwrap();
    raw.tensors[0].shape = vec![1];
    assert!(raw.into_model().is_err());
}

#[test]
fn exports_cover_the_grid() {
    let cfg = small();
    let v = 3;
    let model = TiVaT::new(cfg.clone(), v).unwrap();
    let x = inputs(&cfg, 1, v, 10);
    let n = cfg.num_patches();
    let reference = GridPoint::new(2, 1);
    let emb = export_embeddings(&model, &x, reference).unwrap();
    assert_eq!(emb.len(), 2);
    for rows in emb.values() {
        assert_eq!(rows.len(), n * v);
        let r = rows.iter().find(|e| e.grid == [2, 1]).unwrap();
        assert!((r.cosine_to_ref - 1.0).abs() < 1e-12);
        assert!(rows.iter().all(|e| e.cosine_to_ref.abs() <= 1.0 + 1e-12));
    }
    let guide = export_guidelines(&model, &x, reference).unwrap();
    for g in guide.values() {
        assert_eq!(g.reference, [2, 1]);
        assert_eq!(g.self_axis.len(), n + v - 1);
        for k in &g.selected {
            assert!(g.cross_axis.contains(k) || g.self_axis.contains(k));
        }
    }
    assert!(export_guidelines(&model, &x, GridPoint::new(n, 0)).is_err());
}
