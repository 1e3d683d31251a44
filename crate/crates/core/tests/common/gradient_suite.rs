//! Finite-difference checks shared by the gradient and acceptance suites.

use super::{check, random_tensor, rel_err, rng, weighted_sum, STEP, TOL};
use tivat_core::data::LeadLagSpec;
use tivat_core::ja::{AttentionMode, BlockOptions, JaLayer, SamplingConfig, SamplingMode};
use tivat_core::model::{ModelConfig, TiVaT};
use tivat_core::tensor::{RaggedIndex, Tape, Tensor};

fn assert_all(name: &str, errs: &[f64]) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "{name}: input {i} relative error {e:e}");
    }
}

pub fn elementwise_ops() {
    let mut r = rng(1);
    let a = random_tensor(&[3, 4], &mut r);
    let b = random_tensor(&[3, 4], &mut r);
    let row = random_tensor(&[4], &mut r);
    assert_all("add", &check(&[a.clone(), b.clone()], |t, v| {
        let o = t.add(v[0], v[1]).unwrap();
        weighted_sum(t, o)
    }));
    assert_all("sub", &check(&[a.clone(), b.clone()], |t, v| {
        let o = t.sub(v[0], v[1]).unwrap();
        weighted_sum(t, o)
    }));
    assert_all("mul", &check(&[a.clone(), b.clone()], |t, v| {
        let o = t.mul(v[0], v[1]).unwrap();
        weighted_sum(t, o)
    }));
    assert_all("scale", &check(std::slice::from_ref(&a), |t, v| {
        let o = t.scale(v[0], -1.7).unwrap();
        weighted_sum(t, o)
    }));
    assert_all("add_row", &check(&[a.clone(), row], |t, v| {
        let o = t.add_row(v[0], v[1]).unwrap();
        weighted_sum(t, o)
    }));
    assert_all("gelu", &check(std::slice::from_ref(&a), |t, v| {
        let o = t.gelu(v[0]).unwrap();
        weighted_sum(t, o)
    }));
    assert_all("mean_all", &check(std::slice::from_ref(&a), |t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        t.mean_all(sq).unwrap()
    }));
}

pub fn matrix_ops() {
    let mut r = rng(2);
    let a = random_tensor(&[3, 5], &mut r);
    let b = random_tensor(&[5, 2], &mut r);
    let bias = random_tensor(&[2], &mut r);
    assert_all("matmul", &check(&[a.clone(), b.clone()], |t, v| {
        let o = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, o)
    }));
    assert_all("linear", &check(&[a.clone(), b.clone(), bias], |t, v| {
        let o = t.linear(v[0], v[1], Some(v[2])).unwrap();
        weighted_sum(t, o)
    }));
    assert_all("transpose", &check(std::slice::from_ref(&a), |t, v| {
        let o = t.transpose(v[0]).unwrap();
        weighted_sum(t, o)
    }));
    let p = random_tensor(&[4, 3], &mut r);
    let q = random_tensor(&[2, 3], &mut r);
    assert_all("pairwise_distance", &check(&[p, q], |t, v| {
        let o = t.pairwise_distance(v[0], v[1]).unwrap();
        weighted_sum(t, o)
    }));
}

pub fn reductions_and_normalization() {
    let mut r = rng(3);
    let x = random_tensor(&[2, 3, 4], &mut r);
    for axis in 0..3 {
        assert_all("softmax", &check(std::slice::from_ref(&x), |t, v| {
            let o = t.softmax(v[0], axis).unwrap();
            weighted_sum(t, o)
        }));
        assert_all("mean", &check(std::slice::from_ref(&x), |t, v| {
            let o = t.mean(v[0], axis).unwrap();
            weighted_sum(t, o)
        }));
    }
    let x2 = random_tensor(&[5, 4], &mut r);
    let gamma = random_tensor(&[4], &mut r);
    let beta = random_tensor(&[4], &mut r);
    assert_all("layer_norm", &check(&[x2, gamma, beta], |t, v| {
        let o = t.layer_norm(v[0], v[1], v[2]).unwrap();
        weighted_sum(t, o)
    }));
}

pub fn shape_ops() {
    let mut r = rng(4);
    let a = random_tensor(&[2, 3, 4], &mut r);
    let b = random_tensor(&[2, 1, 4], &mut r);
    assert_all("concat", &check(&[a.clone(), b], |t, v| {
        let o = t.concat(&[v[0], v[1]], 1).unwrap();
        weighted_sum(t, o)
    }));
    assert_all("reshape", &check(std::slice::from_ref(&a), |t, v| {
        let o = t.reshape(v[0], [6, 4]).unwrap();
        weighted_sum(t, o)
    }));
    assert_all("permute", &check(std::slice::from_ref(&a), |t, v| {
        let o = t.permute(v[0], &[2, 0, 1]).unwrap();
        weighted_sum(t, o)
    }));
    assert_all("gather", &check(&[a], |t, v| {
        let o = t.gather(v[0], &[1, 0, 1, 1]).unwrap();
        weighted_sum(t, o)
    }));
}

pub fn indexed_attention_hard_and_soft() {
    let mut r = rng(5);
    let q = random_tensor(&[5, 4], &mut r);
    let k = random_tensor(&[5, 4], &mut r);
    let v = random_tensor(&[5, 4], &mut r);
    let pos = random_tensor(&[5, 2], &mut r);
    let sets = vec![vec![0, 2, 4], vec![1], vec![3, 3, 0, 1], vec![0, 1, 2, 3, 4], vec![4, 2]];
    assert_all("attention", &check(&[q.clone(), k.clone(), v.clone()], |t, x| {
        let o = t.indexed_attention(x[0], x[1], x[2], RaggedIndex::from_lists(&sets), None).unwrap();
        weighted_sum(t, o)
    }));
    assert_all("attention+pos", &check(&[q, k, v, pos], |t, x| {
        let o = t
            .indexed_attention(x[0], x[1], x[2], RaggedIndex::from_lists(&sets), Some(x[3]))
            .unwrap();
        weighted_sum(t, o)
    }));
}

fn block_opts(soft: bool) -> BlockOptions {
    BlockOptions {
        attention: AttentionMode::Ja,
        sampling: SamplingConfig {
            k_self: 2,
            k_cross: 2,
            sampling_mode: SamplingMode::Separate,
            ..SamplingConfig::default()
        },
        soft_scores: soft,
        seed: 11,
    }
}

/// Gradient of a weighted sum of one block's output with respect to every
/// parameter of the block and to the input grid, against finite differences.
fn block_check(soft: bool) -> Vec<(String, f64, Vec<f64>)> {
    let layer = JaLayer::new(3, 2, 4, 8, 0.4, 0.5, block_opts(soft), 3);
    let z = random_tensor(&[6, 4], &mut rng(6));
    let grid = layer.grid(1);
    let run = |store: &tivat_core::nn::ParamStore, z: &Tensor, train: bool| {
        let mut tape = Tape::new();
        let params = if train { store.bind(&mut tape) } else { store.bind_frozen(&mut tape) };
        let zv = if train { tape.param(z.clone()) } else { tape.constant(z.clone()) };
        let out = tivat_core::ja::block_forward(&mut tape, store, &params, &layer.block, zv, grid, &layer.opts).unwrap();
        let loss = weighted_sum(&mut tape, out);
        (tape, params, zv, loss)
    };
    let (tape, params, zv, loss) = run(&layer.store, &z, true);
    let grads = tape.backward(loss).unwrap();
    let value = |store: &tivat_core::nn::ParamStore, z: &Tensor| {
        let (tape, _, _, loss) = run(store, z, false);
        tape.value(loss).data()[0]
    };
    let mut out = Vec::new();
    let mut store = layer.store.clone();
    for (i, id) in layer.store.ids().enumerate() {
        let analytic = grads.wrt(&tape, params.vars()[i]).into_data();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + STEP;
            let up = value(&store, &z);
            store.get_mut(id).data_mut()[j] = orig - STEP;
            let down = value(&store, &z);
            store.get_mut(id).data_mut()[j] = orig;
            *n = (up - down) / (2.0 * STEP);
        }
        out.push((layer.store.name(id).to_string(), rel_err(&analytic, &numeric), analytic));
    }
    let analytic = grads.wrt(&tape, zv).into_data();
    let mut numeric = vec![0.0; z.len()];
    let mut zw = z.clone();
    for (j, n) in numeric.iter_mut().enumerate() {
        let orig = z.data()[j];
        zw.data_mut()[j] = orig + STEP;
        let up = value(&layer.store, &zw);
        zw.data_mut()[j] = orig - STEP;
        let down = value(&layer.store, &zw);
        zw.data_mut()[j] = orig;
        *n = (up - down) / (2.0 * STEP);
    }
    out.push(("input".into(), rel_err(&analytic, &numeric), analytic));
    out
}

pub fn ja_block_matches_finite_differences() {
    for (name, err, analytic) in block_check(false) {
        assert!(err < TOL, "{name}: relative error {err:e}");
        if name.contains("offset") || name.contains("proj_2d") {
            assert!(analytic.iter().all(|&g| g == 0.0), "{name} should get no gradient");
        } else if name != "input" {
            assert!(analytic.iter().any(|&g| g != 0.0), "{name} got no gradient");
        }
    }
}

pub fn soft_scores_reach_the_2d_projection() {
    for (name, err, analytic) in block_check(true) {
        assert!(err < TOL, "{name}: relative error {err:e}");
        if name.contains("proj_2d.weight") {
            assert!(analytic.iter().any(|&g| g != 0.0));
        }
        if name.contains("offset") {
            assert!(analytic.iter().all(|&g| g == 0.0));
        }
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_blocks: 1,
        patch: 4,
        stride: 2,
        model_dim: 4,
        ffn_dim: 6,
        lookback: 8,
        horizon: 3,
        ma_kernel: 3,
        batch_size: 2,
        num_rq_self: 3,
        num_rq: 2,
        per_delta_t: 0.4,
        per_delta_v: 0.5,
        seed: 5,
        ..ModelConfig::default()
    }
}

pub fn end_to_end_model_matches_finite_differences() {
    let frame = tivat_core::data::synth_leadlag(&LeadLagSpec {
        variates: 2,
        len: 40,
        lag: 2,
        coupling: 0.9,
        noise_std: 0.2,
        seed: 3,
    })
    .unwrap();
    let windows = tivat_core::data::make_windows(&frame, 8, 3).unwrap();
    let batch = windows.batch(&[0, 7]);
    for attention in [AttentionMode::Ja, AttentionMode::Full] {
        let model = TiVaT::new(ModelConfig { attention_mode: attention, ..tiny_config() }, 2).unwrap();
        let mut tape = Tape::new();
        let params = model.store.bind(&mut tape);
        let loss = model.loss(&mut tape, &params, &batch, 9).unwrap();
        let grads = tape.backward(loss).unwrap();
        let value = |m: &TiVaT| {
            let mut tape = Tape::new();
            let p = m.store.bind_frozen(&mut tape);
            let l = m.loss(&mut tape, &p, &batch, 9).unwrap();
            tape.value(l).data()[0]
        };
        let mut work = model.clone();
        for (i, id) in model.store.ids().enumerate() {
            let name = model.store.name(id);
            let analytic = grads.wrt(&tape, params.vars()[i]).into_data();
            let mut numeric = vec![0.0; analytic.len()];
            for (j, n) in numeric.iter_mut().enumerate() {
                let orig = model.store.get(id).data()[j];
                work.store.get_mut(id).data_mut()[j] = orig + STEP;
                let up = value(&work);
                work.store.get_mut(id).data_mut()[j] = orig - STEP;
                let down = value(&work);
                work.store.get_mut(id).data_mut()[j] = orig;
                *n = (up - down) / (2.0 * STEP);
            }
            let err = rel_err(&analytic, &numeric);
            assert!(err < TOL, "{attention:?} {name}: relative error {err:e}");
            if name.contains("offset") || name.contains("proj_2d") {
                assert!(analytic.iter().all(|&g| g == 0.0), "{name} should get no gradient");
            }
        }
    }
}
