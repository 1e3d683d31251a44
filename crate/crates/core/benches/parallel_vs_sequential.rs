use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tivat_core::data::{make_windows, synth_leadlag, LeadLagSpec};
use tivat_core::par;
use tivat_core::tensor::matmul_nn;
use tivat_core::tensor::{RaggedIndex, Tape, Tensor};
use tivat_core::{ModelConfig, TiVaT};

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("matmul_256");
    let a = random(&[256, 256], &mut rng);
    let b = random(&[256, 256], &mut rng);
    for (name, on) in MODES {
        group.bench_function(name, |bench| {
            par::set_enabled(on);
            bench.iter(|| matmul_nn(a.data(), b.data(), 256, 256, 256));
        });
    }
    par::set_enabled(true);
    group.finish();
}

fn sparse_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d, k) = (1024, 32, 48);
    let q = random(&[n, d], &mut rng);
    let keys = random(&[n, d], &mut rng);
    let v = random(&[n, d], &mut rng);
    let sets: Vec<Vec<usize>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(0..n)).collect()).collect();
    let index = RaggedIndex::from_lists(&sets);
    let mut group = c.benchmark_group("indexed_attention_fwd_bwd");
    for (name, on) in MODES {
        group.bench_function(name, |bench| {
            par::set_enabled(on);
            bench.iter(|| {
                let mut tape = Tape::new();
                let (qv, kv, vv) = (tape.param(q.clone()), tape.param(keys.clone()), tape.param(v.clone()));
                let out = tape.indexed_attention(qv, kv, vv, index.clone(), None).unwrap();
                let loss = tape.sum_all(out).unwrap();
                tape.backward(loss).unwrap()
            });
        });
    }
    par::set_enabled(true);
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let frame = synth_leadlag(&LeadLagSpec {
        variates: 7,
        len: 600,
        lag: 4,
        coupling: 0.8,
        noise_std: 0.1,
        seed: 3,
    })
    .unwrap();
    let cfg = ModelConfig {
        num_blocks: 2,
        patch: 8,
        stride: 4,
        model_dim: 32,
        ffn_dim: 64,
        num_rq_self: 8,
        num_rq: 8,
        lookback: 96,
        horizon: 24,
        batch_size: 16,
        ..ModelConfig::default()
    };
    let windows = make_windows(&frame, cfg.lookback, cfg.horizon).unwrap();
    let batch = windows.batch(&(0..16).collect::<Vec<_>>());
    let model = TiVaT::new(cfg, 7).unwrap();
    let mut group = c.benchmark_group("model_loss_and_backward");
    group.sample_size(10);
    for (name, on) in MODES {
        group.bench_with_input(BenchmarkId::new(name, "B16_V7"), &batch, |bench, batch| {
            par::set_enabled(on);
            bench.iter(|| {
                let mut tape = Tape::new();
                let params = model.store.bind(&mut tape);
                let loss = model.loss(&mut tape, &params, batch, 0).unwrap();
                tape.backward(loss).unwrap()
            });
        });
    }
    par::set_enabled(true);
    group.finish();
}

criterion_group!(benches, matmul, sparse_attention, train_step);
criterion_main!(benches);
