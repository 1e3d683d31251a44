#![allow(dead_code)]

pub mod gradient_suite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tivat_core::tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Below this norm a gradient is indistinguishable from finite-difference
/// round-off (loss values are O(1), step 1e-5).
pub const NOISE_FLOOR: f64 = 1e-6;

/// `||a - n|| / max(||a||, ||n||, NOISE_FLOOR)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(NOISE_FLOOR)
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so every
/// output element carries a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var) -> Var {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7316).sin()).collect();
    let w = tape.constant(Tensor::new(shape, w).unwrap());
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod).unwrap()
}

/// Central-difference check of `loss(inputs)` against the tape gradient.
/// Returns the relative error for each input tensor.
pub fn check<F>(inputs: &[Tensor], loss: F) -> Vec<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = loss(&mut tape, &vars);
    let grads = tape.backward(l).unwrap();
    let eval = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let l = loss(&mut tape, &vars);
        tape.value(l).data()[0]
    };
    let mut errs = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *v).into_data();
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut work = inputs.to_vec();
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            *num = (up - down) / (2.0 * STEP);
        }
        errs.push(rel_err(&analytic, &numeric));
    }
    errs
}
