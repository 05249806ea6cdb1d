#![allow(dead_code, clippy::needless_range_loop)]

pub mod equations;
pub mod gradient_suite;

use posthoc_os::autodiff::{Tape, Var};
use posthoc_os::survival::{make_bins, monotonic_penalty, os_prediction, weighted_bin_predictions};
use posthoc_os::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Random entries bounded away from zero, for ops with a kink at 0.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps round-off in
/// near-zero gradients from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Largest relative error between tape gradients and central differences of
/// the scalar built by `f` over every entry of every input.
pub fn max_gradient_error(inputs: &[Tensor], f: impl Fn(&Tape, &[Var]) -> Var) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |inputs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        tape.value(f(&tape, &vars)).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input reaches the output");
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Reduces a tensor output to a scalar with fixed random weights, so every
/// output entry contributes a distinct gradient.
pub fn weighted_sum(tape: &Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out);
    let w = tape.constant(random_tensor(&mut rng(seed), &shape));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Plain-float evaluation of the head from a probability vector.
pub fn head_from_p(p: &[f64], u: f64) -> (Vec<f64>, f64, f64) {
    let n = p.len();
    let tape = Tape::new();
    let pv = tape.constant(Tensor::new([1, n], p.to_vec()).unwrap());
    let bins = make_bins(n, u).unwrap();
    let pw = weighted_bin_predictions(&tape, pv, &bins).unwrap();
    let y = os_prediction(&tape, pw, u).unwrap();
    let pen = monotonic_penalty(&tape, pv).unwrap();
    (
        tape.value(pw).into_data(),
        tape.value(y).data()[0],
        tape.value(pen).data()[0],
    )
}
