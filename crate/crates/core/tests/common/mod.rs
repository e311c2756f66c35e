#![allow(dead_code)]

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tenrpca::autodiff::{Tape, Var};

pub const STEP: f64 = 1e-5;

pub fn random_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

/// `Σ out ⊙ W` for a fixed pseudo-random `W`, so every output entry matters.
pub fn probe_loss(tape: &mut Tape, out: Var) -> Var {
    let w = tape.constant(random_array(tape.shape(out), 999));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Largest deviation between analytic and central-difference gradients,
/// relative to the largest numeric gradient (floored at one).
pub fn gradient_error<F>(inputs: &[ArrayD<f64>], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[ArrayD<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars);
        let loss = probe_loss(&mut tape, out);
        tape.scalar(loss)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars);
    let loss = probe_loss(&mut tape, out);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[e] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[e] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max((analytic.as_slice().unwrap()[e] - numeric).abs());
            scale = scale.max(numeric.abs());
        }
    }
    worst / scale
}
