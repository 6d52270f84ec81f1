#![allow(dead_code)]

use graspkit::tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between two gradient vectors.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite-difference check of `f` at `inputs`.
///
/// Non-scalar outputs are reduced with a fixed random projection so every
/// output element matters. Returns the worst relative error over inputs.
pub fn gradcheck<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |vals: &[Tensor], with_grad: bool| -> (f64, Option<Vec<Tensor>>) {
        let mut tape = Tape::new().with_finite_checks(true);
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        let n = tape.value(out).numel();
        let mut r = rng(seed);
        let proj = Tensor::from_fn(tape.shape(out), |_| r.random_range(-1.0..1.0));
        let loss = if n == 1 {
            out
        } else {
            let p = tape.constant(proj);
            let prod = tape.mul(out, p).unwrap();
            tape.sum(prod).unwrap()
        };
        let value = tape.value(loss).item();
        let grads = with_grad.then(|| {
            let g = tape.backward(loss).unwrap();
            vars.iter()
                .zip(vals)
                .map(|(&v, t)| g.get_or_zeros(v, t.shape()))
                .collect()
        });
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let analytic = analytic.unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_EPS;
            numeric[j] = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_EPS);
        }
        worst = worst.max(rel_err(analytic[i].data(), &numeric));
    }
    worst
}
