//! Finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Stabilizer of the relative-error denominator.
pub const RELATIVE_ERROR_EPS: f64 = 1e-8;

/// Relative error `|a - n| / (|n| + RELATIVE_ERROR_EPS)` of an analytic
/// gradient `a` against its finite-difference estimate `n`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + RELATIVE_ERROR_EPS)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h` for every input element, returning the largest
/// relative error.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .map(|v| v.grad().expect("leaf gradient"))
            .collect::<Vec<_>>()
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.item()
    };
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Reduces `out` to a scalar by a fixed pseudo-random weighting, so that every
/// output element receives a distinct upstream gradient.
pub fn probe(out: Var<'_>, seed: u64) -> Result<Var<'_>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = out.shape();
    let n = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    Ok(out.mul(out.tape().constant(w))?.sum())
}

/// Uniform random tensor in [-1, 1), used by gradient-check fixtures.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape and data agree")
}
