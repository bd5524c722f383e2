//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the backward rules it audits.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of `f` against central differences for every input.
///
/// `f` receives a fresh tape with each input recorded as a gradient leaf and must
/// return a scalar. At most `max_per_input` coordinates per input are probed,
/// chosen with a fixed seed; `usize::MAX` probes all of them.
pub fn check<F>(inputs: &[Tensor], f: F, max_per_input: usize) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut report = GradReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic: Vec<f64> = match tape.grad(*v) {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; n],
        };
        let coords: Vec<usize> = if max_per_input >= n {
            (0..n).collect()
        } else {
            (0..max_per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for c in coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[i].data_mut()[c] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[c], numeric));
            report.max_abs_err = report.max_abs_err.max(libm::fabs(analytic[c] - numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces any tensor to a scalar through a fixed random projection, so every
/// output element contributes a distinct weight to the checked gradient.
pub fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let w = tape.constant(weights);
    let prod = tape.mul(v, w)?;
    tape.sum(prod)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}
