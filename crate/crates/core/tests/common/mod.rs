#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smgeo_core::gradcheck::{self, GradReport};
use smgeo_core::nn::Fwd;
use smgeo_core::params::{Binding, Init, ParamStore};
use smgeo_core::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds parameters with a seeded initializer.
pub fn build<T>(seed: u64, f: impl FnOnce(&mut ParamStore, &mut Init<'_>) -> T) -> (ParamStore, T) {
    let mut r = rng(seed);
    let mut init = Init { rng: &mut r };
    let mut store = ParamStore::new();
    let m = f(&mut store, &mut init);
    (store, m)
}

/// Replaces every parameter with uniform noise so no gradient path is trivially zero.
pub fn randomize(store: &mut ParamStore, scale: f64, seed: u64) {
    for (i, t) in store.tensors_mut().iter_mut().enumerate() {
        let shape = t.shape().to_vec();
        *t = gradcheck::random_tensor(&shape, -scale, scale, seed + i as u64);
    }
}

/// Runs `f` on a fresh tape with the store bound as constants.
pub fn eval(store: &ParamStore, f: impl FnOnce(&mut Fwd<'_>) -> Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, false);
    let mut fw = Fwd { tape: &mut tape, bind: &bind };
    let v = f(&mut fw).unwrap();
    tape.value(v).clone()
}

/// Finite-difference check of a scalar function over the extra inputs and every parameter.
pub fn check_with_params(
    store: &ParamStore,
    inputs: &[Tensor],
    per_tensor: usize,
    f: impl Fn(&mut Fwd<'_>, &[Var]) -> Result<Var>,
) -> GradReport {
    let mut all: Vec<Tensor> = inputs.to_vec();
    all.extend(store.iter().map(|(_, _, t)| t.clone()));
    let n_in = inputs.len();
    gradcheck::check(
        &all,
        |tape: &mut Tape, vars: &[Var]| {
            let bind = Binding::from_vars(vars[n_in..].to_vec());
            let mut fw = Fwd { tape, bind: &bind };
            f(&mut fw, &vars[..n_in])
        },
        per_tensor,
    )
    .unwrap()
}
