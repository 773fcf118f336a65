//! Finite-difference gradient verification used across the test suites.

use ndarray::IxDyn;

use super::{Arr, Var};
use crate::scalar::Scalar;

/// Central-difference gradient of `f` at `x0`, one entry at a time.
pub fn numeric_grad<T, F>(x0: &Arr<T>, f: F, step: T) -> Arr<T>
where
    T: Scalar,
    F: Fn(&Arr<T>) -> T,
{
    let mut grad = Arr::zeros(x0.raw_dim());
    let mut work = x0.clone();
    let flat_len = x0.len();
    for i in 0..flat_len {
        let orig = work.as_slice_mut().expect("standard layout")[i];
        work.as_slice_mut().unwrap()[i] = orig + step;
        let plus = f(&work);
        work.as_slice_mut().unwrap()[i] = orig - step;
        let minus = f(&work);
        work.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (plus - minus) / (step + step);
    }
    grad
}

/// Relative error between an analytic and a numeric gradient entry.
///
/// The denominator is floored so that entries where both sides vanish (to
/// within central-difference roundoff) compare as equal instead of 0/0.
pub fn rel_err<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::c(1e-6));
    (analytic - numeric).abs() / denom
}

/// Build the graph via `build` (which must return a scalar), backprop, and
/// compare the input gradient against central differences.
///
/// Panics with a diagnostic when any entry exceeds `tol` relative error.
pub fn assert_grad_matches<T, F>(x0: &Arr<T>, build: F, step: f64, tol: f64)
where
    T: Scalar,
    F: Fn(&Var<T>) -> Var<T>,
{
    let x = Var::parameter(x0.as_standard_layout().into_owned());
    let loss = build(&x);
    assert_eq!(loss.value().len(), 1, "gradient check target must be scalar");
    loss.backward();
    let analytic = x.grad().expect("input did not receive a gradient");

    let numeric = numeric_grad(
        &x.to_array(),
        |v| {
            let _guard = super::no_grad();
            build(&Var::constant(v.clone())).scalar_value()
        },
        T::c(step),
    );

    let mut worst = 0.0f64;
    let mut worst_idx = 0usize;
    for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let e = rel_err(a, n).to_f64_lossy();
        if e > worst {
            worst = e;
            worst_idx = i;
        }
    }
    assert!(
        worst <= tol,
        "gradient mismatch: worst rel err {worst:.3e} at flat index {worst_idx} \
         (analytic {:?}, numeric {:?})",
        analytic.as_slice().unwrap()[worst_idx],
        numeric.as_slice().unwrap()[worst_idx],
    );
}

/// Convenience wrapper: check gradient w.r.t. an existing parameter of an
/// already-wired closure (used for layer parameters).
pub fn assert_param_grad_matches<T, F>(param: &Var<T>, eval: F, step: f64, tol: f64)
where
    T: Scalar,
    F: Fn() -> Var<T>,
{
    param.zero_grad();
    let loss = eval();
    loss.backward();
    let analytic = param.grad().expect("parameter did not receive a gradient");

    let base = param.to_array();
    let numeric = numeric_grad(
        &base,
        |v| {
            param.set_value(v.clone());
            let _guard = super::no_grad();
            let out = eval().scalar_value();
            out
        },
        T::c(step),
    );
    param.set_value(base);

    let worst = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n).to_f64_lossy())
        .fold(0.0, f64::max);
    assert!(
        worst <= tol,
        "parameter gradient mismatch: worst rel err {worst:.3e}"
    );
}

/// Sample `count` flat indices deterministically from `len` entries.
pub fn sample_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    if len <= count {
        return (0..len).collect();
    }
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < count {
        picked.insert(rng.random_range(0..len));
    }
    picked.into_iter().collect()
}

/// Finite-difference check restricted to a sampled subset of entries of a
/// parameter tensor; used by the module-level gradient sweeps where full
/// per-entry checks would be too slow.
pub fn assert_sampled_param_grad<T, F>(
    param: &Var<T>,
    eval: F,
    indices: &[usize],
    step: f64,
    tol: f64,
) -> f64
where
    T: Scalar,
    F: Fn() -> Var<T>,
{
    param.zero_grad();
    let loss = eval();
    loss.backward();
    let analytic = param.grad().expect("parameter did not receive a gradient");
    let analytic = analytic.as_standard_layout().into_owned();

    let mut base = param.to_array().as_standard_layout().into_owned();
    let step_t = T::c(step);
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = base.as_slice().unwrap()[i];
        base.as_slice_mut().unwrap()[i] = orig + step_t;
        param.set_value(base.clone());
        let plus = {
            let _g = super::no_grad();
            eval().scalar_value()
        };
        base.as_slice_mut().unwrap()[i] = orig - step_t;
        param.set_value(base.clone());
        let minus = {
            let _g = super::no_grad();
            eval().scalar_value()
        };
        base.as_slice_mut().unwrap()[i] = orig;
        let numeric = (plus - minus) / (step_t + step_t);
        let e = rel_err(analytic.as_slice().unwrap()[i], numeric).to_f64_lossy();
        worst = worst.max(e);
    }
    param.set_value(base);
    assert!(
        worst <= tol,
        "sampled parameter gradient mismatch: worst rel err {worst:.3e} (tol {tol:.1e})"
    );
    worst
}

/// Quick helper for tests: deterministic standard-normal tensor.
pub fn randn<T: Scalar>(shape: &[usize], seed: u64) -> Arr<T> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Arr::from_shape_simple_fn(IxDyn(shape), || {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::c(v)
    })
}
