//! Central finite-difference checks of tape gradients, over free inputs and
//! stored parameters.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{init, ParamStore, Session};

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that near-zero gradient
/// entries are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Reduces any output to a scalar with fixed random weights, so that every
/// output entry reaches the gradient.
pub fn project<'t>(out: Var<'t>, seed: u64) -> Var<'t> {
    let (r, c) = out.shape();
    let w = init::normal(&mut ChaCha8Rng::seed_from_u64(seed), r, c, 1.0);
    out.mul_const(Arc::new(w)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Name of the worst entry: an input index or a parameter name.
    pub worst: String,
    pub entries: usize,
}

/// Compares analytic and numeric gradients of the scalar `f` with respect to
/// every entry of `inputs` and of the parameters named in `params`.
pub fn check<F>(store: &ParamStore, params: &[&str], inputs: &[Matrix], f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&Session<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |store: &ParamStore, inputs: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let s = Session::new(&tape, store);
        let vars: Vec<Var<'_>> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
        scalar(f(&s, &vars)?)
    };
    let tape = Tape::new();
    let s = Session::new(&tape, store).all_trainable();
    let vars: Vec<Var<'_>> = inputs.iter().map(|m| tape.variable(m.clone())).collect();
    let bound: Vec<Var<'_>> = params.iter().map(|p| s.param(p)).collect::<Result<_>>()?;
    let out = f(&s, &vars)?;
    scalar(out)?;
    let grads = tape.backward(out);

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
    };
    let mut note = |name: String, a: f64, n: f64| {
        let e = relative_error(a, n);
        report.entries += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = name;
        }
    };

    for (i, m) in inputs.iter().enumerate() {
        let g = grads.get_or_zeros(vars[i]);
        for k in 0..m.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            flat_mut(&mut plus[i])[k] += STEP;
            flat_mut(&mut minus[i])[k] -= STEP;
            let n = (eval(store, &plus)? - eval(store, &minus)?) / (2.0 * STEP);
            note(format!("input{i}[{k}]"), flat(&g)[k], n);
        }
    }
    for (name, var) in params.iter().zip(&bound) {
        let g = grads.get_or_zeros(*var);
        let base = store.value(name)?.clone();
        let mut st = store.clone();
        for k in 0..base.len() {
            let mut v = base.clone();
            flat_mut(&mut v)[k] += STEP;
            st.set(name, v.clone())?;
            let fp = eval(&st, inputs)?;
            flat_mut(&mut v)[k] -= 2.0 * STEP;
            st.set(name, v)?;
            let fm = eval(&st, inputs)?;
            note(
                format!("{name}[{k}]"),
                flat(&g)[k],
                (fp - fm) / (2.0 * STEP),
            );
        }
    }
    Ok(report)
}

fn scalar(v: Var<'_>) -> Result<f64> {
    if v.shape() != (1, 1) {
        return Err(Error::shape("1×1 output", format!("{:?}", v.shape())));
    }
    Ok(v.item())
}

fn flat(m: &Matrix) -> &[f64] {
    m.as_slice().expect("standard layout")
}

fn flat_mut(m: &mut Matrix) -> &mut [f64] {
    m.as_slice_mut().expect("standard layout")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn exact_on_a_quadratic_and_catches_wrong_gradients() {
        let mut store = ParamStore::new();
        store
            .insert("w", ParamGroup::Prompt, ndarray::array![[0.3, -1.2]])
            .unwrap();
        let x = ndarray::array![[0.5, 2.0]];
        let r = check(&store, &["w"], std::slice::from_ref(&x), |s, v| {
            Ok(((s.param("w")? * v[0]).sum()).exp())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.entries, 4);
        // Detaching the input hides its gradient, which the check must flag.
        let bad = check(&store, &[], &[x], |s, v| {
            let detached = s.tape().constant(v[0].value().as_ref().clone());
            Ok((detached * v[0]).sum())
        })
        .unwrap();
        assert!(bad.max_rel_error > 0.1);
    }
}
