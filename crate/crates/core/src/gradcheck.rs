//! Central finite differences as an independent gradient oracle.
//!
//! Everything here runs in f64: central differences in single precision are
//! too noisy to check anything. The checker never looks inside the tape's
//! backward; it only re-evaluates the forward closure.

use crate::error::{CfilError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default step for central differences.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Per-element central differences (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn finite_difference_grad<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(CfilError::Contract("finite difference step must be > 0".into()));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0f64; x.len()];
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.values_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.values_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CfilError::Numeric(format!(
                "finite_difference_grad: non-finite evaluation at element {i}"
            )));
        }
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().clone(), grad)
}

/// Relative error with a unit floor: |a - b| / max(1, |a|, |b|). The floor
/// keeps near-zero gradients from inflating the ratio past what central
/// differences can resolve.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

/// Max relative error between two gradient buffers.
pub fn max_rel_error(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| rel_error(a, b))
        .fold(0.0, f64::max)
}

/// Compare tape backward against finite differences for a scalar-valued
/// graph over `inputs`. `build` must construct the same graph each call.
/// Returns the worst relative error across all input elements.
pub fn check_tape_gradient<B>(build: B, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad()))
        .collect();
    let root = build(&mut tape, &vars)?;
    if tape.value(root).len() != 1 {
        return Err(CfilError::Contract(
            "check_tape_gradient: graph root must be scalar".into(),
        ));
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("grads populated").to_vec())
        .collect();

    // Finite-difference pass, one input tensor at a time.
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let fd = finite_difference_grad(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, orig)| {
                        t.leaf(if i == which {
                            probe.clone()
                        } else {
                            orig.clone()
                        })
                    })
                    .collect();
                let r = build(&mut t, &vs)?;
                Ok(t.value(r).values()[0])
            },
            input,
            h,
        )?;
        worst = worst.max(max_rel_error(&analytic[which], fd.values()));
    }
    Ok(worst)
}
