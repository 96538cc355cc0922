//! The two distance-kernel weighting operators.
//!
//! Both operators turn all-pairs evaluations of the quadratic kernel
//! psi(a, b) = (a - b)^2 + (a^2 - b^2) into a row-stochastic weight matrix
//! via row softmax, then apply that matrix to a value vector:
//!
//! * non-local: one flattened feature map weighted against itself,
//!   f = W x^T with W[i][m] = softmax_m psi(x_i, x_m);
//! * local: two equal-length vectors cross-weighted, but each matrix is
//!   applied to its *own* vector: f_x = W_x x^T, f_y = W_y y^T with
//!   W_x[i][j] = softmax_j psi(x_i, y_j) and W_y[j][i] = softmax_i
//!   psi(y_j, x_i).
//!
//! The kernel is deliberately asymmetric: psi(a,b) - psi(b,a) = 2(a^2 - b^2),
//! and psi(a,a) = 0. Both operators preserve shape exactly and map constant
//! input to itself (uniform weights average a constant).
//!
//! The operators carry no trainable state. Differentiable routes live on the
//! tape ([`nonlocal_apply_on_tape`], [`local_apply_on_tape`]); the eager
//! functions wrap them. [`reference_nonlocal`] and [`reference_local`] are
//! independent O(n^2) scalar oracles used only to cross-check.

use crate::error::{CfilError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Largest flattened length the apply operators accept. Weight matrices are
/// dense, so memory is O(n^2).
pub const N_BUDGET: usize = 8192;

/// Largest n the reference oracles accept.
pub const REFERENCE_N_MAX: usize = 4096;

/// Sign applied to the squared-difference term of the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignMode {
    /// psi(a, b) = (a - b)^2 + (a^2 - b^2).
    #[default]
    AsAlgorithm,
    /// psi(a, b) = -(a - b)^2 + (a^2 - b^2).
    Eq8NegatedFirstTerm,
}

impl SignMode {
    pub fn sign<T: Scalar>(self) -> T {
        match self {
            SignMode::AsAlgorithm => T::one(),
            SignMode::Eq8NegatedFirstTerm => -T::one(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "as-algorithm" => Ok(SignMode::AsAlgorithm),
            "eq8" | "eq8-negated-first-term" => Ok(SignMode::Eq8NegatedFirstTerm),
            other => Err(CfilError::Config(format!(
                "unknown sign mode '{other}' (expected 'as-algorithm' or 'eq8-negated-first-term')"
            ))),
        }
    }
}

impl std::fmt::Display for SignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SignMode::AsAlgorithm => write!(f, "as-algorithm"),
            SignMode::Eq8NegatedFirstTerm => write!(f, "eq8-negated-first-term"),
        }
    }
}

/// The fixed quadratic distance kernel plus its sign convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DistanceKernel {
    pub sign_mode: SignMode,
}

impl DistanceKernel {
    pub fn new(sign_mode: SignMode) -> Self {
        DistanceKernel { sign_mode }
    }
}

/// psi(a, b) under the kernel's sign mode.
pub fn psi<T: Scalar>(a: T, b: T, kernel: DistanceKernel) -> T {
    let d = a - b;
    kernel.sign_mode.sign::<T>() * d * d + (a * a - b * b)
}

/// Row-stochastic n x n correlation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix<T: Scalar> {
    n: usize,
    values: Vec<T>,
}

impl<T: Scalar> WeightMatrix<T> {
    pub fn from_values(n: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != n * n {
            return Err(CfilError::Dimension {
                op: "weight_matrix",
                lhs: format!("{n}x{n}"),
                rhs: format!("{} values", values.len()),
            });
        }
        Ok(WeightMatrix { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Largest |row sum - 1| across rows.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.n)
            .map(|i| {
                let s: f64 = self.row(i).iter().map(|v| v.as_f64()).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn entries_in_unit_interval(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.as_f64() >= 0.0 && v.as_f64() <= 1.0)
    }
}

fn check_budget(n: usize) -> Result<()> {
    if n > N_BUDGET {
        return Err(CfilError::Capacity(format!(
            "weighted operation over n = {n} exceeds the budget of {N_BUDGET}; \
             reduce the spatial extent or channel width before this op"
        )));
    }
    Ok(())
}

// ----------------------------------------------------------------------
// Differentiable tape routes
// ----------------------------------------------------------------------

/// Append the non-local weighted operation to a tape. Output has exactly the
/// input's shape; gradients flow through both the weights and the values.
pub fn nonlocal_apply_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    kernel: DistanceKernel,
) -> Result<Var> {
    check_budget(tape.value(x).len())?;
    tape.cross_weighted(x, x, x, kernel.sign_mode.sign::<T>())
}

/// Append the local weighted operation to a tape. Weights compare the two
/// vectors cross-pair, each matrix then multiplies its own vector. With
/// y = x both results reduce to the non-local operation exactly: all three
/// cross-weighted calls run the same row kernel.
pub fn local_apply_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    kernel: DistanceKernel,
) -> Result<(Var, Var)> {
    let xs = tape.value(x).shape().clone();
    let ys = tape.value(y).shape().clone();
    if xs.len() != ys.len() {
        return Err(CfilError::Dimension {
            op: "local_apply",
            lhs: xs.to_string(),
            rhs: ys.to_string(),
        });
    }
    check_budget(xs.len())?;
    let sign = kernel.sign_mode.sign::<T>();
    let fx = tape.cross_weighted(x, y, x, sign)?;
    let fy = tape.cross_weighted(y, x, y, sign)?;
    Ok((fx, fy))
}

// ----------------------------------------------------------------------
// Eager wrappers
// ----------------------------------------------------------------------

/// Weight matrix of the non-local operation for a flattened vector.
pub fn nonlocal_weights<T: Scalar>(
    x: &Tensor<T>,
    kernel: DistanceKernel,
) -> Result<WeightMatrix<T>> {
    let n = x.len();
    check_budget(n)?;
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let d = tape.pairwise_psi(v, v, kernel.sign_mode.sign::<T>())?;
    let w = tape.softmax_rows(d)?;
    WeightMatrix::from_values(n, tape.value(w).values().to_vec())
}

/// Non-local weighted operation, shape-preserving.
pub fn nonlocal_apply<T: Scalar>(x: &Tensor<T>, kernel: DistanceKernel) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = nonlocal_apply_on_tape(&mut tape, v, kernel)?;
    Ok(tape.value(out).clone())
}

/// Both cross-pair weight matrices (W_x, W_y) of the local operation.
pub fn local_weights<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    kernel: DistanceKernel,
) -> Result<(WeightMatrix<T>, WeightMatrix<T>)> {
    if x.len() != y.len() {
        return Err(CfilError::Dimension {
            op: "local_weights",
            lhs: x.shape().to_string(),
            rhs: y.shape().to_string(),
        });
    }
    let n = x.len();
    check_budget(n)?;
    let sign = kernel.sign_mode.sign::<T>();
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone());
    let vy = tape.leaf(y.clone());
    let dx = tape.pairwise_psi(vx, vy, sign)?;
    let wx = tape.softmax_rows(dx)?;
    let dy = tape.pairwise_psi(vy, vx, sign)?;
    let wy = tape.softmax_rows(dy)?;
    Ok((
        WeightMatrix::from_values(n, tape.value(wx).values().to_vec())?,
        WeightMatrix::from_values(n, tape.value(wy).values().to_vec())?,
    ))
}

/// Local weighted operation; returns (f_x, f_y) with the input shapes.
pub fn local_apply<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    kernel: DistanceKernel,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone());
    let vy = tape.leaf(y.clone());
    let (fx, fy) = local_apply_on_tape(&mut tape, vx, vy, kernel)?;
    Ok((tape.value(fx).clone(), tape.value(fy).clone()))
}

// ----------------------------------------------------------------------
// Reference oracles: naive scalar double loops, double precision only.
// Ground truth for equivalence tests; no shared code with the tape route.
// ----------------------------------------------------------------------

fn reference_psi(a: f64, b: f64, sign: f64) -> f64 {
    sign * (a - b) * (a - b) + (a * a - b * b)
}

fn reference_row(anchor: f64, values: &[f64], sign: f64) -> Vec<f64> {
    let n = values.len();
    let mut row = vec![0.0f64; n];
    for (m, &v) in values.iter().enumerate() {
        row[m] = reference_psi(anchor, v, sign);
    }
    let mut max = f64::NEG_INFINITY;
    for &d in &row {
        if d > max {
            max = d;
        }
    }
    let mut sum = 0.0f64;
    for d in row.iter_mut() {
        *d = (*d - max).exp();
        sum += *d;
    }
    for d in row.iter_mut() {
        *d /= sum;
    }
    row
}

/// O(n^2) reference for the non-local operation: (flattened W, output).
pub fn reference_nonlocal(x: &[f64], kernel: DistanceKernel) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    if n == 0 || n > REFERENCE_N_MAX {
        return Err(CfilError::Contract(format!(
            "reference_nonlocal needs 1 <= n <= {REFERENCE_N_MAX}, got {n}"
        )));
    }
    let sign = kernel.sign_mode.sign::<f64>();
    let mut weights = vec![0.0f64; n * n];
    let mut out = vec![0.0f64; n];
    for i in 0..n {
        let row = reference_row(x[i], x, sign);
        let mut acc = 0.0f64;
        for m in 0..n {
            acc += row[m] * x[m];
        }
        out[i] = acc;
        weights[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    Ok((weights, out))
}

/// O(n^2) reference for the local operation:
/// ((W_x, f_x), (W_y, f_y)), all flattened.
#[allow(clippy::type_complexity)]
pub fn reference_local(
    x: &[f64],
    y: &[f64],
    kernel: DistanceKernel,
) -> Result<((Vec<f64>, Vec<f64>), (Vec<f64>, Vec<f64>))> {
    if x.len() != y.len() {
        return Err(CfilError::Dimension {
            op: "reference_local",
            lhs: format!("{}", x.len()),
            rhs: format!("{}", y.len()),
        });
    }
    let n = x.len();
    if n == 0 || n > REFERENCE_N_MAX {
        return Err(CfilError::Contract(format!(
            "reference_local needs 1 <= n <= {REFERENCE_N_MAX}, got {n}"
        )));
    }
    let sign = kernel.sign_mode.sign::<f64>();
    let mut wx = vec![0.0f64; n * n];
    let mut fx = vec![0.0f64; n];
    for i in 0..n {
        let row = reference_row(x[i], y, sign);
        let mut acc = 0.0f64;
        for (k, &w) in row.iter().enumerate() {
            acc += w * x[k];
        }
        fx[i] = acc;
        wx[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut wy = vec![0.0f64; n * n];
    let mut fy = vec![0.0f64; n];
    for j in 0..n {
        let row = reference_row(y[j], x, sign);
        let mut acc = 0.0f64;
        for (k, &w) in row.iter().enumerate() {
            acc += w * y[k];
        }
        fy[j] = acc;
        wy[j * n..(j + 1) * n].copy_from_slice(&row);
    }
    Ok(((wx, fx), (wy, fy)))
}
