//! Entropic optimal transport.
//!
//! [`sinkhorn`] is the reference solver and runs entirely on dual
//! potentials, so it stays stable for regularizations down to `1e-3` and
//! below. [`sinkhorn_unrolled`] is the differentiable variant used inside
//! model layers: it records every scaling iterate so that the gradient of
//! any function of the plan can be pulled back onto the cost matrix.

mod exact;
mod sinkhorn;
mod unrolled;

pub use exact::{exact_ot_uniform, ExactSolution, MAX_EXACT_SIZE};
pub use sinkhorn::{sinkhorn, SinkhornOptions};
pub use unrolled::{sinkhorn_unrolled, SinkhornTape};

use crate::error::OtError;
use crate::numeric::Matrix;

/// Pairwise alignment costs between two point sets.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(m: Matrix) -> Result<Self, OtError> {
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                if !m.get(i, j).is_finite() {
                    return Err(OtError::NonFiniteCost { row: i, col: j });
                }
            }
        }
        Ok(CostMatrix(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, OtError> {
        CostMatrix::new(Matrix::from_rows(rows))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix(self.0.transpose())
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

/// A transport plan together with the marginals it was solved against.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub plan: Matrix,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub eps: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

impl Coupling {
    /// Wraps an externally built plan, taking the marginals from its row
    /// and column sums.
    pub fn from_plan(plan: Matrix) -> Self {
        let a = plan.row_sums();
        let b = plan.col_sums();
        Coupling {
            plan,
            a,
            b,
            eps: 0.0,
            iterations_used: 0,
            converged: true,
        }
    }

    /// `max_i |P1 − a|_i` and `max_j |Pᵀ1 − b|_j`.
    pub fn marginal_residuals(&self) -> (f64, f64) {
        let rows = self
            .plan
            .row_sums()
            .iter()
            .zip(&self.a)
            .fold(0.0f64, |m, (s, a)| m.max((s - a).abs()));
        let cols = self
            .plan
            .col_sums()
            .iter()
            .zip(&self.b)
            .fold(0.0f64, |m, (s, b)| m.max((s - b).abs()));
        (rows, cols)
    }

    pub fn transpose(&self) -> Coupling {
        Coupling {
            plan: self.plan.transpose(),
            a: self.b.clone(),
            b: self.a.clone(),
            ..self.clone()
        }
    }
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `H(P) = −Σ P_ij (log P_ij − 1)` with `0·log 0 = 0`.
pub fn entropy(plan: &Matrix) -> f64 {
    -plan
        .data()
        .iter()
        .map(|&p| if p > 0.0 { p * (p.ln() - 1.0) } else { 0.0 })
        .sum::<f64>()
}

/// `⟨C, P⟩`.
pub fn transport_cost(cost: &CostMatrix, plan: &Matrix) -> Result<f64, OtError> {
    let c = cost.matrix();
    if c.shape() != plan.shape() {
        return Err(OtError::ShapeMismatch {
            rows: c.rows(),
            cols: c.cols(),
            a: plan.rows(),
            b: plan.cols(),
        });
    }
    Ok(c.data().iter().zip(plan.data()).map(|(c, p)| c * p).sum())
}

/// Barycentric projection: row `i` of the result is
/// `(1/a_i) Σ_j P_ij · target_j`.
pub fn barycentric_map(coupling: &Coupling, target: &Matrix) -> Result<Matrix, OtError> {
    let plan = &coupling.plan;
    if plan.cols() != target.rows() || coupling.a.len() != plan.rows() {
        return Err(OtError::ShapeMismatch {
            rows: plan.rows(),
            cols: plan.cols(),
            a: coupling.a.len(),
            b: target.rows(),
        });
    }
    if let Some((index, &value)) = coupling.a.iter().enumerate().find(|(_, &a)| a <= 0.0) {
        return Err(OtError::NonPositiveMarginal {
            which: "a",
            index,
            value,
        });
    }
    let mut out = plan.matmul(target)?;
    for (i, &a) in coupling.a.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v /= a);
    }
    Ok(out)
}

pub(crate) fn validate_problem(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    eps: f64,
) -> Result<(), OtError> {
    if cost.rows() != a.len() || cost.cols() != b.len() {
        return Err(OtError::ShapeMismatch {
            rows: cost.rows(),
            cols: cost.cols(),
            a: a.len(),
            b: b.len(),
        });
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(OtError::BadEpsilon(eps));
    }
    for (which, m) in [("a", a), ("b", b)] {
        if let Some((index, &value)) = m.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(OtError::NonPositiveMarginal {
                which,
                index,
                value,
            });
        }
        let sum: f64 = m.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(OtError::UnnormalizedMarginal { which, sum });
        }
    }
    Ok(())
}
