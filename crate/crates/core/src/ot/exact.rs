use itertools::Itertools;

use super::{CostMatrix, Coupling};
use crate::error::OtError;
use crate::numeric::Matrix;

pub const MAX_EXACT_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ExactSolution {
    pub coupling: Coupling,
    /// Average cost `(1/n) Σ_i C[i, σ(i)]`, equal to `⟨C, P⟩`.
    pub cost: f64,
    pub permutation: Vec<usize>,
}

/// Exact OT between uniform measures by enumerating all `n!` permutations.
///
/// With uniform marginals an optimal plan is always a scaled permutation
/// matrix, so enumeration is exact. Ties resolve to the lexicographically
/// smallest permutation.
pub fn exact_ot_uniform(cost: &CostMatrix) -> Result<ExactSolution, OtError> {
    let (rows, cols) = (cost.rows(), cost.cols());
    if rows != cols || rows == 0 || rows > MAX_EXACT_SIZE {
        return Err(OtError::OracleTooLarge { rows, cols });
    }
    let n = rows;
    let c = cost.matrix();
    let mut best: Option<(f64, Vec<usize>)> = None;
    // permutations of a sorted range are yielded in lexicographic order
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum();
        let avg = total / n as f64;
        if best.as_ref().is_none_or(|(b, _)| avg < *b) {
            best = Some((avg, perm));
        }
    }
    let (cost_value, permutation) = best.expect("n >= 1");
    let w = 1.0 / n as f64;
    let plan = Matrix::from_fn(n, n, |i, j| if permutation[i] == j { w } else { 0.0 });
    Ok(ExactSolution {
        coupling: Coupling {
            plan,
            a: vec![w; n],
            b: vec![w; n],
            eps: 0.0,
            iterations_used: 0,
            converged: true,
        },
        cost: cost_value,
        permutation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_picks_identity() {
        let c = CostMatrix::from_rows(&[[1.0, 2.0], [3.0, 1.0]]).unwrap();
        let s = exact_ot_uniform(&c).unwrap();
        assert_eq!(s.permutation, vec![0, 1]);
        assert_eq!(s.cost, 1.0);
    }

    #[test]
    fn zero_diagonal_costs_nothing() {
        let c = CostMatrix::new(Matrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 })).unwrap();
        let s = exact_ot_uniform(&c).unwrap();
        assert_eq!(s.permutation, vec![0, 1, 2]);
        assert_eq!(s.cost, 0.0);
    }

    #[test]
    fn ties_break_lexicographically() {
        let c = CostMatrix::new(Matrix::zeros(3, 3)).unwrap();
        assert_eq!(exact_ot_uniform(&c).unwrap().permutation, vec![0, 1, 2]);
        let anti = CostMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(exact_ot_uniform(&anti).unwrap().permutation, vec![1, 0]);
    }

    #[test]
    fn rejects_large_or_rectangular() {
        assert!(matches!(
            exact_ot_uniform(&CostMatrix::new(Matrix::zeros(9, 9)).unwrap()),
            Err(OtError::OracleTooLarge { rows: 9, cols: 9 })
        ));
        assert!(exact_ot_uniform(&CostMatrix::new(Matrix::zeros(2, 3)).unwrap()).is_err());
    }
}
