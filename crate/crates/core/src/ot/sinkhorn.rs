use serde::{Deserialize, Serialize};

use super::{validate_problem, CostMatrix, Coupling};
use crate::error::OtError;
use crate::numeric::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornOptions {
    pub eps: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            eps: 0.1,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// Log-sum-exp of `(pot[k] − cost[k]) / eps` over `k`.
#[inline]
fn lse_shifted(pot: &[f64], cost: &[f64], eps: f64) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for (p, c) in pot.iter().zip(cost) {
        m = m.max((p - c) / eps);
    }
    let s: f64 = pot
        .iter()
        .zip(cost)
        .map(|(p, c)| ((p - c) / eps - m).exp())
        .sum();
    m + s.ln()
}

/// Moves an approximately feasible plan onto the transport polytope:
/// shrink rows that exceed `a`, then columns that exceed `b`, and give the
/// missing mass back as the rank-one term `e_a e_bᵀ / ‖e_a‖₁`. The change in
/// L1 is at most twice the marginal violation.
fn round_to_marginals(plan: &mut Matrix, a: &[f64], b: &[f64]) {
    let rows = plan.row_sums();
    for (i, (&r, &ai)) in rows.iter().zip(a).enumerate() {
        if r > ai {
            let s = ai / r;
            plan.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
    }
    let cols = plan.col_sums();
    let scale: Vec<f64> = cols.iter().zip(b).map(|(&c, &bj)| if c > bj { bj / c } else { 1.0 }).collect();
    for i in 0..plan.rows() {
        plan.row_mut(i).iter_mut().zip(&scale).for_each(|(v, s)| *v *= s);
    }
    let err_a: Vec<f64> = a.iter().zip(plan.row_sums()).map(|(ai, r)| (ai - r).max(0.0)).collect();
    let err_b: Vec<f64> = b.iter().zip(plan.col_sums()).map(|(bj, c)| (bj - c).max(0.0)).collect();
    let mass: f64 = err_a.iter().sum();
    if mass > 0.0 {
        for (i, ea) in err_a.iter().enumerate() {
            plan.row_mut(i).iter_mut().zip(&err_b).for_each(|(v, eb)| *v += ea * eb / mass);
        }
    }
}

/// Scalings are folded back into the potentials once either leaves
/// `[e^-ABSORB, e^ABSORB]`.
const ABSORB: f64 = 30.0;

/// One log-domain sweep: `f` against the current `g`, then `g` against the
/// new `f`. Returns false if a potential is no longer finite.
fn log_sweep(c: &Matrix, ct: &Matrix, log_a: &[f64], log_b: &[f64], f: &mut [f64], g: &mut [f64], eps: f64) -> bool {
    for (i, fi) in f.iter_mut().enumerate() {
        *fi = eps * (log_a[i] - lse_shifted(g, c.row(i), eps));
    }
    for (j, gj) in g.iter_mut().enumerate() {
        *gj = eps * (log_b[j] - lse_shifted(f, ct.row(j), eps));
    }
    f.iter().chain(g.iter()).all(|v| v.is_finite())
}

fn gibbs_kernel(c: &Matrix, f: &[f64], g: &[f64], eps: f64) -> Matrix {
    Matrix::from_fn(c.rows(), c.cols(), |i, j| ((f[i] + g[j] - c.get(i, j)) / eps).exp())
}

/// Entropic OT with dual potentials `f`, `g` kept in the log domain:
///
/// `f_i = ε log a_i − ε LSE_j((g_j − C_ij)/ε)`,
/// `g_j = ε log b_j − ε LSE_i((f_i − C_ij)/ε)`,
///
/// and `P_ij = exp((f_i + g_j − C_ij)/ε)`. Between log-domain sweeps the
/// iteration runs on scalings `u`, `v` against the stabilized kernel
/// `K_ij = exp((f_i + g_j − C_ij)/ε)`, so a sweep costs two mat-vecs instead
/// of `2nm` exponentials; `P = diag(u) K diag(v)` throughout. Stops once the
/// row-marginal residual is within `tol` (column marginals are exact after
/// every `v` update) or after `max_iter` sweeps. A plan that stopped short of
/// `tol` is rounded onto the feasible set so its cost is a true transport
/// cost; `converged` still reports whether the iterations themselves got
/// there.
pub fn sinkhorn(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    opts: SinkhornOptions,
) -> Result<Coupling, OtError> {
    validate_problem(cost, a, b, opts.eps)?;
    let eps = opts.eps;
    let c = cost.matrix();
    let ct = c.transpose();
    let (n, m) = c.shape();
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut u = vec![1.0f64; n];
    let mut v = vec![1.0f64; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    let mut kernel = Matrix::zeros(n, m);
    let mut iterations = 0;
    let mut converged = false;
    let mut stale = true;

    while iterations < opts.max_iter {
        if stale {
            for i in 0..n {
                f[i] += eps * u[i].ln();
            }
            for j in 0..m {
                g[j] += eps * v[j].ln();
            }
            iterations += 1;
            if !log_sweep(c, &ct, &log_a, &log_b, &mut f, &mut g, eps) {
                return Err(OtError::Diverged(iterations));
            }
            kernel = gibbs_kernel(c, &f, &g, eps);
            u.fill(1.0);
            v.fill(1.0);
            stale = false;
            continue;
        }
        let mut residual = 0.0f64;
        for i in 0..n {
            kv[i] = kernel.row(i).iter().zip(&v).map(|(k, vj)| k * vj).sum();
            residual = residual.max((u[i] * kv[i] - a[i]).abs());
        }
        if residual <= opts.tol {
            converged = true;
            break;
        }
        for i in 0..n {
            u[i] = a[i] / kv[i];
        }
        ktu.fill(0.0);
        for (i, ui) in u.iter().enumerate() {
            ktu.iter_mut().zip(kernel.row(i)).for_each(|(t, k)| *t += k * ui);
        }
        for j in 0..m {
            v[j] = b[j] / ktu[j];
        }
        iterations += 1;
        if !u.iter().chain(&v).all(|s| s.is_finite() && s.ln().abs() <= ABSORB) {
            if !u.iter().chain(&v).all(|s| s.is_finite() && *s > 0.0) {
                return Err(OtError::Diverged(iterations));
            }
            stale = true;
        }
    }

    let plan = Matrix::from_fn(n, m, |i, j| u[i] * kernel.get(i, j) * v[j]);
    let mut coupling = Coupling {
        plan,
        a: a.to_vec(),
        b: b.to_vec(),
        eps,
        iterations_used: iterations,
        converged,
    };
    if !converged {
        let (r, cres) = coupling.marginal_residuals();
        coupling.converged = r <= opts.tol && cres <= opts.tol;
        if !coupling.converged {
            round_to_marginals(&mut coupling.plan, a, b);
        }
    }
    Ok(coupling)
}
