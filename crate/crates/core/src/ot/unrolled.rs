use super::{validate_problem, CostMatrix, Coupling, SinkhornOptions};
use crate::error::OtError;
use crate::numeric::{dot, Matrix};

/// Everything needed to backpropagate through a [`sinkhorn_unrolled`] run.
#[derive(Clone, Debug)]
pub struct SinkhornTape {
    eps: f64,
    kernel: Matrix,
    /// `us[t]`, `vs[t]` for t = 0..=T; `us[0]` is unused, `vs[0]` is all ones.
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
    /// `kv[t] = K v^{t−1}` and `ktu[t] = Kᵀ u^t`, for t = 1..=T (index 0 unused).
    kv: Vec<Vec<f64>>,
    ktu: Vec<Vec<f64>>,
    row_argmin: Vec<usize>,
    col_argmin: Vec<usize>,
}

/// Sinkhorn in the scaling domain with every iterate recorded:
///
/// `u^t = a ⊘ (K v^{t−1})`, `v^t = b ⊘ (Kᵀ u^t)`, `P = diag(u^T) K diag(v^T)`,
/// starting from `v^0 = 1`.
///
/// The Gibbs kernel is built from the cost after subtracting row minima and
/// then column minima, so every row and column of `K` contains an entry of
/// exactly one and the scalings stay bounded. The shifts are part of the
/// differentiated function. Iteration stops once the row-marginal residual
/// is within `tol`; pass `tol = 0` to always run `max_iter` sweeps.
pub fn sinkhorn_unrolled(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    opts: SinkhornOptions,
) -> Result<(Coupling, SinkhornTape), OtError> {
    validate_problem(cost, a, b, opts.eps)?;
    let eps = opts.eps;
    let c = cost.matrix();
    let (n, m) = c.shape();

    let mut row_argmin = vec![0; n];
    let mut row_min = vec![0.0; n];
    for i in 0..n {
        let (j, v) = argmin(c.row(i));
        row_argmin[i] = j;
        row_min[i] = v;
    }
    let mut col_argmin = vec![0; m];
    let mut col_min = vec![f64::INFINITY; m];
    for i in 0..n {
        for (j, &cij) in c.row(i).iter().enumerate() {
            let v = cij - row_min[i];
            if v < col_min[j] {
                col_min[j] = v;
                col_argmin[j] = i;
            }
        }
    }
    let kernel = Matrix::from_fn(n, m, |i, j| {
        (-(c.get(i, j) - row_min[i] - col_min[j]) / eps).exp()
    });

    let mut us = vec![Vec::new()];
    let mut vs = vec![vec![1.0; m]];
    let mut kv = vec![Vec::new()];
    let mut ktu = vec![Vec::new()];
    let mut next_kv = kernel.matvec(&vs[0])?;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        let u: Vec<f64> = a.iter().zip(&next_kv).map(|(a, y)| a / y).collect();
        let w = transpose_matvec(&kernel, &u);
        let v: Vec<f64> = b.iter().zip(&w).map(|(b, w)| b / w).collect();
        iterations += 1;
        if !u.iter().chain(&v).all(|x| x.is_finite() && *x > 0.0) {
            return Err(OtError::Diverged(iterations));
        }
        let y = kernel.matvec(&v)?;
        let residual = u
            .iter()
            .zip(&y)
            .zip(a)
            .fold(0.0f64, |r, ((u, y), a)| r.max((u * y - a).abs()));
        kv.push(std::mem::replace(&mut next_kv, y));
        ktu.push(w);
        us.push(u);
        vs.push(v);
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }
    if iterations == 0 {
        // no sweep requested; the plan is the bare kernel scaled by a
        us.push(a.iter().zip(&next_kv).map(|(a, y)| a / y).collect());
        vs.push(vec![1.0; m]);
        kv.push(next_kv);
        ktu.push(vec![0.0; m]);
    }

    let u = us.last().expect("at least one iterate");
    let v = vs.last().expect("at least one iterate");
    let plan = Matrix::from_fn(n, m, |i, j| u[i] * kernel.get(i, j) * v[j]);
    let coupling = Coupling {
        plan,
        a: a.to_vec(),
        b: b.to_vec(),
        eps,
        iterations_used: iterations,
        converged,
    };
    let tape = SinkhornTape {
        eps,
        kernel,
        us,
        vs,
        kv,
        ktu,
        row_argmin,
        col_argmin,
    };
    Ok((coupling, tape))
}

impl SinkhornTape {
    pub fn iterations(&self) -> usize {
        self.us.len() - 1
    }

    /// Pulls `∂L/∂P` back to `∂L/∂C` through every recorded iteration.
    pub fn backward(&self, grad_plan: &Matrix) -> Matrix {
        let k = &self.kernel;
        let (n, m) = k.shape();
        assert_eq!(grad_plan.shape(), (n, m), "plan gradient shape");
        let t_last = self.iterations();
        let u = &self.us[t_last];
        let v = &self.vs[t_last];

        // grad_k accumulates ∂L/∂K; P = diag(u) K diag(v).
        let mut grad_k = Matrix::zeros(n, m);
        let mut gu = vec![0.0; n];
        let mut gv = vec![0.0; m];
        for i in 0..n {
            let krow = k.row(i);
            let grow = grad_plan.row(i);
            let gk = grad_k.row_mut(i);
            let mut acc = 0.0;
            for j in 0..m {
                let gp = grow[j];
                acc += gp * krow[j] * v[j];
                gv[j] += gp * u[i] * krow[j];
                gk[j] = gp * u[i] * v[j];
            }
            gu[i] = acc;
        }

        let degenerate = self.ktu[t_last].iter().all(|&w| w == 0.0);
        for t in (1..=t_last).rev() {
            let ut = &self.us[t];
            let vprev = &self.vs[t - 1];
            if !degenerate {
                // v^t = b / w, w = Kᵀ u^t
                let vt = &self.vs[t];
                let gw: Vec<f64> = (0..m)
                    .map(|j| -gv[j] * vt[j] / self.ktu[t][j])
                    .collect();
                for i in 0..n {
                    gu[i] += dot(k.row(i), &gw);
                    let ui = ut[i];
                    for (g, &gwj) in grad_k.row_mut(i).iter_mut().zip(&gw) {
                        *g += ui * gwj;
                    }
                }
            }
            // u^t = a / y, y = K v^{t−1}
            let gy: Vec<f64> = (0..n).map(|i| -gu[i] * ut[i] / self.kv[t][i]).collect();
            gv = transpose_matvec(k, &gy);
            for (i, &gyi) in gy.iter().enumerate() {
                for (g, &vj) in grad_k.row_mut(i).iter_mut().zip(vprev) {
                    *g += gyi * vj;
                }
            }
            gu.iter_mut().for_each(|g| *g = 0.0);
        }

        // K = exp(−C'/ε), C' = C − r_i − c_j
        let mut grad_shifted = Matrix::zeros(n, m);
        for ((g, &gk), &kv) in grad_shifted
            .data_mut()
            .iter_mut()
            .zip(grad_k.data())
            .zip(k.data())
        {
            *g = -gk * kv / self.eps;
        }
        let mut grad_cost = grad_shifted.clone();
        let mut grad_row = grad_shifted.row_sums();
        grad_row.iter_mut().for_each(|g| *g = -*g);
        let grad_col: Vec<f64> = grad_shifted.col_sums().into_iter().map(|g| -g).collect();
        for (j, &i) in self.col_argmin.iter().enumerate() {
            let cur = grad_cost.get(i, j);
            grad_cost.set(i, j, cur + grad_col[j]);
            grad_row[i] -= grad_col[j];
        }
        for (i, &j) in self.row_argmin.iter().enumerate() {
            let cur = grad_cost.get(i, j);
            grad_cost.set(i, j, cur + grad_row[i]);
        }
        grad_cost
    }
}

fn argmin(x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &v) in x.iter().enumerate() {
        if v < best.1 {
            best = (j, v);
        }
    }
    best
}

fn transpose_matvec(k: &Matrix, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; k.cols()];
    for (i, &ui) in u.iter().enumerate() {
        for (o, &kij) in out.iter_mut().zip(k.row(i)) {
            *o += ui * kij;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, SeededStream};
    use crate::ot::{sinkhorn, transport_cost, uniform};

    fn opts(eps: f64, max_iter: usize, tol: f64) -> SinkhornOptions {
        SinkhornOptions { eps, max_iter, tol }
    }

    #[test]
    fn agrees_with_log_domain_solver() {
        let mut rng = SeededStream::new(4);
        for _ in 0..20 {
            let n = rng.int_inclusive(1, 6);
            let m = rng.int_inclusive(1, 6);
            let c = CostMatrix::new(Matrix::from_fn(n, m, |_, _| 3.0 * rng.uniform())).unwrap();
            let (p, _) = sinkhorn_unrolled(&c, &uniform(n), &uniform(m), opts(0.1, 5000, 1e-13)).unwrap();
            let q = sinkhorn(&c, &uniform(n), &uniform(m), opts(0.1, 5000, 1e-13)).unwrap();
            assert!(p.converged);
            assert!(p.plan.max_abs_diff(&q.plan) < 1e-10);
        }
    }

    #[test]
    fn large_costs_do_not_underflow_the_kernel() {
        let c = CostMatrix::from_rows(&[[500.0, 900.0], [920.0, 510.0]]).unwrap();
        let (p, _) = sinkhorn_unrolled(&c, &uniform(2), &uniform(2), opts(0.1, 100, 1e-9)).unwrap();
        assert!(p.plan.is_finite());
        let (r, col) = p.marginal_residuals();
        assert!(r < 1e-9 && col < 1e-12);
    }

    #[test]
    fn cost_gradient_passes_finite_differences() {
        let mut rng = SeededStream::new(17);
        for trial in 0..5 {
            let n = 2 + trial % 3;
            let m = 3 + trial % 2;
            let a = uniform(n);
            let b = uniform(m);
            let mut cost = Matrix::from_fn(n, m, |_, _| rng.uniform());
            let o = opts(0.2, 30, 0.0);
            let (p, tape) = sinkhorn_unrolled(&CostMatrix::new(cost.clone()).unwrap(), &a, &b, o).unwrap();
            // d/dC of <C, P(C)> = P + (∂P/∂C)ᵀ C
            let mut grad = tape.backward(&cost);
            grad.add_scaled(1.0, &p.plan).unwrap();
            let report = grad_check(&mut cost, &grad, 1e-5, 1e-4, |c| {
                let cm = CostMatrix::new(c.clone()).unwrap();
                let (p, _) = sinkhorn_unrolled(&cm, &a, &b, o).unwrap();
                transport_cost(&cm, &p.plan).unwrap()
            })
            .unwrap();
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn weighted_plan_gradient_passes_finite_differences() {
        let mut rng = SeededStream::new(71);
        let (n, m) = (4, 3);
        let a = vec![0.1, 0.2, 0.3, 0.4];
        let b = vec![0.5, 0.25, 0.25];
        let weights = Matrix::from_fn(n, m, |_, _| rng.gaussian());
        let mut cost = Matrix::from_fn(n, m, |_, _| 2.0 * rng.uniform());
        let o = opts(0.3, 12, 0.0);
        let (_, tape) = sinkhorn_unrolled(&CostMatrix::new(cost.clone()).unwrap(), &a, &b, o).unwrap();
        let grad = tape.backward(&weights);
        let report = grad_check(&mut cost, &grad, 1e-5, 1e-4, |c| {
            let (p, _) = sinkhorn_unrolled(&CostMatrix::new(c.clone()).unwrap(), &a, &b, o).unwrap();
            p.plan.hadamard(&weights).unwrap().sum()
        })
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn early_stop_reports_iterations() {
        let c = CostMatrix::new(Matrix::zeros(3, 3)).unwrap();
        let (p, tape) = sinkhorn_unrolled(&c, &uniform(3), &uniform(3), opts(0.1, 100, 1e-6)).unwrap();
        assert!(p.converged);
        assert_eq!(p.iterations_used, 1);
        assert_eq!(tape.iterations(), 1);
    }
}
