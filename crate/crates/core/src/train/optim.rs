use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::numeric::{Matrix, ParamSet};

/// First and second moment estimates, one pair of matrices per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new<P: ParamSet>(params: &P) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One decoupled-weight-decay Adam update at 1-based step `t`:
///
/// `θ ← θ(1 − lr·λ)`, then `θ ← θ − lr · m̂ / (√v̂ + ε)` with bias-corrected
/// moments. The whole step is rejected if any gradient is non-finite.
pub fn optimizer_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    hyper: AdamHyper,
    lr: f64,
    t: u64,
) -> Result<(), TrainError> {
    let names = grads.names();
    let grads = grads.tensors();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            param: names[i].clone(),
        });
    }
    let t = t.max(1) as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let decay = 1.0 - lr * hyper.weight_decay;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for k in 0..p.len() {
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] = p[k] * decay - lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Linear warmup to `base` over `warmup` steps, then `base · (1 − rate)`
/// per completed `every` steps.
pub fn lr_at(step: u64, base: f64, warmup: u64, rate: f64, every: u64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    base * (1.0 - rate).powi((step / every.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HYPER: AdamHyper = AdamHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };

    #[test]
    fn zero_gradient_fixed_point() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0]]);
        let g = Matrix::zeros(1, 2);
        let mut s = AdamState::new(&p);
        optimizer_step(&mut p, &g, &mut s, HYPER, 0.005, 1).unwrap();
        assert_eq!(p, Matrix::from_rows(&[[1.0, -2.0]]));
    }

    #[test]
    fn decoupled_decay_closed_form() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0]]);
        let g = Matrix::zeros(1, 2);
        let mut s = AdamState::new(&p);
        let hyper = AdamHyper {
            weight_decay: 0.01,
            ..HYPER
        };
        optimizer_step(&mut p, &g, &mut s, hyper, 0.005, 1).unwrap();
        assert_eq!(p.get(0, 0), 1.0 - 5e-5);
        assert_eq!(p.get(0, 1), -2.0 * (1.0 - 5e-5));
    }

    #[test]
    fn five_step_hand_trajectory() {
        // f(x) = x², x0 = 1, lr 0.1, λ 0.01; each line mirrors the update by hand
        let mut x = Matrix::from_rows(&[[1.0]]);
        let mut s = AdamState::new(&x);
        let hyper = AdamHyper {
            weight_decay: 0.01,
            ..HYPER
        };
        let (mut xr, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=5u64 {
            let g = 2.0 * xr;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            xr = xr * (1.0 - 0.1 * 0.01) - 0.1 * mh / (vh.sqrt() + 1e-8);
            let grad = Matrix::from_rows(&[[2.0 * x.get(0, 0)]]);
            optimizer_step(&mut x, &grad, &mut s, hyper, 0.1, t).unwrap();
            assert!((x.get(0, 0) - xr).abs() < 1e-15);
        }
        // first Adam steps move by ≈ lr each: 1 → ≈ 0.5
        assert!((xr - 0.5).abs() < 0.01, "{xr}");
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = Matrix::from_rows(&[[1.0]]);
        let mut s = AdamState::new(&p);
        let err = optimizer_step(&mut p, &Matrix::from_rows(&[[f64::NAN]]), &mut s, HYPER, 0.1, 1);
        assert!(matches!(err, Err(TrainError::NonFiniteGradient { .. })));
        assert_eq!(p.get(0, 0), 1.0);
        assert_eq!(s.m[0].get(0, 0), 0.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x) = ½ Σ c_i (x_i − t_i)², optimum 0
        let c: Vec<f64> = (0..10).map(|i| 0.5 + i as f64 * 0.3).collect();
        let target: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) * 0.4).collect();
        let f = |x: &Matrix| -> f64 {
            (0..10).map(|i| 0.5 * c[i] * (x.get(0, i) - target[i]).powi(2)).sum()
        };
        let mut x = Matrix::zeros(1, 10);
        let mut s = AdamState::new(&x);
        for t in 1..=500u64 {
            let g = Matrix::from_fn(1, 10, |_, i| c[i] * (x.get(0, i) - target[i]));
            let lr = 0.1 * (1.0 - (t - 1) as f64 / 500.0);
            optimizer_step(&mut x, &g, &mut s, HYPER, lr, t).unwrap();
        }
        assert!(f(&x) <= 1e-4, "{}", f(&x));
    }

    #[test]
    fn schedule_points() {
        let lr = |s| lr_at(s, 0.005, 2000, 1e-4, 10_000);
        assert_eq!(lr(0), 0.0);
        assert_eq!(lr(1000), 0.0025);
        assert_eq!(lr(2000), 0.005);
        assert_eq!(lr(9_999), 0.005);
        assert!((lr(25_000) - 0.005 * (1.0 - 1e-4f64).powi(2)).abs() < 1e-18);
        assert!((lr(25_000) - 0.004999).abs() < 1e-6);
    }
}
