//! Central-difference gradient checking.

use serde::Serialize;

use super::Matrix;
use crate::error::NumericError;

/// A named, ordered collection of trainable matrices.
///
/// Implementors must return tensors in the same order from every method so
/// that gradients and parameters can be zipped positionally.
pub trait ParamSet {
    fn names(&self) -> Vec<String>;
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;
}

impl ParamSet for Vec<Matrix> {
    fn names(&self) -> Vec<String> {
        (0..self.len()).map(|i| format!("param{i}")).collect()
    }
    fn tensors(&self) -> Vec<&Matrix> {
        self.iter().collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.iter_mut().collect()
    }
}

impl ParamSet for Matrix {
    fn names(&self) -> Vec<String> {
        vec!["x".to_string()]
    }
    fn tensors(&self) -> Vec<&Matrix> {
        vec![self]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![self]
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamError {
    pub name: String,
    pub max_relative_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamError>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamError> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(p+h) − f(p−h)) / 2h` for every
/// coordinate of every tensor in `params`.
///
/// `params` is restored to its original values before returning.
pub fn grad_check<P, F>(
    params: &mut P,
    analytic: &P,
    h: f64,
    tol: f64,
    mut f: F,
) -> Result<GradCheckReport, NumericError>
where
    P: ParamSet,
    F: FnMut(&P) -> f64,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NumericError::BadStep(h));
    }
    let names = params.names();
    let grads: Vec<Matrix> = analytic.tensors().into_iter().cloned().collect();
    let n_tensors = params.tensors().len();
    if grads.len() != n_tensors {
        return Err(NumericError::GradientLayout(format!(
            "{} parameters vs {} gradients",
            n_tensors,
            grads.len()
        )));
    }
    let mut per_param = Vec::with_capacity(n_tensors);
    for (t, grad) in grads.iter().enumerate() {
        let len = params.tensors()[t].len();
        if grad.len() != len {
            return Err(NumericError::GradientLayout(format!(
                "{}: {} entries vs {} gradient entries",
                names[t],
                len,
                grad.len()
            )));
        }
        let mut worst = ParamError {
            name: names[t].clone(),
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in 0..len {
            let original = params.tensors()[t].data()[idx];
            params.tensors_mut()[t].data_mut()[idx] = original + h;
            let plus = f(params);
            params.tensors_mut()[t].data_mut()[idx] = original - h;
            let minus = f(params);
            params.tensors_mut()[t].data_mut()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericError::NonFiniteProbe {
                    param: names[t].clone(),
                    index: idx,
                });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[idx];
            let err = relative_error(a, numeric);
            if err > worst.max_relative_error {
                worst = ParamError {
                    name: names[t].clone(),
                    max_relative_error: err,
                    worst_index: idx,
                    analytic: a,
                    numeric,
                };
            }
        }
        per_param.push(worst);
    }
    let max_relative_error = per_param
        .iter()
        .map(|p| p.max_relative_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_relative_error,
        tolerance: tol,
        pass: max_relative_error <= tol,
    })
}
