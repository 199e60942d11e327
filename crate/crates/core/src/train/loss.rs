use crate::numeric::{log_sum_exp, softmax};

fn class_weight(label: u8, weights: [f64; 2]) -> f64 {
    if label == 1 {
        weights[0]
    } else {
        weights[1]
    }
}

/// `w_label · (−log softmax(logits)_label)` with `weights = [w_pos, w_neg]`.
pub fn weighted_ce(logits: &[f64], label: u8, weights: [f64; 2]) -> f64 {
    class_weight(label, weights) * (log_sum_exp(logits) - logits[label as usize])
}

/// Gradient of [`weighted_ce`] with respect to the logits.
pub fn weighted_ce_grad(logits: &[f64], label: u8, weights: [f64; 2]) -> Vec<f64> {
    let w = class_weight(label, weights);
    let mut g = softmax(logits);
    g[label as usize] -= 1.0;
    g.iter_mut().for_each(|v| *v *= w);
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert!((weighted_ce(&[0.0, 0.0], 1, [1.0, 1.0]) - ln2).abs() < 1e-15);
        assert!((weighted_ce(&[0.0, 0.0], 0, [1.2, 1.0]) - ln2).abs() < 1e-15);
        assert!((weighted_ce(&[0.0, 0.0], 1, [1.2, 1.0]) - 1.2 * ln2).abs() < 1e-15);
        assert!((weighted_ce(&[0.0, 0.0], 1, [1.2, 1.0]) - 0.83178).abs() < 1e-5);
    }

    #[test]
    fn stable_and_nonnegative_at_extremes() {
        for logits in [[800.0, -800.0], [-800.0, 800.0], [1e-3, 0.0]] {
            for label in [0, 1] {
                let l = weighted_ce(&logits, label, [1.0, 1.0]);
                assert!(l.is_finite() && l >= 0.0);
            }
        }
        assert_eq!(weighted_ce(&[-800.0, 800.0], 1, [1.0, 1.0]), 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-6;
        for (logits, label) in [([0.3, -1.1], 0u8), ([2.0, 0.5], 1), ([-4.0, 3.0], 0)] {
            let w = [1.2, 0.9];
            let g = weighted_ce_grad(&logits, label, w);
            for k in 0..2 {
                let mut p = logits;
                p[k] += h;
                let mut m = logits;
                m[k] -= h;
                let num = (weighted_ce(&p, label, w) - weighted_ce(&m, label, w)) / (2.0 * h);
                assert!((g[k] - num).abs() < 1e-6, "{} vs {}", g[k], num);
            }
        }
    }
}
