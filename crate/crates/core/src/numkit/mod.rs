//! Dense linear algebra, activations, seeded initialization and a
//! finite-difference gradient checker.
//!
//! All arithmetic is carried out in `f64`. The only narrower width in the
//! crate is the `f32` storage of frame features on disk.

mod gradcheck;
mod matrix;
mod rng;

use std::collections::BTreeMap;

pub use gradcheck::{grad_check, GradCheckReport, ParamError};
pub use matrix::Matrix;
pub use rng::{init_uniform, Rng};

use crate::error::{Error, Result};

/// Named parameter matrices, iterated in name order.
pub type ParamSet = BTreeMap<String, Matrix>;

/// Logistic function, stable for large |x|.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

pub fn tanh_act(x: &Matrix) -> Matrix {
    x.map(f64::tanh)
}

/// Shift-stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log softmax(logits)[k]`, computed as `z_k - max - ln Σ exp(z - max)`.
pub fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits[k] - max - lse
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Global L2 norm over every matrix in the set.
pub fn global_norm(set: &ParamSet) -> f64 {
    set.values().map(Matrix::sum_squares).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn activation_fixed_points() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(0.0f64.tanh(), 0.0);
        assert!((sigmoid_scalar(1000.0) - 1.0).abs() < 1e-12);
        assert!(sigmoid_scalar(-1000.0) >= 0.0);
        let m = Matrix::from_rows(&[[-1000.0, 1000.0]]).unwrap();
        assert!(sigmoid(&m).is_finite());
        assert!(tanh_act(&m).is_finite());
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let p = softmax(&[2.5; 4]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let p = softmax(&[0.0, 3.0f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0; 5]), 0);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..20),
            shift in 0.0f64..100.0,
        ) {
            let p = softmax(&xs).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 || xs.iter().any(|&x| x < -40.0)));
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            prop_assert_eq!(argmax(&p), argmax(&q));
            let q7 = softmax(&xs.iter().map(|x| x + 7.0).collect::<Vec<_>>()).unwrap();
            for (a, b) in p.iter().zip(&q7) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn sigmoid_is_symmetric(x in -700.0f64..700.0) {
            prop_assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn log_softmax_matches_log_of_softmax(
            xs in proptest::collection::vec(-10.0f64..10.0, 1..10),
        ) {
            let p = softmax(&xs).unwrap();
            for k in 0..xs.len() {
                prop_assert!((log_softmax_at(&xs, k) - p[k].ln()).abs() < 1e-12);
            }
        }
    }
}
