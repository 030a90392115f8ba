#![allow(dead_code)]

use vidcap::numkit::{Matrix, Rng};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|k| {
            work[k] = x[k] + eps;
            let up = f(&work);
            work[k] = x[k] - eps;
            let down = f(&work);
            work[k] = x[k];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    assert_eq!(a.len(), n.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    diff / norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied())).max(1e-8)
}

pub fn random_rows(rng: &mut Rng, t: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..t).map(|_| (0..d).map(|_| rng.uniform(scale)).collect()).collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}
