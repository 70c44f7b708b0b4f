//! One-dimensional Gauss rules used throughout the crate.

use nalgebra::{DMatrix, SymmetricEigen};
use std::f64::consts::PI;

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        dp = if d != 0.0 { d } else { dp };
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Gauss-Legendre rule mapped to [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let h = 0.5 * (b - a);
    let m = 0.5 * (b + a);
    (
        x.iter().map(|&t| m + h * t).collect(),
        w.iter().map(|&t| h * t).collect(),
    )
}

/// Gauss-Hermite rule for the standard normal density: sum_i w_i f(x_i) ~ E f(Z), Z ~ N(0, 1).
///
/// Nodes from the Golub-Welsch eigenproblem, polished by Newton steps on the
/// orthonormal Hermite recurrence; weights from the Christoffel function.
pub fn gauss_hermite_probabilists(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 1..n {
        let b = (j as f64).sqrt();
        jac[(j, j - 1)] = b;
        jac[(j - 1, j)] = b;
    }
    let mut x: Vec<f64> = SymmetricEigen::new(jac)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut w = vec![0.0; n];
    for (xi, wi) in x.iter_mut().zip(w.iter_mut()) {
        for _ in 0..8 {
            let p = orthonormal_hermite(n, *xi);
            let deriv = (n as f64).sqrt() * p[n - 1];
            if deriv == 0.0 {
                break;
            }
            let step = p[n] / deriv;
            *xi -= step;
            if step.abs() < 1e-15 * xi.abs().max(1.0) {
                break;
            }
        }
        let p = orthonormal_hermite(n, *xi);
        *wi = 1.0 / p[..n].iter().map(|v| v * v).sum::<f64>();
    }
    // symmetrize to remove Newton jitter
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let xs = 0.5 * (x[j] - x[i]);
        let ws = 0.5 * (w[i] + w[j]);
        x[i] = -xs;
        x[j] = xs;
        w[i] = ws;
        w[j] = ws;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    (x, w)
}

/// Values p_0..p_n of the orthonormal probabilists' Hermite polynomials at x.
fn orthonormal_hermite(n: usize, x: f64) -> Vec<f64> {
    let mut p = vec![0.0; n + 1];
    p[0] = 1.0;
    if n >= 1 {
        p[1] = x;
    }
    for j in 1..n {
        p[j + 1] = (x * p[j] - (j as f64).sqrt() * p[j - 1]) / ((j + 1) as f64).sqrt();
    }
    p
}

/// Barycentric weights for Lagrange interpolation on the given nodes.
pub fn barycentric_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut lw = vec![0.0; n];
    let mut sign = vec![1.0; n];
    for j in 0..n {
        let mut s = 0.0;
        for k in 0..n {
            if k != j {
                let d = x[j] - x[k];
                s += d.abs().ln();
                if d < 0.0 {
                    sign[j] = -sign[j];
                }
            }
        }
        lw[j] = -s;
    }
    let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    lw.iter()
        .zip(&sign)
        .map(|(l, s)| s * (l - m).exp())
        .collect()
}

/// Differentiation matrix of the polynomial interpolant: (D f)_i = p'(x_i).
pub fn lagrange_differentiation_matrix(x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let bw = barycentric_weights(x);
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i != j {
                let v = (bw[j] / bw[i]) / (x[i] - x[j]);
                d[(i, j)] = v;
                diag -= v;
            }
        }
        d[(i, i)] = diag;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(6);
        let int: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert!((int - 2.0 / 11.0).abs() < 1e-14);
        let (x, w) = gauss_legendre(7);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        assert!(x[3].abs() < 1e-15);
    }

    #[test]
    fn hermite_reproduces_normal_moments() {
        let (x, w) = gauss_hermite_probabilists(10);
        let m = |p: i32| -> f64 { x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum() };
        assert!((m(0) - 1.0).abs() < 1e-14);
        assert!((m(2) - 1.0).abs() < 1e-13);
        assert!((m(4) - 3.0).abs() < 1e-12);
        assert!((m(8) - 105.0).abs() < 1e-10);
        assert!(m(5).abs() < 1e-12);
    }

    #[test]
    fn differentiation_matrix_is_exact_on_polynomials() {
        let (x, _) = gauss_hermite_probabilists(8);
        let d = lagrange_differentiation_matrix(&x);
        for i in 0..8 {
            let v: f64 = (0..8).map(|j| d[(i, j)] * x[j].powi(5)).sum();
            assert!((v - 5.0 * x[i].powi(4)).abs() < 1e-9 * (1.0 + x[i].powi(4)));
        }
    }
}
