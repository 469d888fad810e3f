//! Closed-form builtin phases and their exact derivatives.

use nalgebra::{DMatrix, DVector};

use super::UnitPhase;

/// Which time-dependent quadratic form drives a [`QuadraticOverLinear`] phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QolKind {
    /// `A(t) = t * I`, the translation-invariant model.
    Model,
    /// Block-coupled twist: 2x2 blocks `[[t, t^2], [t^2, t + t^3]]` along the
    /// diagonal, with a scalar tail block `(t)` when n-2 is odd.
    Twisted,
}

/// Phases of the form `phi(x; w) = <x', w> + <A(x_n) w', w'> / (2 w_{n-1})`.
///
/// This covers the parabolic-cone model (`A(t) = t I`) and the twisted
/// variant whose operator compresses wave packets onto low-degree varieties.
/// The form is positively 1-homogeneous in `w` (quadratic over linear) and
/// linear in `x'`, so `d phi / dx' = w` exactly.
#[derive(Debug, Clone)]
pub struct QuadraticOverLinear {
    n: usize,
    kind: QolKind,
}

impl QuadraticOverLinear {
    pub fn model(n: usize) -> Self {
        assert!(n >= 3);
        Self {
            n,
            kind: QolKind::Model,
        }
    }

    pub fn kakeya(n: usize) -> Self {
        assert!(n >= 4);
        Self {
            n,
            kind: QolKind::Twisted,
        }
    }

    /// The (n-2) x (n-2) matrix `A(t)`.
    pub fn a_matrix(&self, t: f64) -> DMatrix<f64> {
        let m = self.n - 2;
        match self.kind {
            QolKind::Model => DMatrix::identity(m, m) * t,
            QolKind::Twisted => {
                let mut a = DMatrix::zeros(m, m);
                let pairs = m / 2;
                for k in 0..pairs {
                    let i = 2 * k;
                    a[(i, i)] = t;
                    a[(i, i + 1)] = t * t;
                    a[(i + 1, i)] = t * t;
                    a[(i + 1, i + 1)] = t + t * t * t;
                }
                if m % 2 == 1 {
                    a[(m - 1, m - 1)] = t;
                }
                a
            }
        }
    }

    /// `A'(t)`.
    pub fn a_matrix_dt(&self, t: f64) -> DMatrix<f64> {
        let m = self.n - 2;
        match self.kind {
            QolKind::Model => DMatrix::identity(m, m),
            QolKind::Twisted => {
                let mut a = DMatrix::zeros(m, m);
                let pairs = m / 2;
                for k in 0..pairs {
                    let i = 2 * k;
                    a[(i, i)] = 1.0;
                    a[(i, i + 1)] = 2.0 * t;
                    a[(i + 1, i)] = 2.0 * t;
                    a[(i + 1, i + 1)] = 1.0 + 3.0 * t * t;
                }
                if m % 2 == 1 {
                    a[(m - 1, m - 1)] = 1.0;
                }
                a
            }
        }
    }
}

impl UnitPhase for QuadraticOverLinear {
    fn n(&self) -> usize {
        self.n
    }

    fn value(&self, x: &[f64], w: &[f64]) -> f64 {
        let n = self.n;
        let wn = w[n - 2];
        let wp = DVector::from_column_slice(&w[..n - 2]);
        let a = self.a_matrix(x[n - 1]);
        let lin: f64 = x[..n - 1].iter().zip(w).map(|(xi, wi)| xi * wi).sum();
        lin + (&a * &wp).dot(&wp) / (2.0 * wn)
    }

    fn grad_x(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let n = self.n;
        let wn = w[n - 2];
        let wp = DVector::from_column_slice(&w[..n - 2]);
        let adt = self.a_matrix_dt(x[n - 1]);
        let mut g = Vec::with_capacity(n);
        g.extend_from_slice(w);
        g.push((&adt * &wp).dot(&wp) / (2.0 * wn));
        g
    }

    fn grad_w(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let n = self.n;
        let wn = w[n - 2];
        let wp = DVector::from_column_slice(&w[..n - 2]);
        let a = self.a_matrix(x[n - 1]);
        let aw = &a * &wp;
        let q = aw.dot(&wp);
        let mut g = Vec::with_capacity(n - 1);
        for i in 0..n - 2 {
            g.push(x[i] + aw[i] / wn);
        }
        g.push(x[n - 2] - q / (2.0 * wn * wn));
        g
    }

    fn hess_xw(&self, x: &[f64], w: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let wn = w[n - 2];
        let wp = DVector::from_column_slice(&w[..n - 2]);
        let adt = self.a_matrix_dt(x[n - 1]);
        let adtw = &adt * &wp;
        let mut h = DMatrix::zeros(n, n - 1);
        for i in 0..n - 1 {
            h[(i, i)] = 1.0;
        }
        for j in 0..n - 2 {
            h[(n - 1, j)] = adtw[j] / wn;
        }
        h[(n - 1, n - 2)] = -adtw.dot(&wp) / (2.0 * wn * wn);
        h
    }

    fn hess_ww(&self, x: &[f64], w: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let wn = w[n - 2];
        let wp = DVector::from_column_slice(&w[..n - 2]);
        let a = self.a_matrix(x[n - 1]);
        let aw = &a * &wp;
        let q = aw.dot(&wp);
        let mut h = DMatrix::zeros(n - 1, n - 1);
        for i in 0..n - 2 {
            for j in 0..n - 2 {
                h[(i, j)] = a[(i, j)] / wn;
            }
            h[(i, n - 2)] = -aw[i] / (wn * wn);
            h[(n - 2, i)] = -aw[i] / (wn * wn);
        }
        h[(n - 2, n - 2)] = q / (wn * wn * wn);
        h
    }
}

/// `phi(x; w) = <x', w> + x_n |w|`, the cone over the sphere.
#[derive(Debug, Clone)]
pub struct CircularCone {
    pub n: usize,
}

impl UnitPhase for CircularCone {
    fn n(&self) -> usize {
        self.n
    }

    fn value(&self, x: &[f64], w: &[f64]) -> f64 {
        let r: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let lin: f64 = x[..self.n - 1].iter().zip(w).map(|(a, b)| a * b).sum();
        lin + x[self.n - 1] * r
    }

    fn grad_x(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let _ = x;
        let r: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut g = Vec::with_capacity(self.n);
        g.extend_from_slice(w);
        g.push(r);
        g
    }

    fn grad_w(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let r: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let t = x[self.n - 1];
        x[..self.n - 1]
            .iter()
            .zip(w)
            .map(|(&xi, &wi)| xi + t * wi / r)
            .collect()
    }

    fn hess_xw(&self, x: &[f64], w: &[f64]) -> DMatrix<f64> {
        let _ = x;
        let n = self.n;
        let r: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut h = DMatrix::zeros(n, n - 1);
        for i in 0..n - 1 {
            h[(i, i)] = 1.0;
        }
        for j in 0..n - 1 {
            h[(n - 1, j)] = w[j] / r;
        }
        h
    }

    fn hess_ww(&self, x: &[f64], w: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let r2: f64 = w.iter().map(|v| v * v).sum();
        let r = r2.sqrt();
        let t = x[n - 1];
        DMatrix::from_fn(n - 1, n - 1, |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            t * (delta - w[i] * w[j] / r2) / r
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{fd_jacobian, PhaseField};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let mut w: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-0.3..0.3)).collect();
        w[n - 2] = rng.gen_range(0.6..1.8);
        (x, w)
    }

    /// Every closed-form derivative must agree with finite differences of
    /// the value.  This is the independent oracle for the builtin algebra.
    #[test]
    fn closed_forms_match_finite_differences() {
        let phases: Vec<(&str, usize)> = vec![
            ("model_parabolic_cone", 3),
            ("model_parabolic_cone", 4),
            ("circular_cone", 3),
            ("circular_cone", 4),
            ("kakeya", 4),
            ("kakeya", 5),
            ("kakeya", 6),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (name, n) in phases {
            let ph = PhaseField::builtin(name, n, 1.0).unwrap();
            for _ in 0..8 {
                let (x, w) = random_point(&mut rng, n);
                // grad_x vs FD over x
                let gx = ph.grad_x_unit(&x, &w);
                let fdx = fd_jacobian(|xp| vec![ph.value_unit(xp, &w)], &x, 1, 1e-5);
                for i in 0..n {
                    assert!(
                        (gx[i] - fdx[(0, i)]).abs() < 1e-7,
                        "{name} n={n} grad_x[{i}]: {} vs {}",
                        gx[i],
                        fdx[(0, i)]
                    );
                }
                // grad_w vs FD over w
                let gw = ph.grad_w_unit(&x, &w);
                let fdw = fd_jacobian(|wp| vec![ph.value_unit(&x, wp)], &w, 1, 1e-5);
                for j in 0..n - 1 {
                    assert!(
                        (gw[j] - fdw[(0, j)]).abs() < 1e-7,
                        "{name} grad_w[{j}]"
                    );
                }
                // hess_xw vs FD of grad_x over w
                let hxw = ph.hess_xw_unit(&x, &w);
                let fdh = fd_jacobian(|wp| ph.grad_x_unit(&x, wp), &w, n, 1e-5);
                assert!((hxw - fdh).norm() < 1e-6, "{name} hess_xw");
                // hess_ww vs FD of grad_w over w
                let hww = ph.hess_ww_unit(&x, &w);
                let fdww = fd_jacobian(|wp| ph.grad_w_unit(&x, wp), &w, n - 1, 1e-5);
                assert!((hww - fdww).norm() < 1e-6, "{name} hess_ww");
            }
        }
    }

    #[test]
    fn twist_matrix_determinant() {
        // For n = 4 the derivative block is [[1, 2t], [2t, 1 + 3t^2]] with
        // determinant 1 - t^2, positive for |t| < 1 (frozen from the 2x2
        // determinant oracle: (1)(1 + 3t^2) - 4t^2).
        let q = QuadraticOverLinear::kakeya(4);
        for &t in &[0.0, 0.25, 0.5, 0.9] {
            let adt = q.a_matrix_dt(t);
            let det = adt[(0, 0)] * adt[(1, 1)] - adt[(0, 1)] * adt[(1, 0)];
            assert!((det - (1.0 - t * t)).abs() < 1e-14);
            assert!(det > 0.0);
        }
        // A(1/2) determinant for n = 4: t*(t + t^3) - t^4 = t^2 = 1/4.
        let a = q.a_matrix(0.5);
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        assert!((det - 0.25).abs() < 1e-14);
    }

    #[test]
    fn model_is_twisted_a_with_identity() {
        // The model and the twist agree in their scalar tail structure: for
        // n = 5 the twist matrix has one 2x2 block plus the scalar tail t.
        let q = QuadraticOverLinear::kakeya(5);
        let a = q.a_matrix(0.3);
        assert_eq!(a.nrows(), 3);
        assert!((a[(2, 2)] - 0.3).abs() < 1e-15);
        assert_eq!(a[(2, 0)], 0.0);
        assert_eq!(a[(0, 2)], 0.0);
    }
}
