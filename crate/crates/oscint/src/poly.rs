//! Sparse multivariate polynomials with real coefficients.
//!
//! Exponent vectors are kept short (ambient dimensions here are tiny), and
//! the JSON form maps comma-separated exponent tuples to coefficients, e.g.
//! `{"1,0,1": -1.0, "0,1,0": 256.0}` for `256*x2 - x1*x3`.

use std::collections::BTreeMap;

use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    pub nvars: usize,
    /// Sorted, deduplicated terms: exponent vector -> coefficient.
    terms: BTreeMap<Vec<u32>, f64>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(&vec![0; nvars], c);
        p
    }

    /// The monomial `x_i` (0-based).
    pub fn var(nvars: usize, i: usize) -> Self {
        let mut e = vec![0u32; nvars];
        e[i] = 1;
        let mut p = Self::zero(nvars);
        p.add_term(&e, 1.0);
        p
    }

    pub fn add_term(&mut self, exps: &[u32], coeff: f64) {
        assert_eq!(exps.len(), self.nvars, "exponent arity mismatch");
        if coeff == 0.0 {
            return;
        }
        let entry = self.terms.entry(exps.to_vec()).or_insert(0.0);
        *entry += coeff;
        if *entry == 0.0 {
            self.terms.remove(exps);
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Vec<u32>, &f64)> {
        self.terms.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|e| e.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.nvars);
        let mut acc = 0.0;
        for (exps, &c) in &self.terms {
            let mut m = c;
            for (xi, &e) in x.iter().zip(exps.iter()) {
                match e {
                    0 => {}
                    1 => m *= xi,
                    2 => m *= xi * xi,
                    _ => m *= xi.powi(e as i32),
                }
            }
            acc += m;
        }
        acc
    }

    /// Partial derivative with respect to variable `i`.
    pub fn derivative(&self, i: usize) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (exps, &c) in &self.terms {
            let e = exps[i];
            if e == 0 {
                continue;
            }
            let mut de = exps.clone();
            de[i] = e - 1;
            out.add_term(&de, c * e as f64);
        }
        out
    }

    pub fn gradient(&self) -> Vec<Poly> {
        (0..self.nvars).map(|i| self.derivative(i)).collect()
    }

    pub fn grad_at(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nvars).map(|i| self.derivative(i).eval(x)).collect()
    }

    pub fn scale(&self, s: f64) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (e, &c) in &self.terms {
            out.add_term(e, c * s);
        }
        out
    }

    pub fn add(&self, other: &Poly) -> Poly {
        assert_eq!(self.nvars, other.nvars);
        let mut out = self.clone();
        for (e, &c) in &other.terms {
            out.add_term(e, c);
        }
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        assert_eq!(self.nvars, other.nvars);
        let mut out = Poly::zero(self.nvars);
        for (ea, &ca) in &self.terms {
            for (eb, &cb) in &other.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(&e, ca * cb);
            }
        }
        out
    }

    /// Largest coefficient magnitude (0 for the zero polynomial).
    pub fn coeff_scale(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// All monomial exponent vectors of total degree <= d in `nvars`
    /// variables, in lexicographic order.  Used for Veronese-style lifts.
    pub fn monomials_up_to(nvars: usize, d: u32) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut cur = vec![0u32; nvars];
        fn rec(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, i: usize, left: u32) {
            if i == cur.len() {
                out.push(cur.clone());
                return;
            }
            for e in 0..=left {
                cur[i] = e;
                rec(out, cur, i + 1, left - e);
            }
            cur[i] = 0;
        }
        rec(&mut out, &mut cur, 0, d);
        out.sort();
        out.dedup();
        out
    }

    /// Build a polynomial from a monomial list and coefficient vector.
    pub fn from_coeffs(nvars: usize, monomials: &[Vec<u32>], coeffs: &[f64]) -> Poly {
        assert_eq!(monomials.len(), coeffs.len());
        let mut p = Poly::zero(nvars);
        for (m, &c) in monomials.iter().zip(coeffs) {
            p.add_term(m, c);
        }
        p
    }
}

/// Vector-valued polynomial curve `t -> (c_0(t), ..., c_{m-1}(t))` given by
/// power-basis coefficients per component, on a parameter interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyCurve {
    /// `coeffs[i][k]` multiplies `t^k` in component `i`.
    pub coeffs: Vec<Vec<f64>>,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl PolyCurve {
    pub fn new(coeffs: Vec<Vec<f64>>, t_lo: f64, t_hi: f64) -> Self {
        Self { coeffs, t_lo, t_hi }
    }

    /// Ambient dimension (number of components).
    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    /// Largest power of `t` carried by any component.
    pub fn degree(&self) -> usize {
        self.coeffs
            .iter()
            .map(|c| c.len().saturating_sub(1))
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.coeffs
            .iter()
            .map(|c| c.iter().rev().fold(0.0, |acc, &a| acc * t + a))
            .collect()
    }

    /// Derivative in `t` (the tangent, not normalized).
    pub fn velocity(&self, t: f64) -> Vec<f64> {
        self.coeffs
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .skip(1)
                    .rev()
                    .fold(0.0, |acc, (k, &a)| acc * t + k as f64 * a)
            })
            .collect()
    }
}

impl Serialize for Poly {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<String, f64> = self
            .terms
            .iter()
            .map(|(e, &c)| {
                let key = e
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                (key, c)
            })
            .collect();
        #[derive(Serialize)]
        struct Repr {
            nvars: usize,
            coefficients: BTreeMap<String, f64>,
        }
        Repr {
            nvars: self.nvars,
            coefficients: map,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Poly {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            nvars: usize,
            coefficients: BTreeMap<String, f64>,
        }
        let repr = Repr::deserialize(deserializer)?;
        let mut p = Poly::zero(repr.nvars);
        for (key, c) in repr.coefficients {
            let exps: std::result::Result<Vec<u32>, _> =
                key.split(',').map(|s| s.trim().parse::<u32>()).collect();
            let exps = exps.map_err(|e| D::Error::custom(format!("bad exponent key: {e}")))?;
            if exps.len() != repr.nvars {
                return Err(D::Error::custom(format!(
                    "exponent key '{key}' has arity {} but nvars = {}",
                    exps.len(),
                    repr.nvars
                )));
            }
            p.add_term(&exps, c);
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample() -> Poly {
        // 256*x2 - x1*x3 in three variables (0-based: 256*x[1] - x[0]*x[2])
        let mut p = Poly::zero(3);
        p.add_term(&[0, 1, 0], 256.0);
        p.add_term(&[1, 0, 1], -1.0);
        p
    }

    #[test]
    fn eval_and_grad() {
        let p = sample();
        let x = [2.0, 3.0, 5.0];
        assert_relative_eq!(p.eval(&x), 256.0 * 3.0 - 10.0);
        let g = p.grad_at(&x);
        assert_relative_eq!(g[0], -5.0);
        assert_relative_eq!(g[1], 256.0);
        assert_relative_eq!(g[2], -2.0);
        assert_eq!(p.degree(), 2);
    }

    #[test]
    fn product_degree_and_eval() {
        let p = sample();
        let q = Poly::var(3, 0);
        let pq = p.mul(&q);
        let x = [1.5, -2.0, 0.5];
        assert_relative_eq!(pq.eval(&x), p.eval(&x) * q.eval(&x), epsilon = 1e-12);
        assert_eq!(pq.degree(), 3);
    }

    #[test]
    fn cancellation_removes_terms() {
        let mut p = sample();
        p.add_term(&[0, 1, 0], -256.0);
        assert_eq!(p.terms().count(), 1);
    }

    #[test]
    fn monomial_counts() {
        // #monomials of degree <= d in k variables is C(k+d, d).
        assert_eq!(Poly::monomials_up_to(2, 3).len(), 10);
        assert_eq!(Poly::monomials_up_to(3, 2).len(), 10);
        assert_eq!(Poly::monomials_up_to(1, 5).len(), 6);
    }

    #[test]
    fn curve_eval_and_velocity() {
        // (t^2 - 1, 3t) on [0, 2]
        let c = PolyCurve::new(vec![vec![-1.0, 0.0, 1.0], vec![0.0, 3.0]], 0.0, 2.0);
        assert_eq!(c.dim(), 2);
        assert_eq!(c.degree(), 2);
        let p = c.eval(1.5);
        assert_relative_eq!(p[0], 1.25);
        assert_relative_eq!(p[1], 4.5);
        let v = c.velocity(1.5);
        assert_relative_eq!(v[0], 3.0);
        assert_relative_eq!(v[1], 3.0);
    }

    #[test]
    fn json_roundtrip() {
        let p = sample();
        let s = serde_json::to_string(&p).unwrap();
        let q: Poly = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
        // key format is the comma-joined exponent tuple
        assert!(s.contains("\"0,1,0\""));
    }
}
