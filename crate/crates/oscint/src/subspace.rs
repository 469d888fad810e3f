//! Linear subspaces of R^n with orthonormal bases and angle computations.

use nalgebra::{DMatrix, DVector};

use crate::error::{OscError, Result};

/// A linear subspace of R^n stored as an orthonormal basis (columns).
#[derive(Debug, Clone)]
pub struct Subspace {
    /// `ambient x dim` matrix with orthonormal columns.
    basis: DMatrix<f64>,
}

impl Subspace {
    /// Build a subspace from spanning vectors (columns need not be
    /// orthonormal or independent; the span is orthonormalized and
    /// rank-reduced via SVD).
    pub fn from_span(ambient: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        if vectors.is_empty() {
            return Err(OscError::DegenerateConfiguration(
                "subspace needs at least one spanning vector".into(),
            ));
        }
        for v in vectors {
            if v.len() != ambient {
                return Err(OscError::Inconsistent(format!(
                    "spanning vector has length {}, ambient is {}",
                    v.len(),
                    ambient
                )));
            }
        }
        let m = DMatrix::from_fn(ambient, vectors.len(), |i, j| vectors[j][i]);
        Self::from_matrix_span(m)
    }

    /// Build from the column span of a matrix.
    ///
    /// Rank decisions use a Householder QR with column pivoting.  The
    /// iterative SVD can misconverge on matrices whose singular values
    /// repeat -- orthogonal projectors being the prime example -- so basis
    /// extraction must not rely on it.
    pub fn from_matrix_span(m: DMatrix<f64>) -> Result<Self> {
        let ambient = m.nrows();
        let qr = m.col_piv_qr();
        let r = qr.r();
        let q = qr.q();
        let kmax = r.nrows().min(r.ncols());
        let rmax = (0..kmax).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        if rmax == 0.0 {
            return Err(OscError::DegenerateConfiguration(
                "zero span has no subspace".into(),
            ));
        }
        let tol = 1e-12 * rmax * (ambient as f64);
        let mut rank = 0;
        while rank < kmax && r[(rank, rank)].abs() > tol {
            rank += 1;
        }
        if rank == 0 {
            return Err(OscError::DegenerateConfiguration(
                "span is numerically zero".into(),
            ));
        }
        let basis = q.columns(0, rank).into_owned();
        Ok(Self { basis })
    }

    /// The full space R^n.
    pub fn full(ambient: usize) -> Self {
        Self {
            basis: DMatrix::identity(ambient, ambient),
        }
    }

    /// Subspace spanned by a subset of coordinate axes.
    pub fn coordinate(ambient: usize, axes: &[usize]) -> Result<Self> {
        let vs: Vec<Vec<f64>> = axes
            .iter()
            .map(|&a| {
                let mut v = vec![0.0; ambient];
                v[a] = 1.0;
                v
            })
            .collect();
        Self::from_span(ambient, &vs)
    }

    pub fn ambient(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Orthogonal complement within the ambient space.
    pub fn orthogonal_complement(&self) -> Result<Self> {
        let n = self.ambient();
        let k = self.dim();
        if k >= n {
            return Err(OscError::DegenerateConfiguration(
                "orthogonal complement of the full space is trivial".into(),
            ));
        }
        // Columns of (I - QQ^T) span the complement; orthonormalize them.
        let q = &self.basis;
        let proj = DMatrix::identity(n, n) - q * q.transpose();
        Self::from_matrix_span(proj)
    }

    /// Orthogonal projection of a vector onto the subspace.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(v);
        let coeffs = self.basis.transpose() * &x;
        let p = &self.basis * coeffs;
        p.iter().cloned().collect()
    }

    /// Angle between a nonzero vector and the subspace: the smallest angle
    /// between `v` and any nonzero element of the subspace, in [0, pi/2].
    pub fn angle_to_vector(&self, v: &[f64]) -> f64 {
        let x = DVector::from_column_slice(v);
        let norm = x.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let c = (self.basis.transpose() * &x).norm() / norm;
        c.clamp(-1.0, 1.0).acos()
    }

    /// Cosines of the principal angles, descending: the singular values of
    /// `Qa^T Qb`, computed as eigenvalue square roots of the small Gram
    /// matrix.  (Coincident spans make the singular values repeat, where
    /// the iterative SVD loses accuracy; the symmetric eigensolver does
    /// not.)
    fn principal_cosines(&self, other: &Subspace) -> Vec<f64> {
        let m = self.basis.transpose() * other.basis();
        let gram = if m.nrows() <= m.ncols() {
            &m * m.transpose()
        } else {
            m.transpose() * &m
        };
        let mut cos: Vec<f64> = gram
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|&l| l.max(0.0).sqrt().clamp(0.0, 1.0))
            .collect();
        cos.sort_by(|a, b| b.partial_cmp(a).unwrap());
        cos
    }

    /// Smallest principal angle between two subspaces: the minimum over
    /// nonzero `v` and `w` in them of the angle between `v` and `w`.
    /// Equals `arccos` of the largest singular value of `Qa^T Qb`.
    pub fn min_principal_angle(&self, other: &Subspace) -> Result<f64> {
        if self.ambient() != other.ambient() {
            return Err(OscError::Inconsistent(
                "principal angles need a common ambient space".into(),
            ));
        }
        let smax = self.principal_cosines(other).into_iter().fold(0.0, f64::max);
        Ok(smax.acos())
    }

    /// All principal angles (ascending), length `min(dim_a, dim_b)`.
    pub fn principal_angles(&self, other: &Subspace) -> Result<Vec<f64>> {
        if self.ambient() != other.ambient() {
            return Err(OscError::Inconsistent(
                "principal angles need a common ambient space".into(),
            ));
        }
        Ok(self
            .principal_cosines(other)
            .into_iter()
            .map(f64::acos)
            .collect())
    }

    /// Whether two subspaces are equal as sets (all principal angles ~ 0 and
    /// equal dimension), with angular tolerance `tol` in radians.
    pub fn coincides_with(&self, other: &Subspace, tol: f64) -> bool {
        if self.dim() != other.dim() || self.ambient() != other.ambient() {
            return false;
        }
        match self.principal_angles(other) {
            Ok(angles) => angles.iter().all(|&a| a <= tol),
            Err(_) => false,
        }
    }

    /// Direct sum of span with additional vectors.
    pub fn extend_with(&self, vectors: &[Vec<f64>]) -> Result<Self> {
        let mut cols: Vec<Vec<f64>> = (0..self.dim())
            .map(|j| self.basis.column(j).iter().cloned().collect())
            .collect();
        cols.extend_from_slice(vectors);
        Self::from_span(self.ambient(), &cols)
    }
}

/// Angle between two nonzero vectors, in [0, pi].
pub fn vector_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// Angle between the lines spanned by two vectors, in [0, pi/2].
pub fn line_angle(a: &[f64], b: &[f64]) -> f64 {
    let th = vector_angle(a, b);
    th.min(std::f64::consts::PI - th)
}

impl serde::Serialize for Subspace {
    /// JSON form: ambient dimension, subspace dimension and the orthonormal
    /// basis as a list of vectors.
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let vectors: Vec<Vec<f64>> = (0..self.dim())
            .map(|j| (0..self.ambient()).map(|i| self.basis[(i, j)]).collect())
            .collect();
        let mut st = serializer.serialize_struct("Subspace", 3)?;
        st.serialize_field("ambient", &self.ambient())?;
        st.serialize_field("dim", &self.dim())?;
        st.serialize_field("basis", &vectors)?;
        st.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn orthonormal_invariant() {
        // A deliberately ill-conditioned span still yields an orthonormal basis.
        let vs = vec![
            vec![1.0, 2.0, 3.0],
            vec![1.0 + 1e-9, 2.0, 3.0],
            vec![0.0, 1.0, 1.0],
        ];
        let s = Subspace::from_span(3, &vs).unwrap();
        let g = s.basis().transpose() * s.basis();
        let id = DMatrix::<f64>::identity(s.dim(), s.dim());
        assert!((g - id).norm() < 1e-10);
    }

    #[test]
    fn rank_reduction() {
        let vs = vec![vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]];
        let s = Subspace::from_span(3, &vs).unwrap();
        assert_eq!(s.dim(), 1);
    }

    #[test]
    fn coordinate_plane_angles() {
        let xy = Subspace::coordinate(3, &[0, 1]).unwrap();
        // A vector in the plane has angle 0, the normal has angle pi/2.
        assert_relative_eq!(xy.angle_to_vector(&[1.0, 1.0, 0.0]), 0.0, epsilon = 1e-12);
        assert_relative_eq!(
            xy.angle_to_vector(&[0.0, 0.0, 2.0]),
            FRAC_PI_2,
            epsilon = 1e-12
        );
        // 45 degrees for (1,0,1).
        assert_relative_eq!(
            xy.angle_to_vector(&[1.0, 0.0, 1.0]),
            FRAC_PI_4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn min_principal_angle_lines() {
        let a = Subspace::from_span(2, &[vec![1.0, 0.0]]).unwrap();
        let b = Subspace::from_span(2, &[vec![1.0, 1.0]]).unwrap();
        assert_relative_eq!(a.min_principal_angle(&b).unwrap(), FRAC_PI_4, epsilon = 1e-12);
    }

    #[test]
    fn intersecting_subspaces_have_zero_min_angle() {
        let a = Subspace::coordinate(4, &[0, 1]).unwrap();
        let b = Subspace::coordinate(4, &[1, 2]).unwrap();
        assert_relative_eq!(a.min_principal_angle(&b).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn complement_dimensions() {
        let a = Subspace::coordinate(5, &[0, 2]).unwrap();
        let c = a.orthogonal_complement().unwrap();
        assert_eq!(c.dim(), 3);
        assert_relative_eq!(a.min_principal_angle(&c).unwrap(), FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn brute_force_min_angle_oracle() {
        // Randomized cross-check: the SVD principal angle agrees with a dense
        // sampling of unit vectors from both subspaces.
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let va: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let vb: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let a = Subspace::from_span(4, &va).unwrap();
            let b = Subspace::from_span(4, &vb).unwrap();
            let exact = a.min_principal_angle(&b).unwrap();
            let mut best = FRAC_PI_2;
            for _ in 0..20000 {
                let ca: Vec<f64> = (0..a.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let cb: Vec<f64> = (0..b.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let x: Vec<f64> = (0..4)
                    .map(|i| {
                        (0..a.dim())
                            .map(|j| a.basis()[(i, j)] * ca[j])
                            .sum::<f64>()
                    })
                    .collect();
                let y: Vec<f64> = (0..4)
                    .map(|i| {
                        (0..b.dim())
                            .map(|j| b.basis()[(i, j)] * cb[j])
                            .sum::<f64>()
                    })
                    .collect();
                best = best.min(line_angle(&x, &y));
            }
            assert!(best >= exact - 1e-9, "sampled {} < exact {}", best, exact);
            assert!(best - exact < 0.05, "sampled {} vs exact {}", best, exact);
        }
    }
}
