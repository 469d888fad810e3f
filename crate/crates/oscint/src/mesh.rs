//! Quadrature meshes over frequency sectors.
//!
//! Two tensor layouts cover all uses:
//!
//! * **polar**: hyperspherical cells around the sector axis with per-cell
//!   *exactly integrated* Jacobian weights, so the weights sum to the true
//!   sector measure to rounding error.  Nodes sit at cell midpoints.
//! * **cartesian**: a midpoint tensor grid over an axis-aligned box
//!   (usually the sector's bounding box).  Constant weights, axis arrays
//!   exposed for the separable fast path of the quadrature module.
//!
//! Node enumeration is row-major with the **last axis fastest** throughout
//! the crate.

use serde::{Deserialize, Serialize};

use crate::error::{OscError, Result};
use crate::phase::SectorSpec;
use crate::subspace::Subspace;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MeshLayout {
    /// Hyperspherical tensor: radial cells x angular cells per level.
    PolarTensor {
        radial_cells: usize,
        angular_cells: Vec<usize>,
    },
    /// Box tensor: per-axis midpoint nodes with constant steps.
    CartesianTensor { axes: Vec<Vec<f64>>, steps: Vec<f64> },
    /// Anything without tensor structure (e.g. after filtering).
    Irregular,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyMesh {
    /// Ambient frequency dimension (n - 1).
    pub dim: usize,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub layout: MeshLayout,
}

/// Largest mesh step that resolves oscillations `exp(i <x, w>)` for
/// `|x| <= r_spatial` with the given oversampling factor.
pub fn nyquist_spacing(r_spatial: f64, oversample: f64) -> f64 {
    1.0 / (oversample * r_spatial.max(1.0))
}

/// Exact `integral of sin^k t dt` over `[a, b]` via the standard recursion.
pub fn sin_power_integral(k: u32, a: f64, b: f64) -> f64 {
    match k {
        0 => b - a,
        1 => a.cos() - b.cos(),
        _ => {
            let boundary =
                a.cos() * a.sin().powi(k as i32 - 1) - b.cos() * b.sin().powi(k as i32 - 1);
            (boundary + (k as f64 - 1.0) * sin_power_integral(k - 2, a, b)) / k as f64
        }
    }
}

/// Surface measure of the full unit sphere S^{d-1}.
fn sphere_measure(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => std::f64::consts::TAU,
        _ => sphere_measure(d - 1) * sin_power_integral(d as u32 - 2, 0.0, std::f64::consts::PI),
    }
}

/// Exact measure of a sector: radial part `(r1^d - r0^d)/d` times the
/// spherical cap of half-angle `aperture`.
pub fn sector_measure(sector: &SectorSpec) -> f64 {
    let d = sector.dim();
    let radial = (sector.r1.powi(d as i32) - sector.r0.powi(d as i32)) / d as f64;
    let cap = if d == 1 {
        if sector.aperture >= std::f64::consts::PI {
            2.0
        } else {
            1.0
        }
    } else if d == 2 {
        2.0 * sector.aperture.min(std::f64::consts::PI)
    } else {
        sphere_measure(d - 1) * sin_power_integral(d as u32 - 2, 0.0, sector.aperture.min(std::f64::consts::PI))
    };
    radial * cap
}

impl FrequencyMesh {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Hyperspherical tensor mesh over a sector with per-cell exact
    /// Jacobian weights.  `spacing` is the target arc-length/radial step at
    /// the mean radius.
    pub fn polar(sector: &SectorSpec, spacing: f64) -> Result<Self> {
        let d = sector.dim();
        if d < 2 {
            return Err(OscError::Unsupported("polar meshes need dim >= 2".into()));
        }
        if spacing <= 0.0 {
            return Err(OscError::Domain("mesh spacing must be positive".into()));
        }
        let aperture = sector.aperture.min(std::f64::consts::PI);
        let r_mean = 0.5 * (sector.r0 + sector.r1);
        let nr = (((sector.r1 - sector.r0) / spacing).ceil() as usize).max(1);
        let dr = (sector.r1 - sector.r0) / nr as f64;

        // Orthonormal frame whose first axis is the sector center.
        let frame = frame_from_axis(&sector.center)?;

        // Angular levels: the polar angle from the axis (range depends on
        // d), then full [0, pi] angles, then the azimuth [0, 2 pi).
        // sin exponent at level k (0-based) is d - 2 - k.
        let mut levels: Vec<(f64, f64, usize)> = Vec::new(); // (lo, hi, cells)
        if d == 2 {
            let n1 = (((2.0 * aperture * r_mean) / spacing).ceil() as usize).max(1);
            levels.push((-aperture, aperture, n1));
        } else {
            let n1 = ((aperture * r_mean / spacing).ceil() as usize).max(1);
            levels.push((0.0, aperture, n1));
            for _ in 0..d.saturating_sub(3) {
                let nk =
                    ((std::f64::consts::PI * r_mean / spacing).ceil() as usize).max(1);
                levels.push((0.0, std::f64::consts::PI, nk));
            }
            let nphi = ((std::f64::consts::TAU * r_mean / spacing).ceil() as usize).max(1);
            levels.push((0.0, std::f64::consts::TAU, nphi));
        }

        // Enumerate the angular tensor, computing per-cell exact weights and
        // midpoint directions.
        let mut angular: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
        for (lvl, &(lo, hi, cells)) in levels.iter().enumerate() {
            let exp = if d == 2 { 0 } else { (d - 2 - lvl) as u32 };
            let step = (hi - lo) / cells as f64;
            let mut next = Vec::with_capacity(angular.len() * cells);
            for (angles, wt) in &angular {
                for c in 0..cells {
                    let a = lo + c as f64 * step;
                    let b = a + step;
                    let cell_wt = sin_power_integral(exp, a, b);
                    let mut na = angles.clone();
                    na.push(0.5 * (a + b));
                    next.push((na, wt * cell_wt));
                }
            }
            angular = next;
        }

        let estimated = angular.len() * nr;
        if estimated > 40_000_000 {
            return Err(OscError::Budget(format!(
                "polar mesh would carry {estimated} nodes; coarsen the spacing"
            )));
        }

        let mut nodes = Vec::with_capacity(estimated);
        let mut weights = Vec::with_capacity(estimated);
        for ir in 0..nr {
            let ra = sector.r0 + ir as f64 * dr;
            let rb = ra + dr;
            let w_r = (rb.powi(d as i32) - ra.powi(d as i32)) / d as f64;
            let r_node = 0.5 * (ra + rb);
            for (angles, w_a) in &angular {
                let dir = direction_from_angles(&frame, angles, d);
                nodes.push(dir.iter().map(|&v| v * r_node).collect());
                weights.push(w_r * w_a);
            }
        }
        Ok(Self {
            dim: d,
            nodes,
            weights,
            layout: MeshLayout::PolarTensor {
                radial_cells: nr,
                angular_cells: levels.iter().map(|l| l.2).collect(),
            },
        })
    }

    /// Midpoint tensor grid over a box with per-axis spacing at most
    /// `spacing`; weights are the constant cell volume.
    pub fn cartesian(lo: &[f64], hi: &[f64], spacing: f64) -> Result<Self> {
        if spacing <= 0.0 {
            return Err(OscError::Domain("mesh spacing must be positive".into()));
        }
        let d = lo.len();
        if hi.len() != d || d == 0 {
            return Err(OscError::Inconsistent("box corner dimensions disagree".into()));
        }
        let mut axes = Vec::with_capacity(d);
        let mut steps = Vec::with_capacity(d);
        let mut total = 1usize;
        for k in 0..d {
            if hi[k] <= lo[k] {
                return Err(OscError::Domain(format!(
                    "degenerate box along axis {k}: [{}, {}]",
                    lo[k], hi[k]
                )));
            }
            let count = (((hi[k] - lo[k]) / spacing).ceil() as usize).max(1);
            let step = (hi[k] - lo[k]) / count as f64;
            axes.push(
                (0..count)
                    .map(|i| lo[k] + (i as f64 + 0.5) * step)
                    .collect::<Vec<f64>>(),
            );
            steps.push(step);
            total = total.checked_mul(count).ok_or_else(|| {
                OscError::Budget("cartesian mesh node count overflows".into())
            })?;
        }
        if total > 40_000_000 {
            return Err(OscError::Budget(format!(
                "cartesian mesh would carry {total} nodes; coarsen the spacing"
            )));
        }
        let cell = steps.iter().product::<f64>();
        let mut nodes = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        loop {
            nodes.push((0..d).map(|k| axes[k][idx[k]]).collect::<Vec<f64>>());
            // Row-major increment, last axis fastest.
            let mut k = d;
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < axes[k].len() {
                    break;
                }
                idx[k] = 0;
                if k == 0 {
                    let weights = vec![cell; nodes.len()];
                    return Ok(Self {
                        dim: d,
                        nodes,
                        weights,
                        layout: MeshLayout::CartesianTensor { axes, steps },
                    });
                }
            }
        }
    }

    /// Cartesian mesh over the bounding box of a sector.
    pub fn cartesian_for_sector(sector: &SectorSpec, spacing: f64) -> Result<Self> {
        let (lo, hi) = sector.bounding_box();
        Self::cartesian(&lo, &hi, spacing)
    }

    /// Keep only nodes satisfying the predicate (layout becomes irregular).
    pub fn restrict<F: Fn(&[f64]) -> bool>(&self, pred: F) -> Self {
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for (node, &w) in self.nodes.iter().zip(&self.weights) {
            if pred(node) {
                nodes.push(node.clone());
                weights.push(w);
            }
        }
        Self {
            dim: self.dim,
            nodes,
            weights,
            layout: MeshLayout::Irregular,
        }
    }

    /// Weighted quadrature l2 norm of coefficients sampled on this mesh.
    pub fn l2_norm(&self, coeffs: &[num_complex::Complex64]) -> f64 {
        coeffs
            .iter()
            .zip(&self.weights)
            .map(|(c, &w)| c.norm_sqr() * w)
            .sum::<f64>()
            .sqrt()
    }
}

/// Orthonormal frame whose first vector is the given axis.
fn frame_from_axis(axis: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d = axis.len();
    let norm: f64 = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(OscError::Domain("sector center direction is zero".into()));
    }
    let first: Vec<f64> = axis.iter().map(|v| v / norm).collect();
    let line = Subspace::from_span(d, &[first.clone()])?;
    let comp = line.orthogonal_complement()?;
    let mut frame = vec![first];
    for k in 0..comp.dim() {
        frame.push(comp.basis().column(k).iter().cloned().collect());
    }
    debug_assert_eq!(frame.len(), d);
    Ok(frame)
}

/// Unit direction from hyperspherical angles in the given frame:
/// `cos t1 * b0 + sin t1 (cos t2 * b1 + sin t2 (...))`; for d = 2 a single
/// signed angle.
fn direction_from_angles(frame: &[Vec<f64>], angles: &[f64], d: usize) -> Vec<f64> {
    let mut dir = vec![0.0; d];
    let mut sin_prod = 1.0;
    for (lvl, &t) in angles.iter().enumerate() {
        let basis = &frame[lvl];
        let c = t.cos() * sin_prod;
        for i in 0..d {
            dir[i] += c * basis[i];
        }
        sin_prod *= t.sin();
    }
    // The final sine product multiplies the last frame vector.
    let last = &frame[angles.len()];
    for i in 0..d {
        dir[i] += sin_prod * last[i];
    }
    dir
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn sin_power_integrals_exact() {
        // integral sin^2 over [0, pi] = pi/2; sin^3 over [0, pi] = 4/3.
        assert!((sin_power_integral(2, 0.0, std::f64::consts::PI) - std::f64::consts::FRAC_PI_2).abs() < 1e-14);
        assert!((sin_power_integral(3, 0.0, std::f64::consts::PI) - 4.0 / 3.0).abs() < 1e-14);
        assert!((sin_power_integral(0, 0.25, 1.0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn polar_weights_sum_to_sector_measure() {
        // d = 2: annulus and narrow sector.
        for (aperture, r0, r1) in [(std::f64::consts::PI, 0.5, 2.0), (0.1, 0.5, 2.0), (0.245, 0.5, 1.04)] {
            let mut center = vec![0.0, 1.0];
            if aperture > 1.0 {
                center = vec![1.0, 0.0]; // measure is frame-independent
            }
            let sector = SectorSpec {
                center,
                aperture,
                r0,
                r1,
            };
            let mesh = FrequencyMesh::polar(&sector, 0.05).unwrap();
            let measure = sector_measure(&sector);
            assert!(
                (mesh.total_weight() - measure).abs() <= 1e-12 * measure,
                "aperture {aperture}: {} vs {measure}",
                mesh.total_weight()
            );
        }
        // d = 3 and d = 4 caps.
        for d in [3usize, 4] {
            let mut center = vec![0.0; d];
            center[d - 1] = 1.0;
            let sector = SectorSpec {
                center,
                aperture: 0.3,
                r0: 0.5,
                r1: 1.1,
            };
            let mesh = FrequencyMesh::polar(&sector, 0.1).unwrap();
            let measure = sector_measure(&sector);
            assert!(
                (mesh.total_weight() - measure).abs() <= 1e-12 * measure,
                "d={d}: {} vs {measure}",
                mesh.total_weight()
            );
        }
    }

    #[test]
    fn full_sphere_measure_closed_forms() {
        assert!((sphere_measure(2) - std::f64::consts::TAU).abs() < 1e-14);
        assert!((sphere_measure(3) - 4.0 * std::f64::consts::PI).abs() < 1e-13);
        assert!((sphere_measure(4) - 2.0 * std::f64::consts::PI * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn polar_nodes_inside_sector() {
        let sector = SectorSpec {
            center: vec![0.0, 0.0, 1.0],
            aperture: 0.245,
            r0: 0.5,
            r1: 1.04,
        };
        let mesh = FrequencyMesh::polar(&sector, 0.03).unwrap();
        assert!(!mesh.is_empty());
        for node in &mesh.nodes {
            assert!(sector.contains(node), "node {node:?} escapes the sector");
        }
    }

    #[test]
    fn cartesian_cells_tile_box() {
        let mesh = FrequencyMesh::cartesian(&[-0.2, 0.5], &[0.2, 2.0], 0.05).unwrap();
        let vol = 0.4 * 1.5;
        assert!((mesh.total_weight() - vol).abs() < 1e-12);
        match &mesh.layout {
            MeshLayout::CartesianTensor { axes, steps } => {
                assert_eq!(axes.len(), 2);
                assert!(steps.iter().all(|&s| s <= 0.05 + 1e-15));
                // Last axis fastest: consecutive nodes differ in axis 1.
                assert_eq!(mesh.nodes[0][0], mesh.nodes[1][0]);
                assert!(mesh.nodes[0][1] < mesh.nodes[1][1]);
                assert_eq!(mesh.len(), axes[0].len() * axes[1].len());
            }
            other => panic!("expected cartesian layout, got {other:?}"),
        }
    }

    #[test]
    fn restriction_preserves_weights() {
        let sector = SectorSpec::reduced(3, 0.2);
        let mesh = FrequencyMesh::cartesian_for_sector(&sector, 0.04).unwrap();
        let inside = mesh.restrict(|w| sector.contains(w));
        assert!(inside.len() < mesh.len());
        assert!(inside.len() > 0);
        assert!(inside.total_weight() < mesh.total_weight());
        // Restricted total approximates the sector measure at cell accuracy.
        let measure = sector_measure(&sector);
        assert!(
            (inside.total_weight() - measure).abs() < 0.1 * measure,
            "{} vs {measure}",
            inside.total_weight()
        );
    }

    #[test]
    fn l2_norm_quadrature() {
        let mesh = FrequencyMesh::cartesian(&[0.0], &[1.0], 0.001).unwrap();
        // f = 1: norm = sqrt(box volume) = 1.
        let ones = vec![Complex64::new(1.0, 0.0); mesh.len()];
        assert!((mesh.l2_norm(&ones) - 1.0).abs() < 1e-12);
        let nyq = nyquist_spacing(256.0, 4.0);
        assert!((nyq - 1.0 / 1024.0).abs() < 1e-18);
    }
}
