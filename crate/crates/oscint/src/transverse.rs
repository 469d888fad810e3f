//! Tangency of packet tubes to algebraic varieties, the set of frequency
//! directions whose surface normal falls in a given subspace, the
//! narrow/broad dichotomy for that set, and the quantitatively transverse
//! complement used by equidistribution experiments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;

use crate::error::{OscError, Result};
use crate::phase::{gauss_map, graph_height_gradient, graph_height_hessian, PhaseField};
use crate::poly::Poly;
use crate::subspace::{vector_angle, Subspace};
use crate::wavepacket::Tube;

/// Residual certifying that a direction solves the normal equations.
const LEVEL_SET_RESIDUAL: f64 = 1e-9;
/// Angular separation below which two level-set directions coincide.
const LEVEL_SET_DEDUP: f64 = 1e-3;
/// Iteration cap for the on-sphere Gauss-Newton search.
const MAX_LEVEL_ITER: usize = 25;
/// Iteration cap for the normal-flow projection onto a variety.
const MAX_PROJECT_ITER: usize = 40;
/// Membership tolerance when a caller supplies a level-set direction.
const MEMBERSHIP_RESIDUAL: f64 = 1e-6;
/// Smallest relative curvature image certifying the broad hypothesis.
/// Finite-difference curvature carries roughly `1e-8` noise, so an
/// annihilator direction mapping below `1e-6` of the curvature scale cannot
/// be certified independent.
const BROAD_RANK_GATE: f64 = 1e-6;

/// Common zero set of finitely many polynomials with everywhere independent
/// gradients (checked pointwise where tangent spaces are requested).
#[derive(Debug, Clone, Serialize)]
pub struct Variety {
    ambient: usize,
    polys: Vec<Poly>,
}

impl Variety {
    pub fn new(ambient: usize, polys: Vec<Poly>) -> Result<Self> {
        if ambient < 2 {
            return Err(OscError::Domain(format!(
                "a variety needs an ambient dimension of at least 2, got {ambient}"
            )));
        }
        if polys.is_empty() || polys.len() >= ambient {
            return Err(OscError::Domain(format!(
                "a complete intersection in dimension {ambient} takes between 1 and {} equations, got {}",
                ambient - 1,
                polys.len()
            )));
        }
        for p in &polys {
            if p.nvars != ambient {
                return Err(OscError::Inconsistent(format!(
                    "polynomial in {} variables cannot cut a variety in dimension {ambient}",
                    p.nvars
                )));
            }
            if p.is_zero() {
                return Err(OscError::Domain(
                    "the zero polynomial does not cut a hypersurface".into(),
                ));
            }
        }
        Ok(Self { ambient, polys })
    }

    /// Affine hyperplane `<normal, x> = offset`.
    pub fn hyperplane(normal: &[f64], offset: f64) -> Result<Self> {
        let n = normal.len();
        if normal.iter().all(|&c| c == 0.0) {
            return Err(OscError::Domain(
                "a hyperplane needs a nonzero normal".into(),
            ));
        }
        let mut p = Poly::constant(n, -offset);
        for (i, &c) in normal.iter().enumerate() {
            if c != 0.0 {
                let mut exps = vec![0u32; n];
                exps[i] = 1;
                p.add_term(&exps, c);
            }
        }
        Self::new(n, vec![p])
    }

    /// The compression variety of the twisted phases: the common zero set of
    /// `lambda * x_{2j} - x_{2j-1} * x_n` for `1 <= j <= (n-2)/2`, viewed as
    /// a cylinder in `R^n` (the `x_{n-1}` axis is free).
    pub fn kakeya(n: usize, lambda: f64) -> Result<Self> {
        if n < 4 {
            return Err(OscError::Unsupported(format!(
                "the compression variety needs dimension >= 4, got {n}"
            )));
        }
        if !(lambda > 0.0) {
            return Err(OscError::Domain(format!("scale must be positive: {lambda}")));
        }
        let pairs = (n - 2) / 2;
        let polys = (0..pairs)
            .map(|j| {
                let mut p = Poly::zero(n);
                let mut lin = vec![0u32; n];
                lin[2 * j + 1] = 1;
                p.add_term(&lin, lambda);
                let mut quad = vec![0u32; n];
                quad[2 * j] = 1;
                quad[n - 1] = 1;
                p.add_term(&quad, -1.0);
                p
            })
            .collect();
        Self::new(n, polys)
    }

    pub fn ambient(&self) -> usize {
        self.ambient
    }

    pub fn codim(&self) -> usize {
        self.polys.len()
    }

    pub fn dim(&self) -> usize {
        self.ambient - self.polys.len()
    }

    pub fn polys(&self) -> &[Poly] {
        &self.polys
    }

    /// Largest defining-equation value at a point.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.polys
            .iter()
            .map(|p| p.eval(x).abs())
            .fold(0.0, f64::max)
    }

    /// Jacobian of the defining equations, one row per polynomial.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = self.polys.iter().map(|p| p.grad_at(x)).collect();
        DMatrix::from_fn(self.polys.len(), self.ambient, |i, j| rows[i][j])
    }

    /// Tangent space at a point: the joint kernel of the gradients.  Errors
    /// when the gradients are dependent there (the intersection is not
    /// transverse at that point).
    pub fn tangent_at(&self, z: &[f64]) -> Result<Subspace> {
        if z.len() != self.ambient {
            return Err(OscError::Inconsistent(format!(
                "point dimension {} vs ambient {}",
                z.len(),
                self.ambient
            )));
        }
        let grads: Vec<Vec<f64>> = self.polys.iter().map(|p| p.grad_at(z)).collect();
        let span = Subspace::from_span(self.ambient, &grads).map_err(|_| {
            OscError::DegenerateConfiguration(
                "vanishing gradient: the intersection is not transverse at this point".into(),
            )
        })?;
        if span.dim() != self.codim() {
            return Err(OscError::DegenerateConfiguration(format!(
                "gradients span dimension {} instead of {}; not transverse at this point",
                span.dim(),
                self.codim()
            )));
        }
        span.orthogonal_complement()
    }

    /// Newton normal-flow projection onto the zero set: from the query point,
    /// repeatedly remove the least-norm correction of the residual.  Returns
    /// the foot point; the distance is the norm of the difference.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ambient {
            return Err(OscError::Inconsistent(format!(
                "point dimension {} vs ambient {}",
                x.len(),
                self.ambient
            )));
        }
        let scale = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut z = x.to_vec();
        for _ in 0..MAX_PROJECT_ITER {
            let vals = DVector::from_iterator(
                self.polys.len(),
                self.polys.iter().map(|p| p.eval(&z)),
            );
            if !vals.iter().all(|v| v.is_finite()) {
                return Err(OscError::NoConvergence(
                    "variety equations evaluated to a non-finite value".into(),
                ));
            }
            let j = self.jacobian(&z);
            let jjt = &j * j.transpose();
            let sol = jjt.lu().solve(&vals).ok_or_else(|| {
                OscError::Conditioning(
                    "singular normal system while projecting onto the variety".into(),
                )
            })?;
            let step = j.transpose() * sol;
            for (zi, si) in z.iter_mut().zip(step.iter()) {
                *zi -= si;
            }
            if step.norm() <= 1e-10 * scale {
                return Ok(z);
            }
        }
        Err(OscError::NoConvergence(
            "variety projection did not settle within the iteration budget".into(),
        ))
    }
}

/// Scales for deciding when a tube hugs a variety: distance within
/// `R^{1/2+delta_m}` of the zero set and normal directions within
/// `c_tang * R^{-1/2+delta_m}` of its tangent spaces.
#[derive(Debug, Clone, Serialize)]
pub struct TangencyConfig {
    pub r_big: f64,
    pub delta_m: f64,
    /// Constant in the angle condition (default 1).
    pub c_tang: f64,
    /// Constant bounding how far tangency reference points may sit (default 2).
    pub c_tang_upper: f64,
}

impl TangencyConfig {
    pub fn new(r_big: f64, delta_m: f64) -> Result<Self> {
        if !(r_big >= 4.0) {
            return Err(OscError::Domain(format!(
                "tangency scale must be at least 4, got {r_big}"
            )));
        }
        if !(delta_m > 0.0 && delta_m < 0.5) {
            return Err(OscError::Domain(format!(
                "tangency exponent must lie in (0, 1/2), got {delta_m}"
            )));
        }
        Ok(Self {
            r_big,
            delta_m,
            c_tang: 1.0,
            c_tang_upper: 2.0,
        })
    }

    /// Largest admissible core-to-variety distance, `R^{1/2+delta_m}`.
    pub fn dist_threshold(&self) -> f64 {
        self.r_big.powf(0.5 + self.delta_m)
    }

    /// Largest admissible normal-to-tangent angle, `c_tang * R^{-1/2+delta_m}`.
    pub fn angle_threshold(&self) -> f64 {
        self.c_tang * self.r_big.powf(-0.5 + self.delta_m)
    }

    /// Distance within which variety points serve as tangency references.
    pub fn near_dist(&self) -> f64 {
        self.c_tang_upper * self.r_big.powf(0.5 + self.delta_m)
    }
}

/// Which tubes hug the variety, plus bookkeeping on how trustworthy the
/// projections behind the decision were.
#[derive(Debug, Clone, Serialize)]
pub struct TangencyReport {
    /// Indices into the tube list whose cores pass both tangency conditions.
    pub tangent: Vec<usize>,
    pub samples_checked: usize,
    pub projection_failures: usize,
    /// False when more than 5% of the inspected samples failed to project.
    pub reliable: bool,
}

/// Select the tubes whose cores stay within `R^{1/2+delta_m}` of the variety
/// inside the ball of radius `R` and whose packet normal directions stay
/// within `c_tang * R^{-1/2+delta_m}` of the nearby tangent spaces.  A tube
/// with a sample that cannot be projected is never certified tangent.
pub fn tangent_packets(
    phase: &PhaseField,
    tubes: &[Tube],
    variety: &Variety,
    config: &TangencyConfig,
) -> Result<TangencyReport> {
    if variety.ambient() != phase.n {
        return Err(OscError::Inconsistent(format!(
            "variety lives in dimension {}, the operator in {}",
            variety.ambient(),
            phase.n
        )));
    }
    let dist_max = config.dist_threshold();
    let angle_max = config.angle_threshold();
    let near = config.near_dist();
    let per: Vec<(bool, usize, usize)> = tubes
        .par_iter()
        .map(|tube| {
            let mut ok = true;
            let mut checked = 0usize;
            let mut failures = 0usize;
            for (p, &t) in tube.points.iter().zip(&tube.xs) {
                let mut x = p.clone();
                x.push(t);
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r > config.r_big {
                    continue;
                }
                checked += 1;
                let z = match variety.project(&x) {
                    Ok(z) => z,
                    Err(_) => {
                        failures += 1;
                        ok = false;
                        continue;
                    }
                };
                let dist = x
                    .iter()
                    .zip(&z)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist > dist_max {
                    ok = false;
                    continue;
                }
                if dist <= near {
                    match (gauss_map(phase, &x, &tube.index.center), variety.tangent_at(&z)) {
                        (Ok(g), Ok(tz)) => {
                            if tz.angle_to_vector(&g) > angle_max {
                                ok = false;
                            }
                        }
                        _ => {
                            failures += 1;
                            ok = false;
                        }
                    }
                }
            }
            (ok, checked, failures)
        })
        .collect();
    let tangent: Vec<usize> = per
        .iter()
        .enumerate()
        .filter_map(|(i, (ok, _, _))| ok.then_some(i))
        .collect();
    let samples_checked: usize = per.iter().map(|p| p.1).sum();
    let projection_failures: usize = per.iter().map(|p| p.2).sum();
    let reliable = (projection_failures as f64) <= 0.05 * (samples_checked.max(1) as f64);
    Ok(TangencyReport {
        tangent,
        samples_checked,
        projection_failures,
        reliable,
    })
}

/// Orthonormal rows annihilating `v`: a basis of its orthogonal complement.
fn annihilator_rows(v: &Subspace) -> Result<Vec<Vec<f64>>> {
    let comp = v.orthogonal_complement()?;
    let b = comp.basis();
    Ok((0..comp.dim())
        .map(|j| (0..v.ambient()).map(|i| b[(i, j)]).collect())
        .collect())
}

/// Drop the last component of each annihilator row and verify the truncation
/// keeps full rank, i.e. the subspace meets `{x_n = 0}` in dimension
/// `dim - 1`.  Returns the rows and the span of their truncations.
fn truncated_annihilator(v: &Subspace) -> Result<(Vec<Vec<f64>>, Subspace)> {
    let n = v.ambient();
    let rows = annihilator_rows(v)?;
    let truncated: Vec<Vec<f64>> = rows.iter().map(|r| r[..n - 1].to_vec()).collect();
    let span = Subspace::from_span(n - 1, &truncated).map_err(|_| degenerate_slice(v))?;
    if span.dim() != rows.len() {
        return Err(degenerate_slice(v));
    }
    Ok((rows, span))
}

fn degenerate_slice(v: &Subspace) -> OscError {
    OscError::DegenerateConfiguration(format!(
        "the {}-dimensional subspace meets the last-coordinate hyperplane in dimension other than {}",
        v.dim(),
        v.dim() - 1
    ))
}

/// Slice of `v` by the hyperplane of vanishing last coordinate, viewed inside
/// `R^{n-1}`.  Errors unless the slice has dimension `dim v - 1`.
pub fn v_minus(v: &Subspace) -> Result<Subspace> {
    let (_, span) = truncated_annihilator(v)?;
    span.orthogonal_complement()
}

/// Values of the normal equations at a direction: each annihilator row paired
/// with the unnormalized surface normal `(-grad h(u), 1)` of the phase graph.
fn normal_residual(
    phase: &PhaseField,
    x_bar: &[f64],
    rows: &[Vec<f64>],
    u: &[f64],
) -> Result<Vec<f64>> {
    let d = u.len();
    let g = graph_height_gradient(phase, x_bar, u)?;
    if !g.iter().all(|v| v.is_finite()) {
        return Err(OscError::NoConvergence(
            "graph gradient evaluated to a non-finite value".into(),
        ));
    }
    Ok(rows
        .iter()
        .map(|r| {
            let mut s = r[d];
            for j in 0..d {
                s -= r[j] * g[j];
            }
            s
        })
        .collect())
}

/// Deterministic unit seeds for the level-set search.
fn sphere_seeds(d: usize, count: usize) -> Vec<Vec<f64>> {
    match d {
        2 => (0..count)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / count as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        3 => {
            let golden = PI * (3.0 - 5.0f64.sqrt());
            (0..count)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    let a = golden * i as f64;
                    vec![r * a.cos(), r * a.sin(), z]
                })
                .collect()
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
            (0..count)
                .map(|_| {
                    loop {
                        let v: Vec<f64> = (0..d)
                            .map(|_| {
                                let a: f64 = rng.gen_range(1e-12..1.0);
                                let b: f64 = rng.gen_range(0.0..2.0 * PI);
                                (-2.0 * a.ln()).sqrt() * b.cos()
                            })
                            .collect();
                        let nr = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if nr > 1e-6 {
                            return v.iter().map(|x| x / nr).collect();
                        }
                    }
                })
                .collect()
        }
    }
}

/// Polish one seed into a unit solution of the normal equations by
/// Gauss-Newton on the sphere.
fn refine_level_direction(
    phase: &PhaseField,
    x_bar: &[f64],
    rows: &[Vec<f64>],
    seed: &[f64],
) -> Result<Vec<f64>> {
    let d = seed.len();
    let m = rows.len();
    let nr = seed.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut u: Vec<f64> = seed.iter().map(|x| x / nr).collect();
    for _ in 0..MAX_LEVEL_ITER {
        let f = normal_residual(phase, x_bar, rows, &u)?;
        let norm_u = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let c = (norm_u * norm_u - 1.0) / 2.0;
        let total = (f.iter().map(|x| x * x).sum::<f64>() + c * c).sqrt();
        if !total.is_finite() {
            return Err(OscError::NoConvergence("non-finite residual".into()));
        }
        if total <= 1e-11 {
            if f.iter().all(|x| x.abs() <= LEVEL_SET_RESIDUAL) {
                let out: Vec<f64> = u.iter().map(|x| x / norm_u).collect();
                return Ok(out);
            }
            return Err(OscError::NoConvergence(
                "stalled with a residual above the certificate".into(),
            ));
        }
        let hess = graph_height_hessian(phase, x_bar, &u)?;
        if hess.iter().any(|v| !v.is_finite()) {
            return Err(OscError::NoConvergence("non-finite curvature".into()));
        }
        let mut jm = DMatrix::zeros(m + 1, d);
        for (i, r) in rows.iter().enumerate() {
            for col in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += hess[(k, col)] * r[k];
                }
                jm[(i, col)] = -s;
            }
        }
        for col in 0..d {
            jm[(m, col)] = u[col];
        }
        let mut rhs = DVector::zeros(m + 1);
        for (i, &fi) in f.iter().enumerate() {
            rhs[i] = fi;
        }
        rhs[m] = c;
        let svd = jm.svd(true, true);
        let step = svd
            .solve(&rhs, 1e-12)
            .map_err(|e| OscError::Conditioning(format!("level-set step failed: {e}")))?;
        let mut sn = step.norm();
        if !sn.is_finite() {
            return Err(OscError::NoConvergence("non-finite step".into()));
        }
        let cap = 0.5;
        let shrink = if sn > cap { cap / sn } else { 1.0 };
        sn *= shrink;
        let _ = sn;
        for j in 0..d {
            u[j] -= shrink * step[j];
        }
        let nr = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(0.3..=3.0).contains(&nr) {
            return Err(OscError::NoConvergence("iterate left the annulus".into()));
        }
    }
    // Roots where an annihilator row is radial are quadratically degenerate,
    // so the early-exit total may sit just above its threshold forever.  The
    // certificate on the raw equations is the honest acceptance test.
    let f = normal_residual(phase, x_bar, rows, &u)?;
    let norm_u = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if f.iter().all(|x| x.abs() <= LEVEL_SET_RESIDUAL) && (norm_u - 1.0).abs() <= 1e-9 {
        return Ok(u.iter().map(|x| x / norm_u).collect());
    }
    Err(OscError::NoConvergence(
        "level-set search exhausted its iterations".into(),
    ))
}

/// All unit directions in the annulus whose graph normal `(-grad h(u), 1)`
/// lies in `v`, found by a seeded Gauss-Newton sweep over the sphere of
/// directions and deduplicated at `1e-3` radians.  The set is 0-homogeneous,
/// so unit representatives describe it completely.
pub fn level_set_l(
    phase: &PhaseField,
    x_bar: &[f64],
    v: &Subspace,
    mesh_density: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = phase.n;
    if v.ambient() != n {
        return Err(OscError::Inconsistent(format!(
            "subspace ambient {} vs operator dimension {n}",
            v.ambient()
        )));
    }
    if x_bar.len() != n {
        return Err(OscError::Inconsistent(format!(
            "base point dimension {} vs {n}",
            x_bar.len()
        )));
    }
    if v.dim() == 0 || v.dim() >= n {
        return Err(OscError::Domain(
            "the normal subspace must be proper and nontrivial".into(),
        ));
    }
    if mesh_density == 0 {
        return Err(OscError::Domain("mesh density must be positive".into()));
    }
    let (rows, _) = truncated_annihilator(v)?;
    let seeds = sphere_seeds(n - 1, mesh_density);
    let sols: Vec<Option<Vec<f64>>> = seeds
        .par_iter()
        .map(|s| refine_level_direction(phase, x_bar, &rows, s).ok())
        .collect();
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for s in sols.into_iter().flatten() {
        if kept.iter().all(|k| vector_angle(k, &s) > LEVEL_SET_DEDUP) {
            kept.push(s);
        }
    }
    Ok(kept)
}

/// Outcome of the dichotomy for a level-set direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    /// The direction is nearly perpendicular to the hyperplane slice of the
    /// subspace; the whole level set collapses onto one line.
    Narrow,
    /// A transverse complement exists.
    Broad,
}

/// The dichotomy at one direction: the hyperplane slice, the scanned level
/// set, and (in the broad case) the transverse complement with its angle.
#[derive(Debug, Clone, Serialize)]
pub struct NarrowBroadReport {
    pub eta: Vec<f64>,
    pub classification: Classification,
    pub v_minus: Subspace,
    pub l_samples: Vec<Vec<f64>>,
    pub w: Option<Subspace>,
    pub angle_vw: Option<f64>,
}

/// Classify a level-set direction `eta` against the subspace `v`: narrow
/// when the angle from `eta` to the hyperplane slice of `v` exceeds
/// `pi/2 - K^{-2}` strictly, broad otherwise (the boundary case builds the
/// complement).  A `mesh_density` of zero skips the level-set scan.
pub fn classify(
    phase: &PhaseField,
    x_bar: &[f64],
    v: &Subspace,
    eta: &[f64],
    big_k: f64,
    mesh_density: usize,
) -> Result<NarrowBroadReport> {
    let n = phase.n;
    if v.ambient() != n || x_bar.len() != n {
        return Err(OscError::Inconsistent(
            "subspace and base point must match the operator dimension".into(),
        ));
    }
    if eta.len() != n - 1 {
        return Err(OscError::Inconsistent(format!(
            "direction dimension {} vs {}",
            eta.len(),
            n - 1
        )));
    }
    if !(big_k >= 2.0) {
        return Err(OscError::Domain(format!(
            "sector parameter must be at least 2, got {big_k}"
        )));
    }
    if v.dim() < 2 {
        return Err(OscError::Domain(
            "classification needs a subspace of dimension at least 2".into(),
        ));
    }
    let nr = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nr > 0.0 && nr.is_finite()) {
        return Err(OscError::Domain("direction must be a nonzero vector".into()));
    }
    let eta_u: Vec<f64> = eta.iter().map(|x| x / nr).collect();
    let (rows, span) = truncated_annihilator(v)?;
    let res = normal_residual(phase, x_bar, &rows, &eta_u)?;
    let worst = res.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if worst > MEMBERSHIP_RESIDUAL {
        return Err(OscError::Domain(format!(
            "the direction misses the normal level set (residual {worst:.3e})"
        )));
    }
    let vm = span.orthogonal_complement()?;
    let angle = vm.angle_to_vector(&eta_u);
    let l_samples = if mesh_density > 0 {
        level_set_l(phase, x_bar, v, mesh_density)?
    } else {
        Vec::new()
    };
    let threshold = PI / 2.0 - big_k.powi(-2);
    if angle > threshold {
        Ok(NarrowBroadReport {
            eta: eta_u,
            classification: Classification::Narrow,
            v_minus: vm,
            l_samples,
            w: None,
            angle_vw: None,
        })
    } else {
        let w = build_w_with_rows(phase, x_bar, &rows, &eta_u)?;
        let angle_vw = transversality_angle(v, &w)?;
        Ok(NarrowBroadReport {
            eta: eta_u,
            classification: Classification::Broad,
            v_minus: vm,
            l_samples,
            w: Some(w),
            angle_vw: Some(angle_vw),
        })
    }
}

/// Transverse complement for a broad direction: the level-set normals
/// `H(eta) * alpha_i` span a space whose orthogonal complement is the
/// linearized level set; lifting that tangent and adjoining the vertical
/// axis, the complement of the result is returned.  Its dimension plus the
/// subspace dimension always equals the ambient dimension.
pub fn build_w(phase: &PhaseField, x_bar: &[f64], v: &Subspace, eta: &[f64]) -> Result<Subspace> {
    if v.ambient() != phase.n {
        return Err(OscError::Inconsistent(format!(
            "subspace ambient {} vs operator dimension {}",
            v.ambient(),
            phase.n
        )));
    }
    let rows = annihilator_rows(v)?;
    build_w_with_rows(phase, x_bar, &rows, eta)
}

/// Same construction from explicit annihilator rows.  The result only
/// depends on the row span, so any maximal-rank recombination of the rows
/// gives the same subspace.
pub fn build_w_with_rows(
    phase: &PhaseField,
    x_bar: &[f64],
    rows: &[Vec<f64>],
    eta: &[f64],
) -> Result<Subspace> {
    let n = phase.n;
    if x_bar.len() != n {
        return Err(OscError::Inconsistent(format!(
            "base point dimension {} vs {n}",
            x_bar.len()
        )));
    }
    if eta.len() != n - 1 {
        return Err(OscError::Inconsistent(format!(
            "direction dimension {} vs {}",
            eta.len(),
            n - 1
        )));
    }
    if rows.is_empty() || rows.len() > n - 2 {
        return Err(OscError::Domain(format!(
            "the annihilator needs between 1 and {} rows, got {}",
            n - 2,
            rows.len()
        )));
    }
    if rows.iter().any(|r| r.len() != n) {
        return Err(OscError::Inconsistent(
            "annihilator rows must have the ambient length".into(),
        ));
    }
    let nr = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nr > 0.0 && nr.is_finite()) {
        return Err(OscError::Domain("direction must be a nonzero vector".into()));
    }
    let eta_u: Vec<f64> = eta.iter().map(|x| x / nr).collect();
    let alphas: Vec<Vec<f64>> = rows.iter().map(|r| r[..n - 1].to_vec()).collect();
    let alpha_span = Subspace::from_span(n - 1, &alphas)
        .ok()
        .filter(|s| s.dim() == rows.len())
        .ok_or_else(|| {
            OscError::DegenerateConfiguration(
                "the annihilator rows truncate to a degenerate span".into(),
            )
        })?;
    let hess = graph_height_hessian(phase, x_bar, &eta_u)?;
    if hess.iter().any(|v| !v.is_finite()) {
        return Err(OscError::NoConvergence(
            "curvature evaluated to a non-finite value".into(),
        ));
    }
    // Each annihilator direction must map to a curvature normal of its own,
    // measured against the overall curvature scale.
    let images = &hess * alpha_span.basis();
    let gram = images.transpose() * &images;
    let lmin = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !(lmin.max(0.0).sqrt() > BROAD_RANK_GATE * hess.norm()) {
        return Err(OscError::DegenerateConfiguration(
            "the level-set normals collapse; the broad hypothesis fails here".into(),
        ));
    }
    let vtilde = Subspace::from_matrix_span(images)?;
    if vtilde.dim() != rows.len() {
        return Err(OscError::DegenerateConfiguration(format!(
            "level-set normals span dimension {} instead of {}; the broad hypothesis fails here",
            vtilde.dim(),
            rows.len()
        )));
    }
    let t_eta = vtilde.orthogonal_complement()?;
    let mut gens: Vec<Vec<f64>> = (0..t_eta.dim())
        .map(|j| {
            let mut g: Vec<f64> = (0..n - 1).map(|i| t_eta.basis()[(i, j)]).collect();
            g.push(0.0);
            g
        })
        .collect();
    let mut vertical = vec![0.0; n];
    vertical[n - 1] = 1.0;
    gens.push(vertical);
    let vbar = Subspace::from_span(n, &gens)?;
    vbar.orthogonal_complement()
}

/// Minimal principal angle between two nontrivial subspaces.
pub fn transversality_angle(v: &Subspace, w: &Subspace) -> Result<f64> {
    if v.dim() == 0 || w.dim() == 0 {
        return Err(OscError::Domain(
            "transversality needs nontrivial subspaces".into(),
        ));
    }
    v.min_principal_angle(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::line_angle;
    use crate::wavepacket::{core_curve, PacketIndex};
    use rand::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    /// The block matrix driving the twisted phase in dimension 4.
    fn twist_block(t: f64) -> [[f64; 2]; 2] {
        [[t, t * t], [t * t, t + t * t * t]]
    }

    /// Closed-form core of a twisted packet: spatial head, slab height, time.
    fn twisted_core(lambda: f64, om: [f64; 2], v: [f64; 2], t: f64) -> Vec<f64> {
        let a = twist_block(t);
        let aw = [
            a[0][0] * om[0] + a[0][1] * om[1],
            a[1][0] * om[0] + a[1][1] * om[1],
        ];
        let gamma = [v[0] - aw[0], v[1] - aw[1]];
        let slab = 0.5 * (aw[0] * om[0] + aw[1] * om[1]);
        vec![lambda * gamma[0], lambda * gamma[1], lambda * slab, lambda * t]
    }

    #[test]
    fn varieties_project_and_expose_tangent_spaces() {
        let plane = Variety::hyperplane(&[0.0, 0.0, 1.0], 0.0).unwrap();
        assert_eq!(plane.dim(), 2);
        let z = plane.project(&[1.0, 2.0, 3.0]).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-9 && (z[1] - 2.0).abs() < 1e-9 && z[2].abs() < 1e-9);
        let tz = plane.tangent_at(&z).unwrap();
        assert!(tz.coincides_with(&Subspace::coordinate(3, &[0, 1]).unwrap(), 1e-9));

        // A circle: the projection of an outside point lands on the nearest
        // arc point.
        let mut p = Poly::zero(2);
        p.add_term(&[2, 0], 1.0);
        p.add_term(&[0, 2], 1.0);
        p.add_term(&[0, 0], -1.0);
        let circle = Variety::new(2, vec![p]).unwrap();
        let z = circle.project(&[2.0, 0.0]).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-8 && z[1].abs() < 1e-8);
        let tz = circle.tangent_at(&z).unwrap();
        assert!(tz.coincides_with(&Subspace::coordinate(2, &[1]).unwrap(), 1e-6));

        // The compression variety contains the closed-form cores exactly.
        let lambda = 64.0;
        let variety = Variety::kakeya(4, lambda).unwrap();
        assert_eq!(variety.codim(), 1);
        let om = [0.2, -0.1];
        let v = [0.1, 0.0];
        for i in 0..64 {
            let t = -0.9 + 1.8 * i as f64 / 63.0;
            let x = twisted_core(lambda, om, v, t);
            assert!(
                variety.residual(&x) <= 1e-9 * lambda * lambda,
                "core left the variety at t = {t}"
            );
        }

        // Six polynomials in dimension 6: the second compression pair.
        let v6 = Variety::kakeya(6, 32.0).unwrap();
        assert_eq!(v6.codim(), 2);
        assert_eq!(v6.dim(), 4);

        assert!(Variety::new(3, vec![]).is_err());
        assert!(Variety::new(2, vec![Poly::zero(2)]).is_err());
        assert!(matches!(
            Variety::new(3, vec![Poly::var(2, 0)]),
            Err(OscError::Inconsistent(_))
        ));
        assert!(Variety::hyperplane(&[0.0, 0.0], 1.0).is_err());
        assert!(matches!(
            Variety::kakeya(3, 64.0),
            Err(OscError::Unsupported(_))
        ));
        assert!(matches!(
            plane.project(&[1.0, 2.0]),
            Err(OscError::Inconsistent(_))
        ));

        // Principal-angle basics.
        let e1 = Subspace::coordinate(2, &[0]).unwrap();
        let e2 = Subspace::coordinate(2, &[1]).unwrap();
        let diag = Subspace::from_span(2, &[vec![1.0, 1.0]]).unwrap();
        assert!(transversality_angle(&e1, &e1).unwrap().abs() < 1e-12);
        assert!((transversality_angle(&e1, &e2).unwrap() - PI / 2.0).abs() < 1e-12);
        assert!((transversality_angle(&e1, &diag).unwrap() - PI / 4.0).abs() < 1e-12);
    }

    #[test]
    fn compression_tubes_hug_their_variety() {
        let lambda = 256.0;
        let phase = PhaseField::builtin("kakeya", 4, lambda).unwrap();
        let variety = Variety::kakeya(4, lambda).unwrap();
        let config = TangencyConfig::new(lambda, 0.1).unwrap();

        let mut tubes = Vec::new();
        let mut shifted = Vec::new();
        // Push the second spatial coordinate three thresholds off the
        // variety; the displaced cores still run through the ball.
        let shift = 3.0 * config.dist_threshold();
        for i in -1..=1i32 {
            for j in -1..=1i32 {
                let om = [0.1 * i as f64, 0.1 * j as f64];
                // Starting positions tailored to the twist: odd slots carry
                // the negated even frequency components.
                let v = [-om[1], 0.0];
                let mk = |vv: [f64; 2]| PacketIndex {
                    theta: ((i + 1) * 3 + (j + 1)) as usize,
                    center: vec![om[0], om[1], 1.0],
                    radius: lambda.powf(-0.5),
                    v: vec![lambda * vv[0], lambda * vv[1], 0.0],
                    r_scale: lambda,
                    delta: 0.1,
                };
                let tube = core_curve(&phase, &mk(v), -0.9 * lambda, 0.9 * lambda).unwrap();
                assert!(!tube.is_empty());
                assert!(tube.max_residual <= 1e-7);
                tubes.push(tube);
                let bad =
                    core_curve(&phase, &mk([v[0], v[1] + shift / lambda]), -0.9 * lambda, 0.9 * lambda)
                        .unwrap();
                shifted.push(bad);
            }
        }

        let report = tangent_packets(&phase, &tubes, &variety, &config).unwrap();
        assert_eq!(report.tangent, (0..tubes.len()).collect::<Vec<_>>());
        assert_eq!(report.projection_failures, 0);
        assert!(report.reliable);
        assert!(report.samples_checked > 100 * tubes.len());

        let bad_report = tangent_packets(&phase, &shifted, &variety, &config).unwrap();
        assert!(bad_report.samples_checked > 0);
        assert!(bad_report.tangent.is_empty(), "shifted tubes must detach");

        // A straight tube inside a hyperplane through its own direction.
        let cone = PhaseField::builtin("circular_cone", 3, 64.0).unwrap();
        let index = PacketIndex {
            theta: 0,
            center: vec![0.0, 1.0],
            radius: 0.125,
            v: vec![5.0, 3.0],
            r_scale: 64.0,
            delta: 0.1,
        };
        let tube = core_curve(&cone, &index, -40.0, 40.0).unwrap();
        let wall = Variety::hyperplane(&[1.0, 0.0, 0.0], 5.0).unwrap();
        let cfg = TangencyConfig::new(64.0, 0.1).unwrap();
        let rep = tangent_packets(&cone, &[tube], &wall, &cfg).unwrap();
        assert_eq!(rep.tangent, vec![0]);

        // Mismatched ambient dimension is refused.
        assert!(matches!(
            tangent_packets(&cone, &[], &variety, &cfg),
            Err(OscError::Inconsistent(_))
        ));
        assert!(TangencyConfig::new(2.0, 0.1).is_err());
        assert!(TangencyConfig::new(64.0, 0.0).is_err());
        assert!(TangencyConfig::new(64.0, 0.5).is_err());
    }

    #[test]
    fn level_set_recovers_normal_directions() {
        // The classical example: a null generator plus a flat direction
        // leaves exactly one radial line of normals.
        let phase = PhaseField::builtin("circular_cone", 4, 64.0).unwrap();
        let x0 = [0.0; 4];
        let v = Subspace::from_span(
            4,
            &[vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0, 0.0]],
        )
        .unwrap();
        let l = level_set_l(&phase, &x0, &v, 200).unwrap();
        assert_eq!(l.len(), 1, "expected a single direction, got {l:?}");
        // One annihilator row is radial at this root, so the equations
        // vanish to second order there and positions resolve only to the
        // square root of the residual certificate.
        assert!(vector_angle(&l[0], &[-1.0, 0.0, 0.0]) <= 1e-4);

        // Any subspace containing the surface normal at a direction recovers
        // that direction.
        let om = unit(&[0.6, 0.8, 0.0]);
        let v2 = Subspace::from_span(
            4,
            &[
                vec![-om[0], -om[1], -om[2], 1.0],
                vec![0.8, -0.6, 0.0, 0.0],
            ],
        )
        .unwrap();
        let l2 = level_set_l(&phase, &x0, &v2, 200).unwrap();
        assert!(
            l2.iter().any(|u| vector_angle(u, &om) <= 1e-4),
            "the seeded direction was not recovered: {l2:?}"
        );

        // Dimension-one subspaces work through the overdetermined branch.
        let cone3 = PhaseField::builtin("circular_cone", 3, 64.0).unwrap();
        let o3 = unit(&[0.28, 0.96]);
        let v3 = Subspace::from_span(3, &[vec![-o3[0], -o3[1], 1.0]]).unwrap();
        let l3 = level_set_l(&cone3, &[0.0; 3], &v3, 128).unwrap();
        assert_eq!(l3.len(), 1);
        assert!(vector_angle(&l3[0], &o3) <= 1e-6);

        // A generic plane against the parabolic model: finitely many
        // directions, all certified by the raw equations.
        let model = PhaseField::builtin("model_parabolic_cone", 4, 64.0).unwrap();
        let vg = Subspace::from_span(
            4,
            &[vec![0.3, -0.2, 0.5, 1.0], vec![0.9, 0.1, -0.4, 0.0]],
        )
        .unwrap();
        let lg = level_set_l(&model, &x0, &vg, 400).unwrap();
        assert!(!lg.is_empty() && lg.len() <= 40, "count {}", lg.len());
        let rows: Vec<Vec<f64>> = {
            let comp = vg.orthogonal_complement().unwrap();
            (0..comp.dim())
                .map(|j| (0..4).map(|i| comp.basis()[(i, j)]).collect())
                .collect()
        };
        for u in &lg {
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-9);
            let g = graph_height_gradient(&model, &x0, u).unwrap();
            for r in &rows {
                let mut s = r[3];
                for j in 0..3 {
                    s -= r[j] * g[j];
                }
                assert!(s.abs() <= 1e-9, "uncertified direction {u:?}");
            }
        }

        assert!(level_set_l(&phase, &x0, &v, 0).is_err());
        assert!(level_set_l(&phase, &[0.0; 3], &v, 10).is_err());
        let full = Subspace::full(4);
        assert!(level_set_l(&phase, &x0, &full, 10).is_err());
        // A subspace inside the horizontal hyperplane has a degenerate slice.
        let flat = Subspace::from_span(
            4,
            &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
        )
        .unwrap();
        assert!(matches!(
            level_set_l(&phase, &x0, &flat, 10),
            Err(OscError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn dichotomy_splits_narrow_from_broad() {
        let phase = PhaseField::builtin("circular_cone", 4, 64.0).unwrap();
        let x0 = [0.0; 4];
        let big_k = 8.0;

        // Narrow: the hyperplane slice is orthogonal to the single normal
        // direction.
        let v = Subspace::from_span(
            4,
            &[vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0, 0.0]],
        )
        .unwrap();
        let eta = [-1.0, 0.0, 0.0];
        let rep = classify(&phase, &x0, &v, &eta, big_k, 200).unwrap();
        assert_eq!(rep.classification, Classification::Narrow);
        assert!(rep.w.is_none() && rep.angle_vw.is_none());
        assert!(rep
            .v_minus
            .coincides_with(&Subspace::coordinate(3, &[1]).unwrap(), 1e-9));
        assert!(!rep.l_samples.is_empty());
        let bound = 10.0 * big_k.powi(-2);
        for u in &rep.l_samples {
            assert!(line_angle(u, &rep.eta) <= bound, "stray direction {u:?}");
        }

        // The same geometry with a slice tilted just beyond the threshold
        // flips to broad; just inside stays narrow.
        let eta_u = unit(&[1.0, 0.0, 0.0]);
        let th = PI / 2.0 - big_k.powi(-2);
        for (offset, expect) in [
            (-1e-6, Classification::Broad),
            (1e-6, Classification::Narrow),
        ] {
            let ang: f64 = th + offset;
            let z = [ang.cos(), ang.sin(), 0.0];
            let vv = Subspace::from_span(
                4,
                &[vec![-1.0, 0.0, 0.0, 1.0], vec![z[0], z[1], z[2], 0.0]],
            )
            .unwrap();
            let r = classify(&phase, &x0, &vv, &eta_u, big_k, 0).unwrap();
            assert_eq!(r.classification, expect, "offset {offset}");
        }

        // A comfortably broad configuration on the cone.
        let z = [(0.3f64).cos(), (0.3f64).sin(), 0.0];
        let vb = Subspace::from_span(
            4,
            &[vec![-1.0, 0.0, 0.0, 1.0], vec![z[0], z[1], z[2], 0.0]],
        )
        .unwrap();
        let rb = classify(&phase, &x0, &vb, &eta_u, big_k, 0).unwrap();
        assert_eq!(rb.classification, Classification::Broad);
        let w = rb.w.as_ref().unwrap();
        assert_eq!(w.dim() + vb.dim(), 4);
        let avw = rb.angle_vw.unwrap();
        assert!(avw >= 0.1 * big_k.powi(-4), "angle {avw}");
        // The complement avoids the vertical axis entirely.
        for j in 0..w.dim() {
            assert!(w.basis()[(3, j)].abs() <= 1e-10);
        }

        // Scale invariance in the direction argument.  (Principal angles of
        // numerically equal subspaces bottom out near the square root of
        // machine epsilon, so coincidence checks use 1e-6.)
        let w1 = build_w(&phase, &x0, &vb, &eta_u).unwrap();
        let scaled: Vec<f64> = eta_u.iter().map(|x| 2.7 * x).collect();
        let w2 = build_w(&phase, &x0, &vb, &scaled).unwrap();
        assert!(w1.coincides_with(&w2, 1e-6));

        // Invariance under recombination of the annihilator rows.
        let comp = vb.orthogonal_complement().unwrap();
        let rows: Vec<Vec<f64>> = (0..comp.dim())
            .map(|j| (0..4).map(|i| comp.basis()[(i, j)]).collect())
            .collect();
        let mixed: Vec<Vec<f64>> = vec![
            (0..4).map(|i| 1.3 * rows[0][i] - 0.4 * rows[1][i]).collect(),
            (0..4).map(|i| 0.2 * rows[0][i] + 0.9 * rows[1][i]).collect(),
        ];
        let w3 = build_w_with_rows(&phase, &x0, &mixed, &eta_u).unwrap();
        assert!(w1.coincides_with(&w3, 1e-6));

        // In the narrow position the level-set normals collapse.
        assert!(matches!(
            build_w(&phase, &x0, &v, &eta),
            Err(OscError::DegenerateConfiguration(_))
        ));

        // Classification rejections.
        assert!(matches!(
            classify(&phase, &x0, &vb, &[1.0, 0.0, 0.0], 1.0, 0),
            Err(OscError::Domain(_))
        ));
        assert!(matches!(
            classify(&phase, &x0, &vb, &[1.0, 0.0], big_k, 0),
            Err(OscError::Inconsistent(_))
        ));
        let line = Subspace::from_span(4, &[vec![-1.0, 0.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(
            classify(&phase, &x0, &line, &eta_u, big_k, 0),
            Err(OscError::Domain(_))
        ));
        // A direction off the level set is refused.
        assert!(matches!(
            classify(&phase, &x0, &vb, &[0.0, 1.0, 0.0], big_k, 0),
            Err(OscError::Domain(_))
        ));

        // The report serializes.
        let json = serde_json::to_string(&rb).unwrap();
        assert!(json.contains("\"classification\":\"broad\""));
        assert!(json.contains("\"angle_vw\""));
    }

    #[test]
    fn random_broad_configurations_stay_transverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for name in ["circular_cone", "kakeya"] {
            let lambda = 64.0;
            let phase = PhaseField::builtin(name, 4, lambda).unwrap();
            for &big_k in &[4.0f64, 8.0, 16.0] {
                let mut broads = 0;
                let mut narrows = 0;
                while broads < 20 || narrows < 6 {
                    let mut eta: Vec<f64>;
                    loop {
                        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if n > 0.2 && raw[2].abs() / n > 0.2 {
                            eta = raw.iter().map(|x| x / n).collect();
                            break;
                        }
                    }
                    let x_bar = [
                        lambda * rng.gen_range(-0.3..0.3),
                        lambda * rng.gen_range(-0.3..0.3),
                        lambda * rng.gen_range(-0.3..0.3),
                        lambda * rng.gen_range(-0.5..0.5),
                    ];
                    let g = graph_height_gradient(&phase, &x_bar, &eta).unwrap();
                    let v1 = vec![-g[0], -g[1], -g[2], 1.0];
                    // A unit vector orthogonal to eta.
                    let mut t: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let d: f64 = t.iter().zip(&eta).map(|(a, b)| a * b).sum();
                    for (ti, ei) in t.iter_mut().zip(&eta) {
                        *ti -= d * ei;
                    }
                    let tn = t.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if tn < 1e-6 {
                        continue;
                    }
                    let t = unit(&t);

                    let broad_turn = broads < 20 && (narrows >= 6 || rng.gen_bool(0.75));
                    let psi = if broad_turn {
                        rng.gen_range(0.05..(PI / 2.0 - 2.0 * big_k.powi(-2) - 0.05))
                    } else {
                        PI / 2.0
                    };
                    let z: Vec<f64> = (0..3)
                        .map(|i| psi.cos() * eta[i] + psi.sin() * t[i])
                        .collect();
                    let v = Subspace::from_span(4, &[v1.clone(), vec![z[0], z[1], z[2], 0.0]])
                        .unwrap();
                    if broad_turn {
                        let rep = classify(&phase, &x_bar, &v, &eta, big_k, 0).unwrap();
                        assert_eq!(rep.classification, Classification::Broad);
                        let avw = rep.angle_vw.unwrap();
                        assert!(
                            avw >= 0.1 * big_k.powi(-4),
                            "{name} K={big_k}: angle {avw:.3e} below 0.1 K^-4"
                        );
                        let w = rep.w.as_ref().unwrap();
                        assert_eq!(w.dim() + v.dim(), 4);
                        broads += 1;
                    } else {
                        let rep = classify(&phase, &x_bar, &v, &eta, big_k, 96).unwrap();
                        assert_eq!(rep.classification, Classification::Narrow);
                        let bound = 10.0 * big_k.powi(-2);
                        assert!(
                            rep.l_samples.iter().any(|u| line_angle(u, &rep.eta) <= 1e-4),
                            "{name} K={big_k}: eta itself was not rediscovered"
                        );
                        for u in &rep.l_samples {
                            assert!(
                                line_angle(u, &rep.eta) <= bound,
                                "{name} K={big_k}: direction {u:?} strays from the narrow line"
                            );
                        }
                        narrows += 1;
                    }
                }
            }
        }
    }
}
