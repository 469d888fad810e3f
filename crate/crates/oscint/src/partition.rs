//! Polynomial partitioning and algebraic varieties.
//!
//! Three intertwined tools live here:
//!
//! * [`Variety`]: a common zero set of sparse polynomials with Gauss-Newton
//!   projection, tangent spaces, and Monte Carlo volume of its
//!   `w`-neighborhood ([`neighborhood_volume_mc`]);
//! * [`ham_sandwich_partition`]: iterated polynomial bisection of a weighted
//!   point cloud.  Each round finds one polynomial that simultaneously
//!   near-bisects every current cell, via a Veronese lift and an annealed
//!   Gauss-Newton solve of the smoothed sign-mass system;
//! * [`tube_variety_transverse_cover`]: a greedy cover certificate for the
//!   portion of a tube around a polynomial curve where the variety is
//!   transverse to the tube direction.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OscError, Result};
use crate::phase::BoxDomain;
use crate::poly::{Poly, PolyCurve};
use crate::subspace::Subspace;

/// Common zero set of a family of polynomials in `R^dim`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Variety {
    pub dim: usize,
    pub polys: Vec<Poly>,
}

impl Variety {
    pub fn new(dim: usize, polys: Vec<Poly>) -> Result<Self> {
        if polys.is_empty() {
            return Err(OscError::Domain("a variety needs at least one polynomial".into()));
        }
        for p in &polys {
            if p.nvars != dim {
                return Err(OscError::Inconsistent(format!(
                    "polynomial in {} variables on a variety of ambient dimension {dim}",
                    p.nvars
                )));
            }
        }
        Ok(Self { dim, polys })
    }

    pub fn hypersurface(p: Poly) -> Self {
        let dim = p.nvars;
        Self { dim, polys: vec![p] }
    }

    /// Expected dimension: ambient minus number of defining polynomials.
    pub fn expected_dim(&self) -> usize {
        self.dim.saturating_sub(self.polys.len())
    }

    /// Product of the defining degrees (a Bezout-style degree proxy).
    pub fn degree_proxy(&self) -> u32 {
        self.polys.iter().map(|p| p.degree().max(1)).product()
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        self.polys.iter().map(|p| p.eval(z)).collect()
    }

    /// Rows = gradients of the defining polynomials.
    pub fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let m = self.polys.len();
        let mut j = DMatrix::zeros(m, self.dim);
        for (i, p) in self.polys.iter().enumerate() {
            let g = p.grad_at(z);
            for k in 0..self.dim {
                j[(i, k)] = g[k];
            }
        }
        j
    }

    /// Natural size of `|P_i(z)|` at magnitude `|z|`, used for relative
    /// residual tests: largest coefficient times `max(1, |z|_inf)^deg`.
    pub fn residual_scale(&self, z: &[f64]) -> f64 {
        let zmax = z.iter().map(|v| v.abs()).fold(1.0, f64::max);
        self.polys
            .iter()
            .map(|p| p.coeff_scale() * zmax.powi(p.degree() as i32))
            .fold(0.0, f64::max)
    }

    /// All defining polynomials vanish to relative tolerance `tol`.
    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        let scale = self.residual_scale(z).max(1e-300);
        self.eval(z).iter().all(|v| v.abs() <= tol * scale)
    }

    /// Largest relative residual at `z`.
    pub fn relative_residual(&self, z: &[f64]) -> f64 {
        let scale = self.residual_scale(z).max(1e-300);
        self.eval(z).iter().map(|v| v.abs() / scale).fold(0.0, f64::max)
    }

    /// Gauss-Newton projection onto the zero set:
    /// `z <- z - J^T (J J^T)^{-1} P(z)` with step halving, to relative
    /// residual `1e-12`.
    pub fn project(&self, z0: &[f64]) -> Result<Vec<f64>> {
        let scale = self.residual_scale(z0).max(1e-300);
        let mut z = z0.to_vec();
        let mut pz = self.eval(&z);
        let mut res = pz.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for _ in 0..60 {
            if res <= 1e-12 * scale {
                return Ok(z);
            }
            let j = self.jacobian(&z);
            let jjt = &j * j.transpose();
            let rhs = DVector::from_vec(pz.clone());
            let mul = match jjt.clone().lu().solve(&rhs) {
                Some(m) => m,
                None => {
                    return Err(OscError::DegenerateConfiguration(
                        "singular normal system while projecting onto a variety".into(),
                    ))
                }
            };
            let full = j.transpose() * mul;
            let mut s = 1.0;
            let mut moved = false;
            for _ in 0..25 {
                let trial: Vec<f64> = z.iter().zip(full.iter()).map(|(a, b)| a - s * b).collect();
                let pt = self.eval(&trial);
                let rt = pt.iter().map(|v| v.abs()).fold(0.0, f64::max);
                if rt < res {
                    z = trial;
                    pz = pt;
                    res = rt;
                    moved = true;
                    break;
                }
                s *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if res <= 1e-9 * scale {
            Ok(z)
        } else {
            Err(OscError::NoConvergence(format!(
                "variety projection stalled at relative residual {:.2e}",
                res / scale
            )))
        }
    }

    /// Distance from `z` to the zero set, via projection.
    pub fn distance(&self, z: &[f64]) -> Result<f64> {
        let p = self.project(z)?;
        Ok(z.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }

    /// Tangent space at a (near-)zero `z`: the null space of the Jacobian.
    /// Errors if the Jacobian is rank-deficient there.
    pub fn tangent_space(&self, z: &[f64]) -> Result<Subspace> {
        let j = self.jacobian(&z.to_vec());
        let rows = Subspace::from_matrix_span(j.transpose())?;
        if rows.dim() < self.polys.len() {
            return Err(OscError::DegenerateConfiguration(
                "rank-deficient variety Jacobian; tangent space undefined".into(),
            ));
        }
        rows.orthogonal_complement()
    }
}

/// The compressing variety for the twisted quadratic-over-linear phase in
/// ambient coordinates `(x'', x_n)` (dimension `n-1`): one polynomial
/// `lambda * u_{2j} - u_{2j-1} * x_n` per coupled coordinate pair.  Its
/// dimension is `(n-1) - floor((n-2)/2)`, while the tube family it captures
/// spans boxes of dimension `n-1`.
pub fn kakeya_variety(n: usize, lambda: f64) -> Result<Variety> {
    if n < 4 {
        return Err(OscError::Unsupported(
            "the compressing variety needs n >= 4".into(),
        ));
    }
    if lambda <= 0.0 {
        return Err(OscError::Domain("lambda must be positive".into()));
    }
    let dim = n - 1; // (x'', x_n)
    let pairs = (n - 2) / 2;
    let mut polys = Vec::with_capacity(pairs);
    for k in 0..pairs {
        let mut p = Poly::zero(dim);
        let mut e1 = vec![0u32; dim];
        e1[2 * k + 1] = 1;
        p.add_term(&e1, lambda);
        let mut e2 = vec![0u32; dim];
        e2[2 * k] = 1;
        e2[dim - 1] = 1;
        p.add_term(&e2, -1.0);
        polys.push(p);
    }
    Variety::new(dim, polys)
}

/// Weighted point cloud in `R^d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightCloud {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl WeightCloud {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(OscError::Inconsistent(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if points.is_empty() {
            return Err(OscError::Domain("empty point cloud".into()));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(OscError::Inconsistent("ragged point cloud".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(OscError::Domain("weights must be positive and finite".into()));
        }
        Ok(Self { points, weights })
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let w = vec![1.0; points.len()];
        Self::new(points, w)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Region from which Monte Carlo samples are drawn.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SampleRegion {
    Ball { center: Vec<f64>, radius: f64 },
    Box(BoxDomain),
}

impl SampleRegion {
    pub fn dim(&self) -> usize {
        match self {
            SampleRegion::Ball { center, .. } => center.len(),
            SampleRegion::Box(b) => b.dim(),
        }
    }

    pub fn volume(&self) -> f64 {
        match self {
            SampleRegion::Ball { center, radius } => {
                unit_ball_volume(center.len()) * radius.powi(center.len() as i32)
            }
            SampleRegion::Box(b) => b
                .lo
                .iter()
                .zip(&b.hi)
                .map(|(&a, &c)| (c - a).max(0.0))
                .product(),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            SampleRegion::Ball { center, radius } => {
                let d = center.len();
                // Gaussian direction, radius by inverse-CDF of r^d.
                let mut v: Vec<f64> = (0..d)
                    .map(|_| {
                        // Box-Muller from two uniforms.
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        (-2.0 * u1.ln()).sqrt() * u2.cos()
                    })
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                let r = radius * rng.gen_range(0.0f64..1.0).powf(1.0 / d as f64);
                for (vi, c) in v.iter_mut().zip(center) {
                    *vi = c + *vi / norm * r;
                }
                v
            }
            SampleRegion::Box(b) => b
                .lo
                .iter()
                .zip(&b.hi)
                .map(|(&a, &c)| rng.gen_range(a..c.max(a + 1e-300)))
                .collect(),
        }
    }
}

/// Volume of the unit ball in `R^d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    let mut v = if d % 2 == 0 { 1.0 } else { 2.0 };
    let mut k = d % 2;
    while k + 2 <= d {
        k += 2;
        v *= std::f64::consts::TAU / (k as f64);
    }
    v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub volume: f64,
    /// Half-width of the 95% binomial confidence interval, in volume units.
    pub ci95: f64,
    pub hits: usize,
    pub samples: usize,
    pub region_volume: f64,
}

/// Monte Carlo volume of the `width`-neighborhood of a variety inside a
/// region.  Distances come from Gauss-Newton projection; a cheap
/// first-order distance bound filters out far samples before projecting.
pub fn neighborhood_volume_mc(
    variety: &Variety,
    region: &SampleRegion,
    width: f64,
    samples: usize,
    seed: u64,
) -> Result<VolumeEstimate> {
    if region.dim() != variety.dim {
        return Err(OscError::Inconsistent(format!(
            "region dimension {} vs variety ambient {}",
            region.dim(),
            variety.dim
        )));
    }
    if width <= 0.0 || samples == 0 {
        return Err(OscError::Domain("need positive width and sample count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let z = region.sample(&mut rng);
        // First-order distance lower bound: max_i |P_i| / |grad P_i|.
        let vals = variety.eval(&z);
        let jac = variety.jacobian(&z);
        let mut far = false;
        for (i, v) in vals.iter().enumerate() {
            let gn = jac.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
            if gn > 1e-300 && v.abs() / gn > 10.0 * width {
                far = true;
                break;
            }
        }
        if far {
            continue;
        }
        match variety.project(&z) {
            Ok(p) => {
                let d: f64 = z.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if d <= width {
                    hits += 1;
                }
            }
            Err(_) => {} // no reachable zero nearby: count as a miss
        }
    }
    let region_volume = region.volume();
    let p = hits as f64 / samples as f64;
    let ci95 = 1.96 * (p * (1.0 - p) / samples as f64).sqrt() * region_volume;
    Ok(VolumeEstimate {
        volume: p * region_volume,
        ci95,
        hits,
        samples,
        region_volume,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub restarts: usize,
    /// Per-round balance slack as a fraction of each cell's mass.
    pub balance_slack: f64,
    /// Relative half-width of the wall when attributing wall mass.
    pub wall_eps: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            restarts: 64,
            balance_slack: 0.05,
            wall_eps: 1e-9,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellInfo {
    /// One sign (+1/-1) per bisection round.
    pub signs: Vec<i8>,
    pub mass: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionResult {
    pub dim: usize,
    /// Requested degree parameter D; the cell-count target is D^dim.
    pub degree_budget: u32,
    /// One polynomial per bisection round; the partitioning polynomial is
    /// their product.
    pub polynomials: Vec<Poly>,
    /// Sum of the round degrees = degree of the product.
    pub total_degree: u32,
    pub rounds: usize,
    pub cells: Vec<CellInfo>,
    pub wall_mass: f64,
    pub total_mass: f64,
    pub max_cell_mass: f64,
    /// `max_cell_mass * D^dim / total_mass`; 1 is a perfect partition.
    pub balance_factor: f64,
    /// Every round met its per-cell balance target.
    pub achieved_balance: bool,
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc = 1u64;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Smallest degree whose monomial count (minus the constant) covers `cells`
/// simultaneous bisection constraints.
fn round_degree(dim: usize, cells: usize) -> u32 {
    let mut d = 1u32;
    loop {
        let c = binomial((dim as u64) + (d as u64), dim as u64);
        if c - 1 >= cells as u64 {
            return d;
        }
        d += 1;
    }
}

/// Iterated polynomial bisection: `dim * log2(degree)` rounds, each round
/// one polynomial near-bisecting all current cells at once.  `degree` must
/// be a power of two; the product of all round polynomials has degree
/// `O(degree)` and the final cells number at most `degree^dim`.
///
/// If some round misses its balance target after all restarts the best
/// partition found is still completed and returned inside
/// [`OscError::PartitionQuality`].
pub fn ham_sandwich_partition(
    cloud: &WeightCloud,
    degree: u32,
    config: &PartitionConfig,
) -> Result<PartitionResult> {
    if degree < 2 || !degree.is_power_of_two() {
        return Err(OscError::Domain(format!(
            "degree parameter must be a power of two >= 2, got {degree}"
        )));
    }
    let n = cloud.dim();
    let s = n * (degree.trailing_zeros() as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut cells: Vec<Vec<usize>> = vec![(0..cloud.len()).collect()];
    let mut polys: Vec<Poly> = Vec::with_capacity(s);
    let mut signs_per_point: Vec<Vec<i8>> = vec![Vec::with_capacity(s); cloud.len()];
    let mut achieved = true;

    for _round in 0..s {
        let d = round_degree(n, cells.len());
        let (poly, ok) = bisect_cells(cloud, &cells, d, config, &mut rng);
        achieved &= ok;
        // Split every cell by the sign of the new polynomial.
        let mut next: Vec<Vec<usize>> = Vec::with_capacity(2 * cells.len());
        for cell in &cells {
            let mut plus = Vec::new();
            let mut minus = Vec::new();
            for &p in cell {
                let v = poly.eval(&cloud.points[p]);
                let sg: i8 = if v >= 0.0 { 1 } else { -1 };
                signs_per_point[p].push(sg);
                if sg > 0 {
                    plus.push(p);
                } else {
                    minus.push(p);
                }
            }
            if !plus.is_empty() {
                next.push(plus);
            }
            if !minus.is_empty() {
                next.push(minus);
            }
        }
        polys.push(poly);
        cells = next;
    }

    // Assemble cells by full sign vector.
    let mut by_signs: BTreeMap<Vec<i8>, (f64, usize)> = BTreeMap::new();
    for (p, signs) in signs_per_point.iter().enumerate() {
        let e = by_signs.entry(signs.clone()).or_insert((0.0, 0));
        e.0 += cloud.weights[p];
        e.1 += 1;
    }
    let cells: Vec<CellInfo> = by_signs
        .into_iter()
        .map(|(signs, (mass, count))| CellInfo { signs, mass, count })
        .collect();

    // Wall mass: points within the relative eps-band of any round polynomial.
    let mut wall_mass = 0.0;
    for (p, pt) in cloud.points.iter().enumerate() {
        let zmax = pt.iter().map(|v| v.abs()).fold(1.0, f64::max);
        let on_wall = polys.iter().any(|poly| {
            let scale = poly.coeff_scale() * zmax.powi(poly.degree() as i32);
            poly.eval(pt).abs() <= config.wall_eps * scale.max(1e-300)
        });
        if on_wall {
            wall_mass += cloud.weights[p];
        }
    }

    let total_mass = cloud.total_mass();
    let max_cell_mass = cells.iter().map(|c| c.mass).fold(0.0, f64::max);
    let target_cells = (degree as f64).powi(n as i32);
    let result = PartitionResult {
        dim: n,
        degree_budget: degree,
        total_degree: polys.iter().map(|p| p.degree()).sum(),
        polynomials: polys,
        rounds: s,
        cells,
        wall_mass,
        total_mass,
        max_cell_mass,
        balance_factor: max_cell_mass * target_cells / total_mass,
        achieved_balance: achieved,
    };
    if achieved {
        Ok(result)
    } else {
        Err(OscError::PartitionQuality {
            reason: format!(
                "balance target missed after {} restarts (balance factor {:.2})",
                config.restarts, result.balance_factor
            ),
            best: Box::new(result),
        })
    }
}

/// One bisection round: find a polynomial of degree `d` whose zero set
/// near-bisects every listed cell.  Returns the polynomial and whether the
/// per-cell targets were met.
fn bisect_cells(
    cloud: &WeightCloud,
    cells: &[Vec<usize>],
    d: u32,
    config: &PartitionConfig,
    rng: &mut ChaCha8Rng,
) -> (Poly, bool) {
    let n = cloud.dim();
    let monos = Poly::monomials_up_to(n, d);
    let nf = monos.len();

    // Feature matrix with per-monomial rms normalization.
    let mut features = vec![vec![0.0f64; nf]; cloud.len()];
    for (p, pt) in cloud.points.iter().enumerate() {
        for (k, m) in monos.iter().enumerate() {
            let mut v = 1.0;
            for (i, &e) in m.iter().enumerate() {
                v *= pt[i].powi(e as i32);
            }
            features[p][k] = v;
        }
    }
    let mut scale = vec![0.0f64; nf];
    for f in &features {
        for (k, &v) in f.iter().enumerate() {
            scale[k] += v * v;
        }
    }
    for sk in scale.iter_mut() {
        *sk = (*sk / cloud.len() as f64).sqrt().max(1e-12);
    }
    for f in features.iter_mut() {
        for (k, v) in f.iter_mut().enumerate() {
            *v /= scale[k];
        }
    }

    // Per-cell balance targets: a slack fraction of the cell mass, floored
    // at twice the heaviest point (a lone point cannot be split).
    let targets: Vec<f64> = cells
        .iter()
        .map(|cell| {
            let mass: f64 = cell.iter().map(|&p| cloud.weights[p]).sum();
            let wmax = cell.iter().map(|&p| cloud.weights[p]).fold(0.0, f64::max);
            (config.balance_slack * mass).max(2.0 * wmax)
        })
        .collect();

    let exact_score = |c: &DVector<f64>| -> f64 {
        let mut worst: f64 = 0.0;
        for (i, cell) in cells.iter().enumerate() {
            let mut signed = 0.0;
            for &p in cell {
                let z: f64 = features[p].iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                signed += cloud.weights[p] * if z >= 0.0 { 1.0 } else { -1.0 };
            }
            worst = worst.max(signed.abs() / targets[i]);
        }
        worst
    };

    let sigma_ladder: Vec<f64> = (0..10)
        .map(|k| 1.5 * (0.02f64 / 1.5).powf(k as f64 / 9.0))
        .collect();

    // One smoothed Gauss-Newton pass (4 iterations) at fixed sigma.
    let gn_pass = |c: &mut DVector<f64>, sigma: f64| {
        for _ in 0..4 {
            let mut r: DVector<f64> = DVector::zeros(cells.len());
            let mut a: DMatrix<f64> = DMatrix::zeros(cells.len(), nf);
            for (i, cell) in cells.iter().enumerate() {
                for &p in cell {
                    let z: f64 = features[p].iter().zip(c.iter()).map(|(x, y)| x * y).sum();
                    let t = (z / sigma).tanh();
                    r[i] += cloud.weights[p] * t;
                    let dv = cloud.weights[p] * (1.0 - t * t) / sigma;
                    for (k, &fk) in features[p].iter().enumerate() {
                        a[(i, k)] += dv * fk;
                    }
                }
            }
            let aat: DMatrix<f64> =
                &a * a.transpose() + DMatrix::identity(cells.len(), cells.len()) * 1e-10;
            match aat.lu().solve(&r) {
                Some(mul) => {
                    let step = a.transpose() * mul;
                    *c -= step;
                    let norm = c.norm();
                    if norm > 1e-12 {
                        *c /= norm;
                    }
                }
                None => break,
            }
        }
    };
    // Smoothing width for the endgame: the scale of the points closest to
    // the current wall, so the smoothed masses see exactly the points whose
    // side is still negotiable.
    let near_wall_sigma = |c: &DVector<f64>| -> f64 {
        let mut zs: Vec<f64> = features
            .iter()
            .map(|f| f.iter().zip(c.iter()).map(|(x, y)| x * y).sum::<f64>().abs())
            .collect();
        zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((zs.len() as f64 * 0.03) as usize).min(zs.len() - 1);
        zs[idx].max(1e-5)
    };

    let mut best_c: Option<DVector<f64>> = None;
    let mut best_score = f64::INFINITY;

    'restarts: for _restart in 0..config.restarts {
        let mut c = DVector::from_fn(nf, |_, _| rng.gen_range(-1.0..1.0f64));
        c /= c.norm().max(1e-12);
        for &sigma in &sigma_ladder {
            gn_pass(&mut c, sigma);
            let score = exact_score(&c);
            if score < best_score {
                best_score = score;
                best_c = Some(c.clone());
            }
            if best_score <= 1.0 {
                break 'restarts;
            }
        }
        // Adaptive polish: re-tie the smoothing to the near-wall points.
        for _ in 0..4 {
            let sigma = near_wall_sigma(&c);
            gn_pass(&mut c, sigma);
            let score = exact_score(&c);
            if score < best_score {
                best_score = score;
                best_c = Some(c.clone());
            }
            if best_score <= 1.0 {
                break 'restarts;
            }
        }
    }

    let c = best_c.expect("at least one restart ran");
    // Undo the feature scaling to express the polynomial in original
    // coordinates.
    let coeffs: Vec<f64> = (0..nf).map(|k| c[k] / scale[k]).collect();
    let poly = Poly::from_coeffs(n, &monos, &coeffs);
    (poly, best_score <= 1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellMassReport {
    /// Mass per partition cell, aligned with `PartitionResult::cells`.
    pub masses: Vec<f64>,
    pub wall_mass: f64,
    /// Mass landing in sign cells the original partition never saw.
    pub unmatched_mass: f64,
}

/// Re-evaluate the masses of the partition cells on a (possibly different)
/// cloud.
pub fn cell_masses(partition: &PartitionResult, cloud: &WeightCloud) -> Result<CellMassReport> {
    if cloud.dim() != partition.dim {
        return Err(OscError::Inconsistent(format!(
            "cloud dimension {} vs partition dimension {}",
            cloud.dim(),
            partition.dim
        )));
    }
    let index: BTreeMap<&[i8], usize> = partition
        .cells
        .iter()
        .enumerate()
        .map(|(i, c)| (c.signs.as_slice(), i))
        .collect();
    let mut masses = vec![0.0; partition.cells.len()];
    let mut wall_mass = 0.0;
    let mut unmatched = 0.0;
    for (p, pt) in cloud.points.iter().enumerate() {
        let zmax = pt.iter().map(|v| v.abs()).fold(1.0, f64::max);
        let mut signs = Vec::with_capacity(partition.polynomials.len());
        let mut on_wall = false;
        for poly in &partition.polynomials {
            let v = poly.eval(pt);
            let scale = poly.coeff_scale() * zmax.powi(poly.degree() as i32);
            if v.abs() <= 1e-9 * scale.max(1e-300) {
                on_wall = true;
            }
            signs.push(if v >= 0.0 { 1i8 } else { -1i8 });
        }
        if on_wall {
            wall_mass += cloud.weights[p];
        }
        match index.get(signs.as_slice()) {
            Some(&i) => masses[i] += cloud.weights[p],
            None => unmatched += cloud.weights[p],
        }
    }
    Ok(CellMassReport {
        masses,
        wall_mass,
        unmatched_mass: unmatched,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransverseCoverConfig {
    /// Transversality threshold: keep points where the angle between the
    /// tube direction and the tangent space exceeds this.
    pub alpha: f64,
    /// Tube radius around the core curve.
    pub radius: f64,
    pub t_samples: usize,
    pub offsets_per_t: usize,
    /// Constant in the admissible ball-count bound `C * (deg_Z * deg_curve)^dim`.
    pub c_bound: f64,
    pub seed: u64,
}

impl Default for TransverseCoverConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            radius: 0.05,
            t_samples: 160,
            offsets_per_t: 24,
            c_bound: 10.0,
            seed: 21,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransverseCoverReport {
    /// Greedy cover size with balls of radius `radius / alpha`.
    pub ball_count: usize,
    /// Admissible count `C * (deg_Z * deg_curve)^dim`.
    pub bound: f64,
    pub within_bound: bool,
    /// Points on the variety found inside the tube.
    pub points_in_tube: usize,
    /// Of those, points where the variety is alpha-transverse to the tube.
    pub transverse_points: usize,
}

/// Certificate that the transverse part of `Z` inside a tube around a
/// polynomial curve is covered by boutique-many balls of radius
/// `radius / alpha`: sample the variety near the curve, keep points where
/// the tangent space makes an angle > `alpha` with the tube direction, and
/// cover them greedily.
pub fn tube_variety_transverse_cover(
    variety: &Variety,
    curve: &PolyCurve,
    config: &TransverseCoverConfig,
) -> Result<TransverseCoverReport> {
    if curve.dim() != variety.dim {
        return Err(OscError::Inconsistent(format!(
            "curve in R^{} vs variety ambient R^{}",
            curve.dim(),
            variety.dim
        )));
    }
    if config.alpha <= 0.0 || config.radius <= 0.0 {
        return Err(OscError::Domain("alpha and radius must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = variety.dim;
    let mut in_tube: Vec<(Vec<f64>, f64)> = Vec::new(); // (point, t of nearest core sample)
    let dt = (curve.t_hi - curve.t_lo) / config.t_samples.max(1) as f64;
    for it in 0..config.t_samples {
        let t = curve.t_lo + (it as f64 + 0.5) * dt;
        let base = curve.eval(t);
        for _ in 0..config.offsets_per_t {
            let z0: Vec<f64> = base
                .iter()
                .map(|&b| b + rng.gen_range(-1.5..1.5) * config.radius)
                .collect();
            if let Ok(z) = variety.project(&z0) {
                let dist: f64 = z
                    .iter()
                    .zip(&base)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist <= config.radius * (d as f64).sqrt() {
                    in_tube.push((z, t));
                }
            }
        }
    }
    let mut transverse: Vec<Vec<f64>> = Vec::new();
    for (z, t) in &in_tube {
        let tangent = match variety.tangent_space(z) {
            Ok(s) => s,
            Err(_) => continue, // singular point: not part of the certificate
        };
        let dir = curve.velocity(*t);
        let angle = tangent.angle_to_vector(&dir);
        if angle > config.alpha {
            transverse.push(z.clone());
        }
    }
    // Greedy cover with balls of radius radius / alpha.
    let rr = config.radius / config.alpha;
    let mut covered = vec![false; transverse.len()];
    let mut ball_count = 0usize;
    for i in 0..transverse.len() {
        if covered[i] {
            continue;
        }
        ball_count += 1;
        for j in i..transverse.len() {
            if !covered[j] {
                let dist: f64 = transverse[i]
                    .iter()
                    .zip(&transverse[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist <= rr {
                    covered[j] = true;
                }
            }
        }
    }
    let bound =
        config.c_bound * ((variety.degree_proxy() * curve.degree().max(1) as u32) as f64).powi(d as i32);
    Ok(TransverseCoverReport {
        ball_count,
        bound,
        within_bound: (ball_count as f64) <= bound,
        points_in_tube: in_tube.len(),
        transverse_points: transverse.len(),
    })
}
