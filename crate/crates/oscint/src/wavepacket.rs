//! Scale-`R` wave packet machinery: cover the frequency sector by caps of
//! radius `R^{-1/2}`, split a mesh function into cap pieces localized on a
//! spatial modulation lattice, and attach to each piece a curved tube whose
//! core follows the stationary set of the phase.
//!
//! The decomposition is exact on the mesh: the cap weights form a partition
//! of unity, the lattice split uses a complete dual exponential basis per
//! cap box (so summing all pieces reproduces the input up to the mass of
//! explicitly pruned pieces), and the trailing cutoff multiplies every piece
//! by the same function that is identically one on the cap support.

use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::bump::{bump, transition};
use crate::error::{OscError, Result};
use crate::field::GridRegion;
use crate::mesh::{FrequencyMesh, MeshLayout};
use crate::oscquad::apply_operator;
use crate::phase::{PhaseField, SectorSpec};
use crate::phase::{gauss_map, solve_phi};
use crate::subspace::vector_angle;
use crate::amplitude::Amplitude;

/// Cap radius over lattice spacing for dimension `d`: small enough that the
/// cell corners (at distance `sqrt(d)/2` spacings) stay covered, large
/// enough that no point sees lattice neighbors beyond the cell corners, so
/// the overlap multiplicity stays at `2^d` for `d <= 3`. Smaller ratios
/// shrink the overlap regions and push the squared-weight sum of the
/// partition toward one, which is what keeps the pieces almost orthogonal.
fn spacing_ratio(d: usize) -> f64 {
    match d {
        0 | 1 | 2 => 0.8,
        3 => 0.95,
        _ => 1.05 * (d as f64).sqrt() / 2.0,
    }
}
/// The trailing cutoff is 1 on the cap and vanishes beyond `2 r`. The wide
/// taper matters: the sharpest frequency-side feature of a packet controls
/// how fast its field decays away from the tube, so every cutoff in the
/// pipeline transitions over at least a sizable fraction of the cap radius.
const CUTOFF_EXTRA: f64 = 1.0;
/// Lattice cells taper over a quarter cell width.
const CELL_TAPER_FRACTION: f64 = 4.0;

/// Identifies one packet: a frequency cap crossed with a modulation-lattice
/// point.
#[derive(Debug, Clone)]
pub struct PacketIndex {
    /// Position of the cap in the cover.
    pub theta: usize,
    /// Cap center in frequency space.
    pub center: Vec<f64>,
    /// Cap radius, `R^{-1/2}`.
    pub radius: f64,
    /// Modulation-lattice point, spacing `R^{(1+delta)/2}`.
    pub v: Vec<f64>,
    pub r_scale: f64,
    pub delta: f64,
}

/// Finitely overlapping cover of a frequency sector by round caps, together
/// with the modulation lattice at the same scale.
#[derive(Debug, Clone)]
pub struct PacketCover {
    /// Frequency dimension `n - 1`.
    pub dim: usize,
    pub r_scale: f64,
    pub delta: f64,
    pub lambda: f64,
    /// Cap radius `R^{-1/2}`.
    pub radius: f64,
    /// Center lattice spacing (`radius / spacing_ratio(dim)`).
    pub spacing: f64,
    /// Modulation lattice spacing `R^{(1+delta)/2}`.
    pub v_spacing: f64,
    /// Lattice points are kept only up to this norm (`2 lambda`).
    pub v_max: f64,
    /// Cap centers, anchored at `anchor + j * spacing` for integer `j`.
    pub centers: Vec<Vec<f64>>,
    anchor: Vec<f64>,
    lattice: BTreeMap<Vec<i64>, usize>,
    pub sector: SectorSpec,
}

impl PacketCover {
    /// Build the cap cover of `sector` at scale `r_scale` together with the
    /// modulation lattice for frequencies up to `lambda`.
    pub fn new(sector: &SectorSpec, r_scale: f64, delta: f64, lambda: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 0.5) {
            return Err(OscError::Domain(format!(
                "lattice exponent delta = {delta} outside (0, 1/2)"
            )));
        }
        if r_scale < 1.0 || lambda <= 0.0 || r_scale > lambda * (1.0 + 1e-9) {
            return Err(OscError::Domain(format!(
                "need 1 <= R <= lambda, got R = {r_scale}, lambda = {lambda}"
            )));
        }
        let dim = sector.center.len();
        let radius = r_scale.powf(-0.5);
        let spacing = radius / spacing_ratio(dim);
        let v_spacing = r_scale.powf((1.0 + delta) / 2.0);
        let (lo, hi) = sector.bounding_box();
        let anchor: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let widest = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| b - a)
            .fold(0.0_f64, f64::max);

        let mut lattice: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
        {
            // Mark every lattice cell within covering distance of a probe
            // grid on the sector, and record how far the sector reaches from
            // the anchor. Probe spacing well below the cap radius guarantees
            // no needed center is missed.
            let probe = (spacing / 4.0).min(widest / 16.0);
            let mut max_dist = 0.0_f64;
            let mut reached = false;
            let counts: Vec<usize> = (0..dim)
                .map(|k| (((hi[k] - lo[k]) / probe).ceil() as usize).max(1))
                .collect();
            let total: usize = counts.iter().product();
            if total > 8_000_000 {
                return Err(OscError::Budget(format!(
                    "cap cover probe grid would carry {total} points"
                )));
            }
            let mark_dist = 0.85 * spacing;
            let mut idx = vec![0usize; dim];
            let mut marked: BTreeMap<Vec<i64>, ()> = BTreeMap::new();
            'probe: loop {
                let g: Vec<f64> = (0..dim)
                    .map(|k| lo[k] + (idx[k] as f64 + 0.5) * (hi[k] - lo[k]) / counts[k] as f64)
                    .collect();
                if sector.contains(&g) {
                    reached = true;
                    let d: f64 = (0..dim)
                        .map(|k| (g[k] - anchor[k]) * (g[k] - anchor[k]))
                        .sum::<f64>()
                        .sqrt();
                    max_dist = max_dist.max(d);
                    let base: Vec<i64> = (0..dim)
                        .map(|k| ((g[k] - anchor[k]) / spacing).round() as i64)
                        .collect();
                    let mut off = vec![-1i64; dim];
                    'offsets: loop {
                        let j: Vec<i64> = (0..dim).map(|k| base[k] + off[k]).collect();
                        let d2: f64 = (0..dim)
                            .map(|k| {
                                let c = anchor[k] + j[k] as f64 * spacing;
                                (c - g[k]) * (c - g[k])
                            })
                            .sum();
                        if d2.sqrt() <= mark_dist {
                            marked.entry(j).or_insert(());
                        }
                        for k in (0..dim).rev() {
                            off[k] += 1;
                            if off[k] <= 1 {
                                continue 'offsets;
                            }
                            off[k] = -1;
                            if k == 0 {
                                break 'offsets;
                            }
                        }
                    }
                }
                for k in (0..dim).rev() {
                    idx[k] += 1;
                    if idx[k] < counts[k] {
                        continue 'probe;
                    }
                    idx[k] = 0;
                    if k == 0 {
                        break 'probe;
                    }
                }
            }
            if !reached {
                return Err(OscError::Domain(
                    "sector contains no probe points; cannot build a cap cover".into(),
                ));
            }
            if radius >= 1.1 * max_dist {
                // Degenerate scale: one cap at the sector midpoint covers
                // everything with room to spare.
                lattice.insert(vec![0; dim], 0);
            } else {
                for (pos, key) in marked.into_keys().enumerate() {
                    lattice.insert(key, pos);
                }
            }
        }
        let centers: Vec<Vec<f64>> = lattice
            .keys()
            .map(|j| {
                (0..dim)
                    .map(|k| anchor[k] + j[k] as f64 * spacing)
                    .collect()
            })
            .collect();
        Ok(Self {
            dim,
            r_scale,
            delta,
            lambda,
            radius,
            spacing,
            v_spacing,
            v_max: 2.0 * lambda,
            centers,
            anchor,
            lattice,
            sector: sector.clone(),
        })
    }

    fn raw_bump(&self, theta: usize, w: &[f64]) -> f64 {
        let c = &self.centers[theta];
        let d: f64 = c
            .iter()
            .zip(w)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        bump(d / self.radius)
    }

    /// All caps whose weight at `w` is nonzero, with the normalized weights.
    pub fn weights_at(&self, w: &[f64]) -> Vec<(usize, f64)> {
        if self.centers.len() == 1 {
            // Degenerate cover: the lone cap is the whole partition wherever
            // it reaches, which by construction includes the sector.
            let d: f64 = self.centers[0]
                .iter()
                .zip(w)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d < self.radius {
                return vec![(0, 1.0)];
            }
            return Vec::new();
        }
        let mut hits: Vec<(usize, f64)> = Vec::new();
        let mut denom = 0.0;
        let ratio = self.radius / self.spacing;
        let mut off = vec![0i64; self.dim];
        let base: Vec<f64> = (0..self.dim)
            .map(|k| (w[k] - self.anchor[k]) / self.spacing)
            .collect();
        let lo: Vec<i64> = base.iter().map(|b| (b - ratio).ceil() as i64).collect();
        let hi: Vec<i64> = base.iter().map(|b| (b + ratio).floor() as i64).collect();
        if lo.iter().zip(&hi).any(|(a, b)| a > b) {
            return hits;
        }
        off.copy_from_slice(&lo);
        loop {
            if let Some(&idx) = self.lattice.get(&off) {
                let b = self.raw_bump(idx, w);
                if b > 0.0 {
                    denom += b;
                    hits.push((idx, b));
                }
            }
            let mut k = self.dim;
            loop {
                if k == 0 {
                    if denom > 0.0 {
                        for h in hits.iter_mut() {
                            h.1 /= denom;
                        }
                    }
                    hits.sort_by_key(|h| h.0);
                    return hits;
                }
                k -= 1;
                off[k] += 1;
                if off[k] <= hi[k] {
                    break;
                }
                off[k] = lo[k];
            }
        }
    }

    /// Normalized cap weight at `w`; the weights over all caps sum to one
    /// wherever the cover reaches.
    pub fn weight(&self, theta: usize, w: &[f64]) -> f64 {
        if self.raw_bump(theta, w) == 0.0 {
            return 0.0;
        }
        self.weights_at(w)
            .into_iter()
            .find(|(i, _)| *i == theta)
            .map(|(_, v)| v)
            .unwrap_or(0.0)
    }

    /// Number of caps covering `w`.
    pub fn overlap(&self, w: &[f64]) -> usize {
        self.weights_at(w).len()
    }

    /// Trailing cutoff: identically one on the cap, vanishing beyond
    /// `(1 + 1/4)` times the cap radius.
    pub fn cutoff(&self, theta: usize, w: &[f64]) -> f64 {
        let c = &self.centers[theta];
        let d: f64 = c
            .iter()
            .zip(w)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let outer = self.radius * (1.0 + CUTOFF_EXTRA);
        if d <= self.radius {
            1.0
        } else if d >= outer {
            0.0
        } else {
            transition((outer - d) / (self.radius * CUTOFF_EXTRA))
        }
    }

    /// Enumerate the full cap-by-lattice index family, restricted to lattice
    /// points of norm at most `2 lambda`.
    pub fn indices(&self, budget: usize) -> Result<Vec<PacketIndex>> {
        let reach = (self.v_max / self.v_spacing).floor() as i64;
        let per_axis = (2 * reach + 1) as usize;
        let mut upper = self.centers.len();
        for _ in 0..self.dim {
            upper = upper.saturating_mul(per_axis);
        }
        if upper > budget {
            return Err(OscError::Budget(format!(
                "packet index family holds up to {upper} entries, budget {budget}"
            )));
        }
        let mut out = Vec::new();
        for (theta, center) in self.centers.iter().enumerate() {
            let mut j = vec![-reach; self.dim];
            'lattice: loop {
                let v: Vec<f64> = j.iter().map(|&a| a as f64 * self.v_spacing).collect();
                let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm <= self.v_max {
                    out.push(PacketIndex {
                        theta,
                        center: center.clone(),
                        radius: self.radius,
                        v,
                        r_scale: self.r_scale,
                        delta: self.delta,
                    });
                }
                for k in (0..self.dim).rev() {
                    j[k] += 1;
                    if j[k] <= reach {
                        continue 'lattice;
                    }
                    j[k] = -reach;
                    if k == 0 {
                        break 'lattice;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One piece of the decomposition: mesh coefficients supported in a single
/// cap, concentrated on one modulation-lattice cell.
#[derive(Debug, Clone)]
pub struct WavePacket {
    pub index: PacketIndex,
    /// Flat mesh node ids carrying the coefficients.
    pub nodes: Vec<usize>,
    pub coeffs: Vec<Complex64>,
    /// Mesh `L^2` norm of the piece.
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub struct DecomposeConfig {
    /// Pieces with relative mass below this bound are dropped (and their
    /// mass reported, since dropping them is the only source of
    /// reconstruction error).
    pub prune_rel: f64,
    /// Pieces below this relative mass are counted but not stored.
    pub store_rel: f64,
    /// Rough flop ceiling for the transform work.
    pub budget_flops: f64,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            prune_rel: 1e-11,
            store_rel: 0.0,
            budget_flops: 1e11,
        }
    }
}

/// Result of splitting a mesh function into wave packets.
#[derive(Debug)]
pub struct PacketDecomposition {
    /// Stored pieces (those with relative mass at least `store_rel`).
    pub packets: Vec<WavePacket>,
    /// Number of pieces above the prune threshold, stored or not.
    pub packet_count: usize,
    pub input_norm: f64,
    /// Sum of squared piece norms over all counted pieces.
    pub sum_sq_norms: f64,
    /// Relative mesh `L^2` distance between the input and the sum of all
    /// counted pieces.
    pub residual: f64,
    /// Upper bound for the total norm of pruned pieces.
    pub pruned_norm_bound: f64,
    /// The sum of all counted pieces on the full mesh.
    pub reconstruction: Vec<Complex64>,
}

/// One lattice cell of the axis partition: the index range of dual nodes it
/// touches and the window values on them.
struct AxisCell {
    j: i64,
    p_lo: usize,
    p_hi: usize,
    window: Vec<f64>,
}

/// Contract a row-major tensor with one matrix per axis (data index i of
/// axis k maps through `mats[k]` of shape `dims[k] x out_k`). The column
/// major product buffer re-read as row-major cycles the fresh axis to the
/// front, so after all axes the output is row-major over the out-axes in
/// their original order.
fn tensor_contract(
    mut re: Vec<f64>,
    mut im: Vec<f64>,
    dims: &[usize],
    mats: &[(DMatrix<f64>, DMatrix<f64>)],
) -> (Vec<f64>, Vec<f64>) {
    let d = dims.len();
    for k in (0..d).rev() {
        let m = mats[k].0.nrows();
        debug_assert_eq!(dims[k], m);
        let rows = re.len() / m;
        let a = DMatrix::from_row_slice(rows, m, &re);
        let b = DMatrix::from_row_slice(rows, m, &im);
        let cre = &a * &mats[k].0 - &b * &mats[k].1;
        let cim = &a * &mats[k].1 + &b * &mats[k].0;
        re = cre.as_slice().to_vec();
        im = cim.as_slice().to_vec();
    }
    (re, im)
}

struct CapOutput {
    box_lo: Vec<usize>,
    box_dims: Vec<usize>,
    recon: Vec<Complex64>,
    packets: Vec<WavePacket>,
    count: usize,
    sum_sq: f64,
    pruned: f64,
}

/// Split `coeffs` on `mesh` into wave packets over `cover`.
///
/// The mesh must be a cartesian tensor resolving the cap radius with at
/// least eight nodes. Summing every counted piece reproduces the input
/// exactly; only explicitly pruned pieces (reported through
/// `pruned_norm_bound`) are missing from the reconstruction.
pub fn decompose(
    cover: &PacketCover,
    mesh: &FrequencyMesh,
    coeffs: &[Complex64],
    config: &DecomposeConfig,
) -> Result<PacketDecomposition> {
    let MeshLayout::CartesianTensor { axes, steps } = &mesh.layout else {
        return Err(OscError::Unsupported(
            "wave packet decomposition needs a cartesian tensor mesh".into(),
        ));
    };
    let d = cover.dim;
    if mesh.dim != d {
        return Err(OscError::Inconsistent(format!(
            "cover dimension {d} != mesh dimension {}",
            mesh.dim
        )));
    }
    if coeffs.len() != mesh.nodes.len() {
        return Err(OscError::Inconsistent(format!(
            "{} coefficients on a mesh of {} nodes",
            coeffs.len(),
            mesh.nodes.len()
        )));
    }
    let max_step = steps.iter().cloned().fold(0.0_f64, f64::max);
    if cover.radius / max_step < 8.0 - 1e-9 {
        return Err(OscError::Resolution(format!(
            "mesh spacing {max_step:.3e} resolves the cap radius {:.3e} with fewer than 8 nodes",
            cover.radius
        )));
    }
    let input_norm = mesh.l2_norm(coeffs);
    let cell_vol: f64 = steps.iter().product();
    if input_norm == 0.0 {
        return Ok(PacketDecomposition {
            packets: Vec::new(),
            packet_count: 0,
            input_norm,
            sum_sq_norms: 0.0,
            residual: 0.0,
            pruned_norm_bound: 0.0,
            reconstruction: vec![Complex64::new(0.0, 0.0); coeffs.len()],
        });
    }

    // Dual grids: one complete exponential basis per axis, fine enough to
    // give the lattice cells a resolved taper (four dual nodes per taper).
    let tau = cover.v_spacing / CELL_TAPER_FRACTION;
    let mut dual_ys: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut dual_sizes: Vec<usize> = Vec::with_capacity(d);
    for k in 0..d {
        let period = 2.0 * std::f64::consts::PI / steps[k];
        let m_dual = ((period / tau).ceil() as usize).max(4);
        let dy = period / m_dual as f64;
        let shift = 0.5 * (m_dual as f64 - 1.0);
        dual_ys.push((0..m_dual).map(|p| (p as f64 - shift) * dy).collect());
        dual_sizes.push(m_dual);
    }
    let dual_strides: Vec<usize> = (0..d)
        .map(|k| dual_sizes[k + 1..].iter().product())
        .collect();

    // Axis cells of the modulation lattice, with smooth window values whose
    // telescoping sum is exactly one on every dual node.
    let axis_cells: Vec<Vec<AxisCell>> = (0..d)
        .map(|k| {
            let ys = &dual_ys[k];
            let h = cover.v_spacing;
            let j_lo = (ys[0] / h).floor() as i64 - 1;
            let j_hi = (ys[ys.len() - 1] / h).ceil() as i64 + 1;
            let mut cells = Vec::new();
            for j in j_lo..=j_hi {
                let e_lo = (j as f64 - 0.5) * h;
                let e_hi = (j as f64 + 0.5) * h;
                let p_lo = ys.partition_point(|&y| y < e_lo);
                let p_hi = ys.partition_point(|&y| y < e_hi + tau);
                if p_lo >= p_hi {
                    continue;
                }
                let window: Vec<f64> = ys[p_lo..p_hi]
                    .iter()
                    .map(|&y| transition((y - e_lo) / tau) - transition((y - e_hi) / tau))
                    .collect();
                if window.iter().all(|&v| v <= 0.0) {
                    continue;
                }
                cells.push(AxisCell {
                    j,
                    p_lo,
                    p_hi,
                    window,
                });
            }
            cells
        })
        .collect();

    // Cap boxes (per-axis node index ranges) and a flop estimate.
    let box_half = cover.radius * (1.0 + CUTOFF_EXTRA);
    let counts: Vec<usize> = axes.iter().map(|a| a.len()).collect();
    let node_strides: Vec<usize> = (0..d).map(|k| counts[k + 1..].iter().product()).collect();
    let mut boxes: Vec<(usize, Vec<usize>, Vec<usize>)> = Vec::new();
    let mut flops = 0.0_f64;
    for (theta, c) in cover.centers.iter().enumerate() {
        let mut lo_idx = Vec::with_capacity(d);
        let mut dims = Vec::with_capacity(d);
        let mut ok = true;
        for k in 0..d {
            let lo = axes[k].partition_point(|&w| w < c[k] - box_half - 0.5 * steps[k]);
            let hi = axes[k].partition_point(|&w| w < c[k] + box_half + 0.5 * steps[k]);
            if lo >= hi {
                ok = false;
                break;
            }
            lo_idx.push(lo);
            dims.push(hi - lo);
        }
        if !ok {
            continue;
        }
        let mut len: f64 = dims.iter().map(|&m| m as f64).product();
        for k in (0..d).rev() {
            flops += 8.0 * len * dual_sizes[k] as f64;
            len = len / dims[k] as f64 * dual_sizes[k] as f64;
        }
        boxes.push((theta, lo_idx, dims));
    }
    // Cell back-transforms cost at most about as much as the forward pass.
    flops *= 2.0;
    if flops > config.budget_flops {
        return Err(OscError::Budget(format!(
            "decomposition would need ~{flops:.2e} flops, budget {:.2e}",
            config.budget_flops
        )));
    }

    let prune_norm = config.prune_rel * input_norm;
    let store_norm = config.store_rel * input_norm;

    let outputs: Vec<CapOutput> = boxes
        .par_iter()
        .map(|(theta, box_lo, box_dims)| {
            cap_pieces(
                cover, coeffs, *theta, box_lo, box_dims, axes, &node_strides, cell_vol,
                &dual_ys, &dual_strides, &axis_cells, prune_norm, store_norm,
            )
        })
        .collect();

    let mut reconstruction = vec![Complex64::new(0.0, 0.0); coeffs.len()];
    let mut packets = Vec::new();
    let mut packet_count = 0;
    let mut sum_sq_norms = 0.0;
    let mut pruned_norm_bound = 0.0;
    for out in outputs {
        scatter_add(
            &mut reconstruction,
            &out.recon,
            &out.box_lo,
            &out.box_dims,
            &node_strides,
        );
        packet_count += out.count;
        sum_sq_norms += out.sum_sq;
        pruned_norm_bound += out.pruned;
        packets.extend(out.packets);
    }
    let mut err_sq = 0.0;
    for (r, f) in reconstruction.iter().zip(coeffs) {
        err_sq += (r - f).norm_sqr();
    }
    let residual = (err_sq * cell_vol).sqrt() / input_norm;

    Ok(PacketDecomposition {
        packets,
        packet_count,
        input_norm,
        sum_sq_norms,
        residual,
        pruned_norm_bound,
        reconstruction,
    })
}

#[allow(clippy::too_many_arguments)]
fn cap_pieces(
    cover: &PacketCover,
    coeffs: &[Complex64],
    theta: usize,
    box_lo: &[usize],
    box_dims: &[usize],
    axes: &[Vec<f64>],
    node_strides: &[usize],
    cell_vol: f64,
    dual_ys: &[Vec<f64>],
    dual_strides: &[usize],
    axis_cells: &[Vec<AxisCell>],
    prune_norm: f64,
    store_norm: f64,
) -> CapOutput {
    let d = cover.dim;
    let box_len: usize = box_dims.iter().product();
    let mut empty = CapOutput {
        box_lo: box_lo.to_vec(),
        box_dims: box_dims.to_vec(),
        recon: vec![Complex64::new(0.0, 0.0); box_len],
        packets: Vec::new(),
        count: 0,
        sum_sq: 0.0,
        pruned: 0.0,
    };

    // Gather the weighted input on the cap box, and keep the flat node ids
    // and coordinates for later.
    let mut g_re = vec![0.0; box_len];
    let mut g_im = vec![0.0; box_len];
    let mut flat_ids = vec![0usize; box_len];
    let mut cut_vals = vec![0.0; box_len];
    let mut w_buf = vec![0.0; d];
    let mut idx = vec![0usize; d];
    let mut mass = 0.0;
    for pos in 0..box_len {
        let mut flat = 0;
        for k in 0..d {
            let a = box_lo[k] + idx[k];
            flat += a * node_strides[k];
            w_buf[k] = axes[k][a];
        }
        flat_ids[pos] = flat;
        cut_vals[pos] = cover.cutoff(theta, &w_buf);
        let w = cover.weight(theta, &w_buf);
        if w > 0.0 {
            let z = coeffs[flat];
            g_re[pos] = w * z.re;
            g_im[pos] = w * z.im;
            mass += (w * z.re) * (w * z.re) + (w * z.im) * (w * z.im);
        }
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < box_dims[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    let cap_norm = (mass * cell_vol).sqrt();
    if cap_norm <= prune_norm {
        empty.pruned = cap_norm;
        return empty;
    }
    // Nodes inside the cutoff support; stored packets keep only these, so a
    // packet's node list witnesses its support bound.
    let support: Vec<usize> = (0..box_len).filter(|&p| cut_vals[p] > 0.0).collect();
    let support_ids: Vec<usize> = support.iter().map(|&p| flat_ids[p]).collect();

    // Forward transform to the dual grid: one exponential matrix per axis.
    let fwd: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..d)
        .map(|k| {
            let m = box_dims[k];
            let ys = &dual_ys[k];
            let mut re = DMatrix::zeros(m, ys.len());
            let mut im = DMatrix::zeros(m, ys.len());
            for i in 0..m {
                let w = axes[k][box_lo[k] + i];
                for (p, &y) in ys.iter().enumerate() {
                    let (s, c) = (y * w).sin_cos();
                    re[(i, p)] = c;
                    im[(i, p)] = s;
                }
            }
            (re, im)
        })
        .collect();
    let (h_re, h_im) = tensor_contract(g_re, g_im, box_dims, &fwd);

    // Walk the tensor product of axis cells; back-transform each surviving
    // cell onto the box and cut off with the cap plateau.
    let mut recon = vec![Complex64::new(0.0, 0.0); box_len];
    let mut packets = Vec::new();
    let mut count = 0usize;
    let mut sum_sq = 0.0;
    let mut pruned = 0.0;
    let dual_norm: f64 = dual_ys.iter().map(|ys| ys.len() as f64).product();
    let mut cell_pick = vec![0usize; d];
    'cells: loop {
        let cells: Vec<&AxisCell> = (0..d).map(|k| &axis_cells[k][cell_pick[k]]).collect();
        let v: Vec<f64> = cells.iter().map(|c| c.j as f64 * cover.v_spacing).collect();
        let v_norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let block_dims: Vec<usize> = cells.iter().map(|c| c.p_hi - c.p_lo).collect();
        let block_len: usize = block_dims.iter().product();

        // Windowed mass of the cell; the piece norm never exceeds it.
        let mut b_re = vec![0.0; block_len];
        let mut b_im = vec![0.0; block_len];
        let mut est = 0.0;
        let mut bidx = vec![0usize; d];
        for pos in 0..block_len {
            let mut flat = 0;
            let mut win = 1.0;
            for k in 0..d {
                flat += (cells[k].p_lo + bidx[k]) * dual_strides[k];
                win *= cells[k].window[bidx[k]];
            }
            b_re[pos] = h_re[flat];
            b_im[pos] = h_im[flat];
            est += win * win * (h_re[flat] * h_re[flat] + h_im[flat] * h_im[flat]);
            for k in (0..d).rev() {
                bidx[k] += 1;
                if bidx[k] < block_dims[k] {
                    break;
                }
                bidx[k] = 0;
            }
        }
        let est_norm = (est * cell_vol / dual_norm).sqrt();
        let keep = v_norm <= cover.v_max && est_norm > prune_norm;
        if !keep {
            pruned += est_norm;
        } else {
            let back: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..d)
                .map(|k| {
                    let cell = cells[k];
                    let rows = cell.p_hi - cell.p_lo;
                    let m = box_dims[k];
                    let scale = 1.0 / dual_ys[k].len() as f64;
                    let mut re = DMatrix::zeros(rows, m);
                    let mut im = DMatrix::zeros(rows, m);
                    for p in 0..rows {
                        let y = dual_ys[k][cell.p_lo + p];
                        let win = cell.window[p] * scale;
                        for i in 0..m {
                            let w = axes[k][box_lo[k] + i];
                            let (s, c) = (y * w).sin_cos();
                            re[(p, i)] = win * c;
                            im[(p, i)] = -win * s;
                        }
                    }
                    (re, im)
                })
                .collect();
            let (p_re, p_im) = tensor_contract(b_re, b_im, &block_dims, &back);

            let mut piece = vec![Complex64::new(0.0, 0.0); box_len];
            let mut norm_sq = 0.0;
            for pos in 0..box_len {
                let cut = cut_vals[pos];
                if cut == 0.0 {
                    continue;
                }
                let z = Complex64::new(cut * p_re[pos], cut * p_im[pos]);
                piece[pos] = z;
                norm_sq += z.norm_sqr();
                recon[pos] += z;
            }
            let norm = (norm_sq * cell_vol).sqrt();
            count += 1;
            sum_sq += norm * norm;
            if norm >= store_norm {
                packets.push(WavePacket {
                    index: PacketIndex {
                        theta,
                        center: cover.centers[theta].clone(),
                        radius: cover.radius,
                        v,
                        r_scale: cover.r_scale,
                        delta: cover.delta,
                    },
                    nodes: support_ids.clone(),
                    coeffs: support.iter().map(|&p| piece[p]).collect(),
                    norm,
                });
            }
        }

        for k in (0..d).rev() {
            cell_pick[k] += 1;
            if cell_pick[k] < axis_cells[k].len() {
                continue 'cells;
            }
            cell_pick[k] = 0;
            if k == 0 {
                break 'cells;
            }
        }
    }
    CapOutput {
        box_lo: box_lo.to_vec(),
        box_dims: box_dims.to_vec(),
        recon,
        packets,
        count,
        sum_sq,
        pruned,
    }
}

fn scatter_add(
    global: &mut [Complex64],
    local: &[Complex64],
    box_lo: &[usize],
    box_dims: &[usize],
    node_strides: &[usize],
) {
    let d = box_dims.len();
    let mut idx = vec![0usize; d];
    for z in local {
        let mut flat = 0;
        for k in 0..d {
            flat += (box_lo[k] + idx[k]) * node_strides[k];
        }
        global[flat] += z;
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < box_dims[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Curved tube attached to a packet: sampled core curve, validity interval
/// and radius `R^{1/2+delta}`.
#[derive(Debug, Clone)]
pub struct Tube {
    pub index: PacketIndex,
    /// Core sample positions along the last coordinate.
    pub xs: Vec<f64>,
    /// Core points `x'` at those positions (operator scale).
    pub points: Vec<Vec<f64>>,
    /// Tube radius `R^{1/2+delta}`.
    pub radius: f64,
    /// Largest defect of the core equation over the samples.
    pub max_residual: f64,
    /// Largest angle between the core tangent and the phase normal field.
    pub max_tangent_angle: f64,
}

impl Tube {
    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Trace the core curve of a packet: at each time sample, the spatial point
/// where the frequency gradient of the phase matches the lattice point `v`.
/// The longest contiguous solvable run over `[x_lo, x_hi]` becomes the tube
/// interval; an empty run yields an empty tube.
pub fn core_curve(
    phase: &PhaseField,
    index: &PacketIndex,
    x_lo: f64,
    x_hi: f64,
) -> Result<Tube> {
    if x_hi <= x_lo {
        return Err(OscError::Domain(format!(
            "empty core scan interval [{x_lo}, {x_hi}]"
        )));
    }
    let spacing = index.r_scale.sqrt() / 4.0;
    let count = (((x_hi - x_lo) / spacing).ceil() as usize).max(1) + 1;
    let step = (x_hi - x_lo) / (count - 1) as f64;
    let radius = index.r_scale.powf(0.5 + index.delta);

    let solves: Vec<Option<Vec<f64>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let t = x_lo + i as f64 * step;
            solve_phi(phase, t, &index.center, &index.v).ok()
        })
        .collect();

    // Longest contiguous solvable run.
    let mut best = (0usize, 0usize);
    let mut run_start = None;
    for (i, s) in solves.iter().enumerate() {
        match (s.is_some(), run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(st)) => {
                if i - st > best.1 - best.0 {
                    best = (st, i);
                }
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(st) = run_start {
        if count - st > best.1 - best.0 {
            best = (st, count);
        }
    }
    if best.1 == best.0 {
        return Ok(Tube {
            index: index.clone(),
            xs: Vec::new(),
            points: Vec::new(),
            radius,
            max_residual: 0.0,
            max_tangent_angle: 0.0,
        });
    }

    let xs: Vec<f64> = (best.0..best.1)
        .map(|i| x_lo + i as f64 * step)
        .collect();
    let points: Vec<Vec<f64>> = solves[best.0..best.1]
        .iter()
        .map(|s| s.clone().expect("solvable by construction"))
        .collect();

    // Defect of the core equation and tangent alignment with the normal
    // field, checked at every sample.
    let h_t = spacing / 16.0;
    let checks: Vec<(f64, f64)> = xs
        .par_iter()
        .zip(points.par_iter())
        .map(|(&t, p)| {
            let mut x = p.clone();
            x.push(t);
            let grad = phase.grad_w(&x, &index.center);
            let res = grad
                .iter()
                .zip(&index.v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let angle = match (
                solve_phi(phase, t + h_t, &index.center, &index.v),
                solve_phi(phase, t - h_t, &index.center, &index.v),
                gauss_map(phase, &x, &index.center),
            ) {
                (Ok(fwd), Ok(bwd), Ok(gauss)) => {
                    let mut tangent: Vec<f64> = fwd
                        .iter()
                        .zip(&bwd)
                        .map(|(a, b)| (a - b) / (2.0 * h_t))
                        .collect();
                    tangent.push(1.0);
                    vector_angle(&tangent, &gauss)
                }
                _ => f64::NAN,
            };
            (res, angle)
        })
        .collect();
    let max_residual = checks.iter().map(|c| c.0).fold(0.0, f64::max);
    let max_tangent_angle = checks.iter().map(|c| c.1).fold(0.0, f64::max);

    Ok(Tube {
        index: index.clone(),
        xs,
        points,
        radius,
        max_residual,
        max_tangent_angle,
    })
}

/// Whether `x` lies in the tube dilated by `dilate`: the last coordinate
/// inside the core interval and the spatial offset from the (interpolated)
/// core below `dilate` times the tube radius.
pub fn tube_contains(tube: &Tube, x: &[f64], dilate: f64) -> bool {
    if tube.xs.is_empty() {
        return false;
    }
    let d = tube.points[0].len();
    debug_assert_eq!(x.len(), d + 1);
    let t = x[d];
    let (lo, hi) = (tube.xs[0], tube.xs[tube.xs.len() - 1]);
    if t < lo || t > hi {
        return false;
    }
    let pos = tube.xs.partition_point(|&s| s < t).min(tube.xs.len() - 1);
    let (i0, i1) = if pos == 0 { (0, 0) } else { (pos - 1, pos) };
    let frac = if i0 == i1 {
        0.0
    } else {
        (t - tube.xs[i0]) / (tube.xs[i1] - tube.xs[i0])
    };
    let mut dist_sq = 0.0;
    for k in 0..d {
        let core = tube.points[i0][k] + frac * (tube.points[i1][k] - tube.points[i0][k]);
        dist_sq += (x[k] - core) * (x[k] - core);
    }
    dist_sq.sqrt() < dilate * tube.radius
}

/// Polynomial core together with how far it strays from the sampled curve.
#[derive(Debug, Clone)]
pub struct TaylorCore {
    pub curve: crate::poly::PolyCurve,
    /// Max position gap over the validity window, in units of
    /// `lambda^{-1/2}`.
    pub pos_error: f64,
    /// Max tangent angle gap over the validity window, in units of
    /// `lambda^{-1/2}`.
    pub angle_error: f64,
}

/// Degree-`ceil(1/(2 eps))` Taylor polynomial of the core around zero, fit
/// at unit scale through a high-order central stencil and rescaled to
/// operator coordinates.
pub fn taylor_core(phase: &PhaseField, tube: &Tube, eps: f64) -> Result<TaylorCore> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(OscError::Domain(format!("Taylor exponent eps = {eps}")));
    }
    if tube.is_empty() {
        return Err(OscError::Domain("empty tube has no core to fit".into()));
    }
    let lam = phase.lambda;
    let degree = (1.0 / (2.0 * eps)).ceil() as usize;
    let half = (degree + 3).div_ceil(2);
    let t_lo = tube.xs[0];
    let t_hi = tube.xs[tube.xs.len() - 1];
    let reach = (-t_lo).min(t_hi) / lam;
    if reach <= 0.0 {
        return Err(OscError::Domain(
            "Taylor base point lies outside the core interval".into(),
        ));
    }
    let h = 0.25_f64.min(0.8 * reach / half as f64);

    // Unit-scale curve samples on the stencil.
    let w = &tube.index.center;
    let v = &tube.index.v;
    let dim = w.len();
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(2 * half + 1);
    for j in -(half as i64)..=(half as i64) {
        let x = solve_phi(phase, lam * j as f64 * h, w, v)?;
        samples.push(x.iter().map(|a| a / lam).collect());
    }

    // Stencil weights from the moment system: sum_j w_j j^p = p! delta_{pk}
    // for p = 0..2*half, solved once per derivative order.
    let pts = 2 * half + 1;
    let mut vander = DMatrix::zeros(pts, pts);
    for p in 0..pts {
        for (col, j) in (-(half as i64)..=(half as i64)).enumerate() {
            vander[(p, col)] = (j as f64).powi(p as i32);
        }
    }
    let lu = vander.lu();
    let solver_tol = 1e-11;
    let mut unit_coeffs: Vec<Vec<f64>> = vec![Vec::new(); dim];
    for k in 0..=degree {
        let mut rhs = nalgebra::DVector::zeros(pts);
        let mut fact = 1.0;
        for p in 2..=k {
            fact *= p as f64;
        }
        rhs[k] = fact;
        let weights = lu.solve(&rhs).ok_or(OscError::Conditioning(
            "stencil moment system is singular".into(),
        ))?;
        let weight_mass: f64 = weights.iter().map(|a| a.abs()).sum();
        let hk = h.powi(k as i32);
        let noise = solver_tol * weight_mass / hk;
        for i in 0..dim {
            let deriv: f64 = weights
                .iter()
                .zip(&samples)
                .map(|(&wj, s)| wj * s[i])
                .sum::<f64>()
                / hk;
            let coeff = deriv / fact;
            if noise > 1e-3 + 0.1 * coeff.abs() {
                return Err(OscError::Conditioning(format!(
                    "derivative order {k} noise {noise:.2e} overwhelms coefficient {coeff:.2e}"
                )));
            }
            unit_coeffs[i].push(coeff);
        }
    }

    // Operator scale: Gamma^lambda(t) = lambda Gamma(t/lambda).
    let coeffs: Vec<Vec<f64>> = unit_coeffs
        .iter()
        .map(|c| {
            c.iter()
                .enumerate()
                .map(|(k, &a)| a * lam.powi(1 - k as i32))
                .collect()
        })
        .collect();
    let window = lam.powf(1.0 - eps);
    let curve = crate::poly::PolyCurve::new(coeffs, t_lo.max(-window), t_hi.min(window));

    // Error scan against the sampled core over the validity window.
    let sqrt_lam = lam.sqrt();
    let mut pos_error = 0.0_f64;
    let mut angle_error = 0.0_f64;
    for i in 0..tube.xs.len() {
        let t = tube.xs[i];
        if t < curve.t_lo || t > curve.t_hi {
            continue;
        }
        let p = curve.eval(t);
        let gap: f64 = p
            .iter()
            .zip(&tube.points[i])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        pos_error = pos_error.max(gap * sqrt_lam);
        if i > 0 && i + 1 < tube.xs.len() {
            let dt = tube.xs[i + 1] - tube.xs[i - 1];
            let mut sampled: Vec<f64> = (0..dim)
                .map(|k| (tube.points[i + 1][k] - tube.points[i - 1][k]) / dt)
                .collect();
            sampled.push(1.0);
            let mut fitted = curve.velocity(t);
            fitted.push(1.0);
            angle_error = angle_error.max(vector_angle(&sampled, &fitted) * sqrt_lam);
        }
    }
    Ok(TaylorCore {
        curve,
        pos_error,
        angle_error,
    })
}

/// Largest first and second derivative norms of a polynomial curve over its
/// validity interval (dense scan).
pub fn curve_derivative_bounds(curve: &crate::poly::PolyCurve, samples: usize) -> (f64, f64) {
    let n = samples.max(2);
    let mut d1 = 0.0_f64;
    let mut d2 = 0.0_f64;
    for i in 0..n {
        let t = curve.t_lo + (curve.t_hi - curve.t_lo) * i as f64 / (n - 1) as f64;
        let v: f64 = curve
            .velocity(t)
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt();
        let a: f64 = curve
            .coeffs
            .iter()
            .map(|c| {
                let acc: f64 = c
                    .iter()
                    .enumerate()
                    .skip(2)
                    .rev()
                    .fold(0.0, |acc, (k, &ck)| {
                        acc * t + ck * (k * (k - 1)) as f64
                    });
                acc * acc
            })
            .sum::<f64>()
            .sqrt();
        d1 = d1.max(v);
        d2 = d2.max(a);
    }
    (d1, d2)
}

/// Field magnitude of one packet inside its tube and on dilation rings.
#[derive(Debug, Clone)]
pub struct DecayProfile {
    pub inside_max: f64,
    /// `(dilate, max |field|)` on the ring between consecutive dilates.
    pub rings: Vec<(f64, f64)>,
    /// Whether maxima decrease from the tube outward.
    pub monotone: bool,
}

/// Evaluate the operator on a single packet over `grid` and compare its
/// magnitude inside the tube against the rings at dilation 2, 4 and 8.
pub fn decay_profile(
    phase: &PhaseField,
    amplitude: &Amplitude,
    mesh: &FrequencyMesh,
    packet: &WavePacket,
    tube: &Tube,
    grid: &GridRegion,
) -> Result<DecayProfile> {
    let mut coeffs = vec![Complex64::new(0.0, 0.0); mesh.nodes.len()];
    for (&node, &c) in packet.nodes.iter().zip(&packet.coeffs) {
        coeffs[node] += c;
    }
    let report = apply_operator(phase, amplitude, mesh, &coeffs, grid)?;
    let dilates = [1.0, 2.0, 4.0, 8.0];
    let mut maxima = [0.0_f64; 4];
    for (i, z) in report.field.values.iter().enumerate() {
        let x = report.field.grid.node(i);
        let mag = z.norm();
        for (slot, &dil) in dilates.iter().enumerate() {
            if tube_contains(tube, &x, dil) {
                maxima[slot] = maxima[slot].max(mag);
                break;
            }
        }
    }
    let monotone = maxima[0] >= maxima[1] && maxima[1] >= maxima[2] && maxima[2] >= maxima[3];
    Ok(DecayProfile {
        inside_max: maxima[0],
        rings: vec![(2.0, maxima[1]), (4.0, maxima[2]), (8.0, maxima[3])],
        monotone,
    })
}

/// Write a tube inventory to CSV: one row per core sample, carrying the cap
/// index and center, the lattice point, the interval and the sample.
pub fn export_tubes_csv<P: AsRef<Path>>(tubes: &[Tube], path: P) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut wtr = std::io::BufWriter::new(file);
    let dim = tubes
        .iter()
        .find(|t| !t.is_empty())
        .map(|t| t.points[0].len())
        .unwrap_or(0);
    write!(wtr, "theta")?;
    for k in 0..dim {
        write!(wtr, ",center_{k}")?;
    }
    for k in 0..dim {
        write!(wtr, ",v_{k}")?;
    }
    write!(wtr, ",t_lo,t_hi,x_last")?;
    for k in 0..dim {
        write!(wtr, ",core_{k}")?;
    }
    writeln!(wtr)?;
    for tube in tubes {
        if tube.is_empty() {
            continue;
        }
        let (lo, hi) = (tube.xs[0], tube.xs[tube.xs.len() - 1]);
        for (t, p) in tube.xs.iter().zip(&tube.points) {
            write!(wtr, "{}", tube.index.theta)?;
            for c in &tube.index.center {
                write!(wtr, ",{c}")?;
            }
            for v in &tube.index.v {
                write!(wtr, ",{v}")?;
            }
            write!(wtr, ",{lo},{hi},{t}")?;
            for c in p {
                write!(wtr, ",{c}")?;
            }
            writeln!(wtr)?;
        }
    }
    wtr.flush()?;
    Ok(())
}
