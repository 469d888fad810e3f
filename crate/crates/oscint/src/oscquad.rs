//! Direct quadrature evaluation of the oscillatory integral operator.
//!
//! Computes `T f(x) = sum_j w_j a(x; w_j) exp(i phi(x; w_j)) f(w_j)` over a
//! frequency mesh.  Translation-split phases (`phi = <x', w> + time part`)
//! on cartesian tensor meshes get a separable fast path: per time slice the
//! sum factors into a chirp times a tensor of one-dimensional Fourier
//! contractions, turning the node-by-node sum into dense matrix products.
//! Everything else falls back to a parallel direct sum.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::amplitude::Amplitude;
use crate::error::{OscError, Result};
use crate::field::{FieldSample, GridRegion};
use crate::mesh::{FrequencyMesh, MeshLayout};
use crate::phase::PhaseField;

/// Hard cap on stored field nodes (memory guard).
const MAX_FIELD_NODES: usize = 20_000_000;
/// Hard cap on direct-path node x frequency products.
const MAX_DIRECT_OPS: u128 = 4_000_000_000;
/// Per-axis node cap for automatically laid-out spatial grids.
const MAX_AXIS_NODES: usize = 8192;

#[derive(Debug)]
pub struct QuadratureReport {
    pub field: FieldSample,
    /// Fraction of the weighted input mass `w |beta f|^2` carried by mesh
    /// nodes inside the amplitude's frequency taper band.
    pub boundary_mass_fraction: f64,
    /// Set when more than `1%` of the input mass sits in the taper band:
    /// the sector no longer faithfully represents the input.
    pub truncation_warning: bool,
    pub fast_path: bool,
}

/// Weight-and-taper the raw coefficients: returns `w_j beta_j f_j`, the
/// taper-band mass fraction, and the effective input norm `||beta f||_2`.
fn weighted_input(
    amplitude: &Amplitude,
    mesh: &FrequencyMesh,
    coeffs: &[Complex64],
) -> Result<(Vec<Complex64>, f64, f64)> {
    if coeffs.len() != mesh.nodes.len() {
        return Err(OscError::Inconsistent(format!(
            "{} coefficients for a mesh with {} nodes",
            coeffs.len(),
            mesh.nodes.len()
        )));
    }
    let mut g = Vec::with_capacity(coeffs.len());
    let mut total = 0.0f64;
    let mut band = 0.0f64;
    let mut norm_sq = 0.0f64;
    for ((node, &w), &f) in mesh.nodes.iter().zip(&mesh.weights).zip(coeffs) {
        let beta = amplitude.frequency_factor(node);
        let bf = f * beta;
        let mass = w * bf.norm_sqr();
        total += mass;
        if amplitude.in_boundary_band(node) {
            band += mass;
        }
        norm_sq += mass;
        g.push(bf * w);
    }
    let fraction = if total > 0.0 { band / total } else { 0.0 };
    Ok((g, fraction, norm_sq.sqrt()))
}

/// Phase of the time chirp: `phi(0', x_n; w)` at operator scale.
fn slice_phase(phase: &PhaseField, xn: f64, w: &[f64]) -> f64 {
    let mut xu = vec![0.0; phase.n];
    xu[phase.n - 1] = xn / phase.lambda;
    phase.lambda * phase.value_unit(&xu, w)
}

/// Precomputed per-axis Fourier factors `exp(i w_j x_t)` for the separable
/// contraction (frequency axes x spatial axes).
struct SeparableKernel {
    e_re: Vec<DMatrix<f64>>,
    e_im: Vec<DMatrix<f64>>,
}

impl SeparableKernel {
    fn build(freq_axes: &[Vec<f64>], space_axes: &[Vec<f64>]) -> Self {
        let mut e_re = Vec::with_capacity(freq_axes.len());
        let mut e_im = Vec::with_capacity(freq_axes.len());
        for (fa, sa) in freq_axes.iter().zip(space_axes) {
            let mut re = DMatrix::zeros(fa.len(), sa.len());
            let mut im = DMatrix::zeros(fa.len(), sa.len());
            for (j, &wj) in fa.iter().enumerate() {
                for (t, &xt) in sa.iter().enumerate() {
                    let (s, c) = (wj * xt).sin_cos();
                    re[(j, t)] = c;
                    im[(j, t)] = s;
                }
            }
            e_re.push(re);
            e_im.push(im);
        }
        Self { e_re, e_im }
    }

    /// Contract `sum_j g_j exp(i <x', w_j>)` over the tensor mesh; input is
    /// row-major over the frequency axes, output row-major over the
    /// spatial axes.
    fn contract(&self, g_re: Vec<f64>, g_im: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut vre = g_re;
        let mut vim = g_im;
        for k in (0..self.e_re.len()).rev() {
            let m = self.e_re[k].nrows();
            let rows = vre.len() / m;
            let are = DMatrix::from_row_slice(rows, m, &vre);
            let aim = DMatrix::from_row_slice(rows, m, &vim);
            // (rows x s) column-major data re-reads as row-major with the
            // fresh spatial axis leading, which queues the next frequency
            // axis as the fastest index.
            let cre = &are * &self.e_re[k] - &aim * &self.e_im[k];
            let cim = &are * &self.e_im[k] + &aim * &self.e_re[k];
            vre = cre.as_slice().to_vec();
            vim = cim.as_slice().to_vec();
        }
        (vre, vim)
    }
}

/// One fixed-time slice of the field over a tensor `x'` grid (fast path).
fn eval_slice_fast(
    phase: &PhaseField,
    mesh: &FrequencyMesh,
    g: &[Complex64],
    kernel: &SeparableKernel,
    xn: f64,
) -> Vec<Complex64> {
    let m = g.len();
    let mut gre = Vec::with_capacity(m);
    let mut gim = Vec::with_capacity(m);
    for (node, &gj) in mesh.nodes.iter().zip(g) {
        let theta = slice_phase(phase, xn, node);
        let (s, c) = theta.sin_cos();
        gre.push(gj.re * c - gj.im * s);
        gim.push(gj.re * s + gj.im * c);
    }
    let (vre, vim) = kernel.contract(gre, gim);
    vre.into_iter()
        .zip(vim)
        .map(|(re, im)| Complex64::new(re, im))
        .collect()
}

/// One fixed-time slice by direct summation (any phase, any mesh).
fn eval_slice_direct(
    phase: &PhaseField,
    mesh: &FrequencyMesh,
    g: &[Complex64],
    xp_grid: &GridRegion,
    xn: f64,
) -> Vec<Complex64> {
    (0..xp_grid.len())
        .into_par_iter()
        .map(|flat| {
            let mut x = xp_grid.node(flat);
            x.push(xn);
            let mut acc = Complex64::new(0.0, 0.0);
            for (node, &gj) in mesh.nodes.iter().zip(g) {
                let theta = phase.value(&x, node);
                acc += gj * Complex64::from_polar(1.0, theta);
            }
            acc
        })
        .collect()
}

fn tensor_axes(mesh: &FrequencyMesh) -> Option<&[Vec<f64>]> {
    match &mesh.layout {
        MeshLayout::CartesianTensor { axes, .. } => Some(axes),
        _ => None,
    }
}

/// Evaluate the operator on a full spatial grid (last grid axis = time).
pub fn apply_operator(
    phase: &PhaseField,
    amplitude: &Amplitude,
    mesh: &FrequencyMesh,
    coeffs: &[Complex64],
    grid: &GridRegion,
) -> Result<QuadratureReport> {
    let n = phase.n;
    if grid.dim() != n {
        return Err(OscError::Inconsistent(format!(
            "spatial grid dimension {} does not match the phase dimension {n}",
            grid.dim()
        )));
    }
    if mesh.dim != n - 1 || amplitude.n != n {
        return Err(OscError::Inconsistent(
            "mesh / amplitude dimensions do not match the phase".into(),
        ));
    }
    if grid.len() > MAX_FIELD_NODES {
        return Err(OscError::Budget(format!(
            "grid has {} nodes; cap is {MAX_FIELD_NODES}",
            grid.len()
        )));
    }
    let (g, boundary, _) = weighted_input(amplitude, mesh, coeffs)?;

    let xp_axes = &grid.axes[..n - 1];
    let xn_axis = &grid.axes[n - 1];
    let sn = xn_axis.len();
    let pprime: usize = xp_axes.iter().map(|a| a.len()).product();

    let fast = phase.is_translation_split() && tensor_axes(mesh).is_some();
    let slices: Vec<Vec<Complex64>> = if fast {
        let freq_axes = tensor_axes(mesh).unwrap();
        let kernel = SeparableKernel::build(freq_axes, xp_axes);
        xn_axis
            .par_iter()
            .map(|&xn| eval_slice_fast(phase, mesh, &g, &kernel, xn))
            .collect()
    } else {
        let ops = grid.len() as u128 * mesh.nodes.len() as u128;
        if ops > MAX_DIRECT_OPS {
            return Err(OscError::Budget(format!(
                "direct path needs {ops} kernel evaluations; cap is {MAX_DIRECT_OPS} \
                 (use a translation-split phase on a cartesian mesh for the fast path)"
            )));
        }
        let xp_grid = GridRegion::from_axes(xp_axes.to_vec())?;
        xn_axis
            .iter()
            .map(|&xn| eval_slice_direct(phase, mesh, &g, &xp_grid, xn))
            .collect()
    };

    // Interleave slices into the row-major (x_1 .. x_n) field and apply
    // the spatial amplitude factor.
    let mut values = vec![Complex64::new(0.0, 0.0); grid.len()];
    for (t, slice) in slices.iter().enumerate() {
        debug_assert_eq!(slice.len(), pprime);
        for (base, &v) in slice.iter().enumerate() {
            values[base * sn + t] = v;
        }
    }
    let lambda = phase.lambda;
    values.par_iter_mut().enumerate().for_each(|(flat, v)| {
        let x = grid.node(flat);
        let xu: Vec<f64> = x.iter().map(|c| c / lambda).collect();
        *v *= amplitude.spatial_factor(&xu);
    });

    Ok(QuadratureReport {
        field: FieldSample::new(grid.clone(), values)?,
        boundary_mass_fraction: boundary,
        truncation_warning: boundary > 0.01,
        fast_path: fast,
    })
}

/// Direct-sum twin of [`apply_operator`] (no separable shortcut); used to
/// validate the fast path and for irregular meshes.
pub fn apply_operator_direct(
    phase: &PhaseField,
    amplitude: &Amplitude,
    mesh: &FrequencyMesh,
    coeffs: &[Complex64],
    grid: &GridRegion,
) -> Result<QuadratureReport> {
    let (g, boundary, _) = weighted_input(amplitude, mesh, coeffs)?;
    let ops = grid.len() as u128 * mesh.nodes.len() as u128;
    if ops > MAX_DIRECT_OPS {
        return Err(OscError::Budget(format!(
            "direct path needs {ops} kernel evaluations; cap is {MAX_DIRECT_OPS}"
        )));
    }
    let lambda = phase.lambda;
    let values: Vec<Complex64> = (0..grid.len())
        .into_par_iter()
        .map(|flat| {
            let x = grid.node(flat);
            let xu: Vec<f64> = x.iter().map(|c| c / lambda).collect();
            let mut acc = Complex64::new(0.0, 0.0);
            for (node, &gj) in mesh.nodes.iter().zip(&g) {
                acc += gj * Complex64::from_polar(1.0, phase.value(&x, node));
            }
            acc * amplitude.spatial_factor(&xu)
        })
        .collect();
    Ok(QuadratureReport {
        field: FieldSample::new(grid.clone(), values)?,
        boundary_mass_fraction: boundary,
        truncation_warning: boundary > 0.01,
        fast_path: false,
    })
}

/// Lay out per-axis `x'` nodes covering the stationary set of the phase
/// (the hull of `-d_w phi(0', x_n; w)`) plus a smoothness-scaled padding,
/// clipped to `[-clip, clip]`, at a spacing resolving the field's
/// transverse bandwidth.
pub fn beam_axes(
    phase: &PhaseField,
    amplitude: &Amplitude,
    xn_lo: f64,
    xn_hi: f64,
    clip: f64,
    oversample: f64,
    pad_factor: f64,
    extra_pad: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = phase.n;
    let d = n - 1;
    let sector = &phase.frequency_domain;
    let (blo, bhi) = sector.bounding_box();

    // Frequency samples: box corners plus sector draws.
    let mut freqs: Vec<Vec<f64>> = Vec::new();
    for mask in 0..(1usize << d.min(12)) {
        let w: Vec<f64> = (0..d)
            .map(|k| if mask >> k & 1 == 1 { bhi[k] } else { blo[k] })
            .collect();
        if w.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
            freqs.push(w);
        }
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(101);
    for _ in 0..48 {
        freqs.push(crate::phase::sample_sector(sector, &mut rng));
    }

    let xns: Vec<f64> = if (xn_hi - xn_lo).abs() < 1e-12 {
        vec![xn_lo]
    } else {
        (0..9)
            .map(|i| xn_lo + (xn_hi - xn_lo) * i as f64 / 8.0)
            .collect()
    };

    let lambda = phase.lambda;
    let mut hull_lo = vec![f64::INFINITY; d];
    let mut hull_hi = vec![f64::NEG_INFINITY; d];
    for &xn in &xns {
        let mut xu = vec![0.0; n];
        xu[n - 1] = xn / lambda;
        for w in &freqs {
            let gw = phase.grad_w_unit(&xu, w);
            for k in 0..d {
                let drift = -lambda * gw[k];
                hull_lo[k] = hull_lo[k].min(drift);
                hull_hi[k] = hull_hi[k].max(drift);
            }
        }
    }

    // Tail length scale: inverse of the amplitude's frequency taper.
    let taper = amplitude
        .margin
        .min(0.45 * (sector.r1 - sector.r0))
        .max(1e-3);
    let pad = pad_factor / taper + extra_pad;

    let mut axes = Vec::with_capacity(d);
    for k in 0..d {
        let mut lo = (hull_lo[k] - pad).max(-clip);
        let mut hi = (hull_hi[k] + pad).min(clip);
        if lo >= hi {
            lo = -clip.min(pad);
            hi = clip.min(pad);
        }
        let width = (bhi[k] - blo[k]).max(1e-2);
        let spacing = std::f64::consts::PI / (oversample * width);
        let count = ((hi - lo) / spacing).ceil().max(1.0) as usize;
        if count > MAX_AXIS_NODES {
            return Err(OscError::Budget(format!(
                "beam axis {k} needs {count} nodes; cap is {MAX_AXIS_NODES}"
            )));
        }
        let step = (hi - lo) / count as f64;
        axes.push((0..count).map(|i| lo + (i as f64 + 0.5) * step).collect());
    }
    Ok(axes)
}

#[derive(Debug, Clone)]
pub struct ParsevalReport {
    pub xn: f64,
    /// Weighted L2 norm of the fixed-time slice over the beam window.
    pub slice_norm: f64,
    /// Mesh L2 norm of the tapered input `beta f`.
    pub input_norm: f64,
    /// `slice_norm / ((2 pi)^{(n-1)/2} input_norm)`; near 1 when the
    /// window captures the field and the mesh resolves the chirp.
    pub ratio: f64,
}

/// Fixed-time L2 identity check: at each time the operator is a Fourier
/// integral with unimodular kernel, so the transverse L2 norm equals
/// `(2 pi)^{(n-1)/2} ||beta f||_2` up to window and quadrature error.
pub fn fixed_time_parseval(
    phase: &PhaseField,
    amplitude: &Amplitude,
    mesh: &FrequencyMesh,
    coeffs: &[Complex64],
    xn: f64,
    oversample: f64,
    pad_factor: f64,
) -> Result<ParsevalReport> {
    let n = phase.n;
    let (g, _, input_norm) = weighted_input(amplitude, mesh, coeffs)?;
    if input_norm <= 0.0 {
        return Err(OscError::Domain("input has no mass under the taper".into()));
    }
    let axes = beam_axes(
        phase,
        amplitude,
        xn,
        xn,
        f64::INFINITY,
        oversample,
        pad_factor,
        0.0,
    )?;
    let xp_grid = GridRegion::from_axes(axes)?;
    let values = if phase.is_translation_split() && tensor_axes(mesh).is_some() {
        let kernel = SeparableKernel::build(tensor_axes(mesh).unwrap(), &xp_grid.axes);
        eval_slice_fast(phase, mesh, &g, &kernel, xn)
    } else {
        let ops = xp_grid.len() as u128 * mesh.nodes.len() as u128;
        if ops > MAX_DIRECT_OPS {
            return Err(OscError::Budget(format!(
                "fixed-time direct path needs {ops} kernel evaluations"
            )));
        }
        eval_slice_direct(phase, mesh, &g, &xp_grid, xn)
    };
    // The slice field carries no spatial amplitude here: the identity is
    // about the unimodular kernel alone.
    let slice = FieldSample::new(xp_grid, values)?;
    let slice_norm = slice.l2_norm();
    let ratio =
        slice_norm / ((2.0 * std::f64::consts::PI).powf((n - 1) as f64 / 2.0) * input_norm);
    Ok(ParsevalReport {
        xn,
        slice_norm,
        input_norm,
        ratio,
    })
}

#[derive(Debug, Clone)]
pub struct HormanderConfig {
    /// Ball radii to scan (sorted internally).
    pub radii: Vec<f64>,
    /// Oversampling for the spatial sampling lattice.
    pub oversample: f64,
    /// Beam padding in units of the inverse taper width.
    pub pad_factor: f64,
    /// Extra absolute padding (e.g. when the input carries a known
    /// spatial offset).
    pub extra_pad: f64,
    pub max_slices: usize,
}

impl Default for HormanderConfig {
    fn default() -> Self {
        Self {
            radii: vec![16.0, 32.0, 64.0, 128.0, 256.0],
            oversample: 2.0,
            pad_factor: 4.0,
            extra_pad: 0.0,
            max_slices: 4096,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HormanderReport {
    pub radii: Vec<f64>,
    /// `||T f||_{L2(B_R)}` per radius.
    pub norms: Vec<f64>,
    /// `norms[j] / (R^{1/2} (2 pi)^{(n-1)/2} ||beta f||_2)`.
    pub ratios: Vec<f64>,
    /// Least-squares slope of `log ||T f||` against `log R`.
    pub slope: f64,
    pub input_norm: f64,
    pub slices: usize,
    pub nodes_per_slice: usize,
    pub fast_path: bool,
}

/// Scan `||T f||_{L2(B_R)}` over nested balls, streaming one time slice at
/// a time (the full field is never stored).
pub fn hormander_scan(
    phase: &PhaseField,
    amplitude: &Amplitude,
    mesh: &FrequencyMesh,
    coeffs: &[Complex64],
    config: &HormanderConfig,
) -> Result<HormanderReport> {
    let n = phase.n;
    let mut radii = config.radii.clone();
    if radii.is_empty() || radii.iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(OscError::Domain("scan radii must be positive".into()));
    }
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rmax = *radii.last().unwrap();
    let rmin = radii[0];

    let (g, _, input_norm) = weighted_input(amplitude, mesh, coeffs)?;
    if input_norm <= 0.0 {
        return Err(OscError::Domain("input has no mass under the taper".into()));
    }

    let axes = beam_axes(
        phase,
        amplitude,
        -rmax,
        rmax,
        rmax,
        config.oversample,
        config.pad_factor,
        config.extra_pad,
    )?;
    let xp_grid = GridRegion::from_axes(axes)?;
    let cell: f64 = xp_grid
        .axes
        .iter()
        .map(|a| {
            if a.len() > 1 {
                a[1] - a[0]
            } else {
                1.0
            }
        })
        .product();

    // Time bandwidth of |T|^2: spread of the phase's time derivative.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(202);
    use rand::{Rng, SeedableRng};
    let mut h_lo = f64::INFINITY;
    let mut h_hi = f64::NEG_INFINITY;
    for _ in 0..64 {
        let w = crate::phase::sample_sector(&phase.frequency_domain, &mut rng);
        let mut xu = vec![0.0; n];
        xu[n - 1] = rng.gen_range(-rmax..rmax) / phase.lambda;
        let xu_clamped = xu[n - 1].clamp(
            phase.spatial_domain.lo[n - 1],
            phase.spatial_domain.hi[n - 1],
        );
        xu[n - 1] = xu_clamped;
        let h = phase.grad_x_unit(&xu, &w)[n - 1];
        h_lo = h_lo.min(h);
        h_hi = h_hi.max(h);
    }
    let bw = (h_hi - h_lo).max(1e-3);
    let slice_spacing = (std::f64::consts::PI / (config.oversample * bw)).min(rmin / 4.0);
    let slices = ((2.0 * rmax) / slice_spacing).ceil() as usize;
    if slices > config.max_slices {
        return Err(OscError::Budget(format!(
            "scan needs {slices} slices; cap is {}",
            config.max_slices
        )));
    }
    let dt = 2.0 * rmax / slices as f64;
    let xns: Vec<f64> = (0..slices)
        .map(|t| -rmax + (t as f64 + 0.5) * dt)
        .collect();

    let fast = phase.is_translation_split() && tensor_axes(mesh).is_some();
    if !fast {
        let ops = xp_grid.len() as u128 * mesh.nodes.len() as u128 * slices as u128;
        if ops > MAX_DIRECT_OPS {
            return Err(OscError::Budget(format!(
                "direct scan needs {ops} kernel evaluations; cap is {MAX_DIRECT_OPS}"
            )));
        }
    }
    let kernel = if fast {
        Some(SeparableKernel::build(
            tensor_axes(mesh).unwrap(),
            &xp_grid.axes,
        ))
    } else {
        None
    };

    // Precompute per-node |x'|^2 once; slices only shift the time term.
    let xp_sq: Vec<f64> = (0..xp_grid.len())
        .map(|flat| xp_grid.node(flat).iter().map(|c| c * c).sum())
        .collect();
    let lambda = phase.lambda;

    let bins: Vec<f64> = xns
        .par_iter()
        .map(|&xn| {
            let values = match &kernel {
                Some(k) => eval_slice_fast(phase, mesh, &g, k, xn),
                None => eval_slice_direct(phase, mesh, &g, &xp_grid, xn),
            };
            let mut local = vec![0.0f64; radii.len()];
            for (flat, v) in values.iter().enumerate() {
                let r_sq = xp_sq[flat] + xn * xn;
                // First scanned ball containing the node.
                let idx = radii.partition_point(|&r| r * r < r_sq);
                if idx < radii.len() {
                    let mut x = xp_grid.node(flat);
                    x.push(xn);
                    let xu: Vec<f64> = x.iter().map(|c| c / lambda).collect();
                    let a = amplitude.spatial_factor(&xu);
                    local[idx] += (a * a) * v.norm_sqr() * cell * dt;
                }
            }
            local
        })
        .reduce(
            || vec![0.0f64; radii.len()],
            |mut acc, local| {
                for (a, l) in acc.iter_mut().zip(local) {
                    *a += l;
                }
                acc
            },
        );

    let mut cum = 0.0;
    let mut norms = Vec::with_capacity(radii.len());
    for b in &bins {
        cum += b;
        norms.push(cum.sqrt());
    }
    let front = (2.0 * std::f64::consts::PI).powf((n - 1) as f64 / 2.0) * input_norm;
    let ratios: Vec<f64> = norms
        .iter()
        .zip(&radii)
        .map(|(nm, r)| nm / (r.sqrt() * front))
        .collect();

    // Least squares slope of log-norm against log-radius.
    let xs: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let ys: Vec<f64> = norms.iter().map(|v| v.max(1e-300).ln()).collect();
    let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
    let ybar = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - xbar) * (y - ybar);
        den += (x - xbar) * (x - xbar);
    }
    let slope = if den > 0.0 { num / den } else { f64::NAN };

    Ok(HormanderReport {
        radii,
        norms,
        ratios,
        slope,
        input_norm,
        slices,
        nodes_per_slice: xp_grid.len(),
        fast_path: fast,
    })
}
