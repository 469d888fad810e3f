//! Phase functions for oscillatory integral operators.
//!
//! A phase is a function `phi(x; w)` of a spacetime point `x` in R^n and a
//! frequency `w` in R^{n-1}, positively 1-homogeneous in `w`.  The operator
//! at parameter `lambda` uses the rescaled phase
//! `phi^lambda(x; w) = lambda * phi(x / lambda; w)`, so spatial arguments of
//! the public API live at the operator scale (inside a ball of radius
//! ~ lambda), while the normalized domain `X` is unit scale.
//!
//! Coordinate conventions: `x = (x', x_n)` with `x' in R^{n-1}`, and
//! `x' = (x'', x_{n-1})`; frequencies split as `w = (w', w_{n-1})` with
//! `w' in R^{n-2}`.

mod builtins;
mod conditions;
mod solve;

pub use builtins::{CircularCone, QuadraticOverLinear};
pub(crate) use conditions::sample_sector;
pub use conditions::{
    check_c1, check_c2_plus, check_homogeneity, check_reduced, gauss_angle_estimates, gauss_map,
    kflat_defect, C1Report, C2Report, FlatnessConfig, FlatnessReport, GaussAngleReport,
    HomogeneityReport, ReducedCheckConfig, ReducedReport,
};
pub use solve::{
    fd_gradient, fd_jacobian, graph_height, graph_height_gradient, graph_height_hessian,
    solve_phi, solve_psi, solve_upsilon, upsilon_jacobian_det,
};

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{OscError, Result};

/// Conical frequency sector: directions within `aperture` radians of
/// `center`, radii in `[r0, r1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectorSpec {
    /// Unit direction in R^{n-1}.
    pub center: Vec<f64>,
    /// Angular half-width in radians; `pi` means the full annulus.
    pub aperture: f64,
    pub r0: f64,
    pub r1: f64,
}

impl SectorSpec {
    /// The full annulus `1/2 <= |w| <= 2` around the distinguished
    /// direction `e_{n-1}`.
    pub fn annulus(n: usize) -> Self {
        let mut center = vec![0.0; n - 1];
        center[n - 2] = 1.0;
        Self {
            center,
            aperture: std::f64::consts::PI,
            r0: 0.5,
            r1: 2.0,
        }
    }

    /// Narrow sector of angular half-width `aperture` around `e_{n-1}`.
    pub fn reduced(n: usize, aperture: f64) -> Self {
        Self {
            aperture,
            ..Self::annulus(n)
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn angle_to_center(&self, w: &[f64]) -> f64 {
        crate::subspace::vector_angle(&self.center, w)
    }

    pub fn contains(&self, w: &[f64]) -> bool {
        let r: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        r >= self.r0 && r <= self.r1 && self.angle_to_center(w) <= self.aperture
    }

    /// Euclidean bounding box of the sector (used to lay down tensor meshes).
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        for i in 0..d {
            // Extreme projections of the sector onto axis i: scan radius and
            // angle extremes.  A conservative box: center direction scaled to
            // [r0, r1], fattened by r1 * sin(aperture) transversally.
            let c = self.center[i];
            let spread = self.r1 * self.aperture.min(std::f64::consts::FRAC_PI_2).sin();
            let a = c * self.r0;
            let b = c * self.r1;
            lo[i] = a.min(b).min(c * self.r1) - spread;
            hi[i] = a.max(b) + spread;
        }
        (lo, hi)
    }
}

/// Axis-aligned spatial domain at unit scale (the normalized `X = X' x T`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn symmetric(n: usize, half_width: f64) -> Self {
        Self {
            lo: vec![-half_width; n],
            hi: vec![half_width; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&xi, (&lo, &hi))| xi >= lo && xi <= hi)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| 0.5 * (a + b))
            .collect()
    }

    /// Distance from a point to the complement of the box (0 outside).
    pub fn depth(&self, x: &[f64]) -> f64 {
        let mut d = f64::INFINITY;
        for i in 0..x.len() {
            let a = x[i] - self.lo[i];
            let b = self.hi[i] - x[i];
            d = d.min(a.min(b));
        }
        d.max(0.0)
    }
}

/// Unit-scale phase evaluator.  Implementations provide the value and first
/// derivatives; mixed/second frequency Hessians default to Richardson
/// finite differences of the gradients.
pub trait UnitPhase: Send + Sync {
    /// Ambient spacetime dimension n.
    fn n(&self) -> usize;

    fn value(&self, x: &[f64], w: &[f64]) -> f64;

    fn grad_x(&self, x: &[f64], w: &[f64]) -> Vec<f64>;

    fn grad_w(&self, x: &[f64], w: &[f64]) -> Vec<f64>;

    /// Mixed Hessian, entry `(i, j) = d^2 phi / (dx_i dw_j)`; `n x (n-1)`.
    fn hess_xw(&self, x: &[f64], w: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        fd_jacobian(
            |wp| self.grad_x(x, wp),
            w,
            n,
            1e-5 * scale_of(w),
        )
    }

    /// Frequency Hessian `d^2 phi / (dw_i dw_j)`; `(n-1) x (n-1)`.
    fn hess_ww(&self, x: &[f64], w: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let h = fd_jacobian(|wp| self.grad_w(x, wp), w, n - 1, 1e-5 * scale_of(w));
        // Symmetrize: mixed partials commute for smooth phases.
        0.5 * (&h + h.transpose())
    }
}

fn scale_of(w: &[f64]) -> f64 {
    w.iter().map(|x| x.abs()).fold(1.0, f64::max)
}

/// Which phase family a field carries.
#[derive(Clone)]
pub enum PhaseKind {
    /// `<x', w> + x_n |w'|^2 / (2 w_{n-1})` -- the translation-invariant
    /// quadratic-over-linear model.
    ModelParabolicCone,
    /// `<x', w> + x_n |w|`.
    CircularCone,
    /// `<x', w> + <A(x_n) w', w'> / (2 w_{n-1})` with the block-coupled
    /// twist matrix `A(t)` (see [`QuadraticOverLinear::kakeya`]).
    Kakeya,
    /// Anything else (e.g. rescaled phases built at runtime).
    Custom(Arc<dyn UnitPhase>),
}

impl std::fmt::Debug for PhaseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PhaseKind::ModelParabolicCone => write!(f, "ModelParabolicCone"),
            PhaseKind::CircularCone => write!(f, "CircularCone"),
            PhaseKind::Kakeya => write!(f, "Kakeya"),
            PhaseKind::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// A phase together with its scale and domains.
#[derive(Clone)]
pub struct PhaseField {
    pub name: String,
    pub n: usize,
    pub lambda: f64,
    /// Normalized (unit-scale) spatial domain X.
    pub spatial_domain: BoxDomain,
    /// Frequency sector Xi.
    pub frequency_domain: SectorSpec,
    kind: PhaseKind,
    eval: Arc<dyn UnitPhase>,
}

impl std::fmt::Debug for PhaseField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PhaseField")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("lambda", &self.lambda)
            .field("kind", &self.kind)
            .finish_non_exhaustive()
    }
}

/// JSON description of a phase (external interface).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub name: String,
    pub n: usize,
    pub lambda: f64,
    #[serde(default)]
    pub sector: Option<SectorSpec>,
    /// Margin used when building the companion amplitude.
    #[serde(default)]
    pub margin: Option<f64>,
}

impl PhaseField {
    /// Construct one of the named builtin phases.
    ///
    /// Names: `model_parabolic_cone` (n >= 3), `circular_cone` (n >= 3),
    /// `kakeya` (n >= 4).
    pub fn builtin(name: &str, n: usize, lambda: f64) -> Result<Self> {
        if lambda <= 0.0 {
            return Err(OscError::Domain("lambda must be positive".into()));
        }
        let (kind, eval, sector): (PhaseKind, Arc<dyn UnitPhase>, SectorSpec) = match name {
            "model_parabolic_cone" => {
                if n < 3 {
                    return Err(OscError::Unsupported(
                        "model_parabolic_cone needs n >= 3".into(),
                    ));
                }
                (
                    PhaseKind::ModelParabolicCone,
                    Arc::new(QuadraticOverLinear::model(n)),
                    SectorSpec::reduced(n, 0.1),
                )
            }
            "circular_cone" => {
                if n < 3 {
                    return Err(OscError::Unsupported("circular_cone needs n >= 3".into()));
                }
                (
                    PhaseKind::CircularCone,
                    Arc::new(CircularCone { n }),
                    SectorSpec::annulus(n),
                )
            }
            "kakeya" => {
                if n < 4 {
                    return Err(OscError::Unsupported(
                        "the twisted quadratic phase needs n >= 4".into(),
                    ));
                }
                (
                    PhaseKind::Kakeya,
                    Arc::new(QuadraticOverLinear::kakeya(n)),
                    // Directions (w', w_{n-1}) with w'/w_{n-1} in a ball of
                    // radius ~1/4 and w_{n-1} in (1/2, 1).
                    SectorSpec {
                        aperture: 0.245,
                        r0: 0.5,
                        r1: 1.04,
                        ..SectorSpec::annulus(n)
                    },
                )
            }
            other => {
                return Err(OscError::Unsupported(format!(
                    "unknown builtin phase '{other}'"
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            n,
            lambda,
            spatial_domain: BoxDomain::symmetric(n, 1.0),
            frequency_domain: sector,
            kind,
            eval,
        })
    }

    pub fn from_spec(spec: &PhaseSpec) -> Result<Self> {
        let mut ph = Self::builtin(&spec.name, spec.n, spec.lambda)?;
        if let Some(sector) = &spec.sector {
            if sector.center.len() != spec.n - 1 {
                return Err(OscError::Inconsistent(format!(
                    "sector center has dimension {}, expected {}",
                    sector.center.len(),
                    spec.n - 1
                )));
            }
            ph.frequency_domain = sector.clone();
        }
        Ok(ph)
    }

    /// Wrap a custom unit-scale evaluator.
    pub fn custom(
        name: &str,
        lambda: f64,
        spatial_domain: BoxDomain,
        frequency_domain: SectorSpec,
        eval: Arc<dyn UnitPhase>,
    ) -> Self {
        Self {
            name: name.to_string(),
            n: eval.n(),
            lambda,
            spatial_domain,
            frequency_domain,
            kind: PhaseKind::Custom(eval.clone()),
            eval,
        }
    }

    pub fn kind(&self) -> &PhaseKind {
        &self.kind
    }

    /// Same phase at a different operator scale.
    pub fn at_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    /// True when `phi(x; w) = <x', w> + g(x_n, w)`, i.e. the gradient in x'
    /// is literally `w`.  All builtins have this form; it enables the
    /// separable fast path in the quadrature module.
    pub fn is_translation_split(&self) -> bool {
        matches!(
            self.kind,
            PhaseKind::ModelParabolicCone | PhaseKind::CircularCone | PhaseKind::Kakeya
        )
    }

    fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&xi| xi / self.lambda).collect()
    }

    // --- unit-scale access (normalized x in X) ---

    pub fn value_unit(&self, xu: &[f64], w: &[f64]) -> f64 {
        self.eval.value(xu, w)
    }

    pub fn grad_x_unit(&self, xu: &[f64], w: &[f64]) -> Vec<f64> {
        self.eval.grad_x(xu, w)
    }

    pub fn grad_w_unit(&self, xu: &[f64], w: &[f64]) -> Vec<f64> {
        self.eval.grad_w(xu, w)
    }

    pub fn hess_xw_unit(&self, xu: &[f64], w: &[f64]) -> DMatrix<f64> {
        self.eval.hess_xw(xu, w)
    }

    pub fn hess_ww_unit(&self, xu: &[f64], w: &[f64]) -> DMatrix<f64> {
        self.eval.hess_ww(xu, w)
    }

    // --- operator-scale access (x in lambda * X) ---

    /// `phi^lambda(x; w) = lambda * phi(x/lambda; w)`.
    pub fn value(&self, x: &[f64], w: &[f64]) -> f64 {
        self.lambda * self.eval.value(&self.to_unit(x), w)
    }

    /// Gradient in x of `phi^lambda`; scale-invariant entrywise.
    pub fn grad_x(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        self.eval.grad_x(&self.to_unit(x), w)
    }

    /// Gradient in w of `phi^lambda` (carries a factor lambda).
    pub fn grad_w(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        self.eval
            .grad_w(&self.to_unit(x), w)
            .into_iter()
            .map(|g| g * self.lambda)
            .collect()
    }

    /// Mixed Hessian of `phi^lambda`; scale-invariant.
    pub fn hess_xw(&self, x: &[f64], w: &[f64]) -> DMatrix<f64> {
        self.eval.hess_xw(&self.to_unit(x), w)
    }

    /// Frequency Hessian of `phi^lambda` (factor lambda).
    pub fn hess_ww(&self, x: &[f64], w: &[f64]) -> DMatrix<f64> {
        self.eval.hess_ww(&self.to_unit(x), w) * self.lambda
    }

    /// The distinguished frequency direction `e_{n-1}` in R^{n-1}.
    pub fn center_frequency(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n - 1];
        w[self.n - 2] = 1.0;
        w
    }
}
