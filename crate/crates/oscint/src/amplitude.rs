//! Smooth cutoff amplitudes for the oscillatory integral operators.
//!
//! An amplitude is a product `a(x; w) = alpha(x) * beta(w)` of a spatial
//! plateau over the normalized domain `X` and a frequency plateau over the
//! sector, both vanishing within `margin` of the respective boundary.  The
//! product structure is what enables the separable fast path in the
//! quadrature module, and the margin is the quantity compared against the
//! `1/(4 A3)` requirement of the reduced normal form.

use serde::{Deserialize, Serialize};

use crate::bump::interval_plateau;
use crate::error::{OscError, Result};
use crate::phase::{BoxDomain, PhaseField, SectorSpec};

/// Product amplitude `alpha(x) * beta(w)` at unit spatial scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Amplitude {
    pub n: usize,
    /// Distance (unit scale) from the support to the domain boundary over
    /// which the cutoff tapers; the amplitude is identically 1 once twice
    /// that far inside.
    pub margin: f64,
    pub spatial: BoxDomain,
    pub sector: SectorSpec,
}

impl Amplitude {
    /// The standard amplitude of a phase field: plateaus over its
    /// normalized spatial domain and its frequency sector.
    pub fn for_phase(phase: &PhaseField, margin: f64) -> Result<Self> {
        Self::new(
            phase.n,
            margin,
            phase.spatial_domain.clone(),
            phase.frequency_domain.clone(),
        )
    }

    pub fn new(n: usize, margin: f64, spatial: BoxDomain, sector: SectorSpec) -> Result<Self> {
        if margin <= 0.0 {
            return Err(OscError::Domain("amplitude margin must be positive".into()));
        }
        let thinnest = spatial
            .lo
            .iter()
            .zip(&spatial.hi)
            .map(|(&a, &b)| b - a)
            .fold(f64::INFINITY, f64::min);
        if 2.0 * margin >= thinnest {
            return Err(OscError::Domain(format!(
                "margin {margin} too wide for a spatial box of thickness {thinnest}"
            )));
        }
        if sector.dim() != n - 1 || spatial.dim() != n {
            return Err(OscError::Inconsistent(
                "amplitude domain dimensions disagree with n".into(),
            ));
        }
        Ok(Self {
            n,
            margin,
            spatial,
            sector,
        })
    }

    /// Spatial factor at a normalized (unit-scale) point.
    pub fn spatial_factor(&self, xu: &[f64]) -> f64 {
        let mut v = 1.0;
        for (i, &x) in xu.iter().enumerate() {
            v *= interval_plateau(x, self.spatial.lo[i], self.spatial.hi[i], self.margin);
            if v == 0.0 {
                return 0.0;
            }
        }
        v
    }

    /// Frequency factor: radial plateau over `[r0, r1]` times an angular
    /// plateau within the sector aperture.
    pub fn frequency_factor(&self, w: &[f64]) -> f64 {
        let r: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = &self.sector;
        let taper_r = self.margin.min(0.45 * (s.r1 - s.r0));
        let mut v = interval_plateau(r, s.r0, s.r1, taper_r);
        if v == 0.0 {
            return 0.0;
        }
        // Angular cutoff only when the sector is a proper cone; the full
        // annulus needs none.
        if s.aperture < 0.999 * std::f64::consts::PI {
            let ang = s.angle_to_center(w);
            // A Euclidean margin at radius >= r0 corresponds to an angular
            // taper of margin / r0.
            let taper_a = (self.margin / s.r0).min(0.45 * 2.0 * s.aperture);
            v *= interval_plateau(ang, -s.aperture, s.aperture, taper_a);
        }
        v
    }

    /// `a(x; w)` at unit spatial scale.
    pub fn value_unit(&self, xu: &[f64], w: &[f64]) -> f64 {
        let s = self.spatial_factor(xu);
        if s == 0.0 {
            return 0.0;
        }
        s * self.frequency_factor(w)
    }

    /// `a^lambda(x; w) = a(x/lambda; w)`.
    pub fn value_at_scale(&self, x: &[f64], w: &[f64], lambda: f64) -> f64 {
        let xu: Vec<f64> = x.iter().map(|v| v / lambda).collect();
        self.value_unit(&xu, w)
    }

    /// True if `w` lies in the taper band where the frequency factor is
    /// strictly between 0 and 1 (mass here signals truncation trouble).
    pub fn in_boundary_band(&self, w: &[f64]) -> bool {
        let v = self.frequency_factor(w);
        v > 0.0 && v < 0.999
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_amplitude() -> Amplitude {
        let ph = PhaseField::builtin("model_parabolic_cone", 3, 64.0).unwrap();
        Amplitude::for_phase(&ph, 0.1).unwrap()
    }

    #[test]
    fn plateau_and_support() {
        let a = model_amplitude();
        // Deep inside: exactly 1.
        assert_eq!(a.spatial_factor(&[0.0, 0.0, 0.0]), 1.0);
        assert_eq!(a.spatial_factor(&[0.7, -0.7, 0.5]), 1.0);
        // Outside the box: 0.
        assert_eq!(a.spatial_factor(&[1.1, 0.0, 0.0]), 0.0);
        // In the taper: strictly between.
        let v = a.spatial_factor(&[0.95, 0.0, 0.0]);
        assert!(v > 0.0 && v < 1.0);
        // Frequency: sector center is on the plateau.
        assert_eq!(a.frequency_factor(&[0.0, 1.0]), 1.0);
        assert_eq!(a.frequency_factor(&[0.0, 0.5]), 0.0);
        assert_eq!(a.frequency_factor(&[0.3, 0.2]), 0.0);
    }

    #[test]
    fn scale_composition() {
        let a = model_amplitude();
        let x = [32.0, -12.8, 6.4];
        let w = [0.02, 1.3];
        let xu: Vec<f64> = x.iter().map(|v| v / 64.0).collect();
        assert_eq!(a.value_at_scale(&x, &w, 64.0), a.value_unit(&xu, &w));
    }

    #[test]
    fn boundary_band_detection() {
        let a = model_amplitude();
        assert!(!a.in_boundary_band(&[0.0, 1.0]));
        // Radius just inside r0 = 0.5: inside the radial taper.
        assert!(a.in_boundary_band(&[0.0, 0.55]));
        assert!(!a.in_boundary_band(&[0.0, 0.45]));
    }

    #[test]
    fn margin_guards() {
        let ph = PhaseField::builtin("model_parabolic_cone", 3, 64.0).unwrap();
        assert!(Amplitude::for_phase(&ph, 0.0).is_err());
        assert!(Amplitude::for_phase(&ph, 1.0).is_err());
    }
}
