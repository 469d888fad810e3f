//! Smooth compactly supported profiles.
//!
//! Everything here is built from the standard `exp(-1/(1-t^2))` bump and the
//! `exp(-1/t)` transition, so all cutoffs are C^infinity.  Profiles are
//! normalized to peak value 1.

/// Smooth bump supported on (-1, 1), equal to 1 at 0.
///
/// `bump(t) = exp(1 - 1/(1-t^2))` for |t| < 1, else 0.
pub fn bump(t: f64) -> f64 {
    let t2 = t * t;
    if t2 >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - t2)).exp()
    }
}

/// `exp(-1/t)` for t > 0, else 0.  The building block of smooth transitions.
fn ramp(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-1.0 / t).exp()
    }
}

/// Smooth monotone transition: 0 for t <= 0, 1 for t >= 1.
pub fn transition(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let a = ramp(t);
        let b = ramp(1.0 - t);
        a / (a + b)
    }
}

/// Even plateau cutoff in one variable: 1 for |t| <= flat, 0 for |t| >= 1,
/// smooth in between.  Requires `0 <= flat < 1`.
pub fn plateau(t: f64, flat: f64) -> f64 {
    let s = t.abs();
    if s <= flat {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        transition((1.0 - s) / (1.0 - flat))
    }
}

/// Plateau cutoff on an interval: 1 on `[lo + taper, hi - taper]`, 0 outside
/// `[lo, hi]`.  `taper` must satisfy `0 < 2*taper <= hi - lo`.
pub fn interval_plateau(t: f64, lo: f64, hi: f64, taper: f64) -> f64 {
    if t <= lo || t >= hi {
        return 0.0;
    }
    let up = transition((t - lo) / taper);
    let down = transition((hi - t) / taper);
    up * down
}
