//! Synthetic tunneling junction.
//!
//! Current follows the lumped exponential gap law
//! `I = L(V) · exp(-1.025 · δ · √φ)` with δ in Å and φ in eV. `L(V)` is a
//! per-site polynomial so every voltage derivative is available in closed
//! form; the rest of the crate uses these derivatives as oracles.

mod poly;
mod surface;

pub use poly::{Conductance, MAX_DEGREE};
pub use surface::{EffectiveSite, GeneratorSpec, Site, SiteKind, StepSpec, SurfaceModel};

use crate::error::{Error, Result};

/// Decay constant of the gap law, Å⁻¹·eV^-1/2.
pub const DECAY_CONSTANT: f64 = 1.025;

/// Prefactor of the barrier-height estimate from the log-current slope.
/// Differs from `1 / 1.025²` by about 0.02 %.
pub const SLOPE_TO_BARRIER: f64 = 0.952;

/// Instantaneous operating point of the junction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JunctionQuery {
    pub x: f64,
    pub y: f64,
    /// Tip apex height, Å, same datum as site heights.
    pub z_tip: f64,
    /// Total instantaneous bias, V.
    pub bias: f64,
}

impl JunctionQuery {
    pub fn gap(&self, site: &EffectiveSite) -> f64 {
        self.z_tip - site.height
    }
}

/// Gap attenuation factor `exp(-1.025 δ √φ)`.
#[inline]
pub fn gap_factor(gap: f64, phi: f64) -> f64 {
    (-DECAY_CONSTANT * gap * phi.sqrt()).exp()
}

/// Tunneling current in amperes (noise-free).
pub fn tunneling_current(q: &JunctionQuery, site: &EffectiveSite) -> Result<f64> {
    let gap = q.gap(site);
    if gap < 0.0 {
        return Err(Error::Crash {
            x_nm: q.x,
            y_nm: q.y,
            gap_angstrom: gap,
        });
    }
    Ok(site.conduct.eval(q.bias) * gap_factor(gap, site.phi))
}

/// `d(ln I)/dδ` in Å⁻¹.
pub fn log_current_slope(phi: f64) -> f64 {
    -DECAY_CONSTANT * phi.sqrt()
}

/// Barrier height in eV from a measured log-current slope.
pub fn barrier_from_slope(slope: f64) -> f64 {
    SLOPE_TO_BARRIER * slope * slope
}

/// Exact inverse of [`log_current_slope`].
pub fn barrier_from_slope_exact(slope: f64) -> f64 {
    (slope / DECAY_CONSTANT).powi(2)
}

/// Displacement current through the junction capacitance for a bias
/// modulation `Vm sin(ωt)`.
pub fn capacitive_current(capacitance: f64, vm: f64, omega: f64, t: f64) -> f64 {
    capacitance * vm * omega * (omega * t).cos()
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Fourier coefficients of `f(V_dc + Vm sin θ)` for `f(V) = L(V)·exp(-1.025 δ √φ)`.
///
/// Returned in the harmonic convention
/// `I = I0 + I1 sin θ + I2 cos 2θ + I3 sin 3θ + I4 cos 4θ + ...`,
/// so `I2` carries the minus sign of the `cos 2θ` term. Entries are exact
/// because `L` is a polynomial and the Taylor series terminates.
pub fn harmonic_amplitudes(site: &EffectiveSite, gap: f64, v_dc: f64, vm: f64, n_max: usize) -> Vec<f64> {
    let scale = gap_factor(gap, site.phi);
    let derivs: Vec<f64> = (0..=MAX_DEGREE)
        .map(|k| site.conduct.derivative(k, v_dc) * scale)
        .collect();
    (0..=n_max)
        .map(|n| {
            let mut sum = 0.0;
            let mut k = n;
            while k <= MAX_DEGREE {
                // sin^k θ contains the n-th harmonic with magnitude C(k, (k-n)/2) / 2^(k-1)
                // (half that for the dc term)
                let mag = if n == 0 {
                    binomial(k, k / 2) / 2f64.powi(k as i32)
                } else {
                    binomial(k, (k - n) / 2) / 2f64.powi(k as i32 - 1)
                };
                sum += vm.powi(k as i32) * derivs[k] / factorial(k) * mag;
                k += 2;
            }
            // sin θ, -cos 2θ, -sin 3θ, +cos 4θ, +sin 5θ, ...
            let sign = if (n / 2) % 2 == 0 { 1.0 } else { -1.0 };
            sign * sum
        })
        .collect()
}

/// Leading small-modulation constant: `I_n / Vm^n → |f⁽ⁿ⁾| / (2^(n-1) n!)`.
pub fn small_modulation_constant(site: &EffectiveSite, gap: f64, v_dc: f64, n: usize) -> f64 {
    assert!(n >= 1);
    site.conduct.derivative(n, v_dc).abs() * gap_factor(gap, site.phi)
        / (2f64.powi(n as i32 - 1) * factorial(n))
}
