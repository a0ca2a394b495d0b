use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// `C(s) = k_i (1/s + 1/ω_c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiGains {
    /// Integrator gain, V per (ln-unit · s).
    pub ki: f64,
    /// Corner frequency, rad/s.
    pub omega_c: f64,
}

impl PiGains {
    pub fn new(ki: f64, omega_c: f64) -> Result<Self> {
        let g = Self { ki, omega_c };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ki > 0.0) || !(self.omega_c > 0.0) || !self.ki.is_finite() || !self.omega_c.is_finite() {
            return Err(Error::validation(format!(
                "PI gains must be positive, got ki {} omega_c {}",
                self.ki, self.omega_c
            )));
        }
        Ok(())
    }

    /// Discrete response `k_i (T/(z-1) + 1/ω_c)` of [`PiController`] at `f_hz`.
    pub fn response(&self, f_hz: f64, fs: f64) -> Complex64 {
        self.ki * unit_response(self.omega_c, f_hz, fs)
    }

    /// Continuous response `k_i (1/(jω) + 1/ω_c)`.
    pub fn continuous_response(&self, f_hz: f64) -> Complex64 {
        let jw = Complex64::new(0.0, 2.0 * PI * f_hz);
        self.ki * (1.0 / jw + 1.0 / self.omega_c)
    }
}

/// `T/(z-1) + 1/ω_c`, the PI response per unit integrator gain.
pub(crate) fn unit_response(omega_c: f64, f_hz: f64, fs: f64) -> Complex64 {
    let z = Complex64::from_polar(1.0, 2.0 * PI * f_hz / fs);
    (1.0 / fs) / (z - 1.0) + 1.0 / omega_c
}

/// Forward-Euler PI with output clamp and conditional integration.
#[derive(Clone, Debug)]
pub struct PiController {
    gains: PiGains,
    fs: f64,
    /// Integral of `k_i e`, V.
    integral: f64,
    limit: f64,
    output: f64,
    saturated: bool,
}

impl PiController {
    pub fn new(gains: PiGains, fs: f64, limit: f64) -> Result<Self> {
        gains.validate()?;
        if !(limit > 0.0) {
            return Err(Error::validation("controller output limit must be positive"));
        }
        Ok(Self {
            gains,
            fs,
            integral: 0.0,
            limit,
            output: 0.0,
            saturated: false,
        })
    }

    pub fn gains(&self) -> PiGains {
        self.gains
    }

    /// Change gains without a jump in the integral term.
    pub fn set_gains(&mut self, gains: PiGains) -> Result<()> {
        gains.validate()?;
        self.gains = gains;
        Ok(())
    }

    pub fn limit(&self) -> f64 {
        self.limit
    }

    pub fn output(&self) -> f64 {
        self.output
    }

    pub fn is_saturated(&self) -> bool {
        self.saturated
    }

    /// Hold the output at `u` (zero error) and continue from there.
    pub fn set_output(&mut self, u: f64) {
        self.integral = u.clamp(-self.limit, self.limit);
        self.output = self.integral;
        self.saturated = false;
    }

    /// `u = ∫k_i e + k_i e/ω_c`, integral updated after the output.
    #[inline]
    pub fn step(&mut self, e: f64) -> f64 {
        let k = self.gains.ki;
        let raw = self.integral + k * e / self.gains.omega_c;
        let u = raw.clamp(-self.limit, self.limit);
        self.saturated = u != raw;
        let pushing_out = (raw > self.limit && e > 0.0) || (raw < -self.limit && e < 0.0);
        if !pushing_out {
            self.integral += k * e / self.fs;
        }
        self.output = u;
        u
    }
}

/// Log-domain error `ln(setpoint·R) - ln(max(|v|, R·I_min))`.
///
/// The magnitude is used so negative-bias currents regulate the same way.
#[inline]
pub fn error_signal(preamp_out: f64, setpoint: f64, r: f64, i_min: f64) -> f64 {
    (setpoint.abs() * r).ln() - preamp_out.abs().max(r * i_min).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 100e3;

    fn pi(ki: f64, wc: f64, limit: f64) -> PiController {
        PiController::new(PiGains::new(ki, wc).unwrap(), FS, limit).unwrap()
    }

    #[test]
    fn zero_error_holds_output() {
        let mut c = pi(50.0, 1000.0, 10.0);
        c.set_output(1.25);
        for _ in 0..100 {
            assert_eq!(c.step(0.0), 1.25);
        }
    }

    #[test]
    fn step_jumps_then_ramps() {
        let (ki, wc) = (50.0, 2000.0);
        let mut c = pi(ki, wc, 1e6);
        let u0 = c.step(1.0);
        assert!((u0 - ki / wc).abs() < 1e-12);
        let n = 10_000;
        let mut u = u0;
        for _ in 0..n {
            u = c.step(1.0);
        }
        assert!((u - (ki / wc + ki * n as f64 / FS)).abs() < 1e-9);
    }

    #[test]
    fn clamp_prevents_windup() {
        let (ki, wc, lim) = (200.0, 500.0, 1.0);
        let mut c = pi(ki, wc, lim);
        for _ in 0..20_000 {
            assert!(c.step(1.0) <= lim);
        }
        assert!(c.is_saturated());
        // Linear oracle: integral parked at lim - k/ωc, then a -1 error
        // ramps the output down at slope k_i from lim - 2k/ωc.
        let oracle = (2.0 * lim - 2.0 * ki / wc) / (ki / FS);
        let mut n_hit = None;
        for n in 0..40_000 {
            if c.step(-1.0) <= -lim {
                n_hit = Some(n as f64);
                break;
            }
        }
        let n_hit = n_hit.unwrap();
        assert!((n_hit - oracle).abs() <= 0.05 * oracle, "{n_hit} vs {oracle}");
    }

    #[test]
    fn frequency_response_matches_difference_equation() {
        let g = PiGains::new(30.0, 2.0 * PI * 800.0).unwrap();
        let f = 700.0;
        let w = 2.0 * PI * f / FS;
        let mut c = PiController::new(g, FS, 1e9).unwrap();
        let span = (FS / f * 70.0).round() as usize;
        let (mut s, mut co) = (0.0, 0.0);
        let mut mean = 0.0;
        let mut ys = Vec::with_capacity(span);
        for n in 0..span {
            ys.push(c.step((w * n as f64).sin()));
        }
        for y in &ys {
            mean += y / span as f64;
        }
        for (n, y) in ys.iter().enumerate() {
            s += (y - mean) * (w * n as f64).sin();
            co += (y - mean) * (w * n as f64).cos();
        }
        let h = Complex64::new(2.0 * s / span as f64, 2.0 * co / span as f64);
        let expect = g.response(f, FS);
        // phasor convention: response to sin is Re(H) sin + Im(H) cos
        assert!((h - expect).norm() / expect.norm() < 0.02, "{h} vs {expect}");
    }

    #[test]
    fn error_signal_cases() {
        let r = 1e8;
        assert_eq!(error_signal(0.1, 1e-9, r, 1e-15), (0.1f64).ln() - (0.1f64).ln());
        let floor = error_signal(0.0, 1e-9, r, 1e-15);
        assert!(floor.is_finite() && floor > 10.0);
        let e = error_signal(0.2, 1e-9, r, 1e-15);
        assert!((e + 2f64.ln()).abs() < 1e-12);
        assert!((error_signal(-0.2, -1e-9, r, 1e-15) + 2f64.ln()).abs() < 1e-12);
    }
}
