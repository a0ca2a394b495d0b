use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::design_lowpass;
use crate::error::{Error, Result};
use crate::linear::LinearSystem;

/// How mixer products are reduced to dc.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockInMode {
    /// Butterworth low-pass on each mixer output.
    Filter,
    /// Boxcar over whole reference periods; updates once per window.
    PeriodAverage { periods: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockInConfig {
    /// Reference frequency, Hz.
    pub freq_hz: f64,
    pub harmonics: Vec<usize>,
    pub order: usize,
    pub cutoff_hz: f64,
    /// Reference phase offset, rad.
    pub phase_offset: f64,
    pub mode: LockInMode,
}

impl Default for LockInConfig {
    fn default() -> Self {
        Self {
            freq_hz: 2000.0,
            harmonics: vec![1],
            order: 4,
            cutoff_hz: 500.0,
            phase_offset: 0.0,
            mode: LockInMode::Filter,
        }
    }
}

impl LockInConfig {
    pub fn validate(&self, fs: f64) -> Result<()> {
        if self.harmonics.is_empty() || self.harmonics.contains(&0) {
            return Err(Error::validation("lock-in needs harmonic indices >= 1"));
        }
        if !(self.freq_hz > 0.0) {
            return Err(Error::validation("reference frequency must be positive"));
        }
        let top = *self.harmonics.iter().max().unwrap() as f64 * self.freq_hz;
        if top >= fs / 2.0 {
            return Err(Error::validation(format!("tracked frequency {top} Hz is above Nyquist")));
        }
        match self.mode {
            LockInMode::Filter => {
                if self.order == 0 {
                    return Err(Error::validation("lock-in filter order must be at least 1"));
                }
                if !(self.cutoff_hz > 0.0) || self.cutoff_hz >= self.freq_hz {
                    return Err(Error::validation(format!(
                        "lock-in cutoff {} Hz must be below the reference {} Hz",
                        self.cutoff_hz, self.freq_hz
                    )));
                }
            }
            LockInMode::PeriodAverage { periods } => {
                if periods == 0 {
                    return Err(Error::validation("averaging window must span at least one period"));
                }
            }
        }
        Ok(())
    }

    /// Time after a reset before estimates are trusted, s.
    pub fn settling_time(&self) -> f64 {
        match self.mode {
            LockInMode::Filter => 10.0 / (2.0 * PI * self.cutoff_hz),
            LockInMode::PeriodAverage { periods } => periods as f64 / self.freq_hz,
        }
    }
}

/// Demodulated component at one harmonic, `a sin(iωt + φ)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct HarmonicEstimate {
    pub harmonic: usize,
    /// `x_{2i} = a cos φ`, the component in phase with `sin(iωt)`.
    pub in_phase: f64,
    /// `x_{2i-1} = a sin φ`, the component along `cos(iωt)`.
    pub quadrature: f64,
}

impl HarmonicEstimate {
    pub fn amplitude(&self) -> f64 {
        self.in_phase.hypot(self.quadrature)
    }

    /// Phase in (-π, π].
    pub fn phase(&self) -> f64 {
        self.quadrature.atan2(self.in_phase)
    }

    pub fn phasor(&self) -> Complex64 {
        Complex64::new(self.in_phase, self.quadrature)
    }
}

#[derive(Clone, Debug)]
struct Channel {
    harmonic: usize,
    calib: Complex64,
    lp_i: Option<LinearSystem>,
    lp_q: Option<LinearSystem>,
    acc: Complex64,
    out: Complex64,
}

/// Multi-harmonic lock-in amplifier.
#[derive(Clone, Debug)]
pub struct LockIn {
    cfg: LockInConfig,
    fs: f64,
    channels: Vec<Channel>,
    elapsed: usize,
    settle_samples: usize,
    window: usize,
    in_window: usize,
    windows_done: usize,
}

impl LockIn {
    pub fn new(cfg: LockInConfig, fs: f64) -> Result<Self> {
        cfg.validate(fs)?;
        let mut channels = Vec::with_capacity(cfg.harmonics.len());
        for &h in &cfg.harmonics {
            let (lp_i, lp_q) = match cfg.mode {
                LockInMode::Filter => {
                    let lp = design_lowpass(cfg.order, cfg.cutoff_hz, fs)?;
                    (Some(lp.clone()), Some(lp))
                }
                LockInMode::PeriodAverage { .. } => (None, None),
            };
            channels.push(Channel {
                harmonic: h,
                calib: Complex64::new(1.0, 0.0),
                lp_i,
                lp_q,
                acc: Complex64::default(),
                out: Complex64::default(),
            });
        }
        let window = match cfg.mode {
            LockInMode::PeriodAverage { periods } => {
                let n = fs / cfg.freq_hz * periods as f64;
                if (n - n.round()).abs() > 1e-9 * n {
                    return Err(Error::validation(
                        "period averaging needs an integer number of samples per window",
                    ));
                }
                n.round() as usize
            }
            LockInMode::Filter => 0,
        };
        let settle_samples = (cfg.settling_time() * fs).ceil() as usize;
        Ok(Self {
            cfg,
            fs,
            channels,
            elapsed: 0,
            settle_samples,
            window,
            in_window: 0,
            windows_done: 0,
        })
    }

    pub fn config(&self) -> &LockInConfig {
        &self.cfg
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    /// Divide harmonic `h` by the complex gain `g` of the path feeding the lock-in.
    pub fn set_calibration(&mut self, h: usize, g: Complex64) {
        for c in self.channels.iter_mut().filter(|c| c.harmonic == h) {
            c.calib = g;
        }
    }

    /// Calibrate every harmonic against a response evaluated at `i·f`.
    pub fn calibrate_with(&mut self, path: impl Fn(f64) -> Complex64) {
        let f = self.cfg.freq_hz;
        for c in &mut self.channels {
            c.calib = path(c.harmonic as f64 * f);
        }
    }

    /// Process one sample taken at time `t`.
    #[inline]
    pub fn step(&mut self, t: f64, y: f64) {
        let theta = 2.0 * PI * self.cfg.freq_hz * t + self.cfg.phase_offset;
        self.step_phase(theta, y);
    }

    /// Process one sample against an explicit fundamental phase (for swept references).
    pub fn step_phase(&mut self, theta: f64, y: f64) {
        self.elapsed += 1;
        match self.cfg.mode {
            LockInMode::Filter => {
                for c in &mut self.channels {
                    let (s, co) = (c.harmonic as f64 * theta).sin_cos();
                    let xi = 2.0 * c.lp_i.as_mut().unwrap().step(y * s);
                    let xq = 2.0 * c.lp_q.as_mut().unwrap().step(y * co);
                    c.out = Complex64::new(xi, xq) / c.calib;
                }
            }
            LockInMode::PeriodAverage { .. } => {
                for c in &mut self.channels {
                    let (s, co) = (c.harmonic as f64 * theta).sin_cos();
                    c.acc += Complex64::new(y * s, y * co);
                }
                self.in_window += 1;
                if self.in_window == self.window {
                    let scale = 2.0 / self.window as f64;
                    for c in &mut self.channels {
                        c.out = c.acc * scale / c.calib;
                        c.acc = Complex64::default();
                    }
                    self.in_window = 0;
                    self.windows_done += 1;
                }
            }
        }
    }

    /// True once the settling time has elapsed since the last reset.
    pub fn is_valid(&self) -> bool {
        match self.cfg.mode {
            LockInMode::Filter => self.elapsed >= self.settle_samples,
            LockInMode::PeriodAverage { .. } => self.windows_done > 0,
        }
    }

    pub fn estimate(&self, h: usize) -> Option<HarmonicEstimate> {
        self.channels.iter().find(|c| c.harmonic == h).map(|c| HarmonicEstimate {
            harmonic: h,
            in_phase: c.out.re,
            quadrature: c.out.im,
        })
    }

    pub fn estimates(&self) -> Vec<HarmonicEstimate> {
        self.channels
            .iter()
            .map(|c| HarmonicEstimate {
                harmonic: c.harmonic,
                in_phase: c.out.re,
                quadrature: c.out.im,
            })
            .collect()
    }

    /// Clear filter state and restart the settling clock.
    pub fn reset(&mut self) {
        for c in &mut self.channels {
            if let Some(f) = c.lp_i.as_mut() {
                f.reset();
            }
            if let Some(f) = c.lp_q.as_mut() {
                f.reset();
            }
            c.acc = Complex64::default();
            c.out = Complex64::default();
        }
        self.elapsed = 0;
        self.in_window = 0;
        self.windows_done = 0;
    }

    /// Preload the filters as if `values` (one phasor per tracked harmonic,
    /// in configuration order) had been present forever.
    pub fn preset(&mut self, values: &[Complex64]) {
        for (c, v) in self.channels.iter_mut().zip(values) {
            let raw = v * c.calib / 2.0;
            if let Some(f) = c.lp_i.as_mut() {
                f.set_steady_state(raw.re);
            }
            if let Some(f) = c.lp_q.as_mut() {
                f.set_steady_state(raw.im);
            }
            c.out = *v;
        }
        self.elapsed = self.settle_samples;
        self.windows_done = self.windows_done.max(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::FftPlanner;

    const FS: f64 = 100e3;

    fn run(cfg: LockInConfig, seconds: f64, signal: impl Fn(f64) -> f64) -> LockIn {
        let mut li = LockIn::new(cfg, FS).unwrap();
        for n in 0..(seconds * FS) as usize {
            let t = n as f64 / FS;
            li.step(t, signal(t));
        }
        li
    }

    fn wrap_deg(d: f64) -> f64 {
        (d + 180.0).rem_euclid(360.0) - 180.0
    }

    #[test]
    fn single_tone_amplitude_and_phase() {
        let cfg = LockInConfig::default();
        let w = 2.0 * PI * 2000.0;
        for phi in [-2.5, -0.3, 0.0, 1.0, 3.0] {
            let li = run(cfg.clone(), cfg.settling_time() + 0.002, |t| 1.7 * (w * t + phi).sin());
            assert!(li.is_valid());
            let e = li.estimate(1).unwrap();
            assert!((e.amplitude() / 1.7 - 1.0).abs() < 0.005);
            assert!(wrap_deg((e.phase() - phi).to_degrees()).abs() < 0.5);
        }
    }

    #[test]
    fn two_tones_with_dc_offset() {
        let cfg = LockInConfig {
            harmonics: vec![1, 2],
            ..LockInConfig::default()
        };
        let w = 2.0 * PI * 2000.0;
        let li = run(cfg.clone(), 0.02, |t| 7.0 + 3.0 * (w * t).sin() + 5.0 * (2.0 * w * t).cos());
        let a1 = li.estimate(1).unwrap();
        let a2 = li.estimate(2).unwrap();
        assert!((a1.amplitude() - 3.0).abs() < 0.03, "{a1:?}");
        assert!((a2.amplitude() - 5.0).abs() < 0.05, "{a2:?}");
        assert!((a2.phase() - PI / 2.0).abs() < 0.01);
    }

    #[test]
    fn invalid_before_settling() {
        let cfg = LockInConfig::default();
        let li = run(cfg.clone(), 0.5 * cfg.settling_time(), |t| t.sin());
        assert!(!li.is_valid());
    }

    #[test]
    fn lock_in_agrees_with_fft() {
        let cfg = LockInConfig {
            harmonics: vec![1, 2, 3, 4],
            ..LockInConfig::default()
        };
        let w = 2.0 * PI * 2000.0;
        let amps = [1.0, 0.6, 0.25, 0.1];
        let phases = [0.3, -1.2, 2.0, 0.7];
        let sig = |t: f64| {
            0.4 + (0..4)
                .map(|k| amps[k] * ((k + 1) as f64 * w * t + phases[k]).sin())
                .sum::<f64>()
        };
        let li = run(cfg, 0.03, sig);
        let n = 5000;
        let mut buf: Vec<rustfft::num_complex::Complex<f64>> = (0..n)
            .map(|k| rustfft::num_complex::Complex::new(sig(k as f64 / FS), 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        for (k, e) in li.estimates().iter().enumerate() {
            let bin = (k + 1) * 100;
            let fft_amp = 2.0 * buf[bin].norm() / n as f64;
            assert!((e.amplitude() / fft_amp - 1.0).abs() < 0.02);
            assert!((e.amplitude() / amps[k] - 1.0).abs() < 0.01);
            assert!(wrap_deg((e.phase() - phases[k]).to_degrees()).abs() < 1.0);
        }
    }

    #[test]
    fn period_average_is_exact_for_harmonic_sums() {
        let cfg = LockInConfig {
            harmonics: vec![1, 2, 3],
            mode: LockInMode::PeriodAverage { periods: 1 },
            ..LockInConfig::default()
        };
        let w = 2.0 * PI * 2000.0;
        let li = run(cfg, 0.0005, |t| {
            1e-3 * (w * t).sin() - 1e-9 * (2.0 * w * t).cos() + 1e-12 * (3.0 * w * t).sin() + 5.0
        });
        assert!(li.is_valid());
        let e = li.estimates();
        assert!((e[0].in_phase - 1e-3).abs() < 1e-13, "{e:?}");
        assert!((e[1].quadrature + 1e-9).abs() < 1e-13, "{e:?}");
        assert!((e[2].in_phase - 1e-12).abs() < 1e-13, "{e:?}");
    }

    #[test]
    fn calibration_divides_path_gain() {
        let cfg = LockInConfig::default();
        let w = 2.0 * PI * 2000.0;
        let g = Complex64::from_polar(0.5, -0.4);
        let mut li = LockIn::new(cfg, FS).unwrap();
        li.set_calibration(1, g);
        for n in 0..3000 {
            let t = n as f64 / FS;
            li.step(t, 0.5 * 2.0 * (w * t - 0.4).sin());
        }
        let e = li.estimate(1).unwrap();
        assert!((e.amplitude() - 2.0).abs() < 0.01);
        assert!(e.phase().abs() < 0.01);
    }

    #[test]
    fn preset_starts_at_rest() {
        let cfg = LockInConfig::default();
        let w = 2.0 * PI * 2000.0;
        let mut li = LockIn::new(cfg, FS).unwrap();
        li.preset(&[Complex64::new(2.0, 0.0)]);
        let mut worst: f64 = 0.0;
        for n in 0..500 {
            let t = n as f64 / FS;
            li.step(t, 2.0 * (w * t).sin());
            worst = worst.max((li.estimate(1).unwrap().amplitude() - 2.0).abs());
        }
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn rejects_cutoff_above_reference() {
        let cfg = LockInConfig {
            cutoff_hz: 3000.0,
            ..LockInConfig::default()
        };
        assert!(LockIn::new(cfg, FS).is_err());
    }
}
