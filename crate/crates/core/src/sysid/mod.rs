//! Closed-loop frequency-response measurement and rational fitting.

mod fit;

pub use fit::{fit_rational, fit_rational_with, rmse_db, FitOptions, FitResult};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::dsp::{LockIn, LockInConfig, LockInMode};
use crate::error::{Error, Result};
use crate::linear::logspace;
use crate::sim::{Excitation, Feedback, Microscope};

/// Coherence below which a point is reported but left out of fits.
pub const COHERENCE_GATE: f64 = 0.95;

/// Largest allowed log-current perturbation during a sweep.
pub const MAX_LN_PERTURBATION: f64 = 0.2;

/// Where the test sine enters the loop.
///
/// `U1`/`U2` add to the error and the controller output of the
/// current loop; `D1`/`D2` are the same points in the dI/dV loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Injection {
    U1,
    U2,
    D1,
    D2,
}

impl Injection {
    fn at_error(self) -> bool {
        matches!(self, Injection::U1 | Injection::D1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrfOptions {
    pub injection: Injection,
    /// Sine amplitude: ln units at U1/D1, volts at U2/D2.
    pub amplitude: f64,
    /// Equivalent lock-in bandwidth fixing the dwell, Hz.
    pub cutoff_hz: f64,
    pub min_periods: usize,
}

impl Default for FrfOptions {
    fn default() -> Self {
        Self {
            injection: Injection::U1,
            amplitude: 0.02,
            cutoff_hz: 20.0,
            min_periods: 20,
        }
    }
}

impl FrfOptions {
    /// Dwell per point: the longer of ten filter time constants and
    /// `min_periods` periods.
    pub fn dwell(&self, f_hz: f64) -> f64 {
        (10.0 / (2.0 * PI * self.cutoff_hz)).max(self.min_periods as f64 / f_hz)
    }
}

/// Measured loop response `Y₂/Y₁` with per-channel data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrfData {
    pub freq_hz: Vec<f64>,
    pub response: Vec<Complex64>,
    /// Response of channel 1 (controller output) to the injection.
    pub ch1: Vec<Complex64>,
    /// Response of channel 2 (log signal) to the injection.
    pub ch2: Vec<Complex64>,
    pub coherence: Vec<f64>,
    pub amplitude: f64,
    /// False when the sweep stopped early.
    pub complete: bool,
    pub abort_reason: Option<String>,
}

impl FrfData {
    /// Build from a response alone, with unit coherence.
    pub fn from_response(freq_hz: Vec<f64>, response: Vec<Complex64>) -> Result<Self> {
        if freq_hz.len() != response.len() {
            return Err(Error::validation("frequency and response lengths differ"));
        }
        let n = freq_hz.len();
        let d = Self {
            freq_hz,
            response,
            ch1: vec![],
            ch2: vec![],
            coherence: vec![1.0; n],
            amplitude: 0.0,
            complete: true,
            abort_reason: None,
        };
        d.validate()?;
        Ok(d)
    }

    /// Sample any frequency response on a grid.
    pub fn sample(h: impl Fn(f64) -> Complex64, freq_hz: &[f64]) -> Result<Self> {
        Self::from_response(freq_hz.to_vec(), freq_hz.iter().map(|&f| h(f)).collect())
    }

    pub fn len(&self) -> usize {
        self.freq_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq_hz.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.freq_hz.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::validation("frequency grid must be strictly increasing"));
        }
        if self.coherence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::validation("coherence must lie in [0, 1]"));
        }
        if self.coherence.len() != self.freq_hz.len() || self.response.len() != self.freq_hz.len() {
            return Err(Error::validation("column lengths differ"));
        }
        Ok(())
    }

    /// Pointwise ratio of two measurements on the same grid.
    pub fn ratio(num: &FrfData, den: &FrfData) -> Result<Self> {
        if num.freq_hz != den.freq_hz {
            return Err(Error::validation("grids differ"));
        }
        let mut out = num.clone();
        for (i, r) in out.response.iter_mut().enumerate() {
            *r /= den.response[i];
            out.coherence[i] = num.coherence[i].min(den.coherence[i]);
        }
        Ok(out)
    }

    /// CSV with header `f_Hz,re,im,coherence`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("f_Hz,re,im,coherence\n");
        for i in 0..self.len() {
            let r = self.response[i];
            let _ = writeln!(s, "{},{},{},{}", self.freq_hz[i], r.re, r.im, self.coherence[i]);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut freq = Vec::new();
        let mut resp = Vec::new();
        let mut coh = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if ln == 0 || line.is_empty() {
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::validation(format!("line {}: {e}", ln + 1)))?;
            if cols.len() != 4 {
                return Err(Error::validation(format!("line {}: expected 4 columns", ln + 1)));
            }
            freq.push(cols[0]);
            resp.push(Complex64::new(cols[1], cols[2]));
            coh.push(cols[3]);
        }
        let d = Self {
            freq_hz: freq,
            response: resp,
            coherence: coh,
            complete: true,
            ..Default::default()
        };
        d.validate()?;
        Ok(d)
    }
}

/// Log-spaced grid over the default identification band, 100–4500 Hz.
pub fn default_grid(n: usize) -> Vec<f64> {
    logspace(100.0, 4500.0, n)
}

/// Measure `G = Y₂/Y₁` (or `H` in the dI/dV loop) with the loop closed.
///
/// Each frequency is snapped so the averaging window holds a whole
/// number of periods and samples, and a whole number of bias modulation
/// periods when one is running. A crash ends the sweep and returns the
/// points gathered so far with `complete = false`.
pub fn measure_closed_loop_frf(mic: &mut Microscope, freq_hz: &[f64], opts: &FrfOptions) -> Result<FrfData> {
    let dim = matches!(opts.injection, Injection::D1 | Injection::D2);
    match (mic.feedback(), dim) {
        (Feedback::Current { .. }, false) | (Feedback::FirstHarmonic { .. }, true) => {}
        (Feedback::Hold, _) => return Err(Error::validation("loop must be closed")),
        _ => return Err(Error::validation("injection point does not belong to the active loop")),
    }
    if !(opts.amplitude > 0.0) {
        return Err(Error::validation("excitation amplitude must be positive"));
    }
    let ln_per_unit = if opts.injection.at_error() {
        1.0
    } else {
        mic.loop_model()?.g(0.0).norm()
    };
    if opts.amplitude * ln_per_unit >= MAX_LN_PERTURBATION {
        return Err(Error::validation(format!(
            "excitation would perturb ln I by about {:.3}, limit {MAX_LN_PERTURBATION}",
            opts.amplitude * ln_per_unit
        )));
    }
    let fs = mic.fs();
    // Whole modulation periods per window keep demodulator ripple out of the estimate.
    let mod_period = mic.cfg.modulation.and_then(|m| {
        let p = fs / m.freq_hz;
        ((p - p.round()).abs() < 1e-9 * p).then(|| p.round() as usize)
    });
    let mut out = FrfData {
        amplitude: opts.amplitude,
        complete: true,
        ..Default::default()
    };
    for &f_req in freq_hz {
        if !(f_req > 0.0) || f_req >= fs / 2.0 {
            return Err(Error::validation(format!("{f_req} Hz is outside (0, fs/2)")));
        }
        let mut n = (opts.dwell(f_req) * fs).ceil() as usize;
        if let Some(p) = mod_period {
            n = n.div_ceil(p) * p;
        }
        let k = ((f_req * n as f64 / fs).round() as usize).max(1);
        let f = k as f64 * fs / n as f64;
        if out.freq_hz.last().is_some_and(|&last| f <= last) {
            continue;
        }
        match measure_point(mic, f, k, n, opts) {
            Ok((y1, y2, coh)) => {
                out.freq_hz.push(f);
                out.ch1.push(y1);
                out.ch2.push(y2);
                out.response.push(y2 / y1);
                out.coherence.push(coh);
            }
            Err(e @ Error::Crash { .. }) => {
                out.complete = false;
                out.abort_reason = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn measure_point(mic: &mut Microscope, f: f64, periods: usize, n: usize, opts: &FrfOptions) -> Result<(Complex64, Complex64, f64)> {
    let fs = mic.fs();
    let w = 2.0 * PI * f;
    let exc = |t: f64| {
        let v = opts.amplitude * (w * t).sin();
        if opts.injection.at_error() {
            Excitation { error: v, ..Default::default() }
        } else {
            Excitation { control: v, ..Default::default() }
        }
    };
    for _ in 0..n {
        let t = mic.time();
        mic.step(&exc(t))?;
    }
    let cfg = LockInConfig {
        freq_hz: f,
        harmonics: vec![1],
        order: 1,
        cutoff_hz: opts.cutoff_hz,
        phase_offset: 0.0,
        mode: LockInMode::PeriodAverage { periods },
    };
    let mut l1 = LockIn::new(cfg.clone(), fs)?;
    let mut l2 = LockIn::new(cfg, fs)?;
    let mut m1 = Moments::default();
    let mut m2 = Moments::default();
    for _ in 0..n {
        let t = mic.time();
        let s = mic.step(&exc(t))?;
        l1.step(s.t, s.u_total);
        l2.step(s.t, s.log_signal);
        m1.push(s.u_total);
        m2.push(s.log_signal);
    }
    let u = opts.amplitude;
    let y1 = l1.estimate(1).expect("tracked").phasor();
    let y2 = l2.estimate(1).expect("tracked").phasor();
    let coh = m1.coherence(y1.norm()).min(m2.coherence(y2.norm()));
    Ok((y1 / u, y2 / u, coh))
}

#[derive(Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    /// Share of the ac power carried by a tone of amplitude `a`.
    fn coherence(&self, a: f64) -> f64 {
        let mean = self.sum / self.n;
        let var = (self.sum_sq / self.n - mean * mean).max(0.0);
        if var <= 0.0 {
            return 0.0;
        }
        (0.5 * a * a / var).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let f = vec![100.0, 200.0, 400.0];
        let d = FrfData::sample(|f| Complex64::new(1.0 / f, -f * 1e-3), &f).unwrap();
        let back = FrfData::from_csv(&d.to_csv()).unwrap();
        assert_eq!(back.freq_hz, d.freq_hz);
        for (a, b) in back.response.iter().zip(&d.response) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn grid_must_increase() {
        assert!(FrfData::from_response(vec![2.0, 1.0], vec![Complex64::default(); 2]).is_err());
        assert!(FrfData::from_csv("f_Hz,re,im,coherence\n1,0,0,1.5\n").is_err());
    }

    #[test]
    fn dwell_rule() {
        let o = FrfOptions::default();
        assert!((o.dwell(1000.0) - 10.0 / (2.0 * PI * 20.0)).abs() < 1e-12);
        assert!((o.dwell(100.0) - 0.2).abs() < 1e-12);
    }
}
