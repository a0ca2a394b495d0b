//! Local barrier height estimators and LBH-driven gain adaptation.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::PiGains;
use crate::dsp::{LockIn, LockInConfig, LockInMode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbhMethod {
    GapModulation,
    DcGainRatio,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbhEstimate {
    pub method: LbhMethod,
    /// Proportional to `√φ`. For gap modulation this is `d ln I / dz` in Å⁻¹.
    pub value: f64,
    pub valid: bool,
}

fn tracker(f_hz: f64, cutoff_hz: f64, fs: f64) -> Result<LockIn> {
    LockIn::new(
        LockInConfig {
            freq_hz: f_hz,
            harmonics: vec![1],
            order: 4,
            cutoff_hz,
            phase_offset: 0.0,
            mode: LockInMode::Filter,
        },
        fs,
    )
}

/// Two cascaded one-pole dc blockers: removes offsets and ramps ahead of
/// the mixers. Primed with the first sample so there is no start-up step.
#[derive(Clone, Debug)]
struct DcBlock {
    r: f64,
    x1: [f64; 2],
    y1: [f64; 2],
    primed: bool,
}

impl DcBlock {
    fn new(corner_hz: f64, fs: f64) -> Self {
        Self {
            r: (-2.0 * PI * corner_hz / fs).exp(),
            x1: [0.0; 2],
            y1: [0.0; 2],
            primed: false,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        if !self.primed {
            self.x1 = [x, 0.0];
            self.primed = true;
        }
        let a = x - self.x1[0] + self.r * self.y1[0];
        self.x1[0] = x;
        self.y1[0] = a;
        let b = a - self.x1[1] + self.r * self.y1[1];
        self.x1[1] = a;
        self.y1[1] = b;
        b
    }
}

/// Dither the actuator and read the induced ripple on `ln I`.
///
/// Assumes the dither displacement is not opposed by the loop, so the
/// estimate is biased low when the controller reacts at the dither
/// frequency.
#[derive(Clone, Debug)]
pub struct GapModulation {
    lockin: LockIn,
    amplitude: f64,
    compliance: f64,
    block: DcBlock,
}

impl GapModulation {
    /// `amplitude` in volts at the HVA input; `compliance` in Å/V.
    pub fn new(f_hz: f64, amplitude: f64, compliance: f64, cutoff_hz: f64, fs: f64) -> Result<Self> {
        if !(amplitude > 0.0) || !(compliance > 0.0) {
            return Err(Error::validation("dither amplitude and compliance must be positive"));
        }
        Ok(Self {
            lockin: tracker(f_hz, cutoff_hz, fs)?,
            amplitude,
            compliance,
            block: DcBlock::new(f_hz / 20.0, fs),
        })
    }

    pub fn dither(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.lockin.config().freq_hz * t).sin()
    }

    pub fn observe(&mut self, t: f64, ln_i: f64) {
        let x = self.block.step(ln_i);
        self.lockin.step(t, x);
    }

    pub fn estimate(&self) -> LbhEstimate {
        let a = self.lockin.estimate(1).map_or(0.0, |e| e.amplitude());
        LbhEstimate {
            method: LbhMethod::GapModulation,
            value: a / (self.compliance * self.amplitude),
            valid: self.lockin.is_valid(),
        }
    }

    pub fn settling_time(&self) -> f64 {
        self.lockin.config().settling_time()
    }
}

/// Ratio of the log-current response to the actuator signal at a
/// modulation injected on the setpoint.
#[derive(Clone, Debug)]
pub struct DcGainRatio {
    y1: LockIn,
    y2: LockIn,
    amplitude: f64,
    floor: f64,
    block: (DcBlock, DcBlock),
}

impl DcGainRatio {
    /// `amplitude` in ln-current units added to the error signal.
    pub fn new(f_hz: f64, amplitude: f64, cutoff_hz: f64, fs: f64) -> Result<Self> {
        if !(amplitude > 0.0) {
            return Err(Error::validation("modulation amplitude must be positive"));
        }
        Ok(Self {
            y1: tracker(f_hz, cutoff_hz, fs)?,
            y2: tracker(f_hz, cutoff_hz, fs)?,
            amplitude,
            floor: 1e-12,
            block: (DcBlock::new(f_hz / 20.0, fs), DcBlock::new(f_hz / 20.0, fs)),
        })
    }

    pub fn excitation(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.y1.config().freq_hz * t).sin()
    }

    /// `y1`: HVA input (V); `y2`: measured log current. Both pass through
    /// the same dc blocker, which cancels in the ratio.
    pub fn observe(&mut self, t: f64, y1: f64, y2: f64) {
        let a = self.block.0.step(y1);
        let b = self.block.1.step(y2);
        self.y1.step(t, a);
        self.y2.step(t, b);
    }

    pub fn estimate(&self) -> LbhEstimate {
        let a1 = self.y1.estimate(1).map_or(0.0, |e| e.amplitude());
        let a2 = self.y2.estimate(1).map_or(0.0, |e| e.amplitude());
        let valid = self.y1.is_valid() && a1 > self.floor;
        LbhEstimate {
            method: LbhMethod::DcGainRatio,
            value: if a1 > self.floor { a2 / a1 } else { 0.0 },
            valid,
        }
    }

    pub fn settling_time(&self) -> f64 {
        self.y1.config().settling_time()
    }
}

/// `k_i · des / est`; unchanged for an invalid or vanishing estimate.
pub fn adapt_gains(gains: PiGains, est: &LbhEstimate, des: f64) -> PiGains {
    if !est.valid || !(est.value > 1e-12) || !est.value.is_finite() {
        return gains;
    }
    PiGains {
        ki: gains.ki * des / est.value,
        omega_c: gains.omega_c,
    }
}

/// Applies [`adapt_gains`] to a fixed nominal gain at most once per period.
#[derive(Clone, Debug)]
pub struct GainAdapter {
    pub nominal: PiGains,
    pub desired: f64,
    pub period: f64,
    last: Option<f64>,
}

impl GainAdapter {
    pub fn new(nominal: PiGains, desired: f64, period: f64) -> Self {
        Self {
            nominal,
            desired,
            period,
            last: None,
        }
    }

    /// New gains if an update is due at time `t` and `est` is usable.
    pub fn update(&mut self, t: f64, est: &LbhEstimate) -> Option<PiGains> {
        if let Some(last) = self.last {
            if t - last < self.period {
                return None;
            }
        }
        if !est.valid {
            return None;
        }
        self.last = Some(t);
        Some(adapt_gains(self.nominal, est, self.desired))
    }
}

/// Require `imaging_bw < f_m < first_resonance / 3`.
pub fn check_modulation_placement(f_m: f64, imaging_bw: f64, first_resonance: Option<f64>) -> Result<()> {
    if f_m <= imaging_bw {
        return Err(Error::validation(format!(
            "modulation {f_m} Hz must exceed the imaging bandwidth {imaging_bw} Hz"
        )));
    }
    if let Some(r) = first_resonance {
        if f_m >= r / 3.0 {
            return Err(Error::validation(format!(
                "modulation {f_m} Hz must stay below a third of the {r} Hz resonance"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptation_arithmetic() {
        let g = PiGains::new(100.0, 1000.0).unwrap();
        let est = |v| LbhEstimate {
            method: LbhMethod::DcGainRatio,
            value: v,
            valid: true,
        };
        assert_eq!(adapt_gains(g, &est(2.0), 2.0), g);
        let a = adapt_gains(g, &est(4.0), 2.0);
        assert_eq!(a.ki, 50.0);
        assert_eq!(a.omega_c, 1000.0);
        let bad = LbhEstimate { valid: false, ..est(4.0) };
        assert_eq!(adapt_gains(g, &bad, 2.0), g);
    }

    #[test]
    fn adapter_is_rate_limited_and_not_compounding() {
        let g = PiGains::new(100.0, 1000.0).unwrap();
        let mut ad = GainAdapter::new(g, 2.0, 0.01);
        let est = LbhEstimate {
            method: LbhMethod::DcGainRatio,
            value: 4.0,
            valid: true,
        };
        assert_eq!(ad.update(0.0, &est).unwrap().ki, 50.0);
        assert!(ad.update(0.005, &est).is_none());
        assert_eq!(ad.update(0.011, &est).unwrap().ki, 50.0);
    }

    #[test]
    fn gap_modulation_on_a_pure_exponential() {
        // ln I = -s·z with z = compliance · dither: estimate recovers s.
        let fs = 100e3;
        let slope = 2.2315;
        let mut gm = GapModulation::new(400.0, 0.002, 400.0, 40.0, fs).unwrap();
        for n in 0..(0.2 * fs) as usize {
            let t = n as f64 / fs;
            let z = 400.0 * gm.dither(t);
            gm.observe(t, -slope * z - 20.0);
        }
        let e = gm.estimate();
        assert!(e.valid);
        assert!((e.value / slope - 1.0).abs() < 0.005);
    }

    #[test]
    fn placement_rule() {
        assert!(check_modulation_placement(400.0, 100.0, Some(1445.0)).is_ok());
        assert!(check_modulation_placement(80.0, 100.0, Some(1445.0)).is_err());
        assert!(check_modulation_placement(600.0, 100.0, Some(1445.0)).is_err());
    }
}
