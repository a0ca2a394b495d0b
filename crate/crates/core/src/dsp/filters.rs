use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linear::{LinearSystem, Prewarp, Section};

/// Butterworth low-pass of the given order with exact -3 dB at `cutoff_hz`.
pub fn design_lowpass(order: usize, cutoff_hz: f64, fs: f64) -> Result<LinearSystem> {
    if order == 0 {
        return Err(Error::validation("filter order must be at least 1"));
    }
    if !(cutoff_hz > 0.0) || cutoff_hz >= fs / 2.0 {
        return Err(Error::validation(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {}) Hz",
            fs / 2.0
        )));
    }
    let w = 2.0 * PI * cutoff_hz;
    let warp = Prewarp::Fixed(w);
    let mut sections: Vec<Section> = (0..order / 2)
        .map(|k| {
            let zeta = (PI * (2 * k + 1) as f64 / (2 * order) as f64).sin();
            Section::lowpass2(w, zeta).with_prewarp(warp)
        })
        .collect();
    if order % 2 == 1 {
        sections.push(Section::lowpass1(w).with_prewarp(warp));
    }
    LinearSystem::new(1.0, sections, fs)
}

/// Notch `(s² + ω0²) / (s² + ω0 s / Q + ω0²)` with its null exactly at `center_hz`.
pub fn design_notch(center_hz: f64, q: f64, fs: f64) -> Result<Section> {
    if !(center_hz > 0.0) || center_hz >= fs / 2.0 {
        return Err(Error::validation(format!(
            "notch center {center_hz} Hz must lie in (0, {}) Hz",
            fs / 2.0
        )));
    }
    if !(q > 0.0) {
        return Err(Error::validation("notch quality factor must be positive"));
    }
    let w = 2.0 * PI * center_hz;
    Ok(Section::new([1.0, 0.0, w * w], [1.0, w / q, w * w]).with_prewarp(Prewarp::Fixed(w)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NotchSpec {
    pub center_hz: f64,
    pub q: f64,
}

/// Cascade of notches applied sample by sample.
#[derive(Clone, Debug)]
pub struct NotchBank {
    specs: Vec<NotchSpec>,
    sys: LinearSystem,
}

impl NotchBank {
    pub fn new(specs: Vec<NotchSpec>, fs: f64) -> Result<Self> {
        for (i, a) in specs.iter().enumerate() {
            if specs[..i].iter().any(|b| b.center_hz == a.center_hz) {
                return Err(Error::validation("notch centers must be distinct"));
            }
        }
        let sections = specs
            .iter()
            .map(|s| design_notch(s.center_hz, s.q, fs))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            specs,
            sys: LinearSystem::new(1.0, sections, fs)?,
        })
    }

    /// Notches at `f, 2f, ..., (1 + extra) f`, skipping any at or above Nyquist.
    pub fn harmonics(f_hz: f64, extra: usize, q: f64, fs: f64) -> Result<Self> {
        let specs = (1..=extra + 1)
            .map(|i| NotchSpec {
                center_hz: i as f64 * f_hz,
                q,
            })
            .filter(|s| s.center_hz < fs / 2.0)
            .collect();
        Self::new(specs, fs)
    }

    pub fn specs(&self) -> &[NotchSpec] {
        &self.specs
    }

    pub fn system(&self) -> &LinearSystem {
        &self.sys
    }

    #[inline]
    pub fn apply(&mut self, x: f64) -> f64 {
        self.sys.step(x)
    }

    pub fn set_steady_state(&mut self, x: f64) {
        self.sys.set_steady_state(x);
    }

    pub fn reset(&mut self) {
        self.sys.reset();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{db, logspace};

    const FS: f64 = 100e3;

    #[test]
    fn butterworth_corner_and_slope() {
        for order in 1..=6 {
            let lp = design_lowpass(order, 500.0, FS).unwrap();
            assert!((lp.discrete_response(0.0).norm() - 1.0).abs() < 1e-12);
            let corner = db(lp.discrete_response(500.0));
            assert!((corner + 3.0103).abs() < 0.1, "order {order}: {corner}");
            let decade = db(lp.response(5000.0));
            assert!((decade + 20.0 * order as f64).abs() < 1.0, "order {order}: {decade}");
            let mut last = f64::INFINITY;
            for f in logspace(600.0, 45e3, 200) {
                let m = lp.discrete_response(f).norm();
                assert!(m < last);
                last = m;
            }
        }
        assert!(design_lowpass(4, 50e3, FS).is_err());
        assert!(design_lowpass(0, 50.0, FS).is_err());
    }

    #[test]
    fn paper_lock_in_filter_corner() {
        let lp = design_lowpass(4, 500.0, FS).unwrap();
        let m = db(lp.discrete_response(500.0));
        assert!((m + 3.0103).abs() < 0.1);
    }

    #[test]
    fn notch_attenuates_center_and_passes_elsewhere() {
        let sys = LinearSystem::new(1.0, vec![design_notch(2000.0, 5.0, FS).unwrap()], FS).unwrap();
        assert!(db(sys.discrete_response(2000.0)) < -40.0);
        assert!((sys.discrete_response(0.0).norm() - 1.0).abs() < 1e-12);
        for f in [6000.0, 10e3, 20e3] {
            assert!(db(sys.discrete_response(f)).abs() < 0.1, "{f}");
        }
    }

    fn tone_residual(bank: &mut NotchBank, f: f64) -> f64 {
        let n_settle = (0.05 * FS) as usize;
        let span = (FS / f * 40.0).round() as usize;
        let (mut s, mut c) = (0.0, 0.0);
        for n in 0..n_settle + span {
            let th = 2.0 * PI * f * n as f64 / FS;
            let y = bank.apply(th.sin());
            if n >= n_settle {
                s += y * th.sin();
                c += y * th.cos();
            }
        }
        2.0 * s.hypot(c) / span as f64
    }

    #[test]
    fn sine_at_center_is_removed() {
        let mut bank = NotchBank::harmonics(2000.0, 0, 5.0, FS).unwrap();
        assert!(tone_residual(&mut bank, 2000.0) <= 0.01);
        let mut dc = NotchBank::harmonics(2000.0, 0, 5.0, FS).unwrap();
        let mut y = 0.0;
        for _ in 0..20_000 {
            y = dc.apply(3.0);
        }
        assert!((y - 3.0).abs() < 1e-9);
    }

    #[test]
    fn two_section_bank() {
        let f = 2000.0;
        let mut bank = NotchBank::harmonics(f, 1, 5.0, FS).unwrap();
        assert_eq!(bank.specs().len(), 2);
        assert!(tone_residual(&mut bank, f) <= 0.01);
        bank.reset();
        assert!(tone_residual(&mut bank, 2.0 * f) <= 0.01);
        bank.reset();
        let low = tone_residual(&mut bank, 0.1 * f);
        assert!((low - 1.0).abs() < 0.01, "{low}");
    }

    #[test]
    fn duplicate_centers_rejected() {
        let s = NotchSpec {
            center_hz: 1000.0,
            q: 5.0,
        };
        assert!(NotchBank::new(vec![s, s], FS).is_err());
    }
}
