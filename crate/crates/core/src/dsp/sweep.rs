use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Sampled logarithmic chirp with its phase and frequency tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub samples: Vec<f64>,
    /// Instantaneous frequency, Hz.
    pub freq: Vec<f64>,
    /// Instantaneous phase, rad.
    pub phase: Vec<f64>,
}

/// Logarithmic sweep from `f_start` to `f_end` over `duration` seconds.
///
/// The last sample lands exactly on `f_end`. Phase is continuous and the
/// amplitude constant.
pub fn swept_sine(f_start: f64, f_end: f64, duration: f64, amplitude: f64, fs: f64) -> Result<Sweep> {
    if !(f_start > 0.0) || !(f_end > 0.0) {
        return Err(Error::validation("sweep frequencies must be positive"));
    }
    if f_start.max(f_end) > fs / 2.0 {
        return Err(Error::validation("sweep exceeds Nyquist"));
    }
    if !(duration > 0.0) {
        return Err(Error::validation("sweep duration must be positive"));
    }
    let n = (duration * fs).round().max(1.0) as usize + 1;
    let span = (n - 1) as f64 / fs;
    let ratio = f_end / f_start;
    let mut out = Sweep {
        samples: Vec::with_capacity(n),
        freq: Vec::with_capacity(n),
        phase: Vec::with_capacity(n),
    };
    for k in 0..n {
        let t = k as f64 / fs;
        let (f, th) = if ratio == 1.0 {
            (f_start, 2.0 * PI * f_start * t)
        } else {
            let l = ratio.ln();
            let g = (l * t / span).exp();
            (f_start * g, 2.0 * PI * f_start * span / l * (g - 1.0))
        };
        out.freq.push(f);
        out.phase.push(th);
        out.samples.push(amplitude * th.sin());
    }
    *out.freq.last_mut().unwrap() = f_end;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{LockIn, LockInConfig};

    const FS: f64 = 100e3;

    #[test]
    fn flat_sweep_is_pure_tone() {
        let s = swept_sine(1000.0, 1000.0, 0.01, 2.0, FS).unwrap();
        for (k, y) in s.samples.iter().enumerate() {
            let expect = 2.0 * (2.0 * PI * 1000.0 * k as f64 / FS).sin();
            assert!((y - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn frequency_track_endpoints() {
        let s = swept_sine(100.0, 4500.0, 0.5, 1.0, FS).unwrap();
        assert_eq!(s.freq[0], 100.0);
        assert_eq!(*s.freq.last().unwrap(), 4500.0);
        assert!(s.freq.windows(2).all(|w| w[1] > w[0]));
        // phase derivative tracks the frequency
        let k = s.freq.len() / 2;
        let df = (s.phase[k + 1] - s.phase[k - 1]) * FS / (4.0 * PI);
        assert!((df / s.freq[k] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn self_demodulation_recovers_amplitude() {
        let s = swept_sine(200.0, 4000.0, 1.0, 0.7, FS).unwrap();
        let cfg = LockInConfig {
            freq_hz: 200.0,
            cutoff_hz: 20.0,
            ..LockInConfig::default()
        };
        let mut li = LockIn::new(cfg, FS).unwrap();
        let n = s.samples.len();
        for k in 0..n {
            li.step_phase(s.phase[k], s.samples[k]);
            if k > n / 5 && k < n - n / 20 {
                let a = li.estimate(1).unwrap().amplitude();
                assert!((a / 0.7 - 1.0).abs() < 0.01, "{k}: {a}");
            }
        }
    }

    #[test]
    fn above_nyquist_rejected() {
        assert!(swept_sine(100.0, 60e3, 1.0, 1.0, FS).is_err());
    }
}
