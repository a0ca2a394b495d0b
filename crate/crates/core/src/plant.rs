//! HVA + piezo z-axis dynamics, transimpedance preamplifier, ADC and noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linear::{LinearSystem, Section};

/// One piezo resonance, `(1-g) + g ω²/(s² + 2ζω s + ω²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub freq_hz: f64,
    pub zeta: f64,
    /// Fraction of the dc compliance carried by this mode.
    pub gain: f64,
}

impl Mode {
    pub fn section(&self) -> Section {
        let w = 2.0 * PI * self.freq_hz;
        let g = self.gain;
        Section::new(
            [1.0 - g, (1.0 - g) * 2.0 * self.zeta * w, w * w],
            [1.0, 2.0 * self.zeta * w, w * w],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub modes: Vec<Mode>,
    /// Piezo sensitivity, Å/V.
    pub k_piezo: f64,
    /// HVA voltage gain.
    pub k_hva: f64,
    pub hva_bandwidth_hz: f64,
    /// Transimpedance gain R, V/A.
    pub preamp_gain: f64,
    /// Explicit preamp bandwidth; when absent, `preamp_gbw / R`.
    pub preamp_bandwidth_hz: Option<f64>,
    /// Gain-bandwidth product of the preamp tradeoff curve, Hz·V/A.
    pub preamp_gbw: f64,
    /// ADC full scale, ±V.
    pub adc_clip: f64,
    /// Input-referred current noise, A rms per sample.
    pub current_noise: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            modes: vec![
                Mode {
                    freq_hz: 1445.0,
                    zeta: 0.015,
                    gain: 0.1,
                },
                Mode {
                    freq_hz: 2670.0,
                    zeta: 0.03,
                    gain: 0.2,
                },
            ],
            k_piezo: 40.0,
            k_hva: 10.0,
            hva_bandwidth_hz: 10e3,
            preamp_gain: 1e8,
            preamp_bandwidth_hz: None,
            preamp_gbw: 4e12,
            adc_clip: 10.0,
            current_noise: 0.0,
        }
    }
}

impl PlantConfig {
    /// No resonances, unit HVA and piezo gains, wide preamp.
    pub fn ideal() -> Self {
        Self {
            modes: vec![],
            k_piezo: 1.0,
            k_hva: 1.0,
            ..Self::default()
        }
    }

    pub fn preamp_bandwidth(&self) -> f64 {
        self.preamp_bandwidth_hz
            .unwrap_or(self.preamp_gbw / self.preamp_gain)
    }

    /// dc displacement per volt of HVA input, Å/V.
    pub fn dc_compliance(&self) -> f64 {
        self.k_hva * self.k_piezo
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        let positive = [
            ("k_piezo", self.k_piezo),
            ("k_hva", self.k_hva),
            ("hva_bandwidth_hz", self.hva_bandwidth_hz),
            ("preamp_gain", self.preamp_gain),
            ("preamp_gbw", self.preamp_gbw),
            ("adc_clip", self.adc_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.preamp_bandwidth() > 0.0) {
            return Err(Error::validation("preamp bandwidth must be positive"));
        }
        if !(self.current_noise >= 0.0) {
            return Err(Error::validation("current noise must be non-negative"));
        }
        for m in &self.modes {
            if !(m.zeta > 0.0) || !(m.freq_hz > 0.0) {
                return Err(Error::validation(format!(
                    "mode at {} Hz with damping {} is not a stable resonance",
                    m.freq_hz, m.zeta
                )));
            }
            if !(0.0..=1.0).contains(&m.gain) {
                return Err(Error::validation("modal gain must lie in [0, 1]"));
            }
            if fs <= 20.0 * m.freq_hz {
                return Err(Error::validation(format!(
                    "sample rate {fs} Hz must exceed 20x the {} Hz resonance",
                    m.freq_hz
                )));
            }
        }
        Ok(())
    }
}

/// Build `(G_hp, G_A)` at sample rate `fs`.
///
/// `G_A` is normalized to unit dc gain in amperes-to-amperes; the
/// transimpedance `R` is applied by [`Plant::measure_current`]. A preamp
/// faster than Nyquist is treated as static.
pub fn build_plant(cfg: &PlantConfig, fs: f64) -> Result<(LinearSystem, LinearSystem)> {
    cfg.validate(fs)?;
    let mut sections: Vec<Section> = cfg.modes.iter().map(Mode::section).collect();
    sections.push(Section::lowpass1(2.0 * PI * cfg.hva_bandwidth_hz));
    let g_hp = LinearSystem::new(cfg.dc_compliance(), sections, fs)?;
    let bw = cfg.preamp_bandwidth();
    let g_a = if bw >= fs / 2.0 {
        LinearSystem::gain_only(1.0, fs)
    } else {
        LinearSystem::new(1.0, vec![Section::lowpass1(2.0 * PI * bw)], fs)?
    };
    Ok((g_hp, g_a))
}

/// One ADC reading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub volts: f64,
    pub clipped: bool,
}

/// Stateful plant: actuator path, preamp path and noise generator.
#[derive(Clone, Debug)]
pub struct Plant {
    pub cfg: PlantConfig,
    pub g_hp: LinearSystem,
    pub g_a: LinearSystem,
    noise: f64,
    rng: ChaCha8Rng,
}

impl Plant {
    /// `extra_noise` is added in quadrature to the configured current noise.
    pub fn new(cfg: PlantConfig, fs: f64, seed: u64, extra_noise: f64) -> Result<Self> {
        let (g_hp, g_a) = build_plant(&cfg, fs)?;
        let noise = cfg.current_noise.hypot(extra_noise);
        Ok(Self {
            cfg,
            g_hp,
            g_a,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Piezo extension (Å) for HVA input `u` (V).
    #[inline]
    pub fn drive(&mut self, u: f64) -> f64 {
        self.g_hp.step(u)
    }

    /// Preamp output for true junction current `i` (A).
    #[inline]
    pub fn measure_current(&mut self, i: f64) -> Measurement {
        let mut v = self.cfg.preamp_gain * self.g_a.step(i);
        if self.noise > 0.0 {
            let n: f64 = StandardNormal.sample(&mut self.rng);
            v += self.cfg.preamp_gain * self.noise * n;
        }
        let clip = self.cfg.adc_clip;
        Measurement {
            volts: v.clamp(-clip, clip),
            clipped: v.abs() > clip,
        }
    }

    /// Put both paths at rest for HVA input `u` and current `i`.
    pub fn set_steady_state(&mut self, u: f64, i: f64) {
        self.g_hp.set_steady_state(u);
        self.g_a.set_steady_state(i);
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::db;

    const FS: f64 = 100e3;

    fn quiet(cfg: PlantConfig) -> Plant {
        Plant::new(cfg, FS, 1, 0.0).unwrap()
    }

    #[test]
    fn ideal_plant_dc_gain_is_product() {
        let cfg = PlantConfig {
            k_hva: 3.0,
            k_piezo: 5.0,
            ..PlantConfig::ideal()
        };
        let (g_hp, _) = build_plant(&cfg, FS).unwrap();
        assert!((g_hp.dc_gain() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn default_dc_magnitude() {
        let cfg = PlantConfig::default();
        let (g_hp, _) = build_plant(&cfg, FS).unwrap();
        assert!((db(g_hp.response(0.0)) - 20.0 * 400f64.log10()).abs() < 1e-9);
        assert!(g_hp.is_stable());
    }

    #[test]
    fn single_mode_peak_amplification() {
        let cfg = PlantConfig {
            modes: vec![Mode {
                freq_hz: 9e3,
                zeta: 0.01,
                gain: 1.0,
            }],
            hva_bandwidth_hz: 1e9,
            ..PlantConfig::ideal()
        };
        let fs = 200e3;
        let (g_hp, _) = build_plant(&cfg, fs).unwrap();
        let (f_peak, peak) = (8800..9200)
            .map(|f| (f as f64, g_hp.response(f as f64).norm()))
            .fold((0.0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        assert!((f_peak - 9e3).abs() < 10.0);
        assert!((peak / 50.0 - 1.0).abs() < 0.01, "{peak}");
        assert!(build_plant(&cfg, FS).is_err());
    }

    #[test]
    fn unstable_mode_rejected() {
        let cfg = PlantConfig {
            modes: vec![Mode {
                freq_hz: 1e3,
                zeta: -0.01,
                gain: 0.5,
            }],
            ..PlantConfig::default()
        };
        assert!(build_plant(&cfg, FS).is_err());
    }

    #[test]
    fn preamp_bandwidth_falls_with_gain() {
        let lo = PlantConfig {
            preamp_gain: 1e7,
            ..PlantConfig::default()
        };
        let hi = PlantConfig::default();
        assert!(hi.preamp_bandwidth() < lo.preamp_bandwidth());
        assert!((hi.preamp_bandwidth() - 40e3).abs() < 1e-6);
    }

    #[test]
    fn nanoamp_reads_tenth_of_volt() {
        let mut p = quiet(PlantConfig::default());
        let mut m = p.measure_current(1e-9);
        for _ in 0..2000 {
            m = p.measure_current(1e-9);
        }
        assert!((m.volts - 0.1).abs() < 1e-9);
        assert!(!m.clipped);
    }

    #[test]
    fn large_current_clips() {
        let mut p = quiet(PlantConfig::default());
        let mut m = p.measure_current(200e-9);
        for _ in 0..2000 {
            m = p.measure_current(200e-9);
        }
        assert_eq!(m.volts, 10.0);
        assert!(m.clipped);
    }

    #[test]
    fn noise_std_matches_gain_times_sigma() {
        let cfg = PlantConfig {
            current_noise: 10e-12,
            ..PlantConfig::default()
        };
        let mut p = quiet(cfg);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| p.measure_current(0.0).volts).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect = 1e8 * 10e-12;
        assert!((var.sqrt() / expect - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_noise_is_bit_reproducible() {
        let run = |seed| {
            let mut p = Plant::new(PlantConfig::default(), FS, seed, 0.0).unwrap();
            (0..1000)
                .map(|k| p.measure_current(1e-9 * (k as f64 * 0.01).sin()).volts.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(2));
    }
}
