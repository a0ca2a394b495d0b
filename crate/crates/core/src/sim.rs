//! Fixed-step closed-loop simulation of the z-axis.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::PI;

use crate::control::{design_region, error_signal, Designer, PiController, PiGains, RegionPoint, StabilityRegion};
use crate::dsp::{design_lowpass, LockIn, LockInConfig, LockInMode, NotchBank};
use crate::error::{Error, Result};
use crate::junction::{capacitive_current, gap_factor, harmonic_amplitudes, EffectiveSite, SurfaceModel, DECAY_CONSTANT};
use crate::linear::LinearSystem;
use crate::plant::{Plant, PlantConfig};

/// Sinusoidal bias modulation `Vm sin(2π f t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modulation {
    pub vm: f64,
    pub freq_hz: f64,
}

/// Lock-in settings for the loop's demodulator; the reference is the bias modulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemodConfig {
    pub harmonics: Vec<usize>,
    pub order: usize,
    pub cutoff_hz: f64,
    pub mode: LockInMode,
}

impl Default for DemodConfig {
    fn default() -> Self {
        Self {
            harmonics: vec![1],
            order: 4,
            cutoff_hz: 500.0,
            mode: LockInMode::Filter,
        }
    }
}

/// Notch bank at the modulation frequency and `extra_harmonics` multiples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NotchConfig {
    pub extra_harmonics: usize,
    pub q: f64,
}

impl Default for NotchConfig {
    fn default() -> Self {
        Self {
            extra_harmonics: 3,
            q: 5.0,
        }
    }
}

/// What the controller regulates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feedback {
    /// Loop open, controller output frozen.
    Hold,
    /// `ln |I|` after the preamp (and notch bank, if any), setpoint in A.
    Current { setpoint: f64 },
    /// `ln |I₁|` from the in-phase lock-in channel, setpoint in A.
    FirstHarmonic { setpoint: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MicroscopeConfig {
    pub fs: f64,
    pub plant: PlantConfig,
    pub gains: PiGains,
    /// Controller output clamp, ±V at the HVA input.
    pub u_limit: f64,
    /// dc sample bias, V.
    pub bias: f64,
    pub modulation: Option<Modulation>,
    pub demod: DemodConfig,
    pub notch: Option<NotchConfig>,
    pub seed: u64,
}

impl Default for MicroscopeConfig {
    fn default() -> Self {
        Self {
            fs: 100e3,
            plant: PlantConfig::default(),
            gains: PiGains {
                ki: 1.3,
                omega_c: 2.0 * PI * 1600.0,
            },
            u_limit: 10.0,
            bias: -2.5,
            modulation: None,
            demod: DemodConfig::default(),
            notch: None,
            seed: 0,
        }
    }
}

/// Signals injected into the loop for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Excitation {
    /// Added to the error (U₁), ln units.
    pub error: f64,
    /// Added to the controller output (U₂), V.
    pub control: f64,
    /// Added to the surface height under the tip, Å.
    pub gap: f64,
    /// Added to the sample bias, V.
    pub bias: f64,
}

/// Everything observable after one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    /// Piezo extension toward the surface, Å.
    pub z_ext: f64,
    pub gap: f64,
    pub bias: f64,
    pub i_tunnel: f64,
    pub i_total: f64,
    /// Preamp output as digitized, V.
    pub v_meas: f64,
    pub clipped: bool,
    /// Feedback variable, ln A.
    pub log_signal: f64,
    pub error: f64,
    /// Controller output, V.
    pub u: f64,
    /// HVA input including injected U₂, V.
    pub u_total: f64,
    /// dc compliance times controller output, sign flipped so protrusions are positive, Å.
    pub topography: f64,
    pub saturated: bool,
    /// Site under the tip.
    pub site: usize,
}

/// Position and actuator state of the tip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TipState {
    pub x: f64,
    pub y: f64,
    /// Piezo extension, Å.
    pub z_fine: f64,
    /// Coarse positioner datum, Å. The apex sits at `z_coarse - z_fine`.
    pub z_coarse: f64,
    pub engaged: bool,
    pub crashed: bool,
}

/// Linearized loop around the current operating point.
#[derive(Clone, Debug)]
pub struct LoopModel {
    pub fs: f64,
    /// `1.025 √φ`, Å⁻¹.
    pub ks: f64,
    g_hp: LinearSystem,
    measure: LinearSystem,
}

impl LoopModel {
    /// Controller output to feedback variable, including the one-sample
    /// actuation delay.
    pub fn g(&self, f: f64) -> Complex64 {
        let delay = Complex64::from_polar(1.0, -2.0 * PI * f / self.fs);
        self.ks * self.measure.discrete_response(f) * self.g_hp.discrete_response(f) * delay
    }

    /// Surface height to feedback variable.
    pub fn h(&self, f: f64) -> Complex64 {
        self.ks * self.measure.discrete_response(f)
    }

    pub fn compliance(&self) -> f64 {
        self.g_hp.dc_gain()
    }
}

/// Hooks run around every simulated sample.
pub trait Supervisor {
    fn excite(&mut self, _t: f64) -> Excitation {
        Excitation::default()
    }

    fn observe(&mut self, _s: &Sample, _mic: &mut Microscope) -> Result<()> {
        Ok(())
    }
}

impl Supervisor for () {}

impl<S: Supervisor + ?Sized> Supervisor for &mut S {
    fn excite(&mut self, t: f64) -> Excitation {
        (**self).excite(t)
    }

    fn observe(&mut self, s: &Sample, mic: &mut Microscope) -> Result<()> {
        (**self).observe(s, mic)
    }
}

/// Runs both supervisors; excitations add.
impl<A: Supervisor, B: Supervisor> Supervisor for (A, B) {
    fn excite(&mut self, t: f64) -> Excitation {
        let a = self.0.excite(t);
        let b = self.1.excite(t);
        Excitation {
            error: a.error + b.error,
            control: a.control + b.control,
            gap: a.gap + b.gap,
            bias: a.bias + b.bias,
        }
    }

    fn observe(&mut self, s: &Sample, mic: &mut Microscope) -> Result<()> {
        self.0.observe(s, mic)?;
        self.1.observe(s, mic)
    }
}

/// Flags sustained large error: rms over a sliding window above a threshold.
#[derive(Clone, Debug)]
pub struct InstabilityMonitor {
    window: usize,
    threshold: f64,
    buf: VecDeque<f64>,
    sum_sq: f64,
}

impl InstabilityMonitor {
    pub fn new(window: usize, threshold: f64) -> Self {
        Self {
            window: window.max(1),
            threshold,
            buf: VecDeque::with_capacity(window.max(1)),
            sum_sq: 0.0,
        }
    }

    /// Returns `true` once the window is full and its rms exceeds the threshold.
    pub fn update(&mut self, e: f64) -> bool {
        let e2 = if e.is_finite() { e * e } else { f64::MAX };
        self.buf.push_back(e2);
        self.sum_sq += e2;
        if self.buf.len() > self.window {
            self.sum_sq -= self.buf.pop_front().unwrap();
        }
        self.buf.len() == self.window && (self.sum_sq.max(0.0) / self.window as f64).sqrt() > self.threshold
    }

    pub fn reset(&mut self) {
        self.buf.clear();
        self.sum_sq = 0.0;
    }
}

/// The simulated instrument: surface, plant, controller and demodulators.
#[derive(Clone, Debug)]
pub struct Microscope {
    pub cfg: MicroscopeConfig,
    pub surface: SurfaceModel,
    plant: Plant,
    pi: PiController,
    feedback: Feedback,
    lockin: Option<LockIn>,
    notch: Option<NotchBank>,
    notch_on: bool,
    vm: f64,
    x: f64,
    y: f64,
    z_coarse: f64,
    u_prev: f64,
    n: u64,
    crashed: bool,
    engaged: bool,
}

impl Microscope {
    pub fn new(cfg: MicroscopeConfig, surface: SurfaceModel) -> Result<Self> {
        surface.validate()?;
        if !(cfg.fs > 0.0) {
            return Err(Error::validation("sample rate must be positive"));
        }
        let plant = Plant::new(cfg.plant.clone(), cfg.fs, cfg.seed, surface.current_noise)?;
        let pi = PiController::new(cfg.gains, cfg.fs, cfg.u_limit)?;
        let mut mic = Self {
            cfg,
            surface,
            plant,
            pi,
            feedback: Feedback::Hold,
            lockin: None,
            notch: None,
            notch_on: true,
            vm: 0.0,
            x: 0.0,
            y: 0.0,
            z_coarse: 0.0,
            u_prev: 0.0,
            n: 0,
            crashed: false,
            engaged: false,
        };
        mic.rebuild_demod()?;
        Ok(mic)
    }

    fn rebuild_demod(&mut self) -> Result<()> {
        self.lockin = None;
        self.notch = None;
        self.vm = 0.0;
        let Some(m) = self.cfg.modulation else {
            return Ok(());
        };
        if !(m.vm >= 0.0) || !(m.freq_hz > 0.0) {
            return Err(Error::validation("modulation needs vm >= 0 and a positive frequency"));
        }
        self.vm = m.vm;
        let d = &self.cfg.demod;
        let mut li = LockIn::new(
            LockInConfig {
                freq_hz: m.freq_hz,
                harmonics: d.harmonics.clone(),
                order: d.order,
                cutoff_hz: d.cutoff_hz,
                phase_offset: 0.0,
                mode: d.mode,
            },
            self.cfg.fs,
        )?;
        let r = self.cfg.plant.preamp_gain;
        let g_a = self.plant.g_a.clone();
        li.calibrate_with(|f| r * g_a.discrete_response(f));
        self.lockin = Some(li);
        if let Some(n) = self.cfg.notch {
            self.notch = Some(NotchBank::harmonics(m.freq_hz, n.extra_harmonics, n.q, self.cfg.fs)?);
        }
        Ok(())
    }

    pub fn fs(&self) -> f64 {
        self.cfg.fs
    }

    pub fn time(&self) -> f64 {
        self.n as f64 / self.cfg.fs
    }

    pub fn samples_elapsed(&self) -> u64 {
        self.n
    }

    pub fn feedback(&self) -> Feedback {
        self.feedback
    }

    pub fn set_feedback(&mut self, fb: Feedback) -> Result<()> {
        if let Feedback::FirstHarmonic { .. } = fb {
            let ok = self.lockin.as_ref().is_some_and(|l| l.estimate(1).is_some());
            if !ok {
                return Err(Error::validation(
                    "first-harmonic feedback needs a modulation and a lock-in tracking harmonic 1",
                ));
            }
        }
        self.feedback = fb;
        Ok(())
    }

    pub fn controller(&self) -> &PiController {
        &self.pi
    }

    pub fn controller_mut(&mut self) -> &mut PiController {
        &mut self.pi
    }

    pub fn set_gains(&mut self, g: PiGains) -> Result<()> {
        self.pi.set_gains(g)
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn lockin(&self) -> Option<&LockIn> {
        self.lockin.as_ref()
    }

    pub fn lockin_mut(&mut self) -> Option<&mut LockIn> {
        self.lockin.as_mut()
    }

    pub fn has_notch(&self) -> bool {
        self.notch.is_some()
    }

    pub fn notch_enabled(&self) -> bool {
        self.notch.is_some() && self.notch_on
    }

    /// Route the current path through the notch bank or around it. The
    /// bank keeps filtering while bypassed so re-enabling is seamless.
    pub fn set_notch_enabled(&mut self, on: bool) -> Result<()> {
        if on && self.notch.is_none() {
            return Err(Error::validation("no notch bank configured"));
        }
        self.notch_on = on;
        Ok(())
    }

    pub fn bias(&self) -> f64 {
        self.cfg.bias
    }

    pub fn set_bias(&mut self, v: f64) {
        self.cfg.bias = v;
    }

    /// Current modulation amplitude, V.
    pub fn modulation_amplitude(&self) -> f64 {
        self.vm
    }

    /// Change the modulation amplitude without touching filter state.
    pub fn set_modulation_amplitude(&mut self, vm: f64) {
        self.vm = vm.max(0.0);
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn move_to(&mut self, x: f64, y: f64) -> Result<()> {
        if !self.surface.contains(x, y) {
            return Err(Error::range(format!("({x:.4}, {y:.4}) nm is off the surface")));
        }
        self.x = x;
        self.y = y;
        Ok(())
    }

    pub fn z_coarse(&self) -> f64 {
        self.z_coarse
    }

    pub fn set_z_coarse(&mut self, z: f64) {
        self.z_coarse = z;
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed
    }

    pub fn is_engaged(&self) -> bool {
        self.engaged
    }

    pub fn set_engaged(&mut self, e: bool) {
        self.engaged = e;
    }

    /// Freeze the controller output at `u` with the loop open.
    pub fn hold_output(&mut self, u: f64) {
        self.feedback = Feedback::Hold;
        self.pi.set_output(u);
    }

    pub fn tip_state(&self) -> TipState {
        TipState {
            x: self.x,
            y: self.y,
            z_fine: self.plant.g_hp.dc_gain() * self.u_prev,
            z_coarse: self.z_coarse,
            engaged: self.engaged,
            crashed: self.crashed,
        }
    }

    pub fn site_here(&self) -> Result<EffectiveSite> {
        self.surface.sample_site(self.x, self.y)
    }

    pub fn compliance(&self) -> f64 {
        self.cfg.plant.dc_compliance()
    }

    /// Topography in Å corresponding to controller output `u`.
    pub fn topography_of(&self, u: f64) -> f64 {
        -self.compliance() * u
    }

    /// Gap (Å) at which the current site meets the setpoint of `fb`.
    pub fn equilibrium_gap(&self, fb: Feedback) -> Result<f64> {
        let site = self.site_here()?;
        let ks = DECAY_CONSTANT * site.phi.sqrt();
        let at_contact = match fb {
            Feedback::Hold => return Err(Error::validation("no setpoint in hold mode")),
            Feedback::Current { .. } => {
                if self.vm > 0.0 {
                    harmonic_amplitudes(&site, 0.0, self.cfg.bias, self.vm, 0)[0]
                } else {
                    site.conduct.eval(self.cfg.bias)
                }
            }
            Feedback::FirstHarmonic { .. } => harmonic_amplitudes(&site, 0.0, self.cfg.bias, self.vm, 1)[1],
        };
        let sp = match fb {
            Feedback::Current { setpoint } | Feedback::FirstHarmonic { setpoint } => setpoint.abs(),
            Feedback::Hold => unreachable!(),
        };
        let gap = (at_contact.abs() / sp).ln() / ks;
        if !(gap > 0.0) || !gap.is_finite() {
            return Err(Error::validation(format!(
                "setpoint {sp:e} A is not reachable at a positive gap on this site"
            )));
        }
        Ok(gap)
    }

    /// Place the tip at `(x, y)` at the equilibrium gap with the controller
    /// centred and every filter at rest, then close the loop.
    pub fn engage_at(&mut self, x: f64, y: f64, fb: Feedback) -> Result<()> {
        self.move_to(x, y)?;
        self.set_feedback(fb)?;
        let gap = self.equilibrium_gap(fb)?;
        let site = self.site_here()?;
        self.z_coarse = site.height + gap;
        self.u_prev = 0.0;
        self.pi.set_output(0.0);
        let scale = gap_factor(gap, site.phi);
        let harmonics = if self.vm > 0.0 {
            harmonic_amplitudes(&site, gap, self.cfg.bias, self.vm, 8)
        } else {
            vec![site.conduct.eval(self.cfg.bias) * scale]
        };
        self.plant.set_steady_state(0.0, harmonics[0]);
        if let Some(n) = self.notch.as_mut() {
            n.set_steady_state(self.cfg.plant.preamp_gain * harmonics[0]);
        }
        if let Some(li) = self.lockin.as_mut() {
            let m = self.cfg.modulation.expect("lock-in implies modulation");
            let cap = self.surface.capacitance * self.vm * 2.0 * PI * m.freq_hz;
            let phasors: Vec<Complex64> = li
                .config()
                .harmonics
                .clone()
                .iter()
                .map(|&h| {
                    let a = harmonics.get(h).copied().unwrap_or(0.0);
                    let mut p = if h % 2 == 1 {
                        Complex64::new(a, 0.0)
                    } else {
                        Complex64::new(0.0, a)
                    };
                    if h == 1 {
                        p.im += cap;
                    }
                    p
                })
                .collect();
            li.preset(&phasors);
        }
        self.crashed = false;
        self.engaged = true;
        Ok(())
    }

    /// Linearized loop at the current position and feedback mode.
    pub fn loop_model(&self) -> Result<LoopModel> {
        let site = self.site_here()?;
        let ks = DECAY_CONSTANT * site.phi.sqrt();
        let fs = self.cfg.fs;
        let measure = match self.feedback {
            Feedback::FirstHarmonic { .. } => {
                let d = &self.cfg.demod;
                if !matches!(d.mode, LockInMode::Filter) {
                    return Err(Error::validation("loop model needs a filtered lock-in"));
                }
                design_lowpass(d.order, d.cutoff_hz, fs)?
            }
            _ => match self.notch.as_ref().filter(|_| self.notch_on) {
                Some(n) => self.plant.g_a.series(n.system())?,
                None => self.plant.g_a.clone(),
            },
        };
        Ok(LoopModel {
            fs,
            ks,
            g_hp: self.plant.g_hp.clone(),
            measure,
        })
    }

    /// Stability-region point for the loop as linearized here.
    pub fn design_point(&self, omega_c: f64, f_min: f64, limit_db: f64) -> Result<RegionPoint> {
        let m = self.loop_model()?;
        let g = |f: f64| m.g(f);
        let h = |f: f64| m.h(f);
        Ok(Designer::new(&g, Some(&h), self.cfg.fs).point(omega_c, f_min, limit_db))
    }

    /// Stability region over a grid of corner frequencies (rad/s).
    pub fn design_region(&self, omega_c: &[f64], f_min: f64, limit_db: f64) -> Result<StabilityRegion> {
        let m = self.loop_model()?;
        let g = |f: f64| m.g(f);
        let h = |f: f64| m.h(f);
        Ok(design_region(&Designer::new(&g, Some(&h), self.cfg.fs), omega_c, f_min, limit_db))
    }

    /// Switch to the recommended gain at `omega_c`.
    pub fn apply_recommended_gains(&mut self, omega_c: f64, f_min: f64, limit_db: f64) -> Result<PiGains> {
        let p = self.design_point(omega_c, f_min, limit_db)?;
        let g = PiGains::new(p.ki_recommended, omega_c)?;
        self.set_gains(g)?;
        Ok(g)
    }

    /// Advance one sample.
    pub fn step(&mut self, exc: &Excitation) -> Result<Sample> {
        if self.crashed {
            return Err(Error::Failed("tip has crashed; re-engage first".into()));
        }
        let fs = self.cfg.fs;
        let t = self.n as f64 / fs;
        self.n += 1;

        let z_ext = self.plant.drive(self.u_prev);
        let site = self.surface.sample_site(self.x, self.y)?;
        let gap = self.z_coarse - z_ext - site.height - exc.gap;
        if gap < 0.0 {
            self.crashed = true;
            self.engaged = false;
            return Err(Error::Crash {
                x_nm: self.x,
                y_nm: self.y,
                gap_angstrom: gap,
            });
        }
        let (vmod, icap) = match self.cfg.modulation {
            Some(m) if self.vm > 0.0 => {
                let w = 2.0 * PI * m.freq_hz;
                (
                    self.vm * (w * t).sin(),
                    capacitive_current(self.surface.capacitance, self.vm, w, t),
                )
            }
            _ => (0.0, 0.0),
        };
        let bias = self.cfg.bias + exc.bias + vmod;
        let i_tunnel = site.conduct.eval(bias) * gap_factor(gap, site.phi);
        let i_total = i_tunnel + icap;
        let meas = self.plant.measure_current(i_total);
        let v_path = match self.notch.as_mut() {
            Some(n) => {
                let v = n.apply(meas.volts);
                if self.notch_on { v } else { meas.volts }
            }
            None => meas.volts,
        };
        if let Some(li) = self.lockin.as_mut() {
            li.step(t, meas.volts);
        }
        let r = self.cfg.plant.preamp_gain;
        let floor = self.surface.current_floor;
        let (log_signal, mut error) = match self.feedback {
            Feedback::Hold => ((v_path.abs() / r).max(floor).ln(), 0.0),
            Feedback::Current { setpoint } => {
                let e = error_signal(v_path, setpoint, r, floor);
                ((v_path.abs() / r).max(floor).ln(), e)
            }
            Feedback::FirstHarmonic { setpoint } => {
                let i1 = self.lockin.as_ref().and_then(|l| l.estimate(1)).map_or(0.0, |e| e.in_phase);
                let y = i1.abs().max(floor).ln();
                (y, setpoint.abs().ln() - y)
            }
        };
        error += exc.error;
        let u = match self.feedback {
            Feedback::Hold => self.pi.output(),
            _ => self.pi.step(error),
        };
        let u_total = u + exc.control;
        self.u_prev = u_total;
        Ok(Sample {
            t,
            x: self.x,
            y: self.y,
            z_ext,
            gap,
            bias,
            i_tunnel,
            i_total,
            v_meas: meas.volts,
            clipped: meas.clipped,
            log_signal,
            error,
            u,
            u_total,
            topography: self.topography_of(u),
            saturated: self.pi.is_saturated(),
            site: site.nearest,
        })
    }

    /// Run for `seconds` with a supervisor, passing each sample to `record`.
    pub fn run(
        &mut self,
        seconds: f64,
        sup: &mut dyn Supervisor,
        mut record: impl FnMut(&Sample),
    ) -> Result<()> {
        let n = (seconds * self.cfg.fs).round() as usize;
        for _ in 0..n {
            let exc = sup.excite(self.time());
            let s = self.step(&exc)?;
            record(&s);
            sup.observe(&s, self)?;
        }
        Ok(())
    }

    /// Run with no excitation, discarding samples.
    pub fn settle(&mut self, seconds: f64) -> Result<Sample> {
        let mut last = Sample::default();
        self.run(seconds, &mut (), |s| last = *s)?;
        Ok(last)
    }
}
