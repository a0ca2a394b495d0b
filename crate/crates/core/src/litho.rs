//! Hydrogen depassivation lithography.
//!
//! Atomically precise (AP) and field-emission (FE) line writes, a
//! feedback-controlled lithography watcher, and the voltage-modulated
//! variant that ramps the bias modulation over each target until the
//! controller reports a desorption.
//!
//! Desorption is deterministic: a site depassivates once the tip has spent
//! a cumulative `tau_d` over it at a bias magnitude at or above the site's
//! threshold. In FE mode every H site within `r_fe` of the tip accumulates
//! dwell instead of just the nearest one.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::junction::{SiteKind, SurfaceModel};
use crate::sim::{Excitation, Feedback, InstabilityMonitor, Microscope, Sample, Supervisor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesorptionModel {
    /// Cumulative dwell above threshold needed to desorb, s.
    pub tau_d: f64,
    /// Field-emission radius, nm.
    pub r_fe: f64,
    /// Bias magnitude at which the write switches to field emission, V.
    pub v_fe: f64,
}

impl Default for DesorptionModel {
    fn default() -> Self {
        Self {
            tau_d: 5e-3,
            r_fe: 2.5,
            v_fe: 7.0,
        }
    }
}

impl DesorptionModel {
    /// Checks the model, and that every finite AP threshold on `surface`
    /// sits below `v_fe`.
    pub fn validate(&self, surface: &SurfaceModel) -> Result<()> {
        if !(self.tau_d > 0.0 && self.tau_d.is_finite()) {
            return Err(Error::validation("tau_d must be positive"));
        }
        if !(self.r_fe > 0.0 && self.r_fe.is_finite()) {
            return Err(Error::validation("r_fe must be positive"));
        }
        if !(self.v_fe > 0.0 && self.v_fe.is_finite()) {
            return Err(Error::validation("v_fe must be positive"));
        }
        let worst = surface
            .sites
            .iter()
            .filter(|s| s.kind == SiteKind::HSi && s.v_desorb.is_finite())
            .map(|s| s.v_desorb)
            .fold(0.0, f64::max);
        if worst >= self.v_fe {
            return Err(Error::validation(format!(
                "AP threshold {worst} V is not below the FE voltage {} V",
                self.v_fe
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// A site lost its hydrogen. The only kind that mutates the surface.
    Desorbed,
    ZJump,
    VMaxReached,
    Instability,
    Crash,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesorptionEvent {
    pub kind: EventKind,
    pub site: Option<usize>,
    /// Simulation time, s.
    pub t: f64,
    /// Height jump, Å. Zero for kinds without one.
    pub z_jump: f64,
}

impl DesorptionEvent {
    fn new(kind: EventKind, site: Option<usize>, t: f64) -> Self {
        Self { kind, site, t, z_jump: 0.0 }
    }
}

pub fn write_events_jsonl(events: &[DesorptionEvent], w: &mut impl Write) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut *w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn events_to_jsonl(events: &[DesorptionEvent]) -> Result<String> {
    let mut buf = Vec::new();
    write_events_jsonl(events, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

pub fn events_from_jsonl(text: &str) -> Result<Vec<DesorptionEvent>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Applies every `Desorbed` event to a copy of `initial`.
pub fn replay(initial: &SurfaceModel, events: &[DesorptionEvent]) -> Result<SurfaceModel> {
    let mut s = initial.clone();
    for e in events.iter().filter(|e| e.kind == EventKind::Desorbed) {
        let i = e.site.ok_or_else(|| Error::validation("desorption event without a site"))?;
        if i >= s.sites.len() {
            return Err(Error::range(format!("site {i} is outside the surface")));
        }
        s.depassivate(i);
    }
    Ok(s)
}

/// Tracks dwell per site and depassivates sites as they cross `tau_d`.
#[derive(Clone, Debug)]
pub struct Desorber {
    model: DesorptionModel,
    dwell: Vec<f64>,
    pub events: Vec<DesorptionEvent>,
}

impl Desorber {
    pub fn new(model: DesorptionModel, surface: &SurfaceModel) -> Self {
        Self {
            model,
            dwell: vec![0.0; surface.sites.len()],
            events: Vec::new(),
        }
    }

    fn credit(&mut self, i: usize, dt: f64, t: f64, surface: &mut SurfaceModel) {
        self.dwell[i] += dt;
        if self.dwell[i] >= self.model.tau_d && surface.depassivate(i) {
            self.events.push(DesorptionEvent::new(EventKind::Desorbed, Some(i), t));
        }
    }
}

impl Supervisor for Desorber {
    fn observe(&mut self, s: &Sample, mic: &mut Microscope) -> Result<()> {
        let dt = 1.0 / mic.fs();
        let v = s.bias.abs();
        let surface = &mut mic.surface;
        if v >= self.model.v_fe {
            let a = surface.lattice_nm;
            let r = self.model.r_fe;
            let span = (r / a).ceil() as isize + 1;
            let (c0, r0) = ((s.x / a).round() as isize, (s.y / a).round() as isize);
            for row in (r0 - span).max(0)..=(r0 + span).min(surface.rows as isize - 1) {
                for col in (c0 - span).max(0)..=(c0 + span).min(surface.cols as isize - 1) {
                    let i = surface.index(row as usize, col as usize);
                    if surface.sites[i].kind != SiteKind::HSi {
                        continue;
                    }
                    let (x, y) = surface.position(i);
                    if (x - s.x).hypot(y - s.y) <= r {
                        self.credit(i, dt, s.t, surface);
                    }
                }
            }
        } else {
            let i = s.site;
            let site = &surface.sites[i];
            if site.kind == SiteKind::HSi && v >= site.v_desorb {
                self.credit(i, dt, s.t, surface);
            }
        }
        Ok(())
    }
}

/// Feedback-controlled lithography detector: watches the topography
/// channel and flags a retraction larger than `threshold` inside a sliding
/// window.
#[derive(Clone, Debug)]
pub struct FclWatcher {
    threshold: f64,
    window: u64,
    n: u64,
    mins: VecDeque<(u64, f64)>,
    armed: bool,
    pub events: Vec<DesorptionEvent>,
}

impl FclWatcher {
    /// Standard 2 ms window.
    pub fn new(threshold: f64, fs: f64) -> Self {
        Self::with_window(threshold, 2e-3, fs)
    }

    pub fn with_window(threshold: f64, window_s: f64, fs: f64) -> Self {
        Self {
            threshold,
            window: ((window_s * fs).round() as u64).max(1),
            n: 0,
            mins: VecDeque::new(),
            armed: true,
            events: Vec::new(),
        }
    }

    /// Forget the window contents, e.g. after moving to a new target.
    pub fn reset(&mut self) {
        self.mins.clear();
        self.armed = true;
    }

    /// Feed one topography value (Å). Returns the jump when it fires.
    /// After firing the watcher stays quiet until the windowed rise drops
    /// below half the threshold.
    pub fn push(&mut self, t: f64, z: f64, site: Option<usize>) -> Option<f64> {
        let n = self.n;
        self.n += 1;
        while self.mins.back().is_some_and(|&(_, m)| m >= z) {
            self.mins.pop_back();
        }
        self.mins.push_back((n, z));
        while self.mins.front().is_some_and(|&(k, _)| k + self.window <= n) {
            self.mins.pop_front();
        }
        let jump = z - self.mins.front().map_or(z, |&(_, m)| m);
        if !self.armed {
            self.armed = jump < 0.5 * self.threshold;
            return None;
        }
        if jump > self.threshold {
            self.events.push(DesorptionEvent {
                kind: EventKind::ZJump,
                site,
                t,
                z_jump: jump,
            });
            self.armed = false;
            return Some(jump);
        }
        None
    }
}

impl Supervisor for FclWatcher {
    fn observe(&mut self, s: &Sample, _mic: &mut Microscope) -> Result<()> {
        self.push(s.t, s.topography, Some(s.site));
        Ok(())
    }
}

/// One decimated telemetry row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    /// Topography, Å.
    pub z: f64,
    pub vm: f64,
    /// Preamp output over R, A.
    pub i_raw: f64,
    /// `|I|` on the feedback path after the notch bank, A.
    pub i_filtered: f64,
}

pub fn telemetry_to_csv(rows: &[TelemetryRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "t,x_nm,y_nm,z_A,vm_V,i_raw_A,i_filtered_A")?;
    for r in rows {
        writeln!(
            w,
            "{:.7},{:.6},{:.6},{:.6},{:.6},{:.6e},{:.6e}",
            r.t, r.x, r.y, r.z, r.vm, r.i_raw, r.i_filtered
        )?;
    }
    Ok(())
}

/// Outcome of a lithography job. `completed` is false when a crash or an
/// instability cut it short; the events up to that point are kept.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LithoReport {
    pub events: Vec<DesorptionEvent>,
    pub completed: bool,
    pub failure: Option<String>,
    pub telemetry: Vec<TelemetryRow>,
}

impl LithoReport {
    pub fn desorbed_sites(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Desorbed)
            .filter_map(|e| e.site)
            .collect()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

enum Stop {
    Crash(Error),
    Unstable(Error),
}

struct Runner<'a> {
    desorber: Desorber,
    monitor: InstabilityMonitor,
    sup: &'a mut dyn Supervisor,
    telemetry_every: usize,
    telemetry: Vec<TelemetryRow>,
}

impl Runner<'_> {
    fn step(&mut self, mic: &mut Microscope, extra: Option<&mut FclWatcher>) -> Result<std::result::Result<(Sample, Option<f64>), Stop>> {
        let exc: Excitation = self.sup.excite(mic.time());
        let s = match mic.step(&exc) {
            Ok(s) => s,
            Err(e @ Error::Crash { .. }) => return Ok(Err(Stop::Crash(e))),
            Err(e) => return Err(e),
        };
        self.desorber.observe(&s, mic)?;
        self.sup.observe(&s, mic)?;
        let jump = extra.and_then(|w| w.push(s.t, s.topography, Some(s.site)));
        if self.telemetry_every > 0 && mic.samples_elapsed() % self.telemetry_every as u64 == 0 {
            let r = mic.cfg.plant.preamp_gain;
            self.telemetry.push(TelemetryRow {
                t: s.t,
                x: s.x,
                y: s.y,
                z: s.topography,
                vm: mic.modulation_amplitude(),
                i_raw: s.v_meas / r,
                i_filtered: s.log_signal.exp(),
            });
        }
        if self.monitor.update(s.error) {
            return Ok(Err(Stop::Unstable(Error::Unstable { t_s: s.t })));
        }
        Ok(Ok((s, jump)))
    }

    /// Glide along `path` at `speed` nm/s.
    fn walk(&mut self, mic: &mut Microscope, path: &[[f64; 2]], speed: f64) -> Result<std::result::Result<(), Stop>> {
        let ds = speed / mic.fs();
        for seg in path.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            let n = (len / ds).ceil().max(1.0) as usize;
            for k in 1..=n {
                let f = k as f64 / n as f64;
                mic.move_to(a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]))?;
                if let Err(stop) = self.step(mic, None)? {
                    return Ok(Err(stop));
                }
            }
        }
        Ok(Ok(()))
    }

    fn dwell(&mut self, mic: &mut Microscope, seconds: f64) -> Result<std::result::Result<(), Stop>> {
        let n = (seconds * mic.fs()).round() as usize;
        for _ in 0..n {
            if let Err(stop) = self.step(mic, None)? {
                return Ok(Err(stop));
            }
        }
        Ok(Ok(()))
    }

    /// Change bias and feedback with the loop held for `hold_s`, so the
    /// preamp settles before the new error reaches the controller.
    fn switch(&mut self, mic: &mut Microscope, bias: f64, fb: Feedback, hold_s: f64) -> Result<std::result::Result<(), Stop>> {
        let u = mic.controller().output();
        mic.hold_output(u);
        mic.set_bias(bias);
        if let Err(s) = self.dwell(mic, hold_s)? {
            return Ok(Err(s));
        }
        mic.set_feedback(fb)?;
        Ok(Ok(()))
    }

    fn finish(self, mic: &mut Microscope, stop: Option<Stop>) -> LithoReport {
        let mut events = self.desorber.events;
        let failure = match stop {
            None => None,
            Some(Stop::Crash(e)) => {
                events.push(DesorptionEvent::new(EventKind::Crash, None, mic.time()));
                Some(e.to_string())
            }
            Some(Stop::Unstable(e)) => {
                let t = match e {
                    Error::Unstable { t_s } => t_s,
                    _ => mic.time(),
                };
                events.push(DesorptionEvent::new(EventKind::Instability, None, t));
                let u = mic.controller().output();
                mic.hold_output(u);
                Some(e.to_string())
            }
        };
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        LithoReport {
            events,
            completed: failure.is_none(),
            failure,
            telemetry: self.telemetry,
        }
    }
}

fn with_setpoint(fb: Feedback, setpoint: f64, vm: f64) -> Result<Feedback> {
    match fb {
        Feedback::Current { .. } => Ok(Feedback::Current { setpoint }),
        Feedback::FirstHarmonic { .. } => Ok(Feedback::FirstHarmonic { setpoint: setpoint * vm }),
        Feedback::Hold => Err(Error::validation("lithography needs the loop engaged")),
    }
}

fn check_path(mic: &Microscope, path: &[[f64; 2]], speed: f64) -> Result<()> {
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(Error::validation("write speed must be positive"));
    }
    for p in path {
        if !mic.surface.contains(p[0], p[1]) {
            return Err(Error::range(format!("path point ({}, {}) nm is off the surface", p[0], p[1])));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdlConfig {
    /// Polyline in nm.
    pub path: Vec<[f64; 2]>,
    /// Lithography bias, V.
    pub bias: f64,
    /// Lithography setpoint: A for current feedback, A/V for dI/dV feedback.
    pub setpoint: f64,
    /// Write speed, nm/s.
    pub speed: f64,
    /// Tip travel speed to the path start at imaging conditions, nm/s.
    pub travel_speed: f64,
    /// Loop held open this long while the bias changes, s.
    pub switch_hold_s: f64,
    /// Pause at each end of the path and after switching back, s.
    pub settle_s: f64,
    pub instability_rms: f64,
    pub instability_window_s: f64,
}

impl Default for HdlConfig {
    fn default() -> Self {
        Self {
            path: Vec::new(),
            bias: 3.0,
            setpoint: 2.5e-9,
            speed: 5.0,
            travel_speed: 20.0,
            switch_hold_s: 1e-3,
            settle_s: 0.02,
            instability_rms: 2.0,
            instability_window_s: 0.02,
        }
    }
}

/// Write a line: switch to lithography bias and setpoint, walk the path,
/// switch back to the imaging values. The tip pauses `settle_s` at both
/// ends of the path under lithography conditions. A loop that goes unstable is opened
/// and the job stops with an `Instability` event; a crash stops it with a
/// `Crash` event.
pub fn hdl_line(
    mic: &mut Microscope,
    model: &DesorptionModel,
    cfg: &HdlConfig,
    sup: &mut dyn Supervisor,
) -> Result<LithoReport> {
    model.validate(&mic.surface)?;
    check_path(mic, &cfg.path, cfg.speed)?;
    if !(cfg.travel_speed > 0.0) || !(cfg.settle_s >= 0.0) || !(cfg.switch_hold_s >= 0.0) {
        return Err(Error::validation("travel speed must be positive and settle times non-negative"));
    }
    let imaging_fb = mic.feedback();
    let imaging_bias = mic.bias();
    let litho_fb = with_setpoint(imaging_fb, cfg.setpoint, mic.modulation_amplitude())?;
    let mut run = Runner {
        desorber: Desorber::new(*model, &mic.surface),
        monitor: InstabilityMonitor::new(
            ((cfg.instability_window_s * mic.fs()).round() as usize).max(1),
            cfg.instability_rms,
        ),
        sup,
        telemetry_every: 0,
        telemetry: Vec::new(),
    };
    let Some(&start) = cfg.path.first() else {
        return Ok(run.finish(mic, None));
    };

    let here = mic.position();
    let stop = 'job: {
        if let Err(s) = run.walk(mic, &[[here.0, here.1], start], cfg.travel_speed)? {
            break 'job Some(s);
        }
        if let Err(s) = run.switch(mic, cfg.bias, litho_fb, cfg.switch_hold_s)? {
            break 'job Some(s);
        }
        if let Err(s) = run.dwell(mic, cfg.settle_s)? {
            break 'job Some(s);
        }
        if let Err(s) = run.walk(mic, &cfg.path, cfg.speed)? {
            break 'job Some(s);
        }
        if let Err(s) = run.dwell(mic, cfg.settle_s)? {
            break 'job Some(s);
        }
        if let Err(s) = run.switch(mic, imaging_bias, imaging_fb, cfg.switch_hold_s)? {
            break 'job Some(s);
        }
        if let Err(s) = run.dwell(mic, cfg.settle_s)? {
            break 'job Some(s);
        }
        None
    };
    if stop.is_some() && !mic.is_crashed() {
        mic.set_bias(imaging_bias);
    }
    Ok(run.finish(mic, stop))
}

/// Field-emission write: [`hdl_line`] at a bias of at least `v_fe`.
pub fn fe_write(
    mic: &mut Microscope,
    model: &DesorptionModel,
    cfg: &HdlConfig,
    sup: &mut dyn Supervisor,
) -> Result<LithoReport> {
    if cfg.bias.abs() < model.v_fe {
        return Err(Error::validation(format!(
            "FE write needs |V| >= {} V, got {} V",
            model.v_fe, cfg.bias
        )));
    }
    hdl_line(mic, model, cfg, sup)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Site { site: usize },
    Position { x: f64, y: f64 },
}

impl Target {
    fn position(&self, s: &SurfaceModel) -> Result<(f64, f64)> {
        match *self {
            Target::Site { site } => {
                if site >= s.sites.len() {
                    return Err(Error::range(format!("target site {site} is outside the surface")));
                }
                Ok(s.position(site))
            }
            Target::Position { x, y } => {
                if !s.contains(x, y) {
                    return Err(Error::range(format!("target ({x}, {y}) nm is off the surface")));
                }
                Ok((x, y))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmfclConfig {
    pub bias: f64,
    /// Current setpoint, A.
    pub setpoint: f64,
    pub f_mod: f64,
    /// Modulation ramp-up rate, V/s. Ramp-down runs ten times faster.
    pub ramp_rate: f64,
    pub v_max: f64,
    /// Retraction that counts as a desorption, Å.
    pub z_jump: f64,
    pub targets: Vec<Target>,
    /// Settling time over each target before the ramp, s.
    pub hover_s: f64,
    /// Tip speed between targets, nm/s.
    pub travel_speed: f64,
    /// Keep one telemetry row every this many samples; 0 disables telemetry.
    pub telemetry_every: usize,
    pub instability_rms: f64,
    pub instability_window_s: f64,
}

impl Default for VmfclConfig {
    fn default() -> Self {
        Self {
            bias: -2.5,
            setpoint: 1e-9,
            f_mod: 1e3,
            ramp_rate: 0.15,
            v_max: 1.5,
            z_jump: 0.3,
            targets: Vec::new(),
            hover_s: 0.05,
            travel_speed: 20.0,
            telemetry_every: 10,
            instability_rms: 2.0,
            instability_window_s: 0.02,
        }
    }
}

impl VmfclConfig {
    pub fn validate(&self, mic: &Microscope) -> Result<()> {
        if !(self.ramp_rate > 0.0 && self.ramp_rate.is_finite()) {
            return Err(Error::validation("ramp rate must be positive"));
        }
        if !(self.z_jump > 0.0) {
            return Err(Error::validation("z-jump threshold must be positive"));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(Error::validation("v_max must be positive"));
        }
        if !(self.setpoint > 0.0) {
            return Err(Error::validation("setpoint must be positive"));
        }
        if !(self.hover_s >= 0.0) || !(self.travel_speed > 0.0) {
            return Err(Error::validation("hover time must be non-negative and travel speed positive"));
        }
        match mic.cfg.modulation {
            Some(m) if (m.freq_hz - self.f_mod).abs() <= 1e-9 * self.f_mod => {}
            _ => {
                return Err(Error::validation(format!(
                    "microscope modulation must run at f_mod = {} Hz",
                    self.f_mod
                )))
            }
        }
        if !mic.notch_enabled() {
            return Err(Error::validation("VMFCL needs the notch bank active on the current path"));
        }
        for t in &self.targets {
            t.position(&mic.surface)?;
        }
        Ok(())
    }
}

/// Voltage-modulated FCL. For each target: travel there, hover, ramp the
/// modulation amplitude until the watcher sees a retraction above the
/// threshold or the amplitude reaches `v_max`, log the outcome, ramp down
/// and move on. Bias and setpoint stay at their imaging values.
pub fn vmfcl(
    mic: &mut Microscope,
    model: &DesorptionModel,
    cfg: &VmfclConfig,
    sup: &mut dyn Supervisor,
) -> Result<LithoReport> {
    model.validate(&mic.surface)?;
    cfg.validate(mic)?;
    if mic.feedback() == Feedback::Hold {
        return Err(Error::validation("VMFCL needs the loop engaged"));
    }
    mic.set_bias(cfg.bias);
    mic.set_feedback(Feedback::Current { setpoint: cfg.setpoint })?;
    mic.set_modulation_amplitude(0.0);
    let fs = mic.fs();
    let mut watcher = FclWatcher::new(cfg.z_jump, fs);
    let mut outcomes = Vec::new();
    let mut run = Runner {
        desorber: Desorber::new(*model, &mic.surface),
        monitor: InstabilityMonitor::new(
            ((cfg.instability_window_s * fs).round() as usize).max(1),
            cfg.instability_rms,
        ),
        sup,
        telemetry_every: cfg.telemetry_every,
        telemetry: Vec::new(),
    };
    let up = cfg.ramp_rate / fs;
    let down = 10.0 * up;

    let stop = 'job: {
        for target in &cfg.targets {
            let (x, y) = target.position(&mic.surface)?;
            let here = mic.position();
            if let Err(s) = run.walk(mic, &[[here.0, here.1], [x, y]], cfg.travel_speed)? {
                break 'job Some(s);
            }
            if let Err(s) = run.dwell(mic, cfg.hover_s)? {
                break 'job Some(s);
            }
            watcher.reset();
            let mut vm = 0.0;
            let outcome = loop {
                vm = (vm + up).min(cfg.v_max);
                mic.set_modulation_amplitude(vm);
                match run.step(mic, Some(&mut watcher))? {
                    Err(s) => break 'job Some(s),
                    Ok((s, Some(jump))) => {
                        break DesorptionEvent {
                            kind: EventKind::ZJump,
                            site: Some(s.site),
                            t: s.t,
                            z_jump: jump,
                        }
                    }
                    Ok((s, None)) if vm >= cfg.v_max => {
                        break DesorptionEvent::new(EventKind::VMaxReached, Some(s.site), s.t);
                    }
                    Ok(_) => {}
                }
            };
            outcomes.push(outcome);
            while vm > 0.0 {
                vm = (vm - down).max(0.0);
                mic.set_modulation_amplitude(vm);
                if let Err(s) = run.step(mic, None)? {
                    break 'job Some(s);
                }
            }
        }
        None
    };
    if !mic.is_crashed() {
        mic.set_modulation_amplitude(0.0);
    }
    let mut report = run.finish(mic, stop);
    report.events.extend(outcomes);
    report.events.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn watcher_fires_on_a_step_and_only_once() {
        let mut w = FclWatcher::new(0.3, 1e4);
        for n in 0..100 {
            assert!(w.push(n as f64 * 1e-4, 0.0, None).is_none());
        }
        let mut fired = 0;
        for n in 100..200 {
            if w.push(n as f64 * 1e-4, 0.5, None).is_some() {
                fired += 1;
            }
        }
        assert_eq!(fired, 1);
        assert!((w.events[0].z_jump - 0.5).abs() < 1e-12);
    }

    #[test]
    fn watcher_ignores_slow_drift() {
        let mut w = FclWatcher::new(0.3, 1e4);
        // 0.1 Å per 2 ms window
        for n in 0..10_000 {
            assert!(w.push(n as f64 * 1e-4, n as f64 * 0.1 / 20.0, None).is_none());
        }
    }

    #[test]
    fn watcher_ignores_approach() {
        let mut w = FclWatcher::new(0.3, 1e4);
        w.push(0.0, 1.0, None);
        for n in 1..100 {
            assert!(w.push(n as f64 * 1e-4, 0.0, None).is_none());
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let ev = vec![
            DesorptionEvent::new(EventKind::Desorbed, Some(3), 0.1),
            DesorptionEvent {
                kind: EventKind::ZJump,
                site: Some(3),
                t: 0.2,
                z_jump: 0.71,
            },
            DesorptionEvent::new(EventKind::Crash, None, 0.3),
        ];
        let text = events_to_jsonl(&ev).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("\"kind\":\"z_jump\""));
        assert_eq!(events_from_jsonl(&text).unwrap(), ev);
    }

    #[test]
    fn model_rejects_thresholds_above_fe() {
        let s = SurfaceModel::uniform(2, 2, 0.384, crate::junction::Site::h_si());
        assert!(DesorptionModel::default().validate(&s).is_ok());
        let m = DesorptionModel { v_fe: 3.0, ..Default::default() };
        assert!(m.validate(&s).is_err());
        let m = DesorptionModel { tau_d: 0.0, ..Default::default() };
        assert!(m.validate(&s).is_err());
    }

    #[test]
    fn replay_rejects_unknown_site() {
        let s = SurfaceModel::uniform(2, 2, 0.384, crate::junction::Site::h_si());
        let ev = [DesorptionEvent::new(EventKind::Desorbed, Some(9), 0.0)];
        assert!(replay(&s, &ev).is_err());
    }
}
