//! Tip approach, raster trajectories and the three imaging modes.

use serde::{Deserialize, Serialize};

use crate::control::Designer;
use crate::error::{Error, Result};
use crate::sim::{Excitation, Feedback, InstabilityMonitor, Microscope, Sample, Supervisor};

pub use crate::sim::TipState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproachConfig {
    /// Fine actuator extension rate, Å/s.
    pub slew_rate: f64,
    /// Coarse step toward the tip, Å.
    pub coarse_step: f64,
    /// Current that counts as contact, A.
    pub detect_current: f64,
    /// Accepted stopping window as fractions of the fine range.
    pub band: (f64, f64),
    pub max_steps: usize,
    /// Setpoint engaged once the surface is found, A.
    pub setpoint: f64,
    pub settle_s: f64,
}

impl Default for ApproachConfig {
    fn default() -> Self {
        Self {
            slew_rate: 4000.0,
            coarse_step: 2000.0,
            detect_current: 0.1e-9,
            band: (0.05, 0.95),
            max_steps: 50,
            setpoint: 0.5e-9,
            settle_s: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproachReport {
    pub coarse_steps: usize,
    pub extensions: usize,
    /// Fraction of the fine range in use when current was detected.
    pub extension_fraction: f64,
    pub state: TipState,
}

impl ApproachConfig {
    /// Rejects a coarse step that would let the surface slip past the
    /// fine actuator's window between two extensions.
    pub fn validate(&self, fine_range: f64) -> Result<()> {
        if !(self.slew_rate > 0.0) || !(self.coarse_step > 0.0) || !(self.detect_current > 0.0) {
            return Err(Error::validation("slew rate, coarse step and detect current must be positive"));
        }
        let (lo, hi) = self.band;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::validation("extension band must satisfy 0 <= lo < hi <= 1"));
        }
        if self.coarse_step >= fine_range {
            return Err(Error::validation(format!(
                "coarse step {} Å does not overlap the {} Å fine range",
                self.coarse_step, fine_range
            )));
        }
        if self.coarse_step > (hi - lo) * fine_range {
            return Err(Error::validation("coarse step is wider than the accepted extension band"));
        }
        Ok(())
    }
}

/// Extend, listen for current, retract and step until the surface shows
/// up inside the extension band, then close the current loop.
pub fn approach(mic: &mut Microscope, cfg: &ApproachConfig) -> Result<ApproachReport> {
    let lim = mic.controller().limit();
    let compliance = mic.compliance();
    let fine_range = 2.0 * lim * compliance;
    cfg.validate(fine_range)?;
    let r = mic.cfg.plant.preamp_gain;
    let fs = mic.fs();
    let du = cfg.slew_rate / compliance / fs;
    let (lo, hi) = cfg.band;
    let mut steps = 0;
    let mut extensions = 0;
    mic.set_engaged(false);
    retract(mic, -lim, 10.0 * du)?;
    loop {
        extensions += 1;
        let mut u = -lim;
        let mut found = None;
        while u < lim {
            u = (u + du).min(lim);
            mic.hold_output(u);
            let s = mic.step(&Excitation::default())?;
            if (s.v_meas / r).abs() > cfg.detect_current {
                found = Some(u);
                break;
            }
        }
        if let Some(u) = found {
            let frac = (u + lim) / (2.0 * lim);
            if frac < lo {
                return Err(Error::Failed(format!(
                    "surface found at {:.1}% of the fine range, below the accepted band",
                    100.0 * frac
                )));
            }
            if frac <= hi {
                mic.set_feedback(Feedback::Current { setpoint: cfg.setpoint })?;
                mic.controller_mut().set_output(u);
                mic.set_engaged(true);
                mic.settle(cfg.settle_s)?;
                return Ok(ApproachReport {
                    coarse_steps: steps,
                    extensions,
                    extension_fraction: frac,
                    state: mic.tip_state(),
                });
            }
        }
        if steps >= cfg.max_steps {
            return Err(Error::Failed(format!("no surface within {} coarse steps", cfg.max_steps)));
        }
        retract(mic, u, 10.0 * du)?;
        mic.set_z_coarse(mic.z_coarse() - cfg.coarse_step);
        steps += 1;
    }
}

fn retract(mic: &mut Microscope, from: f64, du: f64) -> Result<()> {
    let lim = mic.controller().limit();
    let mut u = from;
    while u > -lim {
        u = (u - du).max(-lim);
        mic.hold_output(u);
        mic.step(&Excitation::default())?;
    }
    mic.settle(0.05)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    ConstantHeight,
    ConstantCurrent,
    ConstantDidv,
}

/// Raster geometry and timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
    pub rows: usize,
    pub cols: usize,
    /// Fast-axis tip speed, nm/s.
    pub speed: f64,
    /// Dwell per pixel when the line has no length, s.
    pub point_dwell: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            width: 15.0,
            height: 15.0,
            rows: 32,
            cols: 32,
            speed: 100.0,
            point_dwell: 1e-3,
        }
    }
}

/// One trajectory sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub row: usize,
    pub col: usize,
    pub forward: bool,
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::validation("image needs at least one pixel"));
        }
        if !(self.speed > 0.0) {
            return Err(Error::validation("tip speed must be positive"));
        }
        if !(self.width >= 0.0) || !(self.height >= 0.0) {
            return Err(Error::validation("extent must be non-negative"));
        }
        if !(self.point_dwell > 0.0) {
            return Err(Error::validation("point dwell must be positive"));
        }
        Ok(())
    }

    /// Triangle frequency of the fast axis, `speed / (2 width)`.
    pub fn line_frequency(&self) -> f64 {
        if self.width > 0.0 {
            self.speed / (2.0 * self.width)
        } else {
            1.0 / (2.0 * self.point_dwell * self.cols as f64)
        }
    }

    /// Samples in one pass across the fast axis.
    pub fn samples_per_pass(&self, fs: f64) -> usize {
        let t = if self.width > 0.0 && self.cols > 1 {
            self.width / self.speed
        } else {
            self.point_dwell * self.cols as f64
        };
        ((t * fs).round() as usize).max(self.cols)
    }

    pub fn pixel_position(&self, row: usize, col: usize) -> (f64, f64) {
        let fx = if self.cols > 1 { col as f64 / (self.cols - 1) as f64 } else { 0.0 };
        let fy = if self.rows > 1 { row as f64 / (self.rows - 1) as f64 } else { 0.0 };
        (self.x0 + fx * self.width, self.y0 + fy * self.height)
    }

    /// Time-stamped trajectory: a forward and a reverse pass per row, the
    /// slow axis advancing one row per line period.
    pub fn trajectory(&self, fs: f64) -> Raster {
        Raster {
            cfg: self.clone(),
            n_pass: self.samples_per_pass(fs),
            fs,
            k: 0,
        }
    }
}

/// Iterator over [`RasterPoint`]s.
#[derive(Clone, Debug)]
pub struct Raster {
    cfg: RasterConfig,
    n_pass: usize,
    fs: f64,
    k: usize,
}

impl Raster {
    pub fn len_total(&self) -> usize {
        2 * self.n_pass * self.cfg.rows
    }
}

impl Iterator for Raster {
    type Item = RasterPoint;

    fn next(&mut self) -> Option<RasterPoint> {
        if self.k >= self.len_total() {
            return None;
        }
        let k = self.k;
        self.k += 1;
        let row = k / (2 * self.n_pass);
        let within = k % (2 * self.n_pass);
        let forward = within < self.n_pass;
        let i = if forward { within } else { 2 * self.n_pass - 1 - within };
        let frac = if self.n_pass > 1 { i as f64 / (self.n_pass - 1) as f64 } else { 0.0 };
        let col = ((frac * (self.cfg.cols - 1) as f64).round() as usize).min(self.cfg.cols - 1);
        let (_, y) = self.cfg.pixel_position(row, 0);
        Some(RasterPoint {
            t: k as f64 / self.fs,
            x: self.cfg.x0 + frac * self.cfg.width,
            y,
            row,
            col,
            forward,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Å.
    Topography,
    /// Feedback variable: ln A, or A/V for the dI/dV channel.
    Feedback,
    /// Loop error, ln units.
    Error,
    /// A.
    Current,
    /// Lock-in harmonic amplitude, A.
    Harmonic(usize),
}

impl Channel {
    pub fn suffix(&self) -> String {
        match self {
            Channel::Topography => "topo".into(),
            Channel::Feedback => "fb".into(),
            Channel::Error => "err".into(),
            Channel::Current => "cur".into(),
            Channel::Harmonic(n) => format!("I{n}"),
        }
    }
}

/// A scanned image with separate forward and reverse line buffers.
/// Unvisited pixels hold NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub channel: Channel,
    pub forward: Vec<f64>,
    pub reverse: Vec<f64>,
}

impl Image {
    pub fn new(rows: usize, cols: usize, channel: Channel) -> Self {
        Self {
            rows,
            cols,
            channel,
            forward: vec![f64::NAN; rows * cols],
            reverse: vec![f64::NAN; rows * cols],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.forward[row * self.cols + col]
    }

    pub fn row(&self, row: usize, forward: bool) -> &[f64] {
        let buf = if forward { &self.forward } else { &self.reverse };
        &buf[row * self.cols..(row + 1) * self.cols]
    }

    /// Subtract a constant from both buffers.
    pub fn offset(&mut self, by: f64) {
        for v in self.forward.iter_mut().chain(self.reverse.iter_mut()) {
            *v -= by;
        }
    }

    pub fn finite_range(&self) -> Option<(f64, f64)> {
        let mut it = self.forward.iter().chain(&self.reverse).copied().filter(|v| v.is_finite());
        let first = it.next()?;
        Some(it.fold((first, first), |(a, b), v| (a.min(v), b.max(v))))
    }
}

/// RMS difference between two equally shaped buffers, ignoring NaNs.
pub fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        if x.is_finite() && y.is_finite() {
            s += (x - y).powi(2);
            n += 1;
        }
    }
    if n == 0 { f64::NAN } else { (s / n as f64).sqrt() }
}

/// RMS of a buffer, ignoring NaNs.
pub fn rms(a: &[f64]) -> f64 {
    let zeros = vec![0.0; a.len()];
    rms_diff(a, &zeros)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub mode: ScanMode,
    pub raster: RasterConfig,
    pub bias: f64,
    /// A for constant current; A/V for constant dI/dV.
    pub setpoint: f64,
    /// Time spent at the first pixel before recording, s.
    pub settle_s: f64,
    /// Reject line rates above a tenth of the designed imaging bandwidth.
    pub enforce_bandwidth: bool,
    /// Error rms (ln units) over the window that counts as instability.
    pub instability_rms: f64,
    pub instability_window_s: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            mode: ScanMode::ConstantCurrent,
            raster: RasterConfig::default(),
            bias: -2.5,
            setpoint: 0.5e-9,
            settle_s: 0.05,
            enforce_bandwidth: true,
            instability_rms: 1.0,
            instability_window_s: 0.01,
        }
    }
}

/// Images from one scan.
#[derive(Clone, Debug)]
pub struct ScanResult {
    pub config: ScanConfig,
    pub images: Vec<Image>,
    /// Set when the tip crashed; the images hold everything recorded before.
    pub crash: Option<String>,
    /// Time the instability monitor tripped; the scan stops there.
    pub unstable_at: Option<f64>,
    pub samples: u64,
}

impl ScanResult {
    pub fn image(&self, ch: Channel) -> Option<&Image> {
        self.images.iter().find(|i| i.channel == ch)
    }

    /// Why the scan stopped early, if it did.
    pub fn unfinished(&self) -> Option<String> {
        self.crash
            .clone()
            .or_else(|| self.unstable_at.map(|t| format!("loop unstable at t = {t:.4} s")))
    }
}

/// Imaging bandwidth of the loop as it is currently tuned, Hz.
pub fn imaging_bandwidth(mic: &Microscope) -> Result<f64> {
    let m = mic.loop_model()?;
    let g = |f: f64| m.g(f);
    let h = |f: f64| m.h(f);
    let d = Designer::new(&g, Some(&h), mic.fs());
    let gains = mic.controller().gains();
    Ok(d.imaging_bandwidth(gains.ki, gains.omega_c))
}

/// Requires `10 f_line <= imaging bandwidth`.
pub fn check_line_rate(mic: &Microscope, raster: &RasterConfig) -> Result<()> {
    let bw = imaging_bandwidth(mic)?;
    let fl = raster.line_frequency();
    if 10.0 * fl > bw {
        return Err(Error::validation(format!(
            "line rate {fl:.3} Hz needs at least {:.1} Hz imaging bandwidth, loop has {bw:.1} Hz",
            10.0 * fl
        )));
    }
    Ok(())
}

pub(crate) struct Accum {
    sum: Vec<f64>,
    n: Vec<u32>,
}

impl Accum {
    pub(crate) fn new(len: usize) -> Self {
        Self { sum: vec![0.0; len], n: vec![0; len] }
    }

    pub(crate) fn add(&mut self, i: usize, v: f64) {
        self.sum[i] += v;
        self.n[i] += 1;
    }

    pub(crate) fn mean(&self, i: usize) -> f64 {
        if self.n[i] == 0 { f64::NAN } else { self.sum[i] / self.n[i] as f64 }
    }
}

/// Step the microscope along the raster trajectory under a supervisor,
/// calling `hook` after every sample. A crash or instability stops the
/// walk and is returned.
pub fn walk_raster(
    mic: &mut Microscope,
    r: &RasterConfig,
    sup: &mut dyn Supervisor,
    mut hook: impl FnMut(&RasterPoint, &Sample, &mut Microscope) -> Result<()>,
) -> Result<Option<Error>> {
    for p in r.trajectory(mic.fs()) {
        mic.move_to(p.x, p.y)?;
        let exc = sup.excite(mic.time());
        let res = mic.step(&exc).and_then(|s| {
            sup.observe(&s, mic)?;
            hook(&p, &s, mic)
        });
        match res {
            Ok(()) => {}
            Err(e @ (Error::Crash { .. } | Error::Unstable { .. })) => return Ok(Some(e)),
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Run a scan. The loop must already be engaged for the closed-loop
/// modes; constant height freezes the controller where it stands.
pub fn scan(mic: &mut Microscope, cfg: &ScanConfig) -> Result<ScanResult> {
    scan_with(mic, cfg, &mut ())
}

/// [`scan`] under a supervisor (gain adaptation, lithography watchers, telemetry).
pub fn scan_with(mic: &mut Microscope, cfg: &ScanConfig, sup: &mut dyn Supervisor) -> Result<ScanResult> {
    cfg.raster.validate()?;
    let r = &cfg.raster;
    let (x0, y0) = r.pixel_position(0, 0);
    let (x1, y1) = r.pixel_position(r.rows - 1, r.cols - 1);
    if !mic.surface.contains(x0, y0) || !mic.surface.contains(x1, y1) {
        return Err(Error::range("scan area leaves the surface"));
    }
    mic.set_bias(cfg.bias);
    let vm = mic.modulation_amplitude();
    match cfg.mode {
        ScanMode::ConstantHeight => {
            let u = mic.controller().output();
            mic.hold_output(u);
        }
        ScanMode::ConstantCurrent => {
            mic.set_feedback(Feedback::Current { setpoint: cfg.setpoint })?;
        }
        ScanMode::ConstantDidv => {
            if !mic.notch_enabled() || !(vm > 0.0) {
                return Err(Error::validation("dI/dV imaging needs a modulation and a notch bank"));
            }
            mic.set_feedback(Feedback::FirstHarmonic { setpoint: cfg.setpoint * vm })?;
        }
    }
    if cfg.enforce_bandwidth && cfg.mode != ScanMode::ConstantHeight {
        check_line_rate(mic, r)?;
    }
    mic.move_to(x0, y0)?;
    let samples_before = mic.samples_elapsed();
    mic.settle(cfg.settle_s)?;

    let len = r.rows * r.cols;
    let names = [Channel::Topography, Channel::Feedback, Channel::Error, Channel::Current];
    let mut fwd: Vec<Accum> = names.iter().map(|_| Accum::new(len)).collect();
    let mut rev: Vec<Accum> = names.iter().map(|_| Accum::new(len)).collect();
    let mut monitor = InstabilityMonitor::new(
        ((cfg.instability_window_s * mic.fs()).round() as usize).max(1),
        cfg.instability_rms,
    );
    let end = walk_raster(mic, r, sup, |p, s, mic| {
        if cfg.mode != ScanMode::ConstantHeight && monitor.update(s.error) {
            return Err(Error::Unstable { t_s: s.t });
        }
        let fb = match cfg.mode {
            ScanMode::ConstantDidv => {
                let i1 = mic.lockin().and_then(|l| l.estimate(1)).map_or(0.0, |e| e.in_phase);
                i1 / vm
            }
            _ => s.log_signal,
        };
        let acc = if p.forward { &mut fwd } else { &mut rev };
        let i = p.row * r.cols + p.col;
        acc[0].add(i, s.topography);
        acc[1].add(i, fb);
        acc[2].add(i, s.error);
        acc[3].add(i, s.i_tunnel);
        Ok(())
    })?;
    let (crash, unstable_at) = match end {
        Some(Error::Unstable { t_s }) => (None, Some(t_s)),
        Some(e) => (Some(e.to_string()), None),
        None => (None, None),
    };
    let mut images: Vec<Image> = names
        .iter()
        .enumerate()
        .map(|(c, &ch)| {
            let mut im = Image::new(r.rows, r.cols, ch);
            for i in 0..len {
                im.forward[i] = fwd[c].mean(i);
                im.reverse[i] = rev[c].mean(i);
            }
            im
        })
        .collect();
    if cfg.mode == ScanMode::ConstantHeight {
        images.retain(|im| im.channel != Channel::Topography);
    } else if let Some(first) = images[0].forward.first().copied().filter(|v| v.is_finite()) {
        images[0].offset(first);
    }
    Ok(ScanResult {
        config: cfg.clone(),
        images,
        crash,
        unstable_at,
        samples: mic.samples_elapsed() - samples_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_frequency_of_paper_scale_scan() {
        let r = RasterConfig {
            width: 15.0,
            speed: 100.0,
            ..Default::default()
        };
        assert!((r.line_frequency() - 100.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_hits_extent_bounds() {
        let r = RasterConfig {
            x0: 1.0,
            y0: 2.0,
            width: 3.0,
            height: 4.0,
            rows: 5,
            cols: 7,
            speed: 300.0,
            ..Default::default()
        };
        let pts: Vec<_> = r.trajectory(10e3).collect();
        let xmin = pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let xmax = pts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let ymax = pts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((xmin, xmax, ymax), (1.0, 4.0, 6.0));
        assert_eq!(pts.len(), 2 * 100 * 5);
        for c in 0..7 {
            assert!(pts.iter().any(|p| p.forward && p.col == c));
            assert!(pts.iter().any(|p| !p.forward && p.col == c));
        }
    }

    #[test]
    fn one_pixel_is_a_point_dwell() {
        let r = RasterConfig {
            width: 0.0,
            height: 0.0,
            rows: 1,
            cols: 1,
            point_dwell: 0.01,
            ..Default::default()
        };
        let pts: Vec<_> = r.trajectory(1e3).collect();
        assert_eq!(pts.len(), 20);
        assert!(pts.iter().all(|p| p.x == 0.0 && p.y == 0.0 && p.col == 0));
    }

    #[test]
    fn coarse_step_must_overlap() {
        let c = ApproachConfig {
            coarse_step: 9000.0,
            ..Default::default()
        };
        assert!(c.validate(8000.0).is_err());
        assert!(ApproachConfig::default().validate(8000.0).is_ok());
    }

    #[test]
    fn rms_ignores_nan() {
        assert_eq!(rms_diff(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 5.0]), 2f64.sqrt());
    }
}
