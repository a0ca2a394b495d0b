//! Scanning tunneling spectroscopy: frozen-gap I-V sweeps, CITS maps,
//! harmonic imaging and per-pixel ultrafast I-V.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::dsp::{LockIn, LockInConfig};
use crate::error::{Error, Result};
use crate::scan::{check_line_rate, walk_raster, Accum, Channel, Image, RasterConfig};
use crate::sim::{Excitation, Feedback, Microscope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IvMode {
    Swept,
    Ultrafast,
}

/// An I-V curve, ascending in V for ultrafast curves and in sweep order
/// for swept ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IVCurve {
    pub mode: IvMode,
    pub pixel: Option<(usize, usize)>,
    pub v: Vec<f64>,
    pub i: Vec<f64>,
    /// Set when a point clipped or the capacitive estimate was not settled.
    pub flagged: bool,
}

impl IVCurve {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.v.len() != self.i.len() {
            return Err(Error::validation("V and I columns differ in length"));
        }
        let up = self.v.windows(2).all(|w| w[1] > w[0]);
        let down = self.v.windows(2).all(|w| w[1] < w[0]);
        if !(up || down) {
            return Err(Error::validation("V must be strictly monotone"));
        }
        Ok(())
    }

    /// Current at `v` by linear interpolation between neighbouring points.
    pub fn current_at(&self, v: f64) -> Result<f64> {
        let n = self.v.len();
        if n == 0 {
            return Err(Error::range("empty curve"));
        }
        let asc = n < 2 || self.v[n - 1] > self.v[0];
        let (lo, hi) = if asc { (self.v[0], self.v[n - 1]) } else { (self.v[n - 1], self.v[0]) };
        if !(v >= lo - 1e-12 && v <= hi + 1e-12) {
            return Err(Error::range(format!("{v} V is outside the swept band [{lo}, {hi}] V")));
        }
        if n == 1 {
            return Ok(self.i[0]);
        }
        for k in 0..n - 1 {
            let (a, b) = (self.v[k], self.v[k + 1]);
            let inside = if asc { v >= a && v <= b } else { v <= a && v >= b };
            if inside {
                if v == a {
                    return Ok(self.i[k]);
                }
                if v == b {
                    return Ok(self.i[k + 1]);
                }
                let f = (v - a) / (b - a);
                return Ok(self.i[k] + f * (self.i[k + 1] - self.i[k]));
            }
        }
        Ok(if v <= lo { self.i[if asc { 0 } else { n - 1 }] } else { self.i[if asc { n - 1 } else { 0 }] })
    }

    /// Numerical dI/dV: central differences inside, one-sided at the ends.
    pub fn didv(&self) -> Vec<(f64, f64)> {
        let n = self.v.len();
        if n < 2 {
            return self.v.iter().map(|&v| (v, f64::NAN)).collect();
        }
        (0..n)
            .map(|k| {
                let (a, b) = match k {
                    0 => (0, 1),
                    k if k == n - 1 => (n - 2, n - 1),
                    k => (k - 1, k + 1),
                };
                (self.v[k], (self.i[b] - self.i[a]) / (self.v[b] - self.v[a]))
            })
            .collect()
    }
}

/// Write curves as `pixel_row,pixel_col,V,I`. Curves without a pixel use -1.
pub fn iv_set_to_csv(curves: &[IVCurve]) -> String {
    let mut out = String::from("pixel_row,pixel_col,V,I\n");
    for c in curves {
        let (r, col) = c.pixel.map_or((-1, -1), |(r, c)| (r as i64, c as i64));
        for (v, i) in c.v.iter().zip(&c.i) {
            let _ = writeln!(out, "{r},{col},{v:.9e},{i:.9e}");
        }
    }
    out
}

/// Read curves back from [`iv_set_to_csv`]; rows for one pixel must be contiguous.
pub fn iv_set_from_csv(text: &str, mode: IvMode) -> Result<Vec<IVCurve>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "pixel_row,pixel_col,V,I" => {}
        _ => return Err(Error::validation("expected header pixel_row,pixel_col,V,I")),
    }
    let mut curves: Vec<IVCurve> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::validation(format!("line {}: expected 4 fields", n + 2)));
        }
        let bad = |_| Error::validation(format!("line {}: bad number", n + 2));
        let r: i64 = f[0].trim().parse().map_err(|_| Error::validation(format!("line {}: bad row", n + 2)))?;
        let c: i64 = f[1].trim().parse().map_err(|_| Error::validation(format!("line {}: bad col", n + 2)))?;
        let v: f64 = f[2].trim().parse().map_err(bad)?;
        let i: f64 = f[3].trim().parse().map_err(bad)?;
        let pixel = (r >= 0 && c >= 0).then(|| (r as usize, c as usize));
        match curves.last_mut() {
            Some(last) if last.pixel == pixel => {
                last.v.push(v);
                last.i.push(i);
            }
            _ => curves.push(IVCurve {
                mode,
                pixel,
                v: vec![v],
                i: vec![i],
                flagged: false,
            }),
        }
    }
    Ok(curves)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub v_start: f64,
    pub v_stop: f64,
    pub points: usize,
    /// Bias ramp rate, V/s.
    pub rate: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            v_start: -2.0,
            v_stop: 2.0,
            points: 81,
            rate: 10.0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0) {
            return Err(Error::validation("sweep rate must be positive"));
        }
        if self.v_start != self.v_stop && self.points < 2 {
            return Err(Error::validation("a non-zero sweep needs at least two points"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        if self.v_start == self.v_stop || self.points < 2 {
            return vec![self.v_start];
        }
        let step = (self.v_stop - self.v_start) / (self.points - 1) as f64;
        (0..self.points).map(|k| self.v_start + step * k as f64).collect()
    }

    /// Time spent at each bias step, s.
    pub fn dwell(&self) -> f64 {
        if self.points < 2 {
            return 0.0;
        }
        (self.v_stop - self.v_start).abs() / (self.points - 1) as f64 / self.rate
    }
}

fn measured_current(mic: &Microscope, volts: f64) -> f64 {
    volts / mic.cfg.plant.preamp_gain
}

/// Step the bias through `grid` with the loop open, averaging the second
/// half of each `dwell_samples` block.
fn frozen_sweep(mic: &mut Microscope, grid: &[f64], dwell_samples: usize) -> Result<(Vec<f64>, bool)> {
    let n = dwell_samples.max(1);
    let skip = n / 2;
    let mut out = Vec::with_capacity(grid.len());
    let mut clipped = false;
    for &v in grid {
        mic.set_bias(v);
        let mut sum = 0.0;
        for k in 0..n {
            let s = mic.step(&Excitation::default())?;
            clipped |= s.clipped;
            if k >= skip {
                sum += measured_current(mic, s.v_meas);
            }
        }
        out.push(sum / (n - skip) as f64);
    }
    Ok((out, clipped))
}

/// Saved loop state for a frozen-gap measurement.
struct Frozen {
    feedback: Feedback,
    bias: f64,
    vm: f64,
}

impl Frozen {
    fn freeze(mic: &mut Microscope) -> Self {
        let f = Self {
            feedback: mic.feedback(),
            bias: mic.bias(),
            vm: mic.modulation_amplitude(),
        };
        let u = mic.controller().output();
        mic.hold_output(u);
        mic.set_modulation_amplitude(0.0);
        f
    }

    fn restore(self, mic: &mut Microscope) -> Result<()> {
        mic.set_bias(self.bias);
        mic.set_modulation_amplitude(self.vm);
        mic.set_feedback(self.feedback)
    }
}

/// Single-point I-V with the gap frozen at the current controller output.
/// The modulation is switched off for the sweep; bias, modulation and
/// feedback are restored afterwards.
pub fn single_point_iv(mic: &mut Microscope, cfg: &SweepConfig) -> Result<IVCurve> {
    cfg.validate()?;
    let grid = cfg.grid();
    let dwell = if grid.len() == 1 { 1e-3 } else { cfg.dwell() };
    let n = ((dwell * mic.fs()).round() as usize).max(1);
    let saved = Frozen::freeze(mic);
    let (i, clipped) = frozen_sweep(mic, &grid, n)?;
    saved.restore(mic)?;
    Ok(IVCurve {
        mode: IvMode::Swept,
        pixel: None,
        v: grid,
        i,
        flagged: clipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CitsConfig {
    pub raster: RasterConfig,
    pub v_grid: Vec<f64>,
    /// Closed-loop settle at each pixel, s.
    pub settle_s: f64,
    /// Dwell at each bias point, s.
    pub point_dwell_s: f64,
    /// Imaging bias and current setpoint between sweeps.
    pub bias: f64,
    pub setpoint: f64,
}

impl Default for CitsConfig {
    fn default() -> Self {
        Self {
            raster: RasterConfig::default(),
            v_grid: (0..11).map(|k| -2.0 + 0.4 * k as f64).collect(),
            settle_s: 0.05,
            point_dwell_s: 0.02,
            bias: -2.5,
            setpoint: 0.5e-9,
        }
    }
}

impl CitsConfig {
    fn samples(&self, fs: f64) -> (usize, usize) {
        (
            ((self.settle_s * fs).round() as usize).max(1),
            ((self.point_dwell_s * fs).round() as usize).max(1),
        )
    }

    /// Acquisition time predicted by pixels × (settle + sweep), s.
    pub fn time_model(&self, fs: f64) -> f64 {
        let (settle, dwell) = self.samples(fs);
        let per_pixel = settle + dwell * self.v_grid.len();
        (self.raster.rows * self.raster.cols * per_pixel) as f64 / fs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CitsResult {
    pub curves: Vec<IVCurve>,
    pub topography: Image,
    /// Simulated time spent acquiring, s.
    pub acquisition_time_s: f64,
    pub crash: Option<String>,
}

/// Current-imaging tunneling spectroscopy. At every pixel the loop is
/// closed and settled, then z is frozen for a bias sweep over `v_grid`.
pub fn cits(mic: &mut Microscope, cfg: &CitsConfig) -> Result<CitsResult> {
    cfg.raster.validate()?;
    if cfg.v_grid.is_empty() {
        return Err(Error::validation("CITS needs a bias grid"));
    }
    let r = &cfg.raster;
    let (settle, dwell) = cfg.samples(mic.fs());
    let fb = Feedback::Current { setpoint: cfg.setpoint };
    mic.set_bias(cfg.bias);
    mic.set_feedback(fb)?;
    let t0 = mic.time();
    let mut topo = Image::new(r.rows, r.cols, Channel::Topography);
    let mut curves = Vec::with_capacity(r.rows * r.cols);
    let mut crash = None;
    'grid: for row in 0..r.rows {
        for col in 0..r.cols {
            let (x, y) = r.pixel_position(row, col);
            mic.move_to(x, y)?;
            let res = (|| -> Result<IVCurve> {
                let mut last = mic.settle(settle as f64 / mic.fs())?;
                if settle == 0 {
                    last.topography = mic.topography_of(mic.controller().output());
                }
                topo.forward[row * r.cols + col] = last.topography;
                let saved = Frozen::freeze(mic);
                let (i, clipped) = frozen_sweep(mic, &cfg.v_grid, dwell)?;
                saved.restore(mic)?;
                Ok(IVCurve {
                    mode: IvMode::Swept,
                    pixel: Some((row, col)),
                    v: cfg.v_grid.clone(),
                    i,
                    flagged: clipped,
                })
            })();
            match res {
                Ok(c) => curves.push(c),
                Err(e @ Error::Crash { .. }) => {
                    crash = Some(e.to_string());
                    break 'grid;
                }
                Err(e) => return Err(e),
            }
        }
    }
    if let Some(first) = topo.forward.first().copied().filter(|v| v.is_finite()) {
        topo.offset(first);
    }
    Ok(CitsResult {
        curves,
        topography: topo,
        acquisition_time_s: mic.time() - t0,
        crash,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarmonicScanConfig {
    pub raster: RasterConfig,
    pub bias: f64,
    pub setpoint: f64,
    pub vm: f64,
    pub n_max: usize,
    /// Route the loop's current path through the notch bank.
    pub notch: bool,
    pub settle_s: f64,
}

impl Default for HarmonicScanConfig {
    fn default() -> Self {
        Self {
            raster: RasterConfig::default(),
            bias: -2.5,
            setpoint: 0.5e-9,
            vm: 0.8,
            n_max: 3,
            notch: true,
            settle_s: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonicImageSet {
    pub topography: Image,
    /// `harmonics[n - 1]` holds I_n in amperes.
    pub harmonics: Vec<Image>,
    pub crash: Option<String>,
}

impl HarmonicImageSet {
    pub fn harmonic(&self, n: usize) -> Option<&Image> {
        self.harmonics.get(n.checked_sub(1)?)
    }
}

/// Constant-current scan that records lock-in harmonics 1..=n_max at every
/// pixel. Odd harmonics are read from the sine component and even ones
/// from the cosine component, so a static junction gives signed I_n.
pub fn harmonic_scan(mic: &mut Microscope, cfg: &HarmonicScanConfig) -> Result<HarmonicImageSet> {
    cfg.raster.validate()?;
    if cfg.n_max == 0 {
        return Err(Error::validation("n_max must be at least 1"));
    }
    if !(cfg.vm > 0.0) || mic.cfg.modulation.is_none() {
        return Err(Error::validation("harmonic imaging needs a bias modulation"));
    }
    {
        let li = mic.lockin().ok_or_else(|| Error::validation("no lock-in configured"))?;
        if let Some(n) = (1..=cfg.n_max).find(|n| !li.config().harmonics.contains(n)) {
            return Err(Error::validation(format!("lock-in does not track harmonic {n}")));
        }
    }
    let r = &cfg.raster;
    let (x0, y0) = r.pixel_position(0, 0);
    mic.set_notch_enabled(cfg.notch)?;
    mic.set_modulation_amplitude(cfg.vm);
    mic.set_bias(cfg.bias);
    mic.set_feedback(Feedback::Current { setpoint: cfg.setpoint })?;
    check_line_rate(mic, r)?;
    mic.move_to(x0, y0)?;
    mic.settle(cfg.settle_s)?;

    let len = r.rows * r.cols;
    let nch = cfg.n_max + 1;
    let mut fwd: Vec<Accum> = (0..nch).map(|_| Accum::new(len)).collect();
    let mut rev: Vec<Accum> = (0..nch).map(|_| Accum::new(len)).collect();
    let crash = walk_raster(mic, r, &mut (), |p, s, mic| {
        let acc = if p.forward { &mut fwd } else { &mut rev };
        let i = p.row * r.cols + p.col;
        acc[0].add(i, s.topography);
        let li = mic.lockin().expect("checked above");
        for n in 1..=cfg.n_max {
            let e = li.estimate(n).unwrap_or_default();
            acc[n].add(i, if n % 2 == 1 { e.in_phase } else { e.quadrature });
        }
        Ok(())
    })?;
    let build = |c: usize, ch: Channel| {
        let mut im = Image::new(r.rows, r.cols, ch);
        for i in 0..len {
            im.forward[i] = fwd[c].mean(i);
            im.reverse[i] = rev[c].mean(i);
        }
        im
    };
    let mut topography = build(0, Channel::Topography);
    if let Some(first) = topography.forward.first().copied().filter(|v| v.is_finite()) {
        topography.offset(first);
    }
    Ok(HarmonicImageSet {
        topography,
        harmonics: (1..=cfg.n_max).map(|n| build(n, Channel::Harmonic(n))).collect(),
        crash: crash.map(|e| e.to_string()),
    })
}

/// `|mean(feature) − mean(background)| / std(background)` over the forward
/// buffer, with `mask[i]` marking feature pixels.
pub fn feature_contrast(image: &Image, mask: &[bool]) -> Result<f64> {
    if mask.len() != image.forward.len() {
        return Err(Error::validation("mask and image sizes differ"));
    }
    let pick = |want: bool| -> Vec<f64> {
        image
            .forward
            .iter()
            .zip(mask)
            .filter(|(v, &m)| m == want && v.is_finite())
            .map(|(&v, _)| v)
            .collect()
    };
    let (feat, bg) = (pick(true), pick(false));
    if feat.is_empty() || bg.len() < 2 {
        return Err(Error::validation("need feature pixels and at least two background pixels"));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let mb = mean(&bg);
    let sd = (bg.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / (bg.len() - 1) as f64).sqrt();
    Ok((mean(&feat) - mb).abs() / sd)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UltrafastConfig {
    pub raster: RasterConfig,
    pub vm: f64,
    pub f_mod: f64,
    pub v_dc: f64,
    /// First-harmonic setpoint, A.
    pub setpoint: f64,
    /// Phase bins per modulation cycle.
    pub bins: usize,
    pub settle_s: f64,
}

impl Default for UltrafastConfig {
    fn default() -> Self {
        Self {
            raster: RasterConfig::default(),
            vm: 2.5,
            f_mod: 2000.0,
            v_dc: 0.0,
            setpoint: 1e-9,
            bins: 64,
            settle_s: 0.05,
        }
    }
}

impl UltrafastConfig {
    /// Bias of each point on the fixed V grid: `V_dc + Vm sin(2πj/bins)`
    /// for `j = -bins/4 ..= bins/4`.
    pub fn v_grid(&self) -> Vec<f64> {
        let q = (self.bins / 4) as i64;
        (-q..=q)
            .map(|j| self.v_dc + self.vm * (2.0 * PI * j as f64 / self.bins as f64).sin())
            .collect()
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        self.raster.validate()?;
        if !(self.vm > 0.0) || !(self.f_mod > 0.0) || !(self.setpoint > 0.0) {
            return Err(Error::validation("vm, f_mod and setpoint must be positive"));
        }
        if self.bins < 4 || self.bins % 4 != 0 {
            return Err(Error::validation("bins must be a positive multiple of 4"));
        }
        let per_bin = fs / (self.f_mod * self.bins as f64);
        if per_bin < 1.0 || (per_bin - per_bin.round()).abs() > 1e-9 * per_bin {
            return Err(Error::validation(format!(
                "fs = {fs} Hz must be an integer multiple of bins × f_mod = {} Hz",
                self.f_mod * self.bins as f64
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UltrafastResult {
    /// Forward-pass curves in row-major order.
    pub curves: Vec<IVCurve>,
    pub topography: Image,
    pub i1: Image,
    /// Quadrature at the fundamental before subtraction, A.
    pub quadrature_pre: Image,
    /// Quadrature at the fundamental of the subtracted current, A.
    pub quadrature_post: Image,
    pub flagged: usize,
    pub acquisition_time_s: f64,
    pub crash: Option<String>,
}

impl UltrafastResult {
    pub fn rows(&self) -> usize {
        self.topography.rows
    }

    pub fn cols(&self) -> usize {
        self.topography.cols
    }
}

struct PixelBins {
    sum: Vec<f64>,
    n: Vec<u32>,
}

/// Per-pixel I-V from one large modulation cycle per phase bin. The loop
/// is closed on the in-phase fundamental; the lock-in quadrature is the
/// capacitive amplitude and `Î_cap cos ωt` is subtracted sample by sample
/// before phase binning. The preamp must be flat to Nyquist.
pub fn ultrafast_iv(mic: &mut Microscope, cfg: &UltrafastConfig) -> Result<UltrafastResult> {
    let fs = mic.fs();
    cfg.validate(fs)?;
    let m = mic
        .cfg
        .modulation
        .ok_or_else(|| Error::validation("ultrafast I-V needs a bias modulation"))?;
    if (m.freq_hz - cfg.f_mod).abs() > 1e-9 * cfg.f_mod {
        return Err(Error::validation("f_mod differs from the microscope's modulation frequency"));
    }
    if !mic.plant().g_a.order() == 0 {
        return Err(Error::validation("ultrafast I-V needs a preamp flat to Nyquist"));
    }
    let li_cfg = mic
        .lockin()
        .ok_or_else(|| Error::validation("no lock-in configured"))?
        .config()
        .clone();
    let mut post = LockIn::new(
        LockInConfig {
            harmonics: vec![1],
            ..li_cfg
        },
        fs,
    )?;
    let r = &cfg.raster;
    let (x0, y0) = r.pixel_position(0, 0);
    mic.set_bias(cfg.v_dc);
    mic.set_modulation_amplitude(cfg.vm);
    mic.set_feedback(Feedback::FirstHarmonic { setpoint: cfg.setpoint })?;
    check_line_rate(mic, r)?;
    mic.move_to(x0, y0)?;
    mic.settle(cfg.settle_s)?;

    let len = r.rows * r.cols;
    let bins = cfg.bins;
    let per_bin = (fs / (cfg.f_mod * bins as f64)).round() as u64;
    let omega = 2.0 * PI * cfg.f_mod;
    let mut pix: Vec<PixelBins> = (0..len)
        .map(|_| PixelBins {
            sum: vec![0.0; bins],
            n: vec![0; bins],
        })
        .collect();
    let mut unsettled = vec![false; len];
    let [mut topo, mut i1, mut q_pre, mut q_post] = [(); 4].map(|_| Accum::new(len));
    let t0 = mic.time();
    // `post` sees the subtracted stream; bring it to steady state alongside the loop
    let crash = walk_raster(mic, r, &mut (), |p, s, mic| {
        let li = mic.lockin().expect("checked above");
        let est = li.estimate(1).unwrap_or_default();
        let icap = est.quadrature;
        let i_meas = measured_current(mic, s.v_meas);
        let i_tunn = i_meas - icap * (omega * s.t).cos();
        post.step(s.t, i_tunn);
        if !p.forward {
            return Ok(());
        }
        let i = p.row * r.cols + p.col;
        if !li.is_valid() {
            unsettled[i] = true;
        }
        let k = ((mic.samples_elapsed() - 1) / per_bin) as usize % bins;
        pix[i].sum[k] += i_tunn;
        pix[i].n[k] += 1;
        topo.add(i, s.topography);
        i1.add(i, est.in_phase);
        q_pre.add(i, icap);
        q_post.add(i, post.estimate(1).unwrap_or_default().quadrature);
        Ok(())
    })?;
    let acquisition_time_s = mic.time() - t0;

    let v_grid = cfg.v_grid();
    let q = (bins / 4) as i64;
    let mut flagged = 0;
    let mut curves = Vec::with_capacity(len);
    for (idx, b) in pix.iter().enumerate() {
        let mut i_col = Vec::with_capacity(v_grid.len());
        let mut bad = unsettled[idx];
        for j in -q..=q {
            let ka = j.rem_euclid(bins as i64) as usize;
            let kb = (bins as i64 / 2 - j).rem_euclid(bins as i64) as usize;
            let (mut sum, mut n) = (b.sum[ka], b.n[ka]);
            if kb != ka {
                sum += b.sum[kb];
                n += b.n[kb];
            }
            if n == 0 {
                bad = true;
                i_col.push(f64::NAN);
            } else {
                i_col.push(sum / n as f64);
            }
        }
        flagged += bad as usize;
        curves.push(IVCurve {
            mode: IvMode::Ultrafast,
            pixel: Some((idx / r.cols, idx % r.cols)),
            v: v_grid.clone(),
            i: i_col,
            flagged: bad,
        });
    }
    let image = |a: &Accum, ch: Channel| {
        let mut im = Image::new(r.rows, r.cols, ch);
        for i in 0..len {
            im.forward[i] = a.mean(i);
        }
        im
    };
    let mut topography = image(&topo, Channel::Topography);
    if let Some(first) = topography.forward.first().copied().filter(|v| v.is_finite()) {
        topography.offset(first);
    }
    Ok(UltrafastResult {
        curves,
        topography,
        i1: image(&i1, Channel::Harmonic(1)),
        quadrature_pre: image(&q_pre, Channel::Harmonic(1)),
        quadrature_post: image(&q_post, Channel::Harmonic(1)),
        flagged,
        acquisition_time_s,
        crash: crash.map(|e| e.to_string()),
    })
}

/// Current at `v_sel` for every curve, laid out on a `rows × cols` grid.
pub fn current_slice(curves: &[IVCurve], rows: usize, cols: usize, v_sel: f64) -> Result<Image> {
    let mut im = Image::new(rows, cols, Channel::Current);
    for c in curves {
        let (r, col) = c.pixel.ok_or_else(|| Error::validation("curve has no pixel coordinate"))?;
        if r >= rows || col >= cols {
            return Err(Error::range(format!("pixel ({r}, {col}) is outside {rows}×{cols}")));
        }
        im.forward[r * cols + col] = c.current_at(v_sel)?;
    }
    Ok(im)
}
