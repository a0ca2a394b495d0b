//! Experiment scenarios: a JSON description of surface, instrument,
//! controller and experiment, validated as a whole and run into a directory
//! of artifacts with a checksummed manifest.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::control::PiGains;
use crate::error::{Error, Result};
use crate::io::{image_to_csv, sha256_hex, ArtifactWriter, Manifest};
use crate::junction::{GeneratorSpec, SurfaceModel};
use crate::litho::{
    events_to_jsonl, fe_write, hdl_line, telemetry_to_csv, vmfcl, DesorptionModel, FclWatcher, HdlConfig,
    LithoReport, VmfclConfig,
};
use crate::scan::{approach, scan, scan_with, ApproachConfig, Channel, Image, ScanConfig, ScanMode};
use crate::sim::{Feedback, Microscope, MicroscopeConfig};
use crate::spectroscopy::{
    cits, harmonic_scan, iv_set_to_csv, single_point_iv, ultrafast_iv, CitsConfig, HarmonicScanConfig, SweepConfig,
    UltrafastConfig,
};
use crate::sysid::{fit_rational, measure_closed_loop_frf, FrfOptions};

pub const SCHEMA_VERSION: u32 = 1;

/// Process exit codes of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    Config = 2,
    Crash = 3,
    Internal = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    /// Classification of an error raised while running (not while validating).
    pub fn of_run_error(e: &Error) -> Self {
        match e {
            Error::Crash { .. } | Error::Unstable { .. } | Error::Failed(_) => ExitStatus::Crash,
            Error::Validation(_) | Error::Range(_) | Error::Json(_) => ExitStatus::Config,
            _ => ExitStatus::Internal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SurfaceSource {
    Generate(GeneratorSpec),
    /// Path to a surface JSON, relative to the scenario file.
    File(PathBuf),
    Inline(Box<SurfaceModel>),
}

impl Default for SurfaceSource {
    fn default() -> Self {
        SurfaceSource::Generate(GeneratorSpec {
            rows: 24,
            cols: 24,
            ..Default::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignCriteria {
    /// PI corner frequency, Hz.
    pub fc_hz: f64,
    pub f_min: f64,
    pub limit_db: f64,
}

impl Default for DesignCriteria {
    fn default() -> Self {
        Self {
            fc_hz: 1600.0,
            f_min: 50.0,
            limit_db: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    /// Use `microscope.gains` as given.
    Explicit,
    /// Replace the gains by the designer's recommendation after engaging.
    Design(DesignCriteria),
}

impl Default for ControllerSpec {
    fn default() -> Self {
        ControllerSpec::Explicit
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngageSpec {
    pub x: f64,
    pub y: f64,
    pub feedback: Feedback,
}

impl Default for EngageSpec {
    fn default() -> Self {
        Self {
            x: 1.0,
            y: 1.0,
            feedback: Feedback::Current { setpoint: 0.5e-9 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproachExperiment {
    pub config: ApproachConfig,
    /// Gap at zero fine extension before the approach starts, Å.
    pub start_gap: f64,
}

impl Default for ApproachExperiment {
    fn default() -> Self {
        Self {
            config: ApproachConfig::default(),
            start_gap: 9000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysidExperiment {
    pub f_start: f64,
    pub f_stop: f64,
    pub points: usize,
    pub frf: FrfOptions,
    /// Rational fit order; 0 skips the fit.
    pub fit_order: usize,
}

impl Default for SysidExperiment {
    fn default() -> Self {
        Self {
            f_start: 100.0,
            f_stop: 4500.0,
            points: 24,
            frf: FrfOptions::default(),
            fit_order: 6,
        }
    }
}

impl SysidExperiment {
    pub fn grid(&self) -> Vec<f64> {
        let n = self.points;
        if n == 1 {
            return vec![self.f_start];
        }
        let r = (self.f_stop / self.f_start).ln();
        (0..n)
            .map(|k| self.f_start * (r * k as f64 / (n - 1) as f64).exp())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignExperiment {
    /// Corner frequencies, Hz.
    pub fc_hz: Vec<f64>,
    pub f_min: f64,
    pub limit_db: f64,
}

impl Default for DesignExperiment {
    fn default() -> Self {
        Self {
            fc_hz: vec![400.0, 800.0, 1600.0, 2400.0, 3200.0],
            f_min: 50.0,
            limit_db: 3.0,
        }
    }
}

impl DesignExperiment {
    pub fn omega_c(&self) -> Vec<f64> {
        self.fc_hz.iter().map(|f| 2.0 * PI * f).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdlExperiment {
    pub line: HdlConfig,
    pub model: DesorptionModel,
    /// Field-emission write instead of an atomically precise one.
    pub fe: bool,
}

impl Default for HdlExperiment {
    fn default() -> Self {
        Self {
            line: HdlConfig {
                path: vec![[1.0, 1.0], [3.0, 1.0]],
                bias: 3.5,
                setpoint: 1e-9,
                ..Default::default()
            },
            model: DesorptionModel::default(),
            fe: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FclExperiment {
    pub scan: ScanConfig,
    /// Retraction threshold, Å.
    pub threshold: f64,
}

impl Default for FclExperiment {
    fn default() -> Self {
        Self {
            scan: ScanConfig::default(),
            threshold: 0.3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmfclExperiment {
    pub config: VmfclConfig,
    pub model: DesorptionModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    Approach(ApproachExperiment),
    Scan(ScanConfig),
    Sysid(SysidExperiment),
    Design(DesignExperiment),
    Sts(SweepConfig),
    Cits(CitsConfig),
    Ultrafast(UltrafastConfig),
    HarmonicScan(HarmonicScanConfig),
    Hdl(HdlExperiment),
    Fcl(FclExperiment),
    Vmfcl(VmfclExperiment),
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment::Scan(ScanConfig::default())
    }
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Approach(_) => "approach",
            Experiment::Scan(_) => "scan",
            Experiment::Sysid(_) => "sysid",
            Experiment::Design(_) => "design",
            Experiment::Sts(_) => "sts",
            Experiment::Cits(_) => "cits",
            Experiment::Ultrafast(_) => "ultrafast",
            Experiment::HarmonicScan(_) => "harmonic_scan",
            Experiment::Hdl(_) => "hdl",
            Experiment::Fcl(_) => "fcl",
            Experiment::Vmfcl(_) => "vmfcl",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    /// Prefix of every artifact file.
    pub name: String,
    /// Master seed for the surface generator and the instrument noise.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub surface: SurfaceSource,
    pub microscope: MicroscopeConfig,
    pub controller: ControllerSpec,
    pub engage: EngageSpec,
    pub experiment: Experiment,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "run".into(),
            seed: None,
            out_dir: None,
            surface: SurfaceSource::default(),
            microscope: MicroscopeConfig::default(),
            controller: ControllerSpec::default(),
            engage: EngageSpec::default(),
            experiment: Experiment::default(),
        }
    }
}

/// Parse `key=value` into a dotted path and a JSON value. Values that are
/// not valid JSON are taken as strings.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::validation(format!("override '{s}' is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::validation(format!("override '{s}' has an empty key")));
    }
    let v = serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.trim().to_string()));
    Ok((k.to_string(), v))
}

/// Set `path` (dot separated; numeric parts index arrays) in `doc`,
/// creating objects along the way.
pub fn apply_override(doc: &mut Value, path: &str, v: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = doc;
    for (i, p) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(p.to_string(), v);
                    return Ok(());
                }
                map.entry(p.to_string()).or_insert(Value::Null)
            }
            Value::Array(arr) => {
                let k: usize = p
                    .parse()
                    .map_err(|_| Error::validation(format!("'{p}' in '{path}' must index an array")))?;
                let n = arr.len();
                let slot = arr
                    .get_mut(k)
                    .ok_or_else(|| Error::validation(format!("index {k} out of range ({n}) in '{path}'")))?;
                if last {
                    *slot = v;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::validation(format!("'{path}' descends into a scalar"))),
        };
    }
    Ok(())
}

impl Scenario {
    /// Parse a scenario. Unknown fields and type errors are reported with
    /// their line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value_text(text, &[])
    }

    /// Parse with `overrides` applied on top of the file contents.
    pub fn from_value_text(text: &str, overrides: &[(String, Value)]) -> Result<Self> {
        let s: Scenario = if overrides.is_empty() {
            serde_json::from_str(text).map_err(|e| Error::validation(format!("scenario: {e}")))?
        } else {
            let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::validation(format!("scenario: {e}")))?;
            for (k, v) in overrides {
                apply_override(&mut doc, k, v.clone())?;
            }
            serde_json::from_value(doc).map_err(|e| Error::validation(format!("scenario override: {e}")))?
        };
        if s.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                s.schema_version
            )));
        }
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        Self::from_value_text(&self.to_json()?, overrides)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn surface(&self, base: &Path) -> Result<SurfaceModel> {
        match &self.surface {
            SurfaceSource::Generate(g) => GeneratorSpec { seed: self.seed(), ..g.clone() }.generate(),
            SurfaceSource::File(p) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::validation(format!("surface file {}: {e}", path.display())))?;
                SurfaceModel::from_json(&text)
            }
            SurfaceSource::Inline(s) => {
                s.validate()?;
                Ok((**s).clone())
            }
        }
    }

    /// Build and check everything a run needs without advancing the
    /// simulation. `base` resolves relative surface paths.
    pub fn prepare(&self, base: &Path) -> Result<Microscope> {
        let surface = self.surface(base)?;
        let cfg = MicroscopeConfig {
            seed: self.seed(),
            ..self.microscope.clone()
        };
        let fs = cfg.fs;
        let mut mic = Microscope::new(cfg, surface)?;
        if let Experiment::Approach(a) = &self.experiment {
            let lim = mic.controller().limit();
            a.config.validate(2.0 * lim * mic.compliance())?;
            if !(a.start_gap > 0.0) {
                return Err(Error::validation("start_gap must be positive"));
            }
            mic.move_to(self.engage.x, self.engage.y)?;
            return Ok(mic);
        }
        mic.engage_at(self.engage.x, self.engage.y, self.engage.feedback)?;
        if let ControllerSpec::Design(d) = &self.controller {
            let p = mic.design_point(2.0 * PI * d.fc_hz, d.f_min, d.limit_db)?;
            if !p.nonempty {
                return Err(Error::validation(format!(
                    "no gain meets f_min = {} Hz and {} dB at fc = {} Hz",
                    d.f_min, d.limit_db, d.fc_hz
                )));
            }
            mic.set_gains(PiGains::new(p.ki_recommended, 2.0 * PI * d.fc_hz)?)?;
        }
        match &self.experiment {
            Experiment::Approach(_) => unreachable!(),
            Experiment::Scan(c) => {
                c.raster.validate()?;
                if c.enforce_bandwidth && c.mode != ScanMode::ConstantHeight {
                    crate::scan::check_line_rate(&mic, &c.raster)?;
                }
            }
            Experiment::Fcl(f) => {
                f.scan.raster.validate()?;
                if !(f.threshold > 0.0) {
                    return Err(Error::validation("FCL threshold must be positive"));
                }
            }
            Experiment::Sysid(s) => {
                if s.points == 0 || !(s.f_start > 0.0 && s.f_stop >= s.f_start && s.f_stop < fs / 2.0) {
                    return Err(Error::validation("sysid grid must satisfy 0 < f_start <= f_stop < fs/2"));
                }
            }
            Experiment::Design(d) => {
                if d.fc_hz.is_empty() || d.fc_hz.iter().any(|f| !(*f > 0.0 && *f < fs / 2.0)) {
                    return Err(Error::validation("design corners must lie in (0, fs/2)"));
                }
            }
            Experiment::Sts(s) => s.validate()?,
            Experiment::Cits(c) => {
                c.raster.validate()?;
                if c.v_grid.is_empty() {
                    return Err(Error::validation("CITS needs at least one bias point"));
                }
            }
            Experiment::Ultrafast(u) => u.validate(fs)?,
            Experiment::HarmonicScan(h) => h.raster.validate()?,
            Experiment::Hdl(h) => {
                h.model.validate(&mic.surface)?;
                if h.fe && h.line.bias.abs() < h.model.v_fe {
                    return Err(Error::validation("FE write bias is below v_fe"));
                }
            }
            Experiment::Vmfcl(v) => {
                v.model.validate(&mic.surface)?;
                v.config.validate(&mic)?;
            }
        }
        Ok(mic)
    }

    /// Validate, run, and write artifacts plus `manifest.json` to `out`.
    /// Configuration problems are reported before any file is written.
    pub fn run(&self, base: &Path, out: &Path) -> std::result::Result<RunOutcome, (ExitStatus, Error)> {
        let mut mic = self.prepare(base).map_err(|e| (ExitStatus::Config, e))?;
        let resolved = self.to_json().map_err(|e| (ExitStatus::Internal, e))?;
        let mut w = ArtifactWriter::new(out, &self.name).map_err(|e| (ExitStatus::Internal, e))?;
        let failure = match self.execute(&mut mic, &mut w) {
            Ok(f) => f,
            Err(e) => {
                let status = ExitStatus::of_run_error(&e);
                let msg = e.to_string();
                let m = w.finish(self.experiment.kind(), self.seed(), sha256_hex(resolved.as_bytes()), Some(msg));
                return match m {
                    Ok(_) => Err((status, e)),
                    Err(e2) => Err((ExitStatus::Internal, e2)),
                };
            }
        };
        let status = if failure.is_some() { ExitStatus::Crash } else { ExitStatus::Ok };
        let manifest = w
            .finish(self.experiment.kind(), self.seed(), sha256_hex(resolved.as_bytes()), failure)
            .map_err(|e| (ExitStatus::Internal, e))?;
        Ok(RunOutcome { manifest, status })
    }

    /// Runs the experiment and writes its artifacts. Returns the reason the
    /// run stopped early, if it did.
    fn execute(&self, mic: &mut Microscope, w: &mut ArtifactWriter) -> Result<Option<String>> {
        w.text("scenario.json", &self.to_json()?)?;
        match &self.experiment {
            Experiment::Approach(a) => {
                mic.set_z_coarse(a.start_gap);
                let rep = approach(mic, &a.config)?;
                w.json("approach.json", &rep)?;
                Ok(None)
            }
            Experiment::Scan(c) => {
                let res = scan(mic, c)?;
                write_images(w, &res.images, c.mode)?;
                if let Some(e) = res.image(Channel::Error) {
                    w.text("err.csv", &image_to_csv(e))?;
                }
                Ok(res.unfinished())
            }
            Experiment::Fcl(f) => {
                let mut watcher = FclWatcher::new(f.threshold, mic.fs());
                let res = scan_with(mic, &f.scan, &mut watcher)?;
                write_images(w, &res.images, f.scan.mode)?;
                w.text("events.jsonl", &events_to_jsonl(&watcher.events)?)?;
                Ok(res.unfinished())
            }
            Experiment::Sysid(s) => {
                let frf = measure_closed_loop_frf(mic, &s.grid(), &s.frf)?;
                w.text("frf.csv", &frf.to_csv())?;
                if s.fit_order > 0 {
                    let fit = fit_rational(&frf, s.fit_order, None)?;
                    w.json("fit.json", &fit.report())?;
                }
                Ok(None)
            }
            Experiment::Design(d) => {
                let region = mic.design_region(&d.omega_c(), d.f_min, d.limit_db)?;
                w.text("region.csv", &region.to_csv())?;
                w.json("design.json", &region)?;
                Ok(None)
            }
            Experiment::Sts(s) => {
                let curve = single_point_iv(mic, s)?;
                w.text("iv.csv", &iv_set_to_csv(std::slice::from_ref(&curve)))?;
                Ok(None)
            }
            Experiment::Cits(c) => {
                let res = cits(mic, c)?;
                w.text("iv.csv", &iv_set_to_csv(&res.curves))?;
                w.image(&res.topography, "angstrom")?;
                w.json(
                    "cits.json",
                    &serde_json::json!({
                        "acquisition_time_s": res.acquisition_time_s,
                        "time_model_s": c.time_model(mic.fs()),
                        "pixels": res.curves.len(),
                    }),
                )?;
                Ok(res.crash)
            }
            Experiment::Ultrafast(u) => {
                let res = ultrafast_iv(mic, u)?;
                w.text("iv.csv", &iv_set_to_csv(&res.curves))?;
                w.image(&res.topography, "angstrom")?;
                w.image(&res.i1, "A")?;
                let rms = |img: &Image| crate::scan::rms(&img.forward);
                w.json(
                    "ultrafast.json",
                    &serde_json::json!({
                        "acquisition_time_s": res.acquisition_time_s,
                        "quadrature_pre_rms_A": rms(&res.quadrature_pre),
                        "quadrature_post_rms_A": rms(&res.quadrature_post),
                        "flagged": res.flagged,
                        "pixels": res.curves.len(),
                    }),
                )?;
                Ok(res.crash)
            }
            Experiment::HarmonicScan(h) => {
                let res = harmonic_scan(mic, h)?;
                w.image(&res.topography, "angstrom")?;
                for img in &res.harmonics {
                    w.image(img, "A")?;
                }
                Ok(res.crash)
            }
            Experiment::Hdl(h) => {
                let rep = if h.fe {
                    fe_write(mic, &h.model, &h.line, &mut ())?
                } else {
                    hdl_line(mic, &h.model, &h.line, &mut ())?
                };
                write_litho(w, mic, &rep)?;
                Ok(rep.failure)
            }
            Experiment::Vmfcl(v) => {
                let rep = vmfcl(mic, &v.model, &v.config, &mut ())?;
                write_litho(w, mic, &rep)?;
                let mut csv = Vec::new();
                telemetry_to_csv(&rep.telemetry, &mut csv)?;
                w.bytes("telemetry.csv", &csv)?;
                Ok(rep.failure)
            }
        }
    }
}

fn write_images(w: &mut ArtifactWriter, images: &[Image], mode: ScanMode) -> Result<()> {
    for img in images {
        let units = match img.channel {
            Channel::Topography => "angstrom",
            Channel::Feedback if mode == ScanMode::ConstantDidv => "A/V",
            Channel::Feedback => "ln_A",
            Channel::Error => "ln",
            Channel::Current | Channel::Harmonic(_) => "A",
        };
        w.image(img, units)?;
    }
    Ok(())
}

fn write_litho(w: &mut ArtifactWriter, mic: &Microscope, rep: &LithoReport) -> Result<()> {
    w.text("events.jsonl", &events_to_jsonl(&rep.events)?)?;
    w.text("surface.json", &mic.surface.to_json()?)?;
    let mut s = String::new();
    let _ = writeln!(s, "site");
    for i in rep.desorbed_sites() {
        let _ = writeln!(s, "{i}");
    }
    w.text("desorbed.csv", &s)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub status: ExitStatus,
}

/// Ready-to-run scenario for each experiment kind; the CLI subcommands
/// start from these.
pub fn preset(kind: &str) -> Result<Scenario> {
    let small_raster = crate::scan::RasterConfig {
        x0: 1.0,
        y0: 1.0,
        width: 6.0,
        height: 6.0,
        rows: 16,
        cols: 16,
        speed: 30.0,
        ..Default::default()
    };
    let dimers = SurfaceSource::Generate(GeneratorSpec {
        rows: 24,
        cols: 24,
        dimers: true,
        dimer_corrugation: 0.2,
        steps: vec![crate::junction::StepSpec { col: 12, height: 1.36 }],
        defect_density: 0.01,
        ..Default::default()
    });
    let flat = |rows: usize, cols: usize| {
        SurfaceSource::Generate(GeneratorSpec {
            rows,
            cols,
            ..Default::default()
        })
    };
    let base = Scenario {
        name: kind.replace('-', "_"),
        ..Default::default()
    };
    let modulated = |vm: f64, f: f64| MicroscopeConfig {
        modulation: Some(crate::sim::Modulation { vm, freq_hz: f }),
        notch: Some(crate::sim::NotchConfig::default()),
        ..Default::default()
    };
    let s = match kind {
        "approach" => Scenario {
            surface: flat(8, 8),
            experiment: Experiment::Approach(ApproachExperiment::default()),
            ..base
        },
        "constant_current" | "scan" => Scenario {
            name: "constant_current".into(),
            surface: dimers,
            experiment: Experiment::Scan(ScanConfig {
                raster: small_raster.clone(),
                enforce_bandwidth: false,
                ..Default::default()
            }),
            ..base
        },
        "constant_didv" => Scenario {
            surface: SurfaceSource::Generate(GeneratorSpec {
                rows: 24,
                cols: 24,
                dimers: true,
                dimer_corrugation: 0.2,
                steps: vec![crate::junction::StepSpec { col: 12, height: 1.36 }],
                capacitance: 0.0,
                ..Default::default()
            }),
            microscope: modulated(0.8, 2000.0),
            controller: ControllerSpec::Design(DesignCriteria {
                fc_hz: 1000.0,
                f_min: 20.0,
                limit_db: 3.0,
            }),
            engage: EngageSpec {
                x: 1.0,
                y: 1.0,
                feedback: Feedback::FirstHarmonic { setpoint: 0.2e-9 * 0.8 },
            },
            experiment: Experiment::Scan(ScanConfig {
                mode: ScanMode::ConstantDidv,
                raster: small_raster.clone(),
                setpoint: 0.5e-9 / 2.5,
                enforce_bandwidth: false,
                ..Default::default()
            }),
            ..base
        },
        "sysid" => Scenario {
            surface: flat(8, 8),
            experiment: Experiment::Sysid(SysidExperiment::default()),
            ..base
        },
        "design_pi" | "design-pi" | "design" => Scenario {
            name: "design_pi".into(),
            surface: SurfaceSource::Generate(GeneratorSpec {
                rows: 8,
                cols: 8,
                base: crate::junction::Site {
                    phi: 4.0,
                    conduct: crate::junction::Conductance::new(&[0.0, 1e-4])?,
                    ..crate::junction::Site::h_si()
                },
                ..Default::default()
            }),
            experiment: Experiment::Design(DesignExperiment::default()),
            ..base
        },
        "sts" => Scenario {
            surface: flat(8, 8),
            experiment: Experiment::Sts(SweepConfig::default()),
            ..base
        },
        "cits" => Scenario {
            surface: flat(24, 24),
            experiment: Experiment::Cits(CitsConfig {
                raster: crate::scan::RasterConfig {
                    rows: 6,
                    cols: 6,
                    ..small_raster.clone()
                },
                ..Default::default()
            }),
            ..base
        },
        "ultrafast" => {
            let mut m = modulated(2.5, 2000.0);
            m.fs = 128e3;
            m.notch = None;
            m.plant.preamp_gain = 1e7;
            Scenario {
                surface: SurfaceSource::Generate(GeneratorSpec {
                    rows: 16,
                    cols: 16,
                    capacitance: 0.5e-12,
                    ..Default::default()
                }),
                microscope: m,
                controller: ControllerSpec::Design(DesignCriteria {
                    fc_hz: 1000.0,
                    f_min: 20.0,
                    limit_db: 3.0,
                }),
                engage: EngageSpec {
                    x: 1.0,
                    y: 1.0,
                    feedback: Feedback::FirstHarmonic { setpoint: 1e-9 },
                },
                experiment: Experiment::Ultrafast(UltrafastConfig {
                    raster: crate::scan::RasterConfig {
                        width: 2.0,
                        height: 2.0,
                        rows: 8,
                        cols: 8,
                        speed: 10.0,
                        ..small_raster.clone()
                    },
                    ..Default::default()
                }),
                ..base
            }
        }
        "harmonic_scan" => Scenario {
            surface: dimers,
            microscope: MicroscopeConfig {
                demod: crate::sim::DemodConfig {
                    harmonics: vec![1, 2, 3],
                    ..Default::default()
                },
                ..modulated(0.8, 2000.0)
            },
            experiment: Experiment::HarmonicScan(HarmonicScanConfig {
                raster: crate::scan::RasterConfig {
                    rows: 8,
                    cols: 8,
                    ..small_raster.clone()
                },
                ..Default::default()
            }),
            ..base
        },
        "hdl" => Scenario {
            surface: flat(12, 12),
            engage: EngageSpec {
                x: 1.152,
                y: 2.304,
                feedback: Feedback::Current { setpoint: 1e-9 },
            },
            experiment: Experiment::Hdl(HdlExperiment {
                line: HdlConfig {
                    path: vec![[1.152, 2.304], [2.688, 2.304]],
                    bias: 3.5,
                    setpoint: 1e-9,
                    ..Default::default()
                },
                ..Default::default()
            }),
            ..base
        },
        "fe_write" => Scenario {
            surface: flat(24, 24),
            engage: EngageSpec {
                x: 3.0,
                y: 4.4,
                feedback: Feedback::Current { setpoint: 1e-9 },
            },
            experiment: Experiment::Hdl(HdlExperiment {
                line: HdlConfig {
                    path: vec![[3.0, 4.4], [6.0, 4.4]],
                    bias: 7.5,
                    setpoint: 1e-9,
                    ..Default::default()
                },
                fe: true,
                ..Default::default()
            }),
            ..base
        },
        "fcl" => Scenario {
            surface: dimers,
            experiment: Experiment::Fcl(FclExperiment {
                scan: ScanConfig {
                    raster: small_raster.clone(),
                    enforce_bandwidth: false,
                    ..Default::default()
                },
                threshold: 0.3,
            }),
            ..base
        },
        "vmfcl" => {
            let a = 0.384;
            let targets = [3usize, 6, 9]
                .iter()
                .flat_map(|&r| [3usize, 6, 9].map(move |c| crate::litho::Target::Site { site: r * 13 + c }))
                .collect();
            Scenario {
                surface: SurfaceSource::Generate(GeneratorSpec {
                    rows: 13,
                    cols: 13,
                    ..Default::default()
                }),
                microscope: modulated(0.0, 1000.0),
                engage: EngageSpec {
                    x: 3.0 * a,
                    y: 3.0 * a,
                    feedback: Feedback::Current { setpoint: 1e-9 },
                },
                experiment: Experiment::Vmfcl(VmfclExperiment {
                    config: VmfclConfig {
                        targets,
                        telemetry_every: 100,
                        ..Default::default()
                    },
                    ..Default::default()
                }),
                ..base
            }
        }
        other => return Err(Error::validation(format!("no preset named '{other}'"))),
    };
    Ok(s)
}

/// Every preset name, in the order the scenario directory lists them.
pub const PRESETS: &[&str] = &[
    "approach",
    "constant_current",
    "constant_didv",
    "sysid",
    "design_pi",
    "sts",
    "cits",
    "ultrafast",
    "harmonic_scan",
    "hdl",
    "fe_write",
    "fcl",
    "vmfcl",
];
