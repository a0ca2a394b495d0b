use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;
use stmlab::io::{sha256_hex, ArtifactWriter};
use stmlab::junction::{GeneratorSpec, StepSpec};
use stmlab::scan::{Channel, Image};
use stmlab::scenario::{parse_override, preset, ExitStatus, Scenario};

#[derive(Parser, Debug)]
#[command(name = "stmlab", version, about = "STM z-axis feedback loop simulator")]
struct Cli {
    /// Master seed; overrides the scenario file and STMLAB_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Loop sample rate, Hz.
    #[arg(long, global = true)]
    fs: Option<f64>,
    /// Override any scenario field: dotted.path=value (JSON or bare string).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run a scenario file.
    Run { file: PathBuf },
    /// Image a surface.
    Scan(ScanArgs),
    /// Closed-loop frequency response and rational fit.
    Sysid(SysidArgs),
    /// PI stability region and recommended gains.
    DesignPi(DesignArgs),
    /// Tunneling spectroscopy: single sweep, CITS or ultrafast I-V.
    Sts(StsArgs),
    /// Hydrogen depassivation lithography line write.
    Hdl(HdlArgs),
    /// Generate a synthetic surface.
    SurfaceGen(SurfaceArgs),
}

#[derive(Args, Debug)]
struct Base {
    /// Start from this scenario instead of the built-in preset.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScanModeArg {
    Current,
    Didv,
    Height,
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[command(flatten)]
    base: Base,
    #[arg(long, value_enum)]
    mode: Option<ScanModeArg>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// nm
    #[arg(long)]
    width: Option<f64>,
    /// nm
    #[arg(long)]
    height: Option<f64>,
    /// nm/s
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    bias: Option<f64>,
    #[arg(long)]
    setpoint: Option<f64>,
}

#[derive(Args, Debug)]
struct SysidArgs {
    #[command(flatten)]
    base: Base,
    /// U1, U2, D1 or D2.
    #[arg(long)]
    injection: Option<String>,
    #[arg(long)]
    fstart: Option<f64>,
    #[arg(long)]
    fstop: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
}

#[derive(Args, Debug)]
struct DesignArgs {
    #[command(flatten)]
    base: Base,
    /// Minimum imaging bandwidth, Hz.
    #[arg(long, default_value_t = 50.0)]
    fmin: f64,
    /// Imaging peak limit, dB.
    #[arg(long, default_value_t = 3.0)]
    hinf: f64,
    /// Corner frequencies, Hz.
    #[arg(long, value_delimiter = ',')]
    fc: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StsMode {
    Swept,
    Cits,
    Ultrafast,
}

#[derive(Args, Debug)]
struct StsArgs {
    #[command(flatten)]
    base: Base,
    #[arg(long, value_enum, default_value = "swept")]
    mode: StsMode,
    /// Modulation amplitude for ultrafast I-V, V.
    #[arg(long)]
    vm: Option<f64>,
    /// Modulation frequency for ultrafast I-V, Hz.
    #[arg(long)]
    fmod: Option<f64>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
}

#[derive(Args, Debug)]
struct HdlArgs {
    #[command(flatten)]
    base: Base,
    #[arg(long, allow_hyphen_values = true)]
    bias: Option<f64>,
    #[arg(long)]
    setpoint: Option<f64>,
    /// nm/s
    #[arg(long)]
    speed: Option<f64>,
    /// Polyline "x0,y0;x1,y1;..." in nm.
    #[arg(long, allow_hyphen_values = true)]
    path: Option<String>,
    /// Field-emission write.
    #[arg(long)]
    fe: bool,
}

#[derive(Args, Debug)]
struct SurfaceArgs {
    #[arg(long, default_value_t = 40)]
    rows: usize,
    #[arg(long, default_value_t = 40)]
    cols: usize,
    /// Lattice spacing, nm.
    #[arg(long, default_value_t = 0.384)]
    lattice: f64,
    #[arg(long)]
    dimers: bool,
    /// Dangling-bond fraction.
    #[arg(long, default_value_t = 0.0)]
    defects: f64,
    /// Vacancy fraction.
    #[arg(long, default_value_t = 0.0)]
    vacancies: f64,
    /// Atomic step "COL:HEIGHT_A"; repeatable.
    #[arg(long = "step")]
    steps: Vec<String>,
    /// Junction current noise, A.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value = "surface")]
    name: String,
}

fn env_seed() -> Result<Option<u64>, String> {
    match std::env::var("STMLAB_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("STMLAB_SEED='{v}' is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

fn fail(status: ExitStatus, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("stmlab: {msg}");
    ExitCode::from(status.code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err((status, msg)) => fail(status, msg),
    }
}

type Failure = (ExitStatus, String);

fn config_err(e: impl std::fmt::Display) -> Failure {
    (ExitStatus::Config, e.to_string())
}

fn dispatch(cli: Cli) -> Result<ExitCode, Failure> {
    let mut overrides: Vec<(String, Value)> = Vec::new();
    let (text, base_dir) = match &cli.cmd {
        Cmd::SurfaceGen(a) => return surface_gen(&cli, a),
        Cmd::Run { file } => (read(file)?, parent(file)),
        Cmd::Scan(a) => {
            let kind = match a.mode {
                Some(ScanModeArg::Didv) => "constant_didv",
                _ => "constant_current",
            };
            let (t, d) = start(&a.base, kind)?;
            if let Some(m) = a.mode {
                let m = match m {
                    ScanModeArg::Current => "constant_current",
                    ScanModeArg::Didv => "constant_didv",
                    ScanModeArg::Height => "constant_height",
                };
                overrides.push(("experiment.scan.mode".into(), m.into()));
            }
            let p = "experiment.scan";
            push(&mut overrides, &format!("{p}.raster.rows"), a.rows);
            push(&mut overrides, &format!("{p}.raster.cols"), a.cols);
            push(&mut overrides, &format!("{p}.raster.width"), a.width);
            push(&mut overrides, &format!("{p}.raster.height"), a.height);
            push(&mut overrides, &format!("{p}.raster.speed"), a.speed);
            push(&mut overrides, &format!("{p}.bias"), a.bias);
            push(&mut overrides, &format!("{p}.setpoint"), a.setpoint);
            (t, d)
        }
        Cmd::Sysid(a) => {
            let (t, d) = start(&a.base, "sysid")?;
            let p = "experiment.sysid";
            push(&mut overrides, &format!("{p}.frf.injection"), a.injection.clone());
            push(&mut overrides, &format!("{p}.f_start"), a.fstart);
            push(&mut overrides, &format!("{p}.f_stop"), a.fstop);
            push(&mut overrides, &format!("{p}.points"), a.points);
            push(&mut overrides, &format!("{p}.fit_order"), a.order);
            (t, d)
        }
        Cmd::DesignPi(a) => {
            let (t, d) = start(&a.base, "design_pi")?;
            let p = "experiment.design";
            push(&mut overrides, &format!("{p}.f_min"), Some(a.fmin));
            push(&mut overrides, &format!("{p}.limit_db"), Some(a.hinf));
            push(&mut overrides, &format!("{p}.fc_hz"), a.fc.clone());
            (t, d)
        }
        Cmd::Sts(a) => {
            let (kind, key) = match a.mode {
                StsMode::Swept => ("sts", "sts"),
                StsMode::Cits => ("cits", "cits"),
                StsMode::Ultrafast => ("ultrafast", "ultrafast"),
            };
            let (t, d) = start(&a.base, kind)?;
            let p = format!("experiment.{key}");
            if matches!(a.mode, StsMode::Ultrafast) {
                push(&mut overrides, &format!("{p}.vm"), a.vm);
                push(&mut overrides, &format!("{p}.f_mod"), a.fmod);
                push(&mut overrides, "microscope.modulation.vm", a.vm);
                push(&mut overrides, "microscope.modulation.freq_hz", a.fmod);
            } else if a.vm.is_some() || a.fmod.is_some() {
                return Err(config_err("--vm and --fmod apply to --mode ultrafast"));
            }
            if !matches!(a.mode, StsMode::Swept) {
                push(&mut overrides, &format!("{p}.raster.rows"), a.rows);
                push(&mut overrides, &format!("{p}.raster.cols"), a.cols);
            }
            (t, d)
        }
        Cmd::Hdl(a) => {
            let (t, d) = start(&a.base, if a.fe { "fe_write" } else { "hdl" })?;
            let p = "experiment.hdl";
            push(&mut overrides, &format!("{p}.line.bias"), a.bias);
            push(&mut overrides, &format!("{p}.line.setpoint"), a.setpoint);
            push(&mut overrides, &format!("{p}.line.speed"), a.speed);
            if let Some(path) = &a.path {
                push(&mut overrides, &format!("{p}.line.path"), Some(parse_path(path)?));
            }
            if a.fe {
                overrides.push((format!("{p}.fe"), Value::Bool(true)));
            }
            (t, d)
        }
    };
    if let Some(fs) = cli.fs {
        overrides.push(("microscope.fs".into(), fs.into()));
    }
    for s in &cli.set {
        overrides.push(parse_override(s).map_err(config_err)?);
    }
    let mut scenario = Scenario::from_value_text(&text, &overrides).map_err(config_err)?;
    scenario.seed = match (cli.seed, scenario.seed) {
        (Some(s), _) => Some(s),
        (None, Some(s)) => Some(s),
        (None, None) => env_seed().map_err(config_err)?,
    };
    let out = cli
        .out
        .clone()
        .or_else(|| scenario.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&scenario.name));
    match scenario.run(&base_dir, &out) {
        Ok(o) => {
            println!(
                "{}: {} ({} files) -> {}",
                o.manifest.name,
                o.manifest.status,
                o.manifest.outputs.len(),
                out.join("manifest.json").display()
            );
            if let Some(m) = &o.manifest.message {
                eprintln!("stmlab: run stopped early: {m}");
            }
            Ok(ExitCode::from(o.status.code() as u8))
        }
        Err((status, e)) => Err((status, e.to_string())),
    }
}

fn push<T: serde::Serialize>(o: &mut Vec<(String, Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        o.push((key.to_string(), serde_json::to_value(v).expect("flag values serialize")));
    }
}

fn read(file: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(file).map_err(|e| config_err(format!("{}: {e}", file.display())))
}

fn parent(file: &Path) -> PathBuf {
    file.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn start(base: &Base, kind: &str) -> Result<(String, PathBuf), Failure> {
    match &base.scenario {
        Some(f) => Ok((read(f)?, parent(f))),
        None => {
            let s = preset(kind).map_err(config_err)?;
            Ok((s.to_json().map_err(config_err)?, PathBuf::from(".")))
        }
    }
}

fn parse_path(s: &str) -> Result<Vec<[f64; 2]>, Failure> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let xy: Vec<f64> = p
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| config_err(format!("bad path point '{p}'")))?;
            match xy[..] {
                [x, y] => Ok([x, y]),
                _ => Err(config_err(format!("path point '{p}' needs x,y"))),
            }
        })
        .collect()
}

fn surface_gen(cli: &Cli, a: &SurfaceArgs) -> Result<ExitCode, Failure> {
    if !cli.set.is_empty() || cli.fs.is_some() {
        return Err(config_err("surface-gen takes no --set or --fs"));
    }
    let steps = a
        .steps
        .iter()
        .map(|s| {
            let (c, h) = s.split_once(':').ok_or_else(|| config_err(format!("step '{s}' is not COL:HEIGHT")))?;
            Ok(StepSpec {
                col: c.trim().parse().map_err(|_| config_err(format!("bad step column '{c}'")))?,
                height: h.trim().parse().map_err(|_| config_err(format!("bad step height '{h}'")))?,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let seed = match cli.seed {
        Some(s) => s,
        None => env_seed().map_err(config_err)?.unwrap_or(0),
    };
    let spec = GeneratorSpec {
        rows: a.rows,
        cols: a.cols,
        lattice_nm: a.lattice,
        steps,
        dimers: a.dimers,
        defect_density: a.defects,
        vacancy_density: a.vacancies,
        current_noise: a.noise,
        seed,
        ..Default::default()
    };
    let surface = spec.generate().map_err(config_err)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out").join(&a.name));
    let internal = |e: stmlab::Error| (ExitStatus::Internal, e.to_string());
    let mut w = ArtifactWriter::new(&out, &a.name).map_err(internal)?;
    let json = surface.to_json().map_err(internal)?;
    w.text("surface.json", &json).map_err(internal)?;
    let mut img = Image::new(surface.rows, surface.cols, Channel::Topography);
    img.forward = surface.sites.iter().map(|s| s.height).collect();
    w.image(&img, "angstrom").map_err(internal)?;
    let spec_json = serde_json::to_string(&spec).map_err(|e| (ExitStatus::Internal, e.to_string()))?;
    let m = w
        .finish("surface_gen", seed, sha256_hex(spec_json.as_bytes()), None)
        .map_err(internal)?;
    println!("{}: ok ({} files) -> {}", m.name, m.outputs.len(), out.join("manifest.json").display());
    Ok(ExitCode::SUCCESS)
}
