use std::path::{Path, PathBuf};
use std::process::Command;

use stmlab::io::Manifest;
use stmlab::scenario::{preset, Scenario, PRESETS};

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stmlab"));
    c.env_remove("STMLAB_SEED");
    c
}

/// With STMLAB_BLESS=1 the shipped scenario files are rewritten from the presets.
#[test]
fn shipped_scenarios_match_presets() {
    let bless = std::env::var("STMLAB_BLESS").is_ok_and(|v| v == "1");
    for k in PRESETS {
        let path = scenario_dir().join(format!("{k}.json"));
        let want = preset(k).unwrap();
        if bless {
            std::fs::write(&path, want.to_json().unwrap()).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(Scenario::from_json(&text).unwrap(), want, "{k}");
    }
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().unwrap();
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(0), "{args:?}: {err}");
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn manifest(dir: &Path) -> Manifest {
    Manifest::from_json(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn output_names(m: &Manifest) -> Vec<&str> {
    m.outputs.iter().map(|e| e.path.as_str()).collect()
}

#[test]
fn every_shipped_scenario_runs_and_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    for k in PRESETS {
        let dir = tmp.path().join(k);
        let file = scenario_dir().join(format!("{k}.json"));
        run_ok(&["--out", dir.to_str().unwrap(), "run", file.to_str().unwrap()]);
        let m = manifest(&dir);
        assert_eq!(m.status, "ok", "{k}");
        assert!(!m.outputs.is_empty());
        m.verify(&dir).unwrap();
    }
}

#[test]
fn constant_current_writes_images_and_error_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("cc");
    let file = scenario_dir().join("constant_current.json");
    run_ok(&["--seed", "5", "--out", dir.to_str().unwrap(), "run", file.to_str().unwrap()]);
    let m = manifest(&dir);
    let names = output_names(&m);
    for want in ["constant_current_topo.pgm", "constant_current_topo.json", "constant_current_fb.pgm", "constant_current_err.csv"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    assert_eq!(m.seed, 5);
    let pgm = std::fs::read(dir.join("constant_current_topo.pgm")).unwrap();
    let (rows, cols, _) = stmlab::io::decode_pgm16(&pgm).unwrap();
    assert_eq!((rows, cols), (16, 16));
    let csv = std::fs::read_to_string(dir.join("constant_current_err.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("pixel_row,pixel_col,forward,reverse"));
    assert_eq!(csv.lines().count(), 1 + 16 * 16);
}

#[test]
fn scan_didv_flag_starts_from_the_modulated_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("didv");
    run_ok(&["--out", dir.to_str().unwrap(), "scan", "--mode", "didv", "--rows", "6", "--cols", "6"]);
    let m = manifest(&dir);
    assert_eq!(m.status, "ok");
    assert!(output_names(&m).contains(&"constant_didv_topo.pgm"));
    let pgm = std::fs::read(dir.join("constant_didv_topo.pgm")).unwrap();
    let (rows, cols, _) = stmlab::io::decode_pgm16(&pgm).unwrap();
    assert_eq!((rows, cols), (6, 6));
}

#[test]
fn same_seed_gives_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        run_ok(&["--seed", "11", "--out", d.to_str().unwrap(), "scan", "--rows", "6", "--cols", "6", "--set", "surface.generate.current_noise=2e-12"]);
    }
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma, mb);
    let c = tmp.path().join("c");
    run_ok(&["--seed", "12", "--out", c.to_str().unwrap(), "scan", "--rows", "6", "--cols", "6", "--set", "surface.generate.current_noise=2e-12"]);
    let topo = |m: &Manifest| m.outputs.iter().find(|e| e.path.ends_with("_topo.pgm")).unwrap().sha256.clone();
    assert_ne!(topo(&ma), topo(&manifest(&c)));
}

#[test]
fn cli_and_library_produce_the_same_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cli_dir = tmp.path().join("cli");
    let file = scenario_dir().join("harmonic_scan.json");
    run_ok(&["--seed", "4", "--out", cli_dir.to_str().unwrap(), "run", file.to_str().unwrap()]);

    let lib_dir = tmp.path().join("lib");
    let mut s = preset("harmonic_scan").unwrap();
    s.seed = Some(4);
    let outcome = s.run(&scenario_dir(), &lib_dir).unwrap();
    assert_eq!(outcome.manifest, manifest(&cli_dir));
}

#[test]
fn design_pi_region_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    run_ok(&["--out", dir.to_str().unwrap(), "design-pi", "--fc", "500,1500"]);
    let csv = std::fs::read_to_string(dir.join("design_pi_region.csv")).unwrap();

    let mut s = preset("design_pi").unwrap();
    let stmlab::scenario::Experiment::Design(d) = &mut s.experiment else {
        panic!("design preset")
    };
    d.fc_hz = vec![500.0, 1500.0];
    assert_eq!((d.f_min, d.limit_db), (50.0, 3.0));
    let d = d.clone();
    let mic = s.prepare(&scenario_dir()).unwrap();
    let region = mic.design_region(&d.omega_c(), d.f_min, d.limit_db).unwrap();
    assert_eq!(csv, region.to_csv());
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn usage_errors_exit_2() {
    for args in [&["--bogus", "scan"][..], &["scan", "--mode", "sideways"], &["frobnicate"]] {
        let out = bin().args(args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn malformed_scenario_exits_2_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("bad.json");
    std::fs::write(&file, "{\n  \"name\": \"x\",\n  \"experiment\": {\"scan\": {}},\n  \"microscop\": {}\n}\n").unwrap();
    let out = bin().args(["--out", tmp.path().join("o").to_str().unwrap(), "run", file.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("microscop") && err.contains("line 4"), "{err}");
    assert!(!tmp.path().join("o").join("manifest.json").exists());

    std::fs::write(&file, "{\"name\": \"x\", \"experiment\": {\"scan\": {\"raster\": {\"rows\": 0}}}}").unwrap();
    let out = bin().args(["--out", tmp.path().join("o").to_str().unwrap(), "run", file.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn crash_during_run_exits_3_and_still_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    let out = bin()
        .args(["--out", dir.to_str().unwrap(), "scan", "--speed", "5000", "--set", "surface.generate.steps=[{\"col\":12,\"height\":40.0}]"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&dir);
    assert_eq!(m.status, "crashed");
    assert!(m.message.is_some());
}

#[test]
fn seed_priority_flag_over_file_over_env() {
    let tmp = tempfile::tempdir().unwrap();
    let file = scenario_dir().join("sts.json");
    let seed_of = |args: &[&str], env: Option<&str>, tag: &str| {
        let dir = tmp.path().join(tag);
        let mut c = bin();
        if let Some(v) = env {
            c.env("STMLAB_SEED", v);
        }
        let mut full = vec!["--out", dir.to_str().unwrap()];
        full.extend_from_slice(args);
        let out = c.args(&full).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        manifest(&dir).seed
    };
    let f = file.to_str().unwrap();
    assert_eq!(seed_of(&["run", f], None, "a"), 0);
    assert_eq!(seed_of(&["run", f], Some("21"), "b"), 21);
    assert_eq!(seed_of(&["--set", "seed=8", "run", f], Some("21"), "c"), 8);
    assert_eq!(seed_of(&["--seed", "3", "--set", "seed=8", "run", f], Some("21"), "d"), 3);

    let out = bin().env("STMLAB_SEED", "abc").args(["--out", tmp.path().join("e").to_str().unwrap(), "run", f]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn surface_gen_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = |tag: &str, seed: &str| {
        let dir = tmp.path().join(tag);
        run_ok(&["--seed", seed, "--out", dir.to_str().unwrap(), "surface-gen", "--dimers", "--defects", "0.02", "--rows", "20", "--cols", "20"]);
        std::fs::read_to_string(dir.join("surface_surface.json")).unwrap()
    };
    let a = gen("a", "7");
    assert_eq!(a, gen("b", "7"));
    assert_ne!(a, gen("c", "8"));
    let s = stmlab::junction::SurfaceModel::from_json(&a).unwrap();
    assert_eq!((s.rows, s.cols), (20, 20));
    let db = s.sites.iter().filter(|x| x.kind == stmlab::junction::SiteKind::DanglingBond).count();
    assert!(db > 0 && db < 30, "{db}");
}

#[test]
fn generated_surface_feeds_a_scenario_file() {
    let tmp = tempfile::tempdir().unwrap();
    let sdir = tmp.path().join("s");
    run_ok(&["--seed", "7", "--out", sdir.to_str().unwrap(), "surface-gen", "--rows", "24", "--cols", "24"]);
    let path = sdir.join("surface_surface.json");
    let odir = tmp.path().join("o");
    run_ok(&[
        "--out",
        odir.to_str().unwrap(),
        "--set",
        &format!("surface={{\"file\":{}}}", serde_json::to_string(path.to_str().unwrap()).unwrap()),
        "scan",
        "--rows",
        "4",
        "--cols",
        "4",
    ]);
    assert_eq!(manifest(&odir).status, "ok");
}

#[test]
fn sts_ultrafast_from_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("u");
    run_ok(&["--out", dir.to_str().unwrap(), "sts", "--mode", "ultrafast", "--vm", "2.5", "--fmod", "2000", "--rows", "2", "--cols", "2"]);
    let m = manifest(&dir);
    let names = output_names(&m);
    assert!(names.iter().any(|n| n.ends_with("_iv.csv")), "{names:?}");
    assert!(names.iter().any(|n| n.ends_with("_I1.pgm")), "{names:?}");
    let iv = std::fs::read_to_string(dir.join(names.iter().find(|n| n.ends_with("_iv.csv")).unwrap())).unwrap();
    assert_eq!(iv.lines().next(), Some("pixel_row,pixel_col,V,I"));
    let vs: Vec<f64> = iv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    let vmax = vs.iter().cloned().fold(f64::MIN, f64::max);
    assert!(vmax > 0.0 && vmax <= 2.5 + 1e-9, "{vmax}");
}

#[test]
fn sysid_writes_frf_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("s");
    run_ok(&["--out", dir.to_str().unwrap(), "sysid", "--points", "6", "--fstart", "200", "--fstop", "3000", "--order", "0"]);
    let frf = std::fs::read_to_string(dir.join("sysid_frf.csv")).unwrap();
    let mut lines = frf.lines();
    assert_eq!(lines.next(), Some("f_Hz,re,im,coherence"));
    let f: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(f.len(), 6);
    // Tones land on whole-cycle bins, so the grid ends may shift slightly.
    assert!((f[0] / 200.0 - 1.0).abs() < 5e-3 && (f[5] / 3000.0 - 1.0).abs() < 5e-3, "{f:?}");
    assert!(f.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn hdl_flags_write_the_requested_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("h");
    run_ok(&["--out", dir.to_str().unwrap(), "hdl", "--bias", "3.5", "--path", "1.152,1.152;2.688,1.152"]);
    let csv = std::fs::read_to_string(dir.join("hdl_desorbed.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5, "{csv}");
    let ev = std::fs::read_to_string(dir.join("hdl_events.jsonl")).unwrap();
    let events = stmlab::litho::events_from_jsonl(&ev).unwrap();
    assert_eq!(events.len(), 5);

    let out = bin().args(["--out", tmp.path().join("x").to_str().unwrap(), "hdl", "--path", "1,1;oops"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
