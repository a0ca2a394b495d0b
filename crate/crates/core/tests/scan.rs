use std::f64::consts::PI;

use stmlab::junction::{Conductance, Site, SiteKind, SurfaceModel, DECAY_CONSTANT};
use stmlab::scan::{approach, rms, rms_diff, scan, ApproachConfig, Channel, RasterConfig, ScanConfig, ScanMode};
use stmlab::sim::{Feedback, Microscope, MicroscopeConfig, Modulation, NotchConfig};

const PHI: f64 = 4.0;

fn site() -> Site {
    Site {
        kind: SiteKind::HSi,
        height: 0.0,
        phi: PHI,
        conduct: Conductance::new(&[0.0, 1e-4]).unwrap(),
        v_desorb: 3.3,
    }
}

/// 16×16 lattice with a 1 Å terrace on columns ≥ `step_col`.
fn stepped(step_col: usize) -> SurfaceModel {
    let mut s = SurfaceModel::uniform(16, 16, 0.384, site());
    s.capacitance = 0.0;
    for r in 0..16 {
        for c in step_col..16 {
            let i = s.index(r, c);
            s.sites[i].height = 1.0;
        }
    }
    s
}

fn ks() -> f64 {
    DECAY_CONSTANT * PHI.sqrt()
}

fn cc_microscope(surface: SurfaceModel) -> Microscope {
    let mut mic = Microscope::new(MicroscopeConfig::default(), surface).unwrap();
    mic.engage_at(0.5, 0.5, Feedback::Current { setpoint: 0.5e-9 }).unwrap();
    mic
}

fn didv_microscope(surface: SurfaceModel) -> Microscope {
    let cfg = MicroscopeConfig {
        modulation: Some(Modulation { vm: 0.8, freq_hz: 2000.0 }),
        notch: Some(NotchConfig::default()),
        ..Default::default()
    };
    let mut mic = Microscope::new(cfg, surface).unwrap();
    mic.engage_at(0.5, 0.5, Feedback::FirstHarmonic { setpoint: 0.125e-9 * 0.8 }).unwrap();
    mic.apply_recommended_gains(2.0 * PI * 1000.0, 20.0, 3.0).unwrap();
    mic
}

fn raster(speed: f64) -> RasterConfig {
    RasterConfig {
        x0: 0.5,
        y0: 0.5,
        width: 4.6,
        height: 4.6,
        rows: 8,
        cols: 24,
        speed,
        ..Default::default()
    }
}

/// Mean of the forward topography left and right of the terrace edge,
/// one lattice spacing clear of it.
fn step_height(img: &stmlab::scan::Image, r: &RasterConfig, edge_nm: f64) -> f64 {
    let (mut lo, mut hi, mut nl, mut nh) = (0.0, 0.0, 0, 0);
    for row in 0..img.rows {
        for col in 0..img.cols {
            let (x, _) = r.pixel_position(row, col);
            let v = img.at(row, col);
            if x < edge_nm - 0.5 {
                lo += v;
                nl += 1;
            } else if x > edge_nm + 0.2 {
                hi += v;
                nh += 1;
            }
        }
    }
    hi / nh as f64 - lo / nl as f64
}

#[test]
fn approach_without_coarse_steps() {
    let mut mic = cc_microscope(SurfaceModel::uniform(4, 4, 0.384, site()));
    let z = mic.z_coarse();
    mic.set_z_coarse(z + 2000.0);
    let rep = approach(&mut mic, &ApproachConfig::default()).unwrap();
    assert_eq!(rep.coarse_steps, 0);
    assert_eq!(rep.extensions, 1);
    assert!(rep.state.engaged && !rep.state.crashed);
}

#[test]
fn approach_counts_coarse_steps() {
    let cfg = ApproachConfig::default();
    for k in [1usize, 3] {
        let mut mic = cc_microscope(SurfaceModel::uniform(4, 4, 0.384, site()));
        // Trace oracle: contact is heard at gap δd = ln(|L|/I_det)/ks; full
        // extension reaches z_coarse - 4000 Å.
        let l = site().conduct.eval(mic.bias()).abs();
        let gap_detect = (l / cfg.detect_current).ln() / ks();
        let reach = 4000.0;
        let start = reach + gap_detect + (k as f64 - 0.5) * cfg.coarse_step;
        mic.set_z_coarse(start);
        let expect = ((start - reach - gap_detect) / cfg.coarse_step).ceil() as usize;
        assert_eq!(expect, k);
        let rep = approach(&mut mic, &cfg).unwrap();
        assert_eq!(rep.coarse_steps, k);
        assert_eq!(rep.extensions, k + 1);
        let s = mic.settle(0.02).unwrap();
        assert!(s.error.abs() < 1e-3);
    }
}

#[test]
fn approach_gives_up_after_max_steps() {
    let mut mic = cc_microscope(SurfaceModel::uniform(4, 4, 0.384, site()));
    mic.set_z_coarse(1e6);
    let cfg = ApproachConfig {
        max_steps: 2,
        ..Default::default()
    };
    assert!(approach(&mut mic, &cfg).is_err());
}

#[test]
fn constant_height_flat_and_protrusion() {
    let mut surf = SurfaceModel::uniform(16, 16, 0.384, site());
    surf.capacitance = 0.0;
    let mut mic = cc_microscope(surf.clone());
    let cfg = ScanConfig {
        mode: ScanMode::ConstantHeight,
        raster: raster(50.0),
        ..Default::default()
    };
    let res = scan(&mut mic, &cfg).unwrap();
    let fb = res.image(Channel::Feedback).unwrap();
    let (a, b) = fb.finite_range().unwrap();
    assert!(b - a < 1e-9);

    let centre = surf.index(8, 8);
    surf.sites[centre].height = 1.0;
    let mut mic = cc_microscope(surf.clone());
    let mut c = cfg.clone();
    c.raster = RasterConfig {
        x0: 8.0 * 0.384 - 0.384,
        y0: 8.0 * 0.384,
        width: 2.0 * 0.384,
        height: 0.0,
        rows: 1,
        cols: 3,
        speed: 1.0,
        ..Default::default()
    };
    let res = scan(&mut mic, &c).unwrap();
    let fb = res.image(Channel::Feedback).unwrap();
    // Oracle: mean ground-truth height under each pixel's share of the pass.
    let mut sum = [0.0; 3];
    let mut n = [0.0; 3];
    for p in c.raster.trajectory(mic.fs()).filter(|p| p.forward) {
        sum[p.col] += surf.sample_site(p.x, p.y).unwrap().height;
        n[p.col] += 1.0;
    }
    let dh = sum[1] / n[1] - sum[0] / n[0];
    let rise = fb.at(0, 1) - fb.at(0, 0);
    assert!((rise / (ks() * dh) - 1.0).abs() < 0.01, "{rise} vs {}", ks() * dh);
}

#[test]
fn constant_height_crashes_on_tilt() {
    let mut surf = SurfaceModel::uniform(16, 16, 0.384, site());
    for r in 0..16 {
        for c in 0..16 {
            let i = surf.index(r, c);
            surf.sites[i].height = 3.0 * c as f64;
        }
    }
    let mut mic = cc_microscope(surf);
    let cfg = ScanConfig {
        mode: ScanMode::ConstantHeight,
        raster: raster(50.0),
        ..Default::default()
    };
    let res = scan(&mut mic, &cfg).unwrap();
    assert!(res.crash.is_some());
    let fb = res.image(Channel::Feedback).unwrap();
    assert!(fb.forward[0].is_finite());
    assert!(fb.forward.last().unwrap().is_nan());
}

#[test]
fn constant_current_tracks_a_step() {
    let mut mic = cc_microscope(stepped(8));
    let cfg = ScanConfig {
        raster: raster(20.0),
        ..Default::default()
    };
    let res = scan(&mut mic, &cfg).unwrap();
    assert!(res.crash.is_none());
    let topo = res.image(Channel::Topography).unwrap();
    let h = step_height(topo, &cfg.raster, 8.0 * 0.384);
    assert!((h - 1.0).abs() < 0.02, "{h}");
    assert_eq!(topo.at(0, 0), 0.0);
}

#[test]
fn dangling_bond_looks_like_a_protrusion() {
    let mut surf = SurfaceModel::uniform(16, 16, 0.384, site());
    surf.capacitance = 0.0;
    surf.db_phi_factor = 1.0;
    let centre = surf.index(8, 8);
    surf.depassivate(centre);
    let a = 0.384;
    let mut mic = cc_microscope(surf);
    let cfg = ScanConfig {
        raster: RasterConfig {
            x0: 8.0 * a - 2.0 * a,
            y0: 8.0 * a,
            width: 4.0 * a,
            height: 0.0,
            rows: 1,
            cols: 33,
            speed: 0.5,
            ..Default::default()
        },
        ..Default::default()
    };
    let res = scan(&mut mic, &cfg).unwrap();
    let topo = res.image(Channel::Topography).unwrap();
    let apparent = topo.at(0, 16) - topo.at(0, 0);
    let expect = 5f64.ln() / ks();
    assert!((apparent / expect - 1.0).abs() < 0.05, "{apparent} vs {expect}");
}

#[test]
fn zero_extent_scan_is_a_dwell() {
    let mut mic = cc_microscope(stepped(8));
    let cfg = ScanConfig {
        raster: RasterConfig {
            x0: 1.0,
            y0: 1.0,
            width: 0.0,
            height: 0.0,
            rows: 1,
            cols: 1,
            point_dwell: 0.05,
            ..Default::default()
        },
        ..Default::default()
    };
    let res = scan(&mut mic, &cfg).unwrap();
    assert!(res.image(Channel::Error).unwrap().at(0, 0).abs() < 1e-6);
}

#[test]
fn didv_topography_tracks_a_step_and_matches_constant_current() {
    let mut mic = didv_microscope(stepped(8));
    let cfg = ScanConfig {
        mode: ScanMode::ConstantDidv,
        raster: raster(20.0),
        setpoint: 0.125e-9,
        ..Default::default()
    };
    let didv = scan(&mut mic, &cfg).unwrap();
    assert!(didv.crash.is_none());
    let t_didv = didv.image(Channel::Topography).unwrap();
    let h = step_height(t_didv, &cfg.raster, 8.0 * 0.384);
    assert!((h - 1.0).abs() < 0.02, "{h}");

    let mut mic = cc_microscope(stepped(8));
    let cc = scan(
        &mut mic,
        &ScanConfig {
            raster: raster(20.0),
            ..Default::default()
        },
    )
    .unwrap();
    let t_cc = cc.image(Channel::Topography).unwrap();
    let rel = rms_diff(&t_cc.forward, &t_didv.forward) / rms(&t_cc.forward);
    assert!(rel < 0.02, "{rel}");
}

#[test]
fn didv_feedback_channel_matches_junction_harmonic() {
    let mut mic = didv_microscope(stepped(16));
    let cfg = ScanConfig {
        mode: ScanMode::ConstantDidv,
        raster: RasterConfig {
            x0: 1.0,
            y0: 1.0,
            width: 0.0,
            height: 0.0,
            rows: 1,
            cols: 1,
            point_dwell: 0.1,
            ..Default::default()
        },
        setpoint: 0.125e-9,
        ..Default::default()
    };
    let res = scan(&mut mic, &cfg).unwrap();
    let s = mic.settle(0.001).unwrap();
    let site = mic.site_here().unwrap();
    let i1 = stmlab::junction::harmonic_amplitudes(&site, s.gap, mic.bias(), 0.8, 1)[1];
    let fb = res.image(Channel::Feedback).unwrap().at(0, 0);
    assert!((fb * 0.8 / i1 - 1.0).abs() < 0.02, "{fb} {i1}");
}

#[test]
fn retrace_agrees_when_slow_and_degrades_when_fast() {
    let mut errs = Vec::new();
    for speed in [10.0, 100.0, 400.0, 2000.0] {
        let mut mic = cc_microscope(stepped(8));
        let cfg = ScanConfig {
            raster: raster(speed),
            enforce_bandwidth: speed <= 100.0,
            ..Default::default()
        };
        let res = scan(&mut mic, &cfg).unwrap();
        let t = res.image(Channel::Topography).unwrap();
        errs.push(rms_diff(&t.forward, &t.reverse) / rms(&t.forward));
    }
    assert!(errs[0] < 0.03, "{errs:?}");
    assert!(errs.windows(2).all(|w| w[0] < w[1]), "{errs:?}");
}

#[test]
fn fast_line_rate_is_rejected() {
    let mut mic = cc_microscope(stepped(8));
    let cfg = ScanConfig {
        raster: raster(2000.0),
        ..Default::default()
    };
    assert!(scan(&mut mic, &cfg).is_err());
}

#[test]
fn noiseless_scans_repeat_bit_for_bit() {
    let run = || {
        let mut mic = cc_microscope(stepped(8));
        let res = scan(
            &mut mic,
            &ScanConfig {
                raster: raster(50.0),
                ..Default::default()
            },
        )
        .unwrap();
        res.images
            .iter()
            .flat_map(|i| i.forward.iter().chain(&i.reverse).map(|v| v.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
