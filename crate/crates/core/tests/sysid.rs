use num_complex::Complex64;
use stmlab::junction::{Conductance, Site, SiteKind, SurfaceModel};
use stmlab::linear::LinearSystem;
use stmlab::sim::{Feedback, Microscope, MicroscopeConfig, Modulation};
use stmlab::sysid::{default_grid, fit_rational_with, measure_closed_loop_frf, FitOptions, FrfOptions, Injection};

fn surface() -> SurfaceModel {
    let site = Site {
        kind: SiteKind::HSi,
        height: 0.0,
        phi: 4.0,
        conduct: Conductance::new(&[-1e-4]).unwrap(),
        v_desorb: 3.3,
    };
    SurfaceModel::uniform(4, 4, 0.384, site)
}

fn engaged() -> Microscope {
    let mut mic = Microscope::new(MicroscopeConfig::default(), surface()).unwrap();
    mic.engage_at(0.5, 0.5, Feedback::Current { setpoint: 0.5e-9 }).unwrap();
    mic.settle(0.02).unwrap();
    mic
}

fn phase_err_deg(a: Complex64, b: Complex64) -> f64 {
    (a / b).arg().to_degrees().abs()
}

#[test]
fn measured_g_matches_loop_model() {
    let mut mic = engaged();
    let model = mic.loop_model().unwrap();
    let frf = measure_closed_loop_frf(&mut mic, &default_grid(25), &FrfOptions::default()).unwrap();
    assert!(frf.complete);
    for (i, &f) in frf.freq_hz.iter().enumerate() {
        let m = model.g(f);
        let r = frf.response[i];
        assert!((r.norm() / m.norm() - 1.0).abs() < 0.02, "{f}: {r} vs {m}");
        assert!(phase_err_deg(r, m) < 2.0, "{f}");
        assert!(frf.coherence[i] > 0.95);
    }
}

#[test]
fn u1_and_u2_agree() {
    let grid = default_grid(12);
    let a = measure_closed_loop_frf(&mut engaged(), &grid, &FrfOptions::default()).unwrap();
    let opts = FrfOptions {
        injection: Injection::U2,
        amplitude: 1e-4,
        ..Default::default()
    };
    let b = measure_closed_loop_frf(&mut engaged(), &grid, &opts).unwrap();
    assert_eq!(a.freq_hz, b.freq_hz);
    for i in 0..a.len() {
        assert!((a.response[i] / b.response[i] - 1.0).norm() < 0.02, "{}", a.freq_hz[i]);
    }
}

#[test]
fn halving_amplitude_keeps_g() {
    let grid = default_grid(6);
    let a = measure_closed_loop_frf(&mut engaged(), &grid, &FrfOptions::default()).unwrap();
    let opts = FrfOptions {
        amplitude: 0.01,
        ..Default::default()
    };
    let b = measure_closed_loop_frf(&mut engaged(), &grid, &opts).unwrap();
    for i in 0..a.len() {
        assert!((a.response[i] / b.response[i] - 1.0).norm() < 0.005);
    }
}

#[test]
fn oversized_excitation_rejected() {
    let opts = FrfOptions {
        amplitude: 0.5,
        ..Default::default()
    };
    assert!(measure_closed_loop_frf(&mut engaged(), &default_grid(3), &opts).is_err());
}

#[test]
fn crash_returns_partial_data() {
    let mut mic = engaged();
    mic.set_z_coarse(mic.z_coarse() - 7.0);
    let frf = measure_closed_loop_frf(&mut mic, &default_grid(4), &FrfOptions::default()).unwrap();
    assert!(!frf.complete);
    assert!(frf.abort_reason.is_some());
}

#[test]
fn fit_of_measured_g_round_trips() {
    let mut mic = engaged();
    let frf = measure_closed_loop_frf(&mut mic, &default_grid(40), &FrfOptions::default()).unwrap();
    let fit = fit_rational_with(
        &frf,
        &FitOptions {
            order: 6,
            delay_samples: 1.0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(fit.rmse_db < 0.5, "{}", fit.rmse_db);
    let sys: LinearSystem = fit.system.clone();
    let again = stmlab::sysid::FrfData::sample(|f| sys.response(f), &fit.freq_hz).unwrap();
    for (i, &f) in fit.freq_hz.iter().enumerate() {
        assert!((again.response[i] / fit.system.response(f) - 1.0).norm() < 1e-12);
    }
}

#[test]
fn didv_loop_h_rolls_off_with_lockin_cutoff() {
    let mut bw = Vec::new();
    for cutoff in [300.0, 500.0, 700.0] {
        let mut cfg = MicroscopeConfig {
            modulation: Some(Modulation { vm: 0.8, freq_hz: 2000.0 }),
            ..Default::default()
        };
        cfg.demod.cutoff_hz = cutoff;
        cfg.plant.preamp_gain = 1e7;
        cfg.gains.ki = 0.3;
        let site = Site {
            kind: SiteKind::HSi,
            height: 0.0,
            phi: 4.0,
            conduct: Conductance::new(&[0.0, 1e-4]).unwrap(),
            v_desorb: 3.3,
        };
        let mut mic = Microscope::new(cfg, SurfaceModel::uniform(4, 4, 0.384, site)).unwrap();
        let sp = 0.5e-9;
        mic.engage_at(0.5, 0.5, Feedback::FirstHarmonic { setpoint: sp }).unwrap();
        mic.settle(0.05).unwrap();
        let grid = stmlab::linear::logspace(50.0, 1500.0, 30);
        let frf = measure_closed_loop_frf(
            &mut mic,
            &grid,
            &FrfOptions {
                injection: Injection::D1,
                ..Default::default()
            },
        )
        .unwrap();
        let h0 = frf.response[0].norm();
        let model = mic.loop_model().unwrap();
        for (f, r) in frf.freq_hz.iter().zip(&frf.response) {
            let m = model.g(*f);
            // At 700 Hz the lock-in passes a few percent of 2 kHz ripple into ln I₁.
            if m.norm() > 0.1 * h0 && cutoff < 600.0 {
                assert!((r / m - 1.0).norm() < 0.02, "{cutoff} Hz cutoff, {f} Hz");
            }
        }
        let f3 = frf
            .freq_hz
            .iter()
            .zip(&frf.response)
            .find(|(_, r)| r.norm() < h0 / 2f64.sqrt())
            .map(|(f, _)| *f)
            .unwrap();
        bw.push(f3);
    }
    assert!(bw[0] < bw[1] && bw[1] < bw[2], "{bw:?}");
}
