//! Integrator-gain bounds from gain margin, imaging bandwidth and the H∞
//! norm of the imaging transfer function.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use super::pi::unit_response;
use crate::linear::{logspace, FrequencyResponse};

/// Relative tolerance of every gain bisection.
pub const KI_REL_TOL: f64 = 1e-3;

/// Bounds for one corner frequency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPoint {
    /// rad/s
    pub omega_c: f64,
    /// Critical gain; `None` when no phase crossover exists.
    pub ki_upper: Option<f64>,
    /// Smallest gain meeting the bandwidth requirement; `None` if it exceeds `ki_upper`.
    pub ki_lower: Option<f64>,
    pub ki_hinf: f64,
    pub ki_recommended: f64,
    pub nonempty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRegion {
    pub f_min: f64,
    pub limit_db: f64,
    pub points: Vec<RegionPoint>,
}

impl StabilityRegion {
    /// CSV with columns `omega_c,ki_upper,ki_lower,ki_hinf,ki_recommended,nonempty`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "inf".to_string(), |x| format!("{x:.9e}"));
        let mut s = String::from("omega_c,ki_upper,ki_lower,ki_hinf,ki_recommended,nonempty\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{:.9e},{},{},{:.9e},{:.9e},{}",
                p.omega_c,
                opt(p.ki_upper),
                opt(p.ki_lower),
                p.ki_hinf,
                p.ki_recommended,
                p.nonempty
            );
        }
        s
    }

    /// Feasible point with the largest recommended gain.
    pub fn best(&self) -> Option<&RegionPoint> {
        self.points
            .iter()
            .filter(|p| p.nonempty)
            .max_by(|a, b| a.ki_recommended.total_cmp(&b.ki_recommended))
    }
}

/// Gain designer over a loop `G` (controller output to measured log
/// signal) and a topography path `H` (surface height to measured log
/// signal). Without `H` the designer uses `H = G`.
pub struct Designer<'a> {
    g: &'a dyn FrequencyResponse,
    h: Option<&'a dyn FrequencyResponse>,
    fs: f64,
    grid: Vec<f64>,
    g_grid: Vec<Complex64>,
    h_grid: Vec<Complex64>,
    dc_norm: Complex64,
}

impl<'a> Designer<'a> {
    pub fn new(g: &'a dyn FrequencyResponse, h: Option<&'a dyn FrequencyResponse>, fs: f64) -> Self {
        let grid = logspace(0.5, fs / 2.0 * (1.0 - 1e-6), 6000);
        Self::with_grid(g, h, fs, grid)
    }

    pub fn with_grid(g: &'a dyn FrequencyResponse, h: Option<&'a dyn FrequencyResponse>, fs: f64, grid: Vec<f64>) -> Self {
        let g_grid: Vec<Complex64> = grid.iter().map(|&f| g.frf(f)).collect();
        let h_grid = match h {
            Some(h) => grid.iter().map(|&f| h.frf(f)).collect(),
            None => g_grid.clone(),
        };
        let dc_norm = match h {
            Some(h) => g.frf(0.0) / h.frf(0.0),
            None => Complex64::new(1.0, 0.0),
        };
        Self {
            g,
            h,
            fs,
            grid,
            g_grid,
            h_grid,
            dc_norm,
        }
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    fn h_at(&self, f: f64) -> Complex64 {
        match self.h {
            Some(h) => h.frf(f),
            None => self.g.frf(f),
        }
    }

    /// `(T/(z-1) + 1/ω_c) G`, the loop per unit integrator gain.
    pub fn unit_loop(&self, omega_c: f64, f: f64) -> Complex64 {
        unit_response(omega_c, f, self.fs) * self.g.frf(f)
    }

    fn imaging_from(&self, c: Complex64, g: Complex64, h: Complex64) -> Complex64 {
        c * h / (1.0 + c * g) * self.dc_norm
    }

    /// Imaging transfer function `C H / (1 + C G)`, unity at dc.
    pub fn imaging(&self, ki: f64, omega_c: f64, f: f64) -> Complex64 {
        let c = ki * unit_response(omega_c, f, self.fs);
        self.imaging_from(c, self.g.frf(f), self.h_at(f))
    }

    /// Smallest gain at which a -180° crossing of the loop reaches -1.
    pub fn critical_ki(&self, omega_c: f64) -> Option<f64> {
        let l: Vec<Complex64> = self
            .grid
            .iter()
            .zip(&self.g_grid)
            .map(|(&f, &g)| unit_response(omega_c, f, self.fs) * g)
            .collect();
        let mut best: Option<f64> = None;
        let mut consider = |m: f64| {
            if m > 0.0 && m.is_finite() {
                let k = 1.0 / m;
                best = Some(best.map_or(k, |b: f64| b.min(k)));
            }
        };
        for i in 1..l.len() {
            if l[i - 1].im.signum() == l[i].im.signum() || l[i - 1].im == 0.0 {
                continue;
            }
            if l[i - 1].re >= 0.0 && l[i].re >= 0.0 {
                continue;
            }
            let (mut a, mut b) = (self.grid[i - 1], self.grid[i]);
            let sa = l[i - 1].im.signum();
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if self.unit_loop(omega_c, m).im.signum() == sa {
                    a = m;
                } else {
                    b = m;
                }
            }
            let lc = self.unit_loop(omega_c, 0.5 * (a + b));
            if lc.re < 0.0 {
                consider(lc.norm());
            }
        }
        let nyq = self.unit_loop(omega_c, self.fs / 2.0);
        if nyq.re < 0.0 && nyq.im.abs() < 1e-9 * nyq.norm() {
            consider(nyq.norm());
        }
        best
    }

    /// Frequency of the -3 dB crossing of the imaging transfer function.
    pub fn imaging_bandwidth(&self, ki: f64, omega_c: f64) -> f64 {
        let thr = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..self.grid.len() {
            let c = ki * unit_response(omega_c, self.grid[i], self.fs);
            if self.imaging_from(c, self.g_grid[i], self.h_grid[i]).norm() < thr {
                if i == 0 {
                    return self.grid[0];
                }
                let (mut a, mut b) = (self.grid[i - 1], self.grid[i]);
                for _ in 0..50 {
                    let m = 0.5 * (a + b);
                    if self.imaging(ki, omega_c, m).norm() < thr {
                        b = m;
                    } else {
                        a = m;
                    }
                }
                return 0.5 * (a + b);
            }
        }
        self.fs / 2.0
    }

    /// Peak of `|G_img|` in dB, refined around the largest grid value.
    pub fn imaging_peak_db(&self, ki: f64, omega_c: f64) -> f64 {
        let mags: Vec<f64> = (0..self.grid.len())
            .map(|i| {
                let c = ki * unit_response(omega_c, self.grid[i], self.fs);
                self.imaging_from(c, self.g_grid[i], self.h_grid[i]).norm()
            })
            .collect();
        let (imax, &m) = mags
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty grid");
        let lo = self.grid[imax.saturating_sub(1)];
        let hi = self.grid[(imax + 1).min(self.grid.len() - 1)];
        let fine = (0..=64)
            .map(|j| lo + (hi - lo) * j as f64 / 64.0)
            .map(|f| self.imaging(ki, omega_c, f).norm())
            .fold(m, f64::max);
        20.0 * fine.log10()
    }

    fn ceiling(&self, omega_c: f64) -> f64 {
        self.critical_ki(omega_c).map_or(1e12, |k| k * (1.0 - 1e-9))
    }

    /// Smallest gain whose imaging bandwidth reaches `f_min`; `None` if
    /// even the critical gain falls short.
    pub fn bandwidth_ki(&self, omega_c: f64, f_min: f64) -> Option<f64> {
        let mut hi = self.ceiling(omega_c);
        if self.imaging_bandwidth(hi, omega_c) < f_min {
            return None;
        }
        let mut lo = hi * 1e-9;
        while hi / lo - 1.0 > KI_REL_TOL {
            let m = (lo * hi).sqrt();
            if self.imaging_bandwidth(m, omega_c) >= f_min {
                hi = m;
            } else {
                lo = m;
            }
        }
        Some(hi)
    }

    /// Largest gain whose imaging peak stays at or below `limit_db`.
    pub fn hinf_ki(&self, omega_c: f64, limit_db: f64) -> f64 {
        let mut hi = self.ceiling(omega_c);
        if self.imaging_peak_db(hi, omega_c) <= limit_db {
            return hi;
        }
        let mut lo = hi * 1e-9;
        if self.imaging_peak_db(lo, omega_c) > limit_db {
            return 0.0;
        }
        while hi / lo - 1.0 > KI_REL_TOL {
            let m = (lo * hi).sqrt();
            if self.imaging_peak_db(m, omega_c) <= limit_db {
                lo = m;
            } else {
                hi = m;
            }
        }
        lo
    }

    pub fn point(&self, omega_c: f64, f_min: f64, limit_db: f64) -> RegionPoint {
        let ki_upper = self.critical_ki(omega_c);
        let ki_lower = self.bandwidth_ki(omega_c, f_min);
        let ki_hinf = self.hinf_ki(omega_c, limit_db);
        let top = ki_upper.map_or(ki_hinf, |u| u.min(ki_hinf));
        let ki_recommended = top / 2.0;
        let nonempty = matches!(ki_lower, Some(l) if l <= top);
        RegionPoint {
            omega_c,
            ki_upper,
            ki_lower,
            ki_hinf,
            ki_recommended,
            nonempty,
        }
    }
}

/// Evaluate every bound over a grid of corner frequencies (rad/s).
pub fn design_region(designer: &Designer, omega_c: &[f64], f_min: f64, limit_db: f64) -> StabilityRegion {
    StabilityRegion {
        f_min,
        limit_db,
        points: omega_c.iter().map(|&w| designer.point(w, f_min, limit_db)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{PiController, PiGains};
    use crate::linear::{LinearSystem, Section};
    use std::f64::consts::PI;

    const FS: f64 = 100e3;

    fn plant(dc: f64) -> LinearSystem {
        LinearSystem::new(dc, vec![Section::lowpass2(2.0 * PI * 1000.0, 0.05)], FS).unwrap()
    }

    /// Discrete loop with the same one-sample delay the designer assumes.
    fn simulate(sys: &LinearSystem, ki: f64, wc: f64, seconds: f64) -> f64 {
        let mut g = sys.clone();
        let mut pi = PiController::new(PiGains::new(ki, wc).unwrap(), FS, 1e12).unwrap();
        let mut u = 0.0;
        let mut tail: f64 = 0.0;
        let n = (seconds * FS) as usize;
        for k in 0..n {
            let y = g.step(u);
            let e = 1.0 - y;
            u = pi.step(e);
            if k > n - n / 10 {
                tail = tail.max(e.abs());
            }
            if !u.is_finite() || u.abs() > 1e9 {
                return f64::INFINITY;
            }
        }
        tail
    }

    fn delayed(sys: &LinearSystem) -> impl Fn(f64) -> Complex64 + '_ {
        move |f| sys.discrete_response(f) * Complex64::from_polar(1.0, -2.0 * PI * f / FS)
    }

    #[test]
    fn critical_gain_dichotomy() {
        let sys = plant(1.0);
        let g = delayed(&sys);
        let d = Designer::new(&g, None, FS);
        let wc = 2.0 * PI * 500.0;
        let k = d.critical_ki(wc).unwrap();
        assert!(simulate(&sys, 0.9 * k, wc, 1.0) < 1e-3);
        assert!(simulate(&sys, 1.1 * k, wc, 1.0) > 1.0);
    }

    #[test]
    fn doubling_dc_gain_halves_critical_gain() {
        let (a, b) = (plant(1.0), plant(2.0));
        let (ga, gb) = (delayed(&a), delayed(&b));
        let wc = 2.0 * PI * 500.0;
        let ka = Designer::new(&ga, None, FS).critical_ki(wc).unwrap();
        let kb = Designer::new(&gb, None, FS).critical_ki(wc).unwrap();
        assert!((ka / kb - 2.0).abs() < 1e-6);
    }

    #[test]
    fn pure_integrator_loop_has_no_crossover() {
        // Continuous 1/s with a static plant never reaches -180°.
        let g = |_f: f64| Complex64::new(1.0, 0.0);
        let grid = logspace(0.1, 1e4, 2000);
        let d = Designer::with_grid(&g, None, 1e12, grid);
        assert!(d.critical_ki(1e9).is_none());
    }

    #[test]
    fn bounds_are_consistent() {
        let sys = plant(1.0);
        let g = delayed(&sys);
        let d = Designer::new(&g, None, FS);
        let wc = 2.0 * PI * 500.0;
        let lo50 = d.bandwidth_ki(wc, 50.0).unwrap();
        let lo80 = d.bandwidth_ki(wc, 80.0).unwrap();
        assert!(lo80 >= lo50);
        assert!(d.imaging_bandwidth(lo50, wc) >= 50.0);
        assert!(d.imaging_bandwidth(lo50 * (1.0 - 2.0 * KI_REL_TOL), wc) < 50.0);
        let kh = d.hinf_ki(wc, 3.0);
        assert!((d.imaging_peak_db(kh, wc) - 3.0).abs() < 0.1);
        let crit = d.critical_ki(wc).unwrap();
        assert!((d.hinf_ki(wc, 1e6) / crit - 1.0).abs() < 1e-6);
        let p = d.point(wc, 50.0, 3.0);
        assert!((p.ki_recommended - 0.5 * crit.min(kh)).abs() < 1e-12);
        assert_eq!(p.nonempty, lo50 <= crit.min(kh));
        assert!(d.point(2.0 * PI * 3000.0, 30.0, 3.0).nonempty);
        let empty = d.point(wc, 20e3, 3.0);
        assert!(!empty.nonempty);
    }

    #[test]
    fn region_csv_has_one_row_per_corner() {
        let sys = plant(1.0);
        let g = delayed(&sys);
        let d = Designer::new(&g, None, FS);
        let r = design_region(&d, &[2.0 * PI * 1000.0, 2.0 * PI * 3000.0], 30.0, 3.0);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("omega_c,ki_upper"));
        assert!(r.best().is_some());
    }
}
