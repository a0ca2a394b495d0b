use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::poly::Conductance;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    HSi,
    DanglingBond,
    Vacancy,
}

/// One lattice node of the synthetic surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub kind: SiteKind,
    /// Height above the surface datum, Å.
    pub height: f64,
    /// Local barrier height, eV.
    pub phi: f64,
    pub conduct: Conductance,
    /// Bias magnitude at which the site depassivates, V.
    pub v_desorb: f64,
}

impl Site {
    /// Hydrogen-terminated silicon site with the library defaults.
    pub fn h_si() -> Self {
        Site {
            kind: SiteKind::HSi,
            height: 0.0,
            phi: 4.74,
            conduct: Conductance::new(&[0.0, 1.0e-4, 0.0, 2.0e-5]).expect("static coefficients"),
            v_desorb: 3.3,
        }
    }

    pub fn vacancy(height: f64) -> Self {
        Site {
            kind: SiteKind::Vacancy,
            height,
            phi: 4.74,
            conduct: Conductance::zero(),
            v_desorb: f64::INFINITY,
        }
    }
}

/// Interpolated junction properties under the tip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveSite {
    pub kind: SiteKind,
    pub height: f64,
    pub phi: f64,
    pub conduct: Conductance,
    pub v_desorb: f64,
    /// Row-major index of the nearest lattice node.
    pub nearest: usize,
}

/// Ground-truth surface: a rectangular lattice of sites plus the global
/// junction parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceModel {
    /// Lattice spacing, nm.
    pub lattice_nm: f64,
    pub rows: usize,
    pub cols: usize,
    pub sites: Vec<Site>,
    /// Tip-sample capacitance, F.
    #[serde(default = "default_capacitance")]
    pub capacitance: f64,
    /// Gaussian junction current noise per sample, A.
    #[serde(default)]
    pub current_noise: f64,
    /// Floor applied before any logarithm of a current, A.
    #[serde(default = "default_floor")]
    pub current_floor: f64,
    /// Conductance multiplier applied when a site is depassivated.
    #[serde(default = "default_db_conduct")]
    pub db_conduct_factor: f64,
    /// Barrier-height multiplier applied when a site is depassivated.
    #[serde(default = "default_db_phi")]
    pub db_phi_factor: f64,
}

fn default_capacitance() -> f64 {
    0.5e-12
}
fn default_floor() -> f64 {
    1e-15
}
fn default_db_conduct() -> f64 {
    5.0
}
fn default_db_phi() -> f64 {
    0.6
}

impl SurfaceModel {
    /// Uniform lattice filled with copies of `site`.
    pub fn uniform(rows: usize, cols: usize, lattice_nm: f64, site: Site) -> Self {
        SurfaceModel {
            lattice_nm,
            rows,
            cols,
            sites: vec![site; rows * cols],
            capacitance: default_capacitance(),
            current_noise: 0.0,
            current_floor: default_floor(),
            db_conduct_factor: default_db_conduct(),
            db_phi_factor: default_db_phi(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::validation("surface grid is empty"));
        }
        if self.sites.len() != self.rows * self.cols {
            return Err(Error::validation(format!(
                "surface has {} sites, expected {}x{}",
                self.sites.len(),
                self.rows,
                self.cols
            )));
        }
        if !(self.lattice_nm > 0.0) {
            return Err(Error::validation("lattice spacing must be positive"));
        }
        if !(self.current_floor > 0.0) {
            return Err(Error::validation("current floor must be positive"));
        }
        if self.capacitance < 0.0 || self.current_noise < 0.0 {
            return Err(Error::validation("capacitance and noise must be non-negative"));
        }
        for (i, s) in self.sites.iter().enumerate() {
            if !(s.phi > 0.0) {
                return Err(Error::validation(format!("site {i}: barrier height must be positive")));
            }
            if s.kind == SiteKind::Vacancy && !s.conduct.is_zero() {
                return Err(Error::validation(format!("site {i}: vacancy with non-zero conductance")));
            }
        }
        Ok(())
    }

    /// Checks that every H-Si site has non-vanishing conductance over `[v_lo, v_hi]`.
    pub fn check_operating_range(&self, v_lo: f64, v_hi: f64) -> Result<()> {
        const PROBES: usize = 33;
        for (i, s) in self.sites.iter().enumerate() {
            if s.kind != SiteKind::HSi {
                continue;
            }
            for k in 0..PROBES {
                let v = v_lo + (v_hi - v_lo) * k as f64 / (PROBES - 1) as f64;
                if s.conduct.eval(v).abs() <= 0.0 {
                    return Err(Error::validation(format!(
                        "site {i}: conductance vanishes at {v:.3} V inside the operating range"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Lateral position of a node, nm.
    pub fn position(&self, index: usize) -> (f64, f64) {
        let (r, c) = (index / self.cols, index % self.cols);
        (c as f64 * self.lattice_nm, r as f64 * self.lattice_nm)
    }

    /// Lateral extent `(width, height)` in nm.
    pub fn extent(&self) -> (f64, f64) {
        (
            (self.cols - 1) as f64 * self.lattice_nm,
            (self.rows - 1) as f64 * self.lattice_nm,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (w, h) = self.extent();
        let eps = 1e-9 * self.lattice_nm;
        x >= -eps && y >= -eps && x <= w + eps && y <= h + eps
    }

    /// Bilinear interpolation of height, barrier and conductance at `(x, y)`;
    /// kind and desorption threshold come from the nearest node.
    pub fn sample_site(&self, x: f64, y: f64) -> Result<EffectiveSite> {
        if !self.contains(x, y) {
            let (w, h) = self.extent();
            return Err(Error::range(format!(
                "position ({x:.4}, {y:.4}) nm outside surface extent {w:.4} x {h:.4} nm"
            )));
        }
        let fx = (x / self.lattice_nm).max(0.0);
        let fy = (y / self.lattice_nm).max(0.0);
        let c0 = (fx.floor() as usize).min(self.cols - 1);
        let r0 = (fy.floor() as usize).min(self.rows - 1);
        let c1 = (c0 + 1).min(self.cols - 1);
        let r1 = (r0 + 1).min(self.rows - 1);
        let u = if c1 == c0 { 0.0 } else { (fx - c0 as f64).clamp(0.0, 1.0) };
        let v = if r1 == r0 { 0.0 } else { (fy - r0 as f64).clamp(0.0, 1.0) };

        let s00 = &self.sites[self.index(r0, c0)];
        let s01 = &self.sites[self.index(r0, c1)];
        let s10 = &self.sites[self.index(r1, c0)];
        let s11 = &self.sites[self.index(r1, c1)];
        let w00 = (1.0 - u) * (1.0 - v);
        let w01 = u * (1.0 - v);
        let w10 = (1.0 - u) * v;
        let w11 = u * v;

        let height = w00 * s00.height + w01 * s01.height + w10 * s10.height + w11 * s11.height;
        let phi = w00 * s00.phi + w01 * s01.phi + w10 * s10.phi + w11 * s11.phi;
        let conduct = s00
            .conduct
            .combine(w00, &s01.conduct, w01)
            .combine(1.0, &s10.conduct.combine(w10, &s11.conduct, w11), 1.0);

        let nc = (fx.round() as usize).min(self.cols - 1);
        let nr = (fy.round() as usize).min(self.rows - 1);
        let nearest = self.index(nr, nc);
        let ns = &self.sites[nearest];
        Ok(EffectiveSite {
            kind: ns.kind,
            height,
            phi,
            conduct,
            v_desorb: ns.v_desorb,
            nearest,
        })
    }

    /// Removes the hydrogen from an H-Si site. Returns `false` when the site
    /// was not passivated.
    pub fn depassivate(&mut self, index: usize) -> bool {
        let (cf, pf) = (self.db_conduct_factor, self.db_phi_factor);
        let site = &mut self.sites[index];
        if site.kind != SiteKind::HSi {
            return false;
        }
        site.kind = SiteKind::DanglingBond;
        site.conduct = site.conduct.scaled(cf);
        site.phi *= pf;
        true
    }

    pub fn count_kind(&self, kind: SiteKind) -> usize {
        self.sites.iter().filter(|s| s.kind == kind).count()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SurfaceModel = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Atomic step running along the slow (y) axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    /// First column of the raised terrace.
    pub col: usize,
    /// Step height, Å (1.36 Å for a monatomic Si(100) step).
    pub height: f64,
}

/// Recipe for a procedural H-terminated Si(100)-like surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub rows: usize,
    pub cols: usize,
    pub lattice_nm: f64,
    pub steps: Vec<StepSpec>,
    /// Add dimer-row corrugation along x.
    pub dimers: bool,
    pub dimer_corrugation: f64,
    /// Fraction of sites turned into dangling bonds.
    pub defect_density: f64,
    /// Fraction of sites turned into vacancies.
    pub vacancy_density: f64,
    pub seed: u64,
    pub base: Site,
    pub capacitance: f64,
    pub current_noise: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            rows: 40,
            cols: 40,
            lattice_nm: 0.384,
            steps: Vec::new(),
            dimers: false,
            dimer_corrugation: 0.3,
            defect_density: 0.0,
            vacancy_density: 0.0,
            seed: 0,
            base: Site::h_si(),
            capacitance: default_capacitance(),
            current_noise: 0.0,
        }
    }
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<SurfaceModel> {
        if !(0.0..=1.0).contains(&self.defect_density) || !(0.0..=1.0).contains(&self.vacancy_density) {
            return Err(Error::validation("defect densities must lie in [0, 1]"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut surface = SurfaceModel::uniform(self.rows, self.cols, self.lattice_nm, self.base.clone());
        surface.capacitance = self.capacitance;
        surface.current_noise = self.current_noise;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let mut h = self.base.height;
                h += self.steps.iter().filter(|s| c >= s.col).map(|s| s.height).sum::<f64>();
                if self.dimers {
                    // dimer pairs occupy columns (4k, 4k+1); trough between rows
                    h += match c % 4 {
                        0 | 1 => 0.5 * self.dimer_corrugation,
                        _ => -0.5 * self.dimer_corrugation,
                    };
                }
                let idx = surface.index(r, c);
                surface.sites[idx].height = h;
            }
        }
        for idx in 0..surface.sites.len() {
            let draw: f64 = rng.random();
            if draw < self.vacancy_density {
                let h = surface.sites[idx].height - 1.0;
                surface.sites[idx] = Site::vacancy(h);
            } else if draw < self.vacancy_density + self.defect_density {
                surface.depassivate(idx);
            }
        }
        surface.validate()?;
        Ok(surface)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cell(heights: [f64; 4]) -> SurfaceModel {
        let mut s = SurfaceModel::uniform(2, 2, 1.0, Site::h_si());
        for (i, h) in heights.iter().enumerate() {
            s.sites[i].height = *h;
        }
        s
    }

    #[test]
    fn node_query_returns_node_fields() {
        let mut s = unit_cell([0.0, 1.0, 2.0, 3.0]);
        s.sites[3].phi = 3.0;
        let e = s.sample_site(1.0, 1.0).unwrap();
        assert_eq!(e.height, 3.0);
        assert_eq!(e.phi, 3.0);
        assert_eq!(e.nearest, 3);
        assert_eq!(e.conduct, s.sites[3].conduct);
    }

    #[test]
    fn midpoint_between_two_nodes() {
        let s = unit_cell([0.0, 1.0, 0.0, 1.0]);
        assert_eq!(s.sample_site(0.5, 0.0).unwrap().height, 0.5);
    }

    #[test]
    fn bilinear_inside_cell() {
        // corners: (0,0)=0, (x=1,0)=1, (0,y=1)=2, (1,1)=3
        let s = unit_cell([0.0, 1.0, 2.0, 3.0]);
        let h = s.sample_site(0.25, 0.75).unwrap().height;
        assert!((h - 1.75).abs() < 1e-12, "{h}");
    }

    #[test]
    fn out_of_bounds_is_range_error() {
        let s = unit_cell([0.0; 4]);
        assert!(matches!(s.sample_site(1.5, 0.0), Err(Error::Range(_))));
        assert!(matches!(s.sample_site(-0.1, 0.0), Err(Error::Range(_))));
    }

    #[test]
    fn depassivation_scales_site() {
        let mut s = unit_cell([0.0; 4]);
        let before = s.sites[0].clone();
        assert!(s.depassivate(0));
        assert!(!s.depassivate(0));
        assert_eq!(s.sites[0].kind, SiteKind::DanglingBond);
        assert!((s.sites[0].phi - 0.6 * before.phi).abs() < 1e-12);
        assert!((s.sites[0].conduct.eval(1.0) - 5.0 * before.conduct.eval(1.0)).abs() < 1e-18);
    }

    #[test]
    fn vacancy_with_conductance_rejected() {
        let mut s = unit_cell([0.0; 4]);
        s.sites[1].kind = SiteKind::Vacancy;
        assert!(s.validate().is_err());
    }

    #[test]
    fn generator_is_reproducible() {
        let spec = GeneratorSpec {
            dimers: true,
            defect_density: 0.02,
            seed: 7,
            ..Default::default()
        };
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a.count_kind(SiteKind::DanglingBond) > 0);
        let other = GeneratorSpec { seed: 8, ..spec }.generate().unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn steps_raise_terraces() {
        let spec = GeneratorSpec {
            rows: 3,
            cols: 10,
            steps: vec![StepSpec { col: 5, height: 1.36 }],
            ..Default::default()
        };
        let s = spec.generate().unwrap();
        assert_eq!(s.sites[s.index(1, 4)].height, 0.0);
        assert_eq!(s.sites[s.index(1, 5)].height, 1.36);
    }
}
