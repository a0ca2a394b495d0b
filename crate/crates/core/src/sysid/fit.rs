//! Rational fitting by iterative pole relocation (vector fitting).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::{FrfData, COHERENCE_GATE};
use crate::error::{Error, Result};
use crate::linear::{db, FrequencyResponse, LinearSystem, Zpk};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub order: usize,
    /// Fit band, Hz. `None` uses the whole grid.
    pub band: Option<(f64, f64)>,
    /// Whole-sample delay removed from the data before fitting.
    pub delay_samples: f64,
    pub max_iter: usize,
    /// Sample rate given to the fitted system.
    pub fs: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            order: 6,
            band: None,
            delay_samples: 0.0,
            max_iter: 30,
            fs: 100e3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub system: LinearSystem,
    pub order: usize,
    pub rmse_db: f64,
    pub delay_samples: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Grid the fit and its error were computed on.
    pub freq_hz: Vec<f64>,
}

impl FitResult {
    /// Fitted response including the removed delay.
    pub fn response(&self, f_hz: f64) -> Complex64 {
        self.system.response(f_hz) * Complex64::from_polar(1.0, -2.0 * PI * f_hz * self.delay_samples / self.system.fs())
    }

    /// JSON report: poles, zeros, gain, rmse.
    pub fn report(&self) -> serde_json::Value {
        let zpk = self.system.zpk();
        let pair = |v: &[Complex64]| v.iter().map(|c| [c.re, c.im]).collect::<Vec<_>>();
        serde_json::json!({
            "order": self.order,
            "poles": pair(&zpk.poles),
            "zeros": pair(&zpk.zeros),
            "gain": zpk.gain,
            "delay_samples": self.delay_samples,
            "rmse_db": self.rmse_db,
            "iterations": self.iterations,
            "converged": self.converged,
            "band_hz": [self.freq_hz.first(), self.freq_hz.last()],
        })
    }
}

/// RMS of the dB magnitude difference between `model` and `data` on `freq_hz`.
pub fn rmse_db(model: &dyn FrequencyResponse, freq_hz: &[f64], data: &[Complex64]) -> f64 {
    if freq_hz.is_empty() {
        return 0.0;
    }
    let s: f64 = freq_hz
        .iter()
        .zip(data)
        .map(|(&f, &h)| (db(model.frf(f)) - db(h)).powi(2))
        .sum();
    (s / freq_hz.len() as f64).sqrt()
}

pub fn fit_rational(frf: &FrfData, order: usize, band: Option<(f64, f64)>) -> Result<FitResult> {
    fit_rational_with(
        frf,
        &FitOptions {
            order,
            band,
            ..Default::default()
        },
    )
}

/// Pole set stored with one representative per conjugate pair (`im > 0`).
#[derive(Clone, Debug)]
struct Poles(Vec<Complex64>);

impl Poles {
    fn order(&self) -> usize {
        self.0.iter().map(|p| if p.im == 0.0 { 1 } else { 2 }).sum()
    }

    /// Real basis functions at `s`: `1/(s-p)` for a real pole and the pair
    /// `1/(s-p) + 1/(s-p̄)`, `j/(s-p) - j/(s-p̄)` for a complex one.
    fn basis(&self, s: Complex64, out: &mut Vec<Complex64>) {
        out.clear();
        let j = Complex64::i();
        for &p in &self.0 {
            if p.im == 0.0 {
                out.push(1.0 / (s - p));
            } else {
                let a = 1.0 / (s - p);
                let b = 1.0 / (s - p.conj());
                out.push(a + b);
                out.push(j * a - j * b);
            }
        }
    }

    /// Real state matrix and input vector matching [`Self::basis`].
    fn realization(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.order();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        let mut k = 0;
        for &p in &self.0 {
            if p.im == 0.0 {
                a[(k, k)] = p.re;
                b[k] = 1.0;
                k += 1;
            } else {
                a[(k, k)] = p.re;
                a[(k, k + 1)] = p.im;
                a[(k + 1, k)] = -p.im;
                a[(k + 1, k + 1)] = p.re;
                b[k] = 2.0;
                k += 2;
            }
        }
        (a, b)
    }

    /// Collect eigenvalues of a real matrix, reflecting unstable ones.
    fn from_eigen(m: DMatrix<f64>) -> Self {
        let eig = m.complex_eigenvalues();
        let scale = eig.iter().map(|e| e.norm()).fold(1e-300, f64::max);
        let mut out: Vec<Complex64> = Vec::new();
        for e in eig.iter() {
            let mut p = Complex64::new(e.re, e.im);
            if p.re > 0.0 {
                p.re = -p.re;
            }
            if p.re == 0.0 {
                p.re = -1e-9 * scale;
            }
            if p.im.abs() <= 1e-10 * scale {
                out.push(Complex64::new(p.re, 0.0));
            } else if p.im > 0.0 {
                out.push(p);
            }
        }
        Self(out)
    }

    /// Residues per complex pole (full list, conjugates included).
    fn expand(&self, c: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let mut poles = Vec::new();
        let mut res = Vec::new();
        let mut k = 0;
        for &p in &self.0 {
            if p.im == 0.0 {
                poles.push(p);
                res.push(Complex64::new(c[k], 0.0));
                k += 1;
            } else {
                let r = Complex64::new(c[k], c[k + 1]);
                poles.push(p);
                res.push(r);
                poles.push(p.conj());
                res.push(r.conj());
                k += 2;
            }
        }
        (poles, res)
    }
}

fn starting_poles(order: usize, w_lo: f64, w_hi: f64) -> Poles {
    let pairs = order / 2;
    let mut v = Vec::new();
    for i in 0..pairs {
        let beta = if pairs == 1 {
            (w_lo * w_hi).sqrt()
        } else {
            w_lo * (w_hi / w_lo).powf(i as f64 / (pairs - 1) as f64)
        };
        v.push(Complex64::new(-beta / 100.0, beta));
    }
    if order % 2 == 1 {
        v.push(Complex64::new(-(w_lo * w_hi).sqrt(), 0.0));
    }
    Poles(v)
}

fn solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    // Column equilibration before the SVD.
    let norms: Vec<f64> = a.column_iter().map(|c| c.norm().max(1e-300)).collect();
    let mut a = a;
    for (j, n) in norms.iter().enumerate() {
        a.column_mut(j).scale_mut(1.0 / n);
    }
    let svd = a.svd(true, true);
    let mut x = svd
        .solve(&b, 1e-13)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    for (j, n) in norms.iter().enumerate() {
        x[j] /= n;
    }
    Ok(x)
}

/// Residues and direct term for fixed poles.
fn fit_residues(poles: &Poles, s: &[Complex64], h: &[Complex64], w: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = poles.order();
    let k = s.len();
    let mut a = DMatrix::zeros(2 * k, n + 1);
    let mut b = DVector::zeros(2 * k);
    let mut phi = Vec::with_capacity(n);
    for i in 0..k {
        poles.basis(s[i], &mut phi);
        for (j, p) in phi.iter().enumerate() {
            a[(2 * i, j)] = w[i] * p.re;
            a[(2 * i + 1, j)] = w[i] * p.im;
        }
        a[(2 * i, n)] = w[i];
        b[2 * i] = w[i] * h[i].re;
        b[2 * i + 1] = w[i] * h[i].im;
    }
    let x = solve(a, b)?;
    Ok((x.as_slice()[..n].to_vec(), x[n]))
}

/// One relocation step: fit σ(s) and return its zeros as new poles.
fn relocate(poles: &Poles, s: &[Complex64], h: &[Complex64], w: &[f64]) -> Result<Poles> {
    let n = poles.order();
    let k = s.len();
    let mut a = DMatrix::zeros(2 * k, 2 * n + 1);
    let mut b = DVector::zeros(2 * k);
    let mut phi = Vec::with_capacity(n);
    for i in 0..k {
        poles.basis(s[i], &mut phi);
        for (j, p) in phi.iter().enumerate() {
            let q = -h[i] * p;
            a[(2 * i, j)] = w[i] * p.re;
            a[(2 * i + 1, j)] = w[i] * p.im;
            a[(2 * i, n + 1 + j)] = w[i] * q.re;
            a[(2 * i + 1, n + 1 + j)] = w[i] * q.im;
        }
        a[(2 * i, n)] = w[i];
        b[2 * i] = w[i] * h[i].re;
        b[2 * i + 1] = w[i] * h[i].im;
    }
    let x = solve(a, b)?;
    let ct = DVector::from_column_slice(&x.as_slice()[n + 1..]);
    let (am, bm) = poles.realization();
    let next = Poles::from_eigen(am - bm * ct.transpose());
    if next.order() != n {
        return Err(Error::Numerical("pole relocation lost a pole".into()));
    }
    Ok(next)
}

fn poly_mul(p: &[Complex64], root: Complex64) -> Vec<Complex64> {
    // p in ascending powers, times (s - root).
    let mut out = vec![Complex64::default(); p.len() + 1];
    for (i, &c) in p.iter().enumerate() {
        out[i + 1] += c;
        out[i] -= c * root;
    }
    out
}

/// Real polynomial roots (ascending coefficients) via the companion matrix.
fn real_poly_roots(c: &[f64]) -> Vec<Complex64> {
    let deg = c.len() - 1;
    if deg == 0 {
        return vec![];
    }
    let lead = c[deg];
    let mut m = DMatrix::zeros(deg, deg);
    for i in 1..deg {
        m[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        m[(i, deg - 1)] = -c[i] / lead;
    }
    let eig = m.complex_eigenvalues();
    let scale = eig.iter().map(|e| e.norm()).fold(1e-300, f64::max);
    let mut out = Vec::new();
    for e in eig.iter() {
        if e.im.abs() <= 1e-10 * scale {
            out.push(Complex64::new(e.re, 0.0));
        } else if e.im > 0.0 {
            out.push(Complex64::new(e.re, e.im));
            out.push(Complex64::new(e.re, -e.im));
        }
    }
    out
}

/// Pole-residue model to zero-pole-gain, all in normalized frequency.
fn to_zpk(poles: &Poles, c: &[f64], d: f64) -> Zpk {
    let (p, r) = poles.expand(c);
    let mut den = vec![Complex64::new(1.0, 0.0)];
    for &pk in &p {
        den = poly_mul(&den, pk);
    }
    let mut num: Vec<Complex64> = den.iter().map(|x| x * d).collect();
    for k in 0..p.len() {
        let mut term = vec![r[k]];
        for (j, &pj) in p.iter().enumerate() {
            if j != k {
                term = poly_mul(&term, pj);
            }
        }
        for (i, t) in term.into_iter().enumerate() {
            num[i] += t;
        }
    }
    let mut num: Vec<f64> = num.iter().map(|x| x.re).collect();
    let big = num.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    while num.len() > 1 && num.last().unwrap().abs() <= 1e-11 * big {
        num.pop();
    }
    let gain = *num.last().unwrap();
    Zpk {
        zeros: real_poly_roots(&num),
        poles: p,
        gain,
    }
}

/// Fit a stable rational model of `opts.order` poles to the coherent
/// points of `frf` inside the band.
pub fn fit_rational_with(frf: &FrfData, opts: &FitOptions) -> Result<FitResult> {
    frf.validate()?;
    if opts.order == 0 {
        return Err(Error::validation("fit order must be at least 1"));
    }
    let (lo, hi) = opts.band.unwrap_or((f64::MIN_POSITIVE, f64::INFINITY));
    let mut freq = Vec::new();
    let mut data = Vec::new();
    for i in 0..frf.len() {
        let f = frf.freq_hz[i];
        if f >= lo && f <= hi && frf.coherence[i] >= COHERENCE_GATE && f > 0.0 {
            let undelay = Complex64::from_polar(1.0, 2.0 * PI * f * opts.delay_samples / opts.fs);
            freq.push(f);
            data.push(frf.response[i] * undelay);
        }
    }
    if 2 * freq.len() < 2 * opts.order + 1 {
        return Err(Error::validation(format!(
            "{} usable points cannot determine an order-{} model",
            freq.len(),
            opts.order
        )));
    }
    let w_lo = 2.0 * PI * freq[0];
    let w_hi = 2.0 * PI * freq[freq.len() - 1];
    let wn = (w_lo * w_hi).sqrt();
    let s: Vec<Complex64> = freq.iter().map(|f| Complex64::new(0.0, 2.0 * PI * f / wn)).collect();
    let w: Vec<f64> = data.iter().map(|h| 1.0 / h.norm().max(1e-300)).collect();

    let build = |poles: &Poles| -> Result<(LinearSystem, f64)> {
        let (c, d) = fit_residues(poles, &s, &data, &w)?;
        let z = to_zpk(poles, &c, d);
        let rel = z.poles.len() as i32 - z.zeros.len() as i32;
        let zpk = Zpk {
            zeros: z.zeros.iter().map(|x| x * wn).collect(),
            poles: z.poles.iter().map(|x| x * wn).collect(),
            gain: z.gain * wn.powi(rel),
        };
        let sys = LinearSystem::from_zpk(&zpk, opts.fs)?;
        let e = rmse_db(&sys, &freq, &data);
        Ok((sys, e))
    };

    let mut poles = starting_poles(opts.order, w_lo / wn, w_hi / wn);
    let mut best: Option<(LinearSystem, f64)> = None;
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let next = match relocate(&poles, &s, &data, &w) {
            Ok(p) => p,
            Err(_) => break,
        };
        let shift = pole_shift(&poles, &next);
        poles = next;
        if let Ok((sys, e)) = build(&poles) {
            if best.as_ref().is_none_or(|b| e < b.1) {
                best = Some((sys, e));
            }
        }
        if shift < 1e-10 {
            converged = true;
            break;
        }
    }
    let (system, rmse) = best.ok_or_else(|| Error::Numerical("no usable fit".into()))?;
    if !system.is_stable() {
        return Err(Error::Numerical("fitted model is unstable".into()));
    }
    Ok(FitResult {
        system,
        order: opts.order,
        rmse_db: rmse,
        delay_samples: opts.delay_samples,
        iterations,
        converged,
        freq_hz: freq,
    })
}

fn pole_shift(a: &Poles, b: &Poles) -> f64 {
    let mut x: Vec<Complex64> = a.0.clone();
    let mut y: Vec<Complex64> = b.0.clone();
    if x.len() != y.len() {
        return f64::INFINITY;
    }
    let key = |p: &Complex64| (p.im, p.re);
    x.sort_by(|p, q| key(p).partial_cmp(&key(q)).unwrap());
    y.sort_by(|p, q| key(p).partial_cmp(&key(q)).unwrap());
    x.iter()
        .zip(&y)
        .map(|(p, q)| (p - q).norm() / p.norm().max(1e-300))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{logspace, Section};

    fn sixth_order() -> LinearSystem {
        let w = |f: f64| 2.0 * PI * f;
        LinearSystem::new(
            3.0,
            vec![
                Section::lowpass2(w(400.0), 0.2),
                Section::new([1.0, 2.0 * 0.05 * w(1500.0), w(1500.0).powi(2)], [1.0, 2.0 * 0.02 * w(1800.0), w(1800.0).powi(2)]),
                Section::lowpass2(w(3500.0), 0.04),
            ],
            100e3,
        )
        .unwrap()
    }

    #[test]
    fn self_fit_at_true_order() {
        let g = sixth_order();
        let f = logspace(100.0, 4500.0, 200);
        let frf = FrfData::sample(|x| g.response(x), &f).unwrap();
        let fit = fit_rational(&frf, 6, None).unwrap();
        assert!(fit.rmse_db < 0.05, "{}", fit.rmse_db);
        assert!(fit.system.is_stable());
        for &x in &f {
            let r = fit.response(x) / g.response(x);
            assert!((r - 1.0).norm() < 1e-3, "{x}: {r}");
        }
    }

    #[test]
    fn rmse_shrinks_with_order() {
        let g = sixth_order();
        let f = logspace(100.0, 4500.0, 200);
        let frf = FrfData::sample(|x| g.response(x), &f).unwrap();
        let e: Vec<f64> = [2, 4, 6].iter().map(|&n| fit_rational(&frf, n, None).unwrap().rmse_db).collect();
        assert!(e[0] >= e[1] && e[1] >= e[2], "{e:?}");
        assert!(e[0] > 1.0);
    }

    #[test]
    fn rmse_oracles() {
        let f = [10.0, 20.0];
        let h = |_: f64| Complex64::new(2.0, 0.0);
        let one = [Complex64::new(1.0, 0.0); 2];
        assert!((rmse_db(&h, &f, &one) - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert_eq!(rmse_db(&h, &f, &[Complex64::new(2.0, 0.0); 2]), 0.0);
        let r = rmse_db(&h, &f[..1], &[Complex64::new(0.5, 0.0)]);
        assert!((r - 20.0 * 4f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn polynomial_roots() {
        // (s+1)(s²+s+4) = s³ + 2s² + 5s + 4
        let mut r = real_poly_roots(&[4.0, 5.0, 2.0, 1.0]);
        r.sort_by(|a, b| a.im.partial_cmp(&b.im).unwrap());
        assert!((r[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-12);
        assert!((r[2] - Complex64::new(-0.5, 15f64.sqrt() / 2.0)).norm() < 1e-12);
    }
}
