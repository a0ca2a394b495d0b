//! Rational transfer functions with a cached discrete biquad realization.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Anything with a complex frequency response.
pub trait FrequencyResponse {
    /// Response at `f_hz`.
    fn frf(&self, f_hz: f64) -> Complex64;
}

impl<F: Fn(f64) -> Complex64> FrequencyResponse for F {
    fn frf(&self, f_hz: f64) -> Complex64 {
        self(f_hz)
    }
}

/// How the bilinear transform is prewarped for one section.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prewarp {
    /// Match at the section's natural frequency, capped at fs/10.
    Natural,
    /// Match at a fixed angular frequency (rad/s).
    Fixed(f64),
    /// Plain Tustin, `s = 2 fs (z-1)/(z+1)`.
    None,
}

/// Continuous second-order section `(n0 s² + n1 s + n2) / (d0 s² + d1 s + d2)`.
///
/// First-order sections have `n0 = d0 = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Section {
    pub num: [f64; 3],
    pub den: [f64; 3],
    pub prewarp: Prewarp,
}

impl Section {
    pub fn new(num: [f64; 3], den: [f64; 3]) -> Self {
        Self {
            num,
            den,
            prewarp: Prewarp::Natural,
        }
    }

    pub fn with_prewarp(mut self, p: Prewarp) -> Self {
        self.prewarp = p;
        self
    }

    /// `ω / (s + ω)`.
    pub fn lowpass1(omega: f64) -> Self {
        Self::new([0.0, 0.0, omega], [0.0, 1.0, omega])
    }

    /// `ω² / (s² + 2ζω s + ω²)`.
    pub fn lowpass2(omega: f64, zeta: f64) -> Self {
        Self::new([0.0, 0.0, omega * omega], [1.0, 2.0 * zeta * omega, omega * omega])
    }

    /// `1 / s`.
    pub fn integrator() -> Self {
        Self::new([0.0, 0.0, 1.0], [0.0, 1.0, 0.0])
    }

    fn is_first_order(&self) -> bool {
        self.num[0] == 0.0 && self.den[0] == 0.0
    }

    fn eval(&self, s: Complex64) -> Complex64 {
        let n = (s * self.num[0] + self.num[1]) * s + self.num[2];
        let d = (s * self.den[0] + self.den[1]) * s + self.den[2];
        n / d
    }

    /// Natural frequency of the denominator (rad/s); zero for a pole at the origin.
    pub fn natural_frequency(&self) -> f64 {
        if self.is_first_order() {
            (self.den[2] / self.den[1]).abs()
        } else {
            (self.den[2] / self.den[0]).abs().sqrt()
        }
    }

    fn validate(&self) -> Result<()> {
        let all = self.num.iter().chain(self.den.iter());
        if all.clone().any(|c| !c.is_finite()) {
            return Err(Error::validation("non-finite section coefficient"));
        }
        let den_order = if self.den[0] != 0.0 {
            2
        } else if self.den[1] != 0.0 {
            1
        } else {
            0
        };
        let num_order = if self.num[0] != 0.0 {
            2
        } else if self.num[1] != 0.0 {
            1
        } else {
            0
        };
        if den_order == 0 && self.den[2] == 0.0 {
            return Err(Error::validation("section denominator is zero"));
        }
        if num_order > den_order {
            return Err(Error::validation("improper section"));
        }
        Ok(())
    }

    fn roots(c: &[f64; 3]) -> Vec<Complex64> {
        if c[0] == 0.0 {
            if c[1] == 0.0 {
                vec![]
            } else {
                vec![Complex64::new(-c[2] / c[1], 0.0)]
            }
        } else {
            let b = c[1] / c[0];
            let q = c[2] / c[0];
            let disc = Complex64::new(b * b / 4.0 - q, 0.0).sqrt();
            vec![-b / 2.0 + disc, -b / 2.0 - disc]
        }
    }

    fn warp_constant(&self, w_natural: f64, fs: f64) -> f64 {
        let t = 1.0 / fs;
        let w = match self.prewarp {
            Prewarp::None => 0.0,
            Prewarp::Fixed(w) => w,
            Prewarp::Natural => w_natural.min(2.0 * PI * fs / 10.0),
        };
        if w > 0.0 {
            w / (w * t / 2.0).tan()
        } else {
            2.0 * fs
        }
    }

    /// Bilinear map. Under [`Prewarp::Natural`] numerator and denominator
    /// are each matched at their own natural frequency, so lightly damped
    /// zeros land as exactly as the poles do.
    fn tustin(&self, fs: f64) -> Biquad {
        let kd = self.warp_constant(self.natural_frequency(), fs);
        let kn = if self.num[0] != 0.0 && self.num[2] != 0.0 {
            self.warp_constant((self.num[2] / self.num[0]).abs().sqrt(), fs)
        } else {
            kd
        };
        if self.is_first_order() {
            // c1 K (1, -1) + c0 (1, 1)
            let b = [self.num[1] * kn + self.num[2], -self.num[1] * kn + self.num[2]];
            let a = [self.den[1] * kd + self.den[2], -self.den[1] * kd + self.den[2]];
            Biquad::new([b[0] / a[0], b[1] / a[0], 0.0], [a[1] / a[0], 0.0])
        } else {
            // c2 K² (1, -2, 1) + c1 K (1, 0, -1) + c0 (1, 2, 1)
            let map = |c: &[f64; 3], k: f64| {
                let k2 = c[0] * k * k;
                let k1 = c[1] * k;
                [k2 + k1 + c[2], -2.0 * k2 + 2.0 * c[2], k2 - k1 + c[2]]
            };
            let b = map(&self.num, kn);
            let a = map(&self.den, kd);
            Biquad::new(
                [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
                [a[1] / a[0], a[2] / a[0]],
            )
        }
    }
}

/// Discrete second-order section in transposed direct form II.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    /// `a1, a2` of `1 + a1 z⁻¹ + a2 z⁻²`.
    pub a: [f64; 2],
    s1: f64,
    s2: f64,
}

impl Biquad {
    pub fn new(b: [f64; 3], a: [f64; 2]) -> Self {
        Self { b, a, s1: 0.0, s2: 0.0 }
    }

    #[inline]
    pub fn step(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.s1;
        self.s1 = self.b[1] * x - self.a[0] * y + self.s2;
        self.s2 = self.b[2] * x - self.a[1] * y;
        y
    }

    pub fn reset(&mut self) {
        self.s1 = 0.0;
        self.s2 = 0.0;
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Put the section at rest for a constant input `x`; returns the output.
    pub fn set_steady_state(&mut self, x: f64) -> f64 {
        let y = self.dc_gain() * x;
        self.s2 = self.b[2] * x - self.a[1] * y;
        self.s1 = self.b[1] * x - self.a[0] * y + self.s2;
        y
    }

    pub fn response(&self, f_hz: f64, fs: f64) -> Complex64 {
        let zi = Complex64::from_polar(1.0, -2.0 * PI * f_hz / fs);
        let n = self.b[0] + zi * (self.b[1] + zi * self.b[2]);
        let d = 1.0 + zi * (self.a[0] + zi * self.a[1]);
        n / d
    }
}

/// Zero-pole-gain form `k · Π(s - z) / Π(s - p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Zpk {
    pub zeros: Vec<Complex64>,
    pub poles: Vec<Complex64>,
    pub gain: f64,
}

/// Continuous transfer function kept as a cascade of sections, with a
/// matching discrete realization at `fs`.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    gain: f64,
    sections: Vec<Section>,
    fs: f64,
    biquads: Vec<Biquad>,
}

impl LinearSystem {
    pub fn new(gain: f64, sections: Vec<Section>, fs: f64) -> Result<Self> {
        if !(fs > 0.0) || !gain.is_finite() {
            return Err(Error::validation("sample rate must be positive and gain finite"));
        }
        for s in &sections {
            s.validate()?;
        }
        let biquads = sections.iter().map(|s| s.tustin(fs)).collect();
        Ok(Self {
            gain,
            sections,
            fs,
            biquads,
        })
    }

    /// Pure gain.
    pub fn gain_only(gain: f64, fs: f64) -> Self {
        Self::new(gain, vec![], fs).expect("finite gain")
    }

    /// Build from zeros, poles and gain. Complex roots must come in
    /// conjugate pairs.
    pub fn from_zpk(zpk: &Zpk, fs: f64) -> Result<Self> {
        if zpk.zeros.len() > zpk.poles.len() {
            return Err(Error::validation("more zeros than poles"));
        }
        let poles = factor(&zpk.poles)?;
        let zeros = factor(&zpk.zeros)?;
        let (mut pq, pl): (Vec<_>, Vec<_>) = poles.into_iter().partition(|f| f[0] != 0.0);
        let (zq, mut zl): (Vec<_>, Vec<_>) = zeros.into_iter().partition(|f| f[0] != 0.0);
        let mut sections = Vec::new();
        for z in zq {
            let p = pq.pop().expect("zero count bounded by pole count");
            sections.push(Section::new(z, p));
        }
        for p in pq.into_iter().chain(pl) {
            let num = zl.pop().unwrap_or([0.0, 0.0, 1.0]);
            sections.push(Section::new(num, p));
        }
        if !zl.is_empty() {
            return Err(Error::validation("could not assign zeros to sections"));
        }
        Self::new(zpk.gain, sections, fs)
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn biquads(&self) -> &[Biquad] {
        &self.biquads
    }

    /// Re-discretize at a new sample rate; state is reset.
    pub fn set_fs(&mut self, fs: f64) -> Result<()> {
        *self = Self::new(self.gain, self.sections.clone(), fs)?;
        Ok(())
    }

    /// Series connection `self · other`.
    pub fn series(&self, other: &LinearSystem) -> Result<Self> {
        let mut s = self.sections.clone();
        s.extend_from_slice(&other.sections);
        Self::new(self.gain * other.gain, s, self.fs)
    }

    pub fn order(&self) -> usize {
        self.sections
            .iter()
            .map(|s| if s.is_first_order() { 1 } else { 2 })
            .sum()
    }

    pub fn zpk(&self) -> Zpk {
        let mut zeros = Vec::new();
        let mut poles = Vec::new();
        let mut gain = self.gain;
        for s in &self.sections {
            let lead = |c: &[f64; 3]| c.iter().copied().find(|&x| x != 0.0).unwrap_or(0.0);
            gain *= lead(&s.num) / lead(&s.den);
            zeros.extend(Section::roots(&s.num));
            poles.extend(Section::roots(&s.den));
        }
        Zpk { zeros, poles, gain }
    }

    pub fn is_stable(&self) -> bool {
        self.zpk().poles.iter().all(|p| p.re < 0.0)
    }

    /// Continuous response at `f_hz`.
    pub fn response(&self, f_hz: f64) -> Complex64 {
        let s = Complex64::new(0.0, 2.0 * PI * f_hz);
        self.sections
            .iter()
            .fold(Complex64::new(self.gain, 0.0), |acc, sec| acc * sec.eval(s))
    }

    /// Response of the discrete realization at `f_hz`.
    pub fn discrete_response(&self, f_hz: f64) -> Complex64 {
        self.biquads
            .iter()
            .fold(Complex64::new(self.gain, 0.0), |acc, b| acc * b.response(f_hz, self.fs))
    }

    /// Continuous gain at s = 0 (infinite for integrating systems).
    pub fn dc_gain(&self) -> f64 {
        self.response(0.0).re
    }

    #[inline]
    pub fn step(&mut self, u: f64) -> f64 {
        let mut x = self.gain * u;
        for b in &mut self.biquads {
            x = b.step(x);
        }
        x
    }

    pub fn reset(&mut self) {
        self.biquads.iter_mut().for_each(Biquad::reset);
    }

    /// Initialize every section at rest for a constant input `u`; returns the output.
    pub fn set_steady_state(&mut self, u: f64) -> f64 {
        let mut x = self.gain * u;
        for b in &mut self.biquads {
            x = b.set_steady_state(x);
        }
        x
    }

    /// Dense discrete state-space `(A, B, C, D)` of the cascade.
    pub fn state_space(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
        let n = 2 * self.biquads.len();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        let mut c = DVector::zeros(n);
        let mut d = self.gain;
        for (i, q) in self.biquads.iter().enumerate() {
            let j = 2 * i;
            // x' = A_q x + B_q u_q, y_q = x[0] + b0 u_q, with u_q = C x_prev + D u
            let bq = [q.b[1] - q.a[0] * q.b[0], q.b[2] - q.a[1] * q.b[0]];
            a[(j, j)] = -q.a[0];
            a[(j, j + 1)] = 1.0;
            a[(j + 1, j)] = -q.a[1];
            for col in 0..j {
                a[(j, col)] = bq[0] * c[col];
                a[(j + 1, col)] = bq[1] * c[col];
            }
            b[j] = bq[0] * d;
            b[j + 1] = bq[1] * d;
            for col in 0..j {
                c[col] *= q.b[0];
            }
            c[j] = 1.0;
            d *= q.b[0];
        }
        (a, b, c, d)
    }

    /// Current internal state, in the ordering used by [`Self::state_space`].
    pub fn state(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.biquads.len(),
            self.biquads.iter().flat_map(|b| [b.s1, b.s2]),
        )
    }
}

impl FrequencyResponse for LinearSystem {
    fn frf(&self, f_hz: f64) -> Complex64 {
        self.response(f_hz)
    }
}

/// Group roots into monic real factors: quadratics for conjugate pairs and
/// pairs of real roots, a linear factor for a leftover real root.
fn factor(roots: &[Complex64]) -> Result<Vec<[f64; 3]>> {
    let tol = 1e-9;
    let mut real: Vec<f64> = Vec::new();
    let mut out = Vec::new();
    let mut used = vec![false; roots.len()];
    for i in 0..roots.len() {
        if used[i] {
            continue;
        }
        let r = roots[i];
        if r.im.abs() <= tol * r.norm().max(1.0) {
            real.push(r.re);
            used[i] = true;
            continue;
        }
        let j = (i + 1..roots.len())
            .filter(|&j| !used[j])
            .min_by(|&a, &b| {
                (roots[a] - r.conj())
                    .norm()
                    .total_cmp(&(roots[b] - r.conj()).norm())
            })
            .filter(|&j| (roots[j] - r.conj()).norm() <= 1e-6 * r.norm().max(1.0))
            .ok_or_else(|| Error::validation("complex root without conjugate"))?;
        used[i] = true;
        used[j] = true;
        out.push([1.0, -2.0 * r.re, r.norm_sqr()]);
    }
    real.sort_by(f64::total_cmp);
    let mut chunks = real.chunks_exact(2);
    for p in &mut chunks {
        out.push([1.0, -(p[0] + p[1]), p[0] * p[1]]);
    }
    if let [r] = chunks.remainder() {
        out.push([0.0, 1.0, -r]);
    }
    Ok(out)
}

/// `20 log10 |h|`.
pub fn db(h: Complex64) -> f64 {
    20.0 * h.norm().log10()
}

/// Phase in degrees.
pub fn phase_deg(h: Complex64) -> f64 {
    h.arg().to_degrees()
}

/// Logarithmically spaced frequencies, inclusive.
pub fn logspace(f0: f64, f1: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![f0];
    }
    let (l0, l1) = (f0.ln(), f1.ln());
    (0..n)
        .map(|i| (l0 + (l1 - l0) * i as f64 / (n - 1) as f64).exp())
        .collect()
}
