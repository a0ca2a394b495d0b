use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Highest supported degree of a conductance polynomial.
pub const MAX_DEGREE: usize = 7;

/// Polynomial `L(V) = c0 + c1 V + ... + c7 V^7` in amperes per volt^k.
///
/// Stored in a fixed array so that interpolating between lattice nodes in
/// the per-sample loop never allocates.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Conductance {
    coeffs: [f64; MAX_DEGREE + 1],
}

impl Conductance {
    pub fn new(coeffs: &[f64]) -> Result<Self, Error> {
        if coeffs.len() > MAX_DEGREE + 1 {
            return Err(Error::validation(format!(
                "conductance polynomial degree {} exceeds {MAX_DEGREE}",
                coeffs.len() - 1
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::validation("non-finite conductance coefficient"));
        }
        let mut c = [0.0; MAX_DEGREE + 1];
        c[..coeffs.len()].copy_from_slice(coeffs);
        Ok(Self { coeffs: c })
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn coeffs(&self) -> &[f64; MAX_DEGREE + 1] {
        &self.coeffs
    }

    /// Index of the highest non-zero coefficient (0 for the zero polynomial).
    pub fn degree(&self) -> usize {
        self.coeffs.iter().rposition(|&c| c != 0.0).unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    pub fn eval(&self, v: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * v + c)
    }

    /// k-th derivative evaluated at `v`.
    pub fn derivative(&self, k: usize, v: f64) -> f64 {
        if k > MAX_DEGREE {
            return 0.0;
        }
        let mut acc = 0.0;
        for j in (k..=MAX_DEGREE).rev() {
            let falling: f64 = ((j - k + 1)..=j).map(|m| m as f64).product();
            acc = acc * v + self.coeffs[j] * falling;
        }
        acc
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut c = self.coeffs;
        c.iter_mut().for_each(|x| *x *= factor);
        Self { coeffs: c }
    }

    /// `a·self + b·other`, coefficient-wise.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        let mut c = [0.0; MAX_DEGREE + 1];
        for (i, out) in c.iter_mut().enumerate() {
            *out = a * self.coeffs[i] + b * other.coeffs[i];
        }
        Self { coeffs: c }
    }
}

impl TryFrom<Vec<f64>> for Conductance {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Conductance::new(&v)
    }
}

impl From<Conductance> for Vec<f64> {
    fn from(c: Conductance) -> Self {
        let n = c.coeffs.iter().rposition(|&x| x != 0.0).map_or(0, |i| i + 1);
        c.coeffs[..n].to_vec()
    }
}
