//! Normal fits of score populations and Weitzman's overlapping coefficient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid size of the composite Simpson rule (an odd number of nodes).
pub const SIMPSON_NODES: usize = 4097;

/// Distributions narrower than this are treated as point masses.
pub const POINT_MASS_STD: f64 = 1e-9;

/// Normal distribution fitted by moments; `std` is the population value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalFit {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl NormalFit {
    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        (-0.5 * z * z).exp() / (self.std * (2.0 * std::f64::consts::PI).sqrt())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        standard_normal_cdf((x - self.mean) / self.std)
    }

    fn is_point_mass(&self) -> bool {
        self.std < POINT_MASS_STD
    }
}

pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Overlapping coefficient in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OvlValue(f64);

impl OvlValue {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::Input(format!("overlap {value} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Mean and population standard deviation of at least two finite samples.
pub fn fit_normal(samples: &[f64]) -> Result<NormalFit> {
    fit_normal_chunks(std::iter::once(samples))
}

/// [`fit_normal`] over the concatenation of several slices, without copying.
pub fn fit_normal_chunks<'a, I>(chunks: I) -> Result<NormalFit>
where
    I: IntoIterator<Item = &'a [f64]> + Clone,
{
    let mut n = 0usize;
    let mut sum = 0.0;
    for chunk in chunks.clone() {
        for &v in chunk {
            if !v.is_finite() {
                return Err(Error::Fit(format!("non-finite sample {v}")));
            }
            sum += v;
            n += 1;
        }
    }
    if n < 2 {
        return Err(Error::Fit(format!("{n} samples, need at least 2")));
    }
    let mean = sum / n as f64;
    let mut sq = 0.0;
    for chunk in chunks {
        sq += chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    Ok(NormalFit {
        mean,
        std: (sq / n as f64).sqrt(),
        n,
    })
}

/// `integral over [k0, k1] of min(p(x), q(x)) dx` for two fitted normals.
///
/// Integrated with composite Simpson on [`SIMPSON_NODES`] uniform nodes.
/// A fit narrower than [`POINT_MASS_STD`] is a point mass: two coincident
/// point masses overlap fully, otherwise the overlap is the other fit's
/// probability within `POINT_MASS_STD` of the point.
pub fn ovl_weitzman(p: &NormalFit, q: &NormalFit, k0: f64, k1: f64) -> Result<OvlValue> {
    if !(k0 < k1) || !k0.is_finite() || !k1.is_finite() {
        return Err(Error::InvalidBounds { k0, k1 });
    }
    let in_bounds = |m: f64| (k0..=k1).contains(&m);
    let value = match (p.is_point_mass(), q.is_point_mass()) {
        (true, true) => {
            let same = (p.mean - q.mean).abs() <= POINT_MASS_STD;
            if same && in_bounds(p.mean) {
                1.0
            } else {
                0.0
            }
        }
        (true, false) => point_mass_overlap(p.mean, q, k0, k1),
        (false, true) => point_mass_overlap(q.mean, p, k0, k1),
        (false, false) => simpson(|x| p.pdf(x).min(q.pdf(x)), k0, k1),
    };
    OvlValue::new(value.clamp(0.0, 1.0))
}

fn point_mass_overlap(at: f64, other: &NormalFit, k0: f64, k1: f64) -> f64 {
    if !(k0..=k1).contains(&at) {
        return 0.0;
    }
    let lo = (at - POINT_MASS_STD).max(k0);
    let hi = (at + POINT_MASS_STD).min(k1);
    (other.cdf(hi) - other.cdf(lo)).max(0.0)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let intervals = SIMPSON_NODES - 1;
    let h = (b - a) / intervals as f64;
    let mut acc = f(a) + f(b);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}
