//! Points on the probability simplex, product beliefs over two binary
//! dimensions, and the small amount of geometry the rest of the crate needs.

use rand::Rng;
use rand_distr::{Distribution as _, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a distribution's entries.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Deviations from a unit sum at or below this are kept verbatim so that
/// construction is idempotent (bit-exact round trips through text).
const RENORMALIZE_ABOVE: f64 = 1e-12;

/// A probability vector over `k >= 2` outcomes, indexed `0..k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates `probs`; a sum within [`SUM_TOLERANCE`] of one is
    /// renormalized, anything further off is rejected.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::TooFewOutcomes(probs.len()));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidEntry { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::BadSum(sum));
        }
        let probs = if (sum - 1.0).abs() > RENORMALIZE_ABOVE {
            probs.into_iter().map(|p| p / sum).collect()
        } else {
            probs
        };
        Ok(Self { probs })
    }

    /// Builds from a solver iterate, clamping round-off negatives to zero.
    pub(crate) fn from_iterate(raw: &[f64]) -> Result<Self> {
        let clamped = raw.iter().map(|&v| if v < 0.0 && v > -1e-9 { 0.0 } else { v }).collect();
        Self::new(clamped)
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::TooFewOutcomes(k));
        }
        Ok(Self { probs: vec![1.0 / k as f64; k] })
    }

    /// The point mass on `outcome`.
    pub fn vertex(k: usize, outcome: usize) -> Result<Self> {
        if outcome >= k {
            return Err(Error::OutcomeOutOfRange { index: outcome, k });
        }
        let mut probs = vec![0.0; k];
        probs[outcome] = 1.0;
        Self::new(probs)
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, outcome: usize) -> f64 {
        self.probs[outcome]
    }

    /// Smallest entry.
    pub fn min_entry(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Euclidean distance to `other` (dimensions must agree).
    pub fn distance(&self, other: &Distribution) -> f64 {
        euclidean(&self.probs, &other.probs)
    }

    pub(crate) fn check_same_k(&self, other: &Distribution) -> Result<()> {
        if self.k() != other.k() {
            return Err(Error::DimensionMismatch { expected: self.k(), got: other.k() });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.probs
    }
}

impl AsRef<[f64]> for Distribution {
    fn as_ref(&self) -> &[f64] {
        &self.probs
    }
}

/// `(1 - alpha) q0 + alpha p`.
pub fn mix(q0: &Distribution, p: &Distribution, alpha: f64) -> Result<Distribution> {
    q0.check_same_k(p)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    let probs = q0.probs.iter().zip(&p.probs).map(|(&a, &b)| (1.0 - alpha) * a + alpha * b).collect();
    Distribution::new(probs)
}

/// Independent beliefs over a Top/Bottom and a Left/Right outcome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductBelief {
    /// Probability of Top.
    pub top: f64,
    /// Probability of Left.
    pub left: f64,
}

impl ProductBelief {
    pub fn new(top: f64, left: f64) -> Result<Self> {
        for v in [top, left] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::ParameterOutOfRange(v));
            }
        }
        Ok(Self { top, left })
    }

    pub fn params(&self) -> [f64; 2] {
        [self.top, self.left]
    }

    /// Joint distribution over `(TL, TR, BL, BR)`.
    pub fn expand(&self) -> Distribution {
        Distribution { probs: expand_params(self.top, self.left).to_vec() }
    }
}

/// Fallible form of [`ProductBelief::expand`] on raw parameters.
pub fn expand(top: f64, left: f64) -> Result<Distribution> {
    Ok(ProductBelief::new(top, left)?.expand())
}

pub(crate) fn expand_params(t: f64, l: f64) -> [f64; 4] {
    [t * l, t * (1.0 - l), (1.0 - t) * l, (1.0 - t) * (1.0 - l)]
}

/// Columns are d q̂ / d top and d q̂ / d left, rows ordered `(TL, TR, BL, BR)`.
pub(crate) fn expand_jacobian(t: f64, l: f64) -> [[f64; 2]; 4] {
    [[l, t], [1.0 - l, -t], [-l, 1.0 - t], [-(1.0 - l), -(1.0 - t)]]
}

/// A nonzero direction in the tangent space of the simplex (or of a
/// parameter space, for product beliefs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentDirection {
    eps: Vec<f64>,
}

impl TangentDirection {
    /// Simplex tangent: components must sum to zero within 1e-12.
    pub fn new(eps: Vec<f64>) -> Result<Self> {
        let sum: f64 = eps.iter().sum();
        if sum.abs() > 1e-12 {
            return Err(Error::Invalid(format!("tangent components sum to {sum}")));
        }
        Self::parameter(eps)
    }

    /// Direction in an unconstrained parameter space (no zero-sum condition).
    pub fn parameter(eps: Vec<f64>) -> Result<Self> {
        if eps.iter().all(|&e| e == 0.0) || eps.iter().any(|e| !e.is_finite()) {
            return Err(Error::Invalid("tangent direction must be finite and nonzero".into()));
        }
        Ok(Self { eps })
    }

    pub fn components(&self) -> &[f64] {
        &self.eps
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance from `q` to the closed segment `[start, end]` in any dimension.
/// `None` if the segment is a single point.
pub(crate) fn segment_distance_raw(q: &[f64], start: &[f64], end: &[f64]) -> Option<f64> {
    let dir: Vec<f64> = end.iter().zip(start).map(|(e, s)| e - s).collect();
    let len2: f64 = dir.iter().map(|d| d * d).sum();
    if len2 == 0.0 {
        return None;
    }
    let dot: f64 = q.iter().zip(start).zip(&dir).map(|((q, s), d)| (q - s) * d).sum();
    let t = (dot / len2).clamp(0.0, 1.0);
    let dist2: f64 = q
        .iter()
        .zip(start)
        .zip(&dir)
        .map(|((q, s), d)| {
            let r = q - (s + t * d);
            r * r
        })
        .sum();
    Some(dist2.sqrt())
}

/// Euclidean distance from `q` to its projection on the segment `[q0, p]`.
pub fn segment_distance(q: &Distribution, q0: &Distribution, p: &Distribution) -> Result<f64> {
    q0.check_same_k(p)?;
    q0.check_same_k(q)?;
    segment_distance_raw(&q.probs, &q0.probs, &p.probs).ok_or(Error::DegenerateSegment)
}

/// Uniform sample from `{q : q_x >= floor, sum q = 1}`.
pub fn sample_floored<R: Rng + ?Sized>(rng: &mut R, k: usize, floor: f64) -> Distribution {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let free = 1.0 - k as f64 * floor;
    let probs: Vec<f64> = draws.iter().map(|d| floor + free * d / total).collect();
    Distribution::new(probs).expect("floored sample is a distribution")
}

/// Uniform sample from the interior of the simplex, kept at least `margin`
/// away from every face.
pub fn sample_interior<R: Rng + ?Sized>(rng: &mut R, k: usize, margin: f64) -> Distribution {
    sample_floored(rng, k, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn construction_validates() {
        assert_eq!(Distribution::new(vec![1.0]), Err(Error::TooFewOutcomes(1)));
        assert!(matches!(Distribution::new(vec![0.5, 0.6]), Err(Error::BadSum(_))));
        assert!(matches!(Distribution::new(vec![1.1, -0.1]), Err(Error::InvalidEntry { index: 1, .. })));
        let near = Distribution::new(vec![0.5, 0.5 + 5e-10]).unwrap();
        let s: f64 = near.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn construction_is_idempotent() {
        let a = Distribution::new(vec![0.1, 0.2, 0.7 + 3e-10]).unwrap();
        let b = Distribution::new(a.probs().to_vec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mix_examples() {
        assert_eq!(mix(&d(&[0.5, 0.5]), &d(&[1.0, 0.0]), 0.0).unwrap(), d(&[0.5, 0.5]));
        assert_eq!(mix(&d(&[0.5, 0.5]), &d(&[1.0, 0.0]), 1.0).unwrap(), d(&[1.0, 0.0]));
        let third = 1.0 / 3.0;
        let m = mix(&d(&[third, third, third]), &d(&[0.6, 0.3, 0.1]), 0.5).unwrap();
        let expected = [(third + 0.6) / 2.0, (third + 0.3) / 2.0, (third + 0.1) / 2.0];
        for (a, b) in m.probs().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((m.get(0) - 0.466_666_666_666_666_6).abs() < 1e-12);
    }

    #[test]
    fn mix_errors() {
        assert!(matches!(
            mix(&d(&[0.5, 0.5]), &d(&[0.2, 0.3, 0.5]), 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
        assert_eq!(mix(&d(&[0.5, 0.5]), &d(&[1.0, 0.0]), 1.5), Err(Error::AlphaOutOfRange(1.5)));
    }

    #[test]
    fn expand_examples() {
        assert_eq!(expand(0.5, 0.5).unwrap().probs(), &[0.25; 4]);
        assert_eq!(expand(1.0, 0.0).unwrap().probs(), &[0.0, 1.0, 0.0, 0.0]);
        let e = expand(0.6, 0.3).unwrap();
        for (a, b) in e.probs().iter().zip([0.18, 0.42, 0.12, 0.28]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(expand(1.2, 0.3).is_err());
    }

    #[test]
    fn segment_distance_examples() {
        let q0 = d(&[1.0, 0.0, 0.0]);
        let p = d(&[0.0, 1.0, 0.0]);
        let q = d(&[0.0, 0.0, 1.0]);
        assert!((segment_distance(&q, &q0, &p).unwrap() - 1.5f64.sqrt()).abs() < 1e-15);
        let on = mix(&q0, &p, 0.3).unwrap();
        assert!(segment_distance(&on, &q0, &p).unwrap() < 1e-15);
        assert_eq!(segment_distance(&q0, &q0, &p).unwrap(), 0.0);
        assert_eq!(segment_distance(&q, &q0, &q0), Err(Error::DegenerateSegment));
    }

    #[test]
    fn tangent_direction_validation() {
        assert!(TangentDirection::new(vec![0.0, 1.0, -1.0]).is_ok());
        assert!(TangentDirection::new(vec![0.0, 1.0, -0.5]).is_err());
        assert!(TangentDirection::new(vec![0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn mixtures_sum_to_one_on_many_samples() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for i in 0..10_000 {
            let k = 2 + i % 4;
            let q0 = sample_floored(&mut rng, k, 0.0);
            let p = sample_floored(&mut rng, k, 0.0);
            let alpha: f64 = rng.random();
            let m = mix(&q0, &p, alpha).unwrap();
            let s: f64 = m.probs().iter().sum();
            assert!((s - 1.0).abs() < SUM_TOLERANCE);
        }
    }

    proptest! {
        #[test]
        fn expand_sums_to_one(t in 0.0f64..=1.0, l in 0.0f64..=1.0) {
            let s: f64 = expand(t, l).unwrap().probs().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn segment_distance_symmetric(seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q = sample_floored(&mut rng, 3, 0.0);
            let a = sample_floored(&mut rng, 3, 0.0);
            let b = sample_floored(&mut rng, 3, 0.0);
            let ab = segment_distance(&q, &a, &b).unwrap();
            let ba = segment_distance(&q, &b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
