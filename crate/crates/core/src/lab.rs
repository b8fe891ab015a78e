//! Experiments around budget-constrained truthfulness: tangent directions
//! of score level sets, the two-outcome midpoint property, searches for
//! optimal constrained reports that leave the segment toward the belief,
//! double-tight reports, and neighborhoods of beliefs that all share one
//! optimal report. Findings are packaged as JSON-serializable certificates
//! that [`verify_certificate`] can check independently.

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{
    natural_budget, oracle_constrained, oracle_constrained_product, raw_budget, solve_constrained,
    solve_constrained_product,
};
use crate::error::{Error, Result};
use crate::scoring::{check_domain, Rule, RuleSpec, ScoringRule};
use crate::simplex::{
    expand_jacobian, mix, sample_floored, segment_distance_raw, Distribution, ProductBelief, TangentDirection,
};

/// Default segment-deviation threshold for certificates.
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

/// Accuracy the constrained solver is trusted to; thresholds must exceed it.
pub const SOLVER_TOLERANCE: f64 = 1e-6;

/// Oracle lattice spacing used to confirm certificates.
pub const CERTIFICATE_RESOLUTION: f64 = 1e-3;

/// Two optimal reports count as the same within this distance.
pub const REPORT_TOLERANCE: f64 = 1e-4;

/// Required accuracy of the two tight budget constraints.
pub const TIGHT_TOLERANCE: f64 = 1e-8;

const CHUNK: usize = 256;

fn gradient<R: ScoringRule + ?Sized>(rule: &R, q: &[f64], outcome: usize) -> Vec<f64> {
    let mut g = vec![0.0; q.len()];
    rule.gradient_into(q, outcome, &mut g);
    g
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn scale_to_unit_max(v: &mut [f64]) {
    let m = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    v.iter_mut().for_each(|x| *x /= m);
}

fn check_interior<R: ScoringRule + ?Sized>(rule: &R, q: &[f64]) -> Result<()> {
    check_domain(rule, q)?;
    if q.iter().any(|&v| v <= rule.floor()) {
        return Err(Error::OnBoundary);
    }
    Ok(())
}

fn check_outcome(outcome: usize, k: usize) -> Result<()> {
    if outcome >= k {
        return Err(Error::OutcomeOutOfRange { index: outcome, k });
    }
    Ok(())
}

/// Requires at least one strictly positive and one strictly negative entry.
fn check_signs(derivs: &[(usize, f64)]) -> Result<()> {
    let scale = derivs.iter().fold(0.0f64, |a, (_, d)| a.max(d.abs()));
    let tol = 1e-12 * scale.max(1.0);
    let pos = derivs.iter().any(|(_, d)| *d > tol);
    let neg = derivs.iter().any(|(_, d)| *d < -tol);
    if pos && neg {
        Ok(())
    } else {
        Err(Error::SignStructure(format!("remaining directional derivatives {derivs:?}")))
    }
}

/// A direction `eps` with `sum eps = 0` along which `S_outcome` is
/// stationary at `q`, scaled so its largest entry has magnitude one.
///
/// Among the edge directions `e_i - e_j` projected onto the level-set
/// tangent space, the one with the largest residual is used. The remaining
/// components must then change with mixed signs along `eps`; otherwise an
/// [`Error::SignStructure`] is returned.
pub fn tangent_direction<R: ScoringRule + ?Sized>(
    rule: &R,
    q: &Distribution,
    outcome: usize,
) -> Result<TangentDirection> {
    let k = q.k();
    if k != rule.outcomes() {
        return Err(Error::DimensionMismatch { expected: rule.outcomes(), got: k });
    }
    if k < 3 {
        return Err(Error::Invalid("level-set tangents need at least 3 outcomes".into()));
    }
    check_outcome(outcome, k)?;
    check_interior(rule, q.probs())?;
    let raw = gradient(rule, q.probs(), outcome);
    let g = centered(&raw);
    let gn = norm(&g);
    if gn < 1e-12 {
        return Err(Error::DegenerateGradient);
    }
    let u: Vec<f64> = g.iter().map(|v| v / gn).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..k {
        for j in i + 1..k {
            let mut v = vec![0.0; k];
            v[i] = 1.0;
            v[j] = -1.0;
            let along = dot(&v, &u);
            v.iter_mut().zip(&u).for_each(|(a, b)| *a -= along * b);
            let n = norm(&v);
            if best.as_ref().is_none_or(|(bn, _)| n > *bn + 1e-12) {
                best = Some((n, v));
            }
        }
    }
    let mut eps = centered(&best.expect("k >= 3 gives candidates").1);
    scale_to_unit_max(&mut eps);
    let along = dot(&eps, &raw);
    if along.abs() > 1e-9 {
        return Err(Error::Invalid(format!("tangent residual {along}")));
    }
    let derivs: Vec<(usize, f64)> =
        (0..k).filter(|&y| y != outcome).map(|y| (y, dot(&eps, &gradient(rule, q.probs(), y)))).collect();
    check_signs(&derivs)?;
    TangentDirection::new(eps)
}

/// Parameter-space analogue of [`tangent_direction`] for product beliefs:
/// `eps = (-g_left, g_top)` where `g` is the gradient of `S_outcome(q̂)` in
/// `(top, left)`.
pub fn tangent_direction_product<R: ScoringRule + ?Sized>(
    rule: &R,
    belief: &ProductBelief,
    outcome: usize,
) -> Result<TangentDirection> {
    if rule.outcomes() != 4 {
        return Err(Error::DimensionMismatch { expected: 4, got: rule.outcomes() });
    }
    check_outcome(outcome, 4)?;
    let [t, l] = belief.params();
    if !(t > 0.0 && t < 1.0 && l > 0.0 && l < 1.0) {
        return Err(Error::OnBoundary);
    }
    let q = belief.expand();
    check_interior(rule, q.probs())?;
    let jac = expand_jacobian(t, l);
    let pull = |x: usize| -> [f64; 2] {
        let g = gradient(rule, q.probs(), x);
        let mut out = [0.0; 2];
        for (row, gx) in jac.iter().zip(&g) {
            out[0] += row[0] * gx;
            out[1] += row[1] * gx;
        }
        out
    };
    let g = pull(outcome);
    if g[0].hypot(g[1]) < 1e-12 {
        return Err(Error::DegenerateGradient);
    }
    let mut eps = vec![-g[1], g[0]];
    scale_to_unit_max(&mut eps);
    let derivs: Vec<(usize, f64)> = (0..4)
        .filter(|&y| y != outcome)
        .map(|y| {
            let gy = pull(y);
            (y, eps[0] * gy[0] + eps[1] * gy[1])
        })
        .collect();
    check_signs(&derivs)?;
    TangentDirection::parameter(eps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidpointReport {
    pub midpoint: Distribution,
    /// Natural budget of the move to the midpoint.
    pub b: f64,
    pub q_star: Distribution,
    pub distance: f64,
    /// `q_star` equals the midpoint within [`REPORT_TOLERANCE`].
    pub holds: bool,
}

/// Gives the trader exactly the budget needed to reach the midpoint of
/// `[q0, p]` and measures how far her optimal report lands from it.
pub fn verify_midpoint<R: ScoringRule + ?Sized>(
    rule: &R,
    p: &Distribution,
    q0: &Distribution,
) -> Result<MidpointReport> {
    p.check_same_k(q0)?;
    if p == q0 {
        return Err(Error::DegenerateSegment);
    }
    check_interior(rule, p.probs())?;
    check_interior(rule, q0.probs())?;
    let midpoint = mix(q0, p, 0.5)?;
    let b = natural_budget(rule, q0, &midpoint)?;
    if b <= 0.0 {
        return Err(Error::Invalid(format!("midpoint budget {b} is not positive")));
    }
    let q_star = solve_constrained(rule, p, q0, b)?.q_star;
    let distance = q_star.distance(&midpoint);
    Ok(MidpointReport { midpoint, b, q_star, distance, holds: distance <= REPORT_TOLERANCE })
}

/// A report at which two budget constraints bind and the third outcome's
/// score rises.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoubleTight {
    pub r: Distribution,
    pub b: f64,
    /// `S_slack(r) - S_slack(q0)`.
    pub a: f64,
    pub tight: [usize; 2],
    pub slack: usize,
    /// Largest `|S_x(q0) - S_x(r) - b|` over the tight outcomes.
    pub residual: f64,
}

struct Budgeted<'a, R: ScoringRule + ?Sized> {
    rule: &'a R,
    base: Vec<f64>,
    b: f64,
}

impl<R: ScoringRule + ?Sized> Budgeted<'_, R> {
    fn loss(&self, q: &[f64], x: usize) -> f64 {
        self.base[x] - self.rule.component(q, x)
    }

    /// Projects `q` back onto `{loss_x = b}` along the centered gradient.
    fn correct(&self, q: &mut [f64], x: usize) {
        for _ in 0..50 {
            let f = self.b - self.loss(q, x);
            if f.abs() < 1e-15 {
                break;
            }
            let g = centered(&gradient(self.rule, q, x));
            let g2 = dot(&g, &g);
            q.iter_mut().zip(&g).for_each(|(v, gv)| *v -= f * gv / g2);
        }
    }

    /// Newton on `loss_i = loss_j = b` in the first two coordinates.
    fn polish(&self, q: &mut [f64], i: usize, j: usize) -> f64 {
        let residual = |q: &[f64]| Vector2::new(self.b - self.loss(q, i), self.b - self.loss(q, j));
        for _ in 0..50 {
            let f = residual(q);
            if f.amax() < 1e-15 {
                break;
            }
            let gi = gradient(self.rule, q, i);
            let gj = gradient(self.rule, q, j);
            let m = Matrix2::new(gi[0] - gi[2], gi[1] - gi[2], gj[0] - gj[2], gj[1] - gj[2]);
            let Some(delta) = m.lu().solve(&(-f)) else { break };
            q[0] += delta[0];
            q[1] += delta[1];
            q[2] -= delta[0] + delta[1];
        }
        residual(q).amax()
    }
}

fn inside<R: ScoringRule + ?Sized>(rule: &R, q: &[f64]) -> bool {
    q.iter().all(|&v| v > rule.floor() + 1e-12)
}

fn three_outcomes<R: ScoringRule + ?Sized>(rule: &R, q0: &Distribution) -> Result<()> {
    if rule.outcomes() != 3 || q0.k() != 3 {
        return Err(Error::DimensionMismatch { expected: 3, got: q0.k() });
    }
    check_interior(rule, q0.probs())
}

/// Finds a report where the budget constraints of the two outcomes other
/// than `slack` bind at budget `b`.
///
/// Starts on the segment from `q0` toward the `slack` vertex, stops where
/// the first constraint binds, then walks along that constraint's level set
/// (stepping along its tangent and projecting back) until the second one
/// binds. A bisection and a final Newton step on both constraints follow.
pub fn find_double_tight_with<R: ScoringRule + ?Sized>(
    rule: &R,
    q0: &Distribution,
    slack: usize,
    b: f64,
) -> Result<DoubleTight> {
    three_outcomes(rule, q0)?;
    check_outcome(slack, 3)?;
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::NegativeBudget(b));
    }
    let mut base = vec![0.0; 3];
    rule.scores_into(q0.probs(), &mut base);
    let prob = Budgeted { rule, base, b };
    let others: Vec<usize> = (0..3).filter(|&x| x != slack).collect();
    let (x, y) = (others[0], others[1]);
    let floor = rule.floor();
    let mut vertex = vec![floor; 3];
    vertex[slack] = 1.0 - 2.0 * floor;
    let seg = |alpha: f64| -> Vec<f64> {
        q0.probs().iter().zip(&vertex).map(|(a, v)| (1.0 - alpha) * a + alpha * v).collect()
    };
    let excess = |q: &[f64]| prob.loss(q, x).max(prob.loss(q, y)) - b;
    if excess(&seg(1.0)) <= 0.0 {
        return Err(Error::WalkLeftDomain);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess(&seg(mid)) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut q = seg(lo);
    if !inside(rule, &q) {
        return Err(Error::WalkLeftDomain);
    }
    let (i, j) = if prob.loss(&q, x) >= prob.loss(&q, y) { (x, y) } else { (y, x) };
    if b - prob.loss(&q, j) > 1e-10 {
        prob.correct(&mut q, i);
        const STEP: f64 = 1e-3;
        let advance = |q: &[f64], h: f64| -> Vec<f64> {
            // tangent of the level set of S_i is orthogonal to 1 and to its gradient
            let g = gradient(rule, q, i);
            let mut t = vec![g[2] - g[1], g[0] - g[2], g[1] - g[0]];
            if dot(&t, &gradient(rule, q, j)) > 0.0 {
                t.iter_mut().for_each(|v| *v = -*v);
            }
            let tn = norm(&t);
            let mut next: Vec<f64> = q.iter().zip(&t).map(|(a, d)| a + h * d / tn).collect();
            prob.correct(&mut next, i);
            next
        };
        let mut reached = false;
        for _ in 0..100_000 {
            let next = advance(&q, STEP);
            if !inside(rule, &next) {
                return Err(Error::WalkLeftDomain);
            }
            if prob.loss(&next, j) >= b {
                let (mut s_lo, mut s_hi) = (0.0, STEP);
                for _ in 0..60 {
                    let mid = 0.5 * (s_lo + s_hi);
                    if prob.loss(&advance(&q, mid), j) >= b {
                        s_hi = mid;
                    } else {
                        s_lo = mid;
                    }
                }
                q = advance(&q, 0.5 * (s_lo + s_hi));
                reached = true;
                break;
            }
            q = next;
        }
        if !reached {
            return Err(Error::WalkLeftDomain);
        }
    }
    let residual = prob.polish(&mut q, i, j);
    if !inside(rule, &q) {
        return Err(Error::WalkLeftDomain);
    }
    if residual > TIGHT_TOLERANCE {
        return Err(Error::Invalid(format!("double-tight residual {residual}")));
    }
    let r = Distribution::new(q)?;
    let a = rule.component(r.probs(), slack) - rule.component(q0.probs(), slack);
    if a <= 0.0 {
        return Err(Error::SignStructure(format!("slack outcome gains {a}")));
    }
    let mut tight = [x, y];
    tight.sort_unstable();
    Ok(DoubleTight { r, b, a, tight, slack, residual })
}

/// Half the smallest natural budget on the circle around `q0` whose radius
/// is half the distance from `q0` to the domain boundary.
pub fn default_tight_budget<R: ScoringRule + ?Sized>(rule: &R, q0: &Distribution) -> Result<f64> {
    three_outcomes(rule, q0)?;
    let k = 3.0f64;
    let face =
        q0.probs().iter().map(|v| (v - rule.floor()) / ((k - 1.0) / k).sqrt()).fold(f64::INFINITY, f64::min);
    let radius = 0.5 * face;
    let u1 = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
    let u2 = [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()];
    let mut least = f64::INFINITY;
    for step in 0..720 {
        let theta = step as f64 * std::f64::consts::PI / 360.0;
        let (s, c) = theta.sin_cos();
        let q: Vec<f64> = (0..3).map(|x| q0.get(x) + radius * (c * u1[x] + s * u2[x])).collect();
        least = least.min(raw_budget(rule, q0.probs(), &q));
    }
    Ok(0.5 * least)
}

/// [`find_double_tight_with`] at [`default_tight_budget`], trying each
/// slack outcome (last first) and halving the budget on failure.
pub fn find_double_tight<R: ScoringRule + ?Sized>(rule: &R, q0: &Distribution) -> Result<DoubleTight> {
    let b0 = default_tight_budget(rule, q0)?;
    let mut last = Error::WalkLeftDomain;
    for attempt in 0..8 {
        let b = b0 * 0.5f64.powi(attempt);
        for slack in (0..3).rev() {
            match find_double_tight_with(rule, q0, slack, b) {
                Ok(found) => return Ok(found),
                Err(e) => last = e,
            }
        }
    }
    Err(last)
}

/// One neighborhood of beliefs sharing a single optimal constrained report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsensitivityCertificate {
    pub rule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    pub q0: Distribution,
    pub r: Distribution,
    pub b: f64,
    pub a: f64,
    pub tight: [usize; 2],
    pub slack: usize,
    pub tight_residuals: [f64; 2],
    /// Sampling radius at which every sampled belief mapped to `r`.
    pub radius: f64,
    pub beliefs: Vec<Distribution>,
    pub common_report: Distribution,
    /// Largest distance from a sampled belief's optimal report to `r`.
    pub max_report_error: f64,
    /// Affine rank of the sampled perturbations.
    pub affine_rank: usize,
    pub seed: u64,
}

/// Whether `p` is one of the perturbed beliefs around a double-tight
/// report: mass moves from the tight outcomes to the slack one, the slack
/// score stays above `S_slack(r) - a`, and some tight score drops.
fn perturbation_conditions<R: ScoringRule + ?Sized>(rule: &R, dt: &DoubleTight, p: &[f64]) -> bool {
    let r = dt.r.probs();
    let [x, y] = dt.tight;
    let z = dt.slack;
    let (ex, ey, ez) = (p[x] - r[x], p[y] - r[y], p[z] - r[z]);
    let signs = ex < 0.0 && ey < 0.0 && ez > 0.0;
    let slack_ok = rule.component(p, z) >= rule.component(r, z) - dt.a;
    let drop = rule.component(p, x) < rule.component(r, x) || rule.component(p, y) < rule.component(r, y);
    signs && slack_ok && drop
}

fn affine_rank(points: &[Vec<f64>]) -> usize {
    if points.len() < 2 {
        return 0;
    }
    let d = points[0].len();
    let m = DMatrix::from_fn(points.len() - 1, d, |i, j| points[i + 1][j] - points[0][j]);
    let sv = m.singular_values();
    let top = sv.iter().fold(0.0f64, |a, v| a.max(*v));
    sv.iter().filter(|&&v| v > 1e-10 * top.max(f64::MIN_POSITIVE)).count()
}

fn tight_residuals<R: ScoringRule + ?Sized>(rule: &R, q0: &[f64], dt: &DoubleTight) -> [f64; 2] {
    dt.tight.map(|x| (rule.component(q0, x) - rule.component(dt.r.probs(), x) - dt.b).abs())
}

/// Builds a double-tight report `r` and samples `samples` beliefs around it
/// that satisfy the perturbation conditions, checking that every one of them
/// has `r` as its optimal constrained report. The radius starts at 0.02 and
/// halves on failure down to 1e-4.
pub fn verify_insensitivity<R: ScoringRule + ?Sized>(
    rule: &R,
    q0: &Distribution,
    samples: usize,
    seed: u64,
) -> Result<InsensitivityCertificate> {
    let dt = find_double_tight(rule, q0)?;
    insensitivity_around(rule, q0, &dt, samples, seed)
}

/// [`verify_insensitivity`] around a given double-tight report.
pub fn insensitivity_around<R: ScoringRule + ?Sized>(
    rule: &R,
    q0: &Distribution,
    dt: &DoubleTight,
    samples: usize,
    seed: u64,
) -> Result<InsensitivityCertificate> {
    if samples < 3 {
        return Err(Error::Invalid("need at least 3 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [x, y] = dt.tight;
    let z = dt.slack;
    let mut radius = 0.02;
    while radius >= 1e-4 {
        let mut beliefs = Vec::with_capacity(samples);
        for _ in 0..samples * 50 {
            if beliefs.len() == samples {
                break;
            }
            let (u1, u2): (f64, f64) = (rng.random_range(0.05..1.0), rng.random_range(0.05..1.0));
            let mut p = dt.r.probs().to_vec();
            p[x] -= radius * u1;
            p[y] -= radius * u2;
            p[z] += radius * (u1 + u2);
            if p.iter().all(|&v| v >= rule.floor()) && perturbation_conditions(rule, dt, &p) {
                if let Ok(d) = Distribution::new(p) {
                    beliefs.push(d);
                }
            }
        }
        if beliefs.len() < samples {
            radius *= 0.5;
            continue;
        }
        let errors: Vec<f64> = beliefs
            .par_iter()
            .map(|p| {
                solve_constrained(rule, p, q0, dt.b)
                    .map(|rep| rep.q_star.distance(&dt.r))
                    .unwrap_or(f64::INFINITY)
            })
            .collect();
        let max_report_error = errors.iter().copied().fold(0.0, f64::max);
        if max_report_error > REPORT_TOLERANCE {
            radius *= 0.5;
            continue;
        }
        let eps: Vec<Vec<f64>> = beliefs
            .iter()
            .map(|p| p.probs().iter().zip(dt.r.probs()).map(|(a, b)| a - b).collect())
            .collect();
        let spec = rule_spec(rule);
        return Ok(InsensitivityCertificate {
            rule: spec.rule,
            floor: spec.floor,
            q0: q0.clone(),
            r: dt.r.clone(),
            b: dt.b,
            a: dt.a,
            tight: dt.tight,
            slack: dt.slack,
            tight_residuals: tight_residuals(rule, q0.probs(), dt),
            radius,
            common_report: dt.r.clone(),
            max_report_error,
            affine_rank: affine_rank(&eps),
            beliefs,
            seed,
        });
    }
    Err(Error::RadiusUnderflow(radius))
}

fn rule_spec<R: ScoringRule + ?Sized>(rule: &R) -> RuleSpec {
    let floor = (rule.tag() == "log").then(|| rule.floor());
    RuleSpec { rule: rule.tag().to_string(), floor }
}

/// Where deviation searches draw reports from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "space")]
pub enum SearchSpace {
    /// Full distributions over `k` outcomes.
    Simplex { k: usize },
    /// Independent beliefs over two binary dimensions, reported as
    /// `(top, left)`.
    Product,
}

impl SearchSpace {
    pub fn outcomes(&self) -> usize {
        match self {
            SearchSpace::Simplex { k } => *k,
            SearchSpace::Product => 4,
        }
    }
}

/// Parameters of [`find_deviation`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationSearch {
    pub instances: usize,
    pub threshold: f64,
    pub seed: u64,
    pub resolution: f64,
}

impl Default for DeviationSearch {
    fn default() -> Self {
        Self { instances: 10_000, threshold: DEFAULT_THRESHOLD, seed: 0, resolution: CERTIFICATE_RESOLUTION }
    }
}

/// One concrete instance whose constrained optimum leaves the segment
/// toward the belief. Simplex reports are full distributions; product
/// reports are `(top, left)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationCertificate {
    pub rule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    #[serde(flatten)]
    pub space: SearchSpace,
    pub p: Vec<f64>,
    pub q0: Vec<f64>,
    pub b: f64,
    pub q_star: Vec<f64>,
    /// Distance from `q_star` to `[q0, p]`.
    pub deviation: f64,
    pub threshold: f64,
    /// Oracle lattice spacing used for confirmation.
    pub resolution: f64,
    /// Distance between the solver's and the oracle's optimal reports.
    pub oracle_residual: f64,
    pub seed: u64,
    pub instance: usize,
}

/// One row of a deviation search.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceRow {
    pub index: usize,
    pub structured: bool,
    pub b: f64,
    pub deviation: f64,
    pub expected_gain: f64,
    pub binding: usize,
    /// Oracle verdict for instances above threshold.
    pub confirmed: Option<bool>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviationOutcome {
    pub certificate: Option<DeviationCertificate>,
    pub examined: usize,
    pub max_deviation: f64,
    pub rows: Vec<InstanceRow>,
}

struct Instance {
    p: Vec<f64>,
    q0: Vec<f64>,
    b: f64,
    structured: bool,
}

struct Solved {
    q_star: Vec<f64>,
    deviation: f64,
    gain: f64,
    binding: usize,
}

fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_simplex(rule: &Rule, k: usize, rng: &mut ChaCha8Rng, structured: bool) -> Result<Instance> {
    let floor = rule.floor();
    if structured && k == 3 {
        let q0 = sample_floored(rng, 3, floor + 0.05);
        let slack = rng.random_range(0..3);
        let b = default_tight_budget(rule, &q0)? * rng.random_range(0.25..1.5);
        if let Ok(dt) = find_double_tight_with(rule, &q0, slack, b) {
            let [x, y] = dt.tight;
            let (u1, u2): (f64, f64) = (rng.random_range(0.05..1.0), rng.random_range(0.05..1.0));
            let mut rho = rng.random_range(0.05..0.4);
            for _ in 0..12 {
                let mut p = dt.r.probs().to_vec();
                p[x] -= rho * u1;
                p[y] -= rho * u2;
                p[slack] += rho * (u1 + u2);
                if p.iter().all(|&v| v >= floor + 1e-6) {
                    return Ok(Instance { p, q0: q0.probs().to_vec(), b: dt.b, structured });
                }
                rho *= 0.5;
            }
        }
    }
    let margin = floor + 0.005;
    let q0 = sample_floored(rng, k, margin);
    let p = sample_floored(rng, k, margin);
    let b = raw_budget(rule, q0.probs(), p.probs()) * rng.random_range(0.05..0.95);
    Ok(Instance { p: p.probs().to_vec(), q0: q0.probs().to_vec(), b, structured })
}

fn draw_product(rule: &Rule, rng: &mut ChaCha8Rng, structured: bool) -> Instance {
    let m = rule.floor().sqrt() + 0.01;
    let (q0, p) = if structured {
        let q0 = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
        let corner = |rng: &mut ChaCha8Rng| {
            let v = rng.random_range(m..0.15);
            if rng.random_bool(0.5) {
                v
            } else {
                1.0 - v
            }
        };
        (q0, [corner(rng), corner(rng)])
    } else {
        (
            [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)],
            [rng.random_range(m..1.0 - m), rng.random_range(m..1.0 - m)],
        )
    };
    let qh = ProductBelief { top: q0[0], left: q0[1] }.expand();
    let ph = ProductBelief { top: p[0], left: p[1] }.expand();
    let b = raw_budget(rule, qh.probs(), ph.probs()) * rng.random_range(0.05..0.95);
    Instance { p: p.to_vec(), q0: q0.to_vec(), b, structured }
}

fn draw(rule: &Rule, space: SearchSpace, seed: u64, index: usize) -> Result<Instance> {
    let mut rng = instance_rng(seed, index);
    let structured = index % 2 == 1;
    match space {
        SearchSpace::Simplex { k } => draw_simplex(rule, k, &mut rng, structured),
        SearchSpace::Product => Ok(draw_product(rule, &mut rng, structured)),
    }
}

fn product_of(v: &[f64]) -> Result<ProductBelief> {
    if v.len() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: v.len() });
    }
    ProductBelief::new(v[0], v[1])
}

fn solve(rule: &Rule, space: SearchSpace, p: &[f64], q0: &[f64], b: f64) -> Result<Solved> {
    match space {
        SearchSpace::Simplex { .. } => {
            let rep = solve_constrained(
                rule,
                &Distribution::new(p.to_vec())?,
                &Distribution::new(q0.to_vec())?,
                b,
            )?;
            Ok(Solved {
                q_star: rep.q_star.probs().to_vec(),
                deviation: rep.segment_deviation,
                gain: rep.expected_score_gain,
                binding: rep.binding_outcomes.len(),
            })
        }
        SearchSpace::Product => {
            let rep = solve_constrained_product(rule, &product_of(p)?, &product_of(q0)?, b)?;
            Ok(Solved {
                q_star: rep.q_star.params().to_vec(),
                deviation: rep.segment_deviation,
                gain: rep.expected_score_gain,
                binding: rep.binding_outcomes.len(),
            })
        }
    }
}

fn oracle(rule: &Rule, space: SearchSpace, p: &[f64], q0: &[f64], b: f64, resolution: f64) -> Result<Solved> {
    match space {
        SearchSpace::Simplex { .. } => {
            let rep = oracle_constrained(
                rule,
                &Distribution::new(p.to_vec())?,
                &Distribution::new(q0.to_vec())?,
                b,
                resolution,
            )?;
            Ok(Solved {
                q_star: rep.q_star.probs().to_vec(),
                deviation: rep.segment_deviation,
                gain: rep.expected_score_gain,
                binding: rep.binding_outcomes.len(),
            })
        }
        SearchSpace::Product => {
            let rep = oracle_constrained_product(rule, &product_of(p)?, &product_of(q0)?, b, resolution)?;
            Ok(Solved {
                q_star: rep.q_star.params().to_vec(),
                deviation: rep.segment_deviation,
                gain: rep.expected_score_gain,
                binding: rep.binding_outcomes.len(),
            })
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_space(rule: &Rule, space: SearchSpace) -> Result<()> {
    match space {
        SearchSpace::Simplex { k } if !(2..=4).contains(&k) => Err(Error::OracleDimension(k)),
        _ if rule.outcomes() != space.outcomes() => {
            Err(Error::DimensionMismatch { expected: space.outcomes(), got: rule.outcomes() })
        }
        _ => Ok(()),
    }
}

/// Searches random and structured `(p, q0, b)` instances for a
/// constrained optimum farther than `threshold` from `[q0, p]`, and
/// confirms candidates with the exhaustive oracle. Returns the first
/// confirmed instance in index order, so results depend only on the seed.
///
/// Odd instances at `k = 3` start near a double-tight report, where such
/// deviations are expected; the rest are uniform. Running out of instances
/// is reported through an empty `certificate`, not an error.
pub fn find_deviation(rule: &Rule, space: SearchSpace, cfg: &DeviationSearch) -> Result<DeviationOutcome> {
    check_space(rule, space)?;
    if !(cfg.threshold > SOLVER_TOLERANCE && cfg.threshold.is_finite()) {
        return Err(Error::Invalid(format!(
            "threshold {} must exceed solver tolerance {SOLVER_TOLERANCE}",
            cfg.threshold
        )));
    }
    let mut rows = Vec::new();
    let mut max_deviation: f64 = 0.0;
    let mut start = 0;
    while start < cfg.instances {
        let end = (start + CHUNK).min(cfg.instances);
        let batch: Vec<(Result<Instance>, Option<Result<Solved>>)> = (start..end)
            .into_par_iter()
            .map(|i| {
                let inst = draw(rule, space, cfg.seed, i);
                let solved = inst.as_ref().ok().map(|x| solve(rule, space, &x.p, &x.q0, x.b));
                (inst, solved)
            })
            .collect();
        for (offset, (inst, solved)) in batch.into_iter().enumerate() {
            let index = start + offset;
            let (inst, solved) = match (inst, solved) {
                (Ok(inst), Some(Ok(s))) => (inst, s),
                (inst, solved) => {
                    let error = match (inst, solved) {
                        (Err(e), _) | (_, Some(Err(e))) => e.to_string(),
                        _ => "instance not evaluated".into(),
                    };
                    rows.push(InstanceRow {
                        index,
                        structured: index % 2 == 1,
                        b: f64::NAN,
                        deviation: f64::NAN,
                        expected_gain: f64::NAN,
                        binding: 0,
                        confirmed: None,
                        error: Some(error),
                    });
                    continue;
                }
            };
            max_deviation = max_deviation.max(solved.deviation);
            let mut row = InstanceRow {
                index,
                structured: inst.structured,
                b: inst.b,
                deviation: solved.deviation,
                expected_gain: solved.gain,
                binding: solved.binding,
                confirmed: None,
                error: None,
            };
            if solved.deviation > cfg.threshold {
                let verdict = oracle(rule, space, &inst.p, &inst.q0, inst.b, cfg.resolution);
                let certificate = verdict.as_ref().ok().and_then(|o| {
                    let residual = distance(&o.q_star, &solved.q_star);
                    let agree = residual <= cfg.resolution
                        && (o.deviation - solved.deviation).abs() <= SOLVER_TOLERANCE
                        && o.deviation > cfg.threshold;
                    agree.then(|| {
                        let spec = rule.spec();
                        DeviationCertificate {
                            rule: spec.rule,
                            floor: spec.floor,
                            space,
                            p: inst.p.clone(),
                            q0: inst.q0.clone(),
                            b: inst.b,
                            q_star: solved.q_star.clone(),
                            deviation: solved.deviation,
                            threshold: cfg.threshold,
                            resolution: cfg.resolution,
                            oracle_residual: residual,
                            seed: cfg.seed,
                            instance: index,
                        }
                    })
                });
                row.confirmed = Some(certificate.is_some());
                if let Err(e) = verdict {
                    row.error = Some(e.to_string());
                }
                rows.push(row);
                if certificate.is_some() {
                    return Ok(DeviationOutcome { certificate, examined: index + 1, max_deviation, rows });
                }
                continue;
            }
            rows.push(row);
        }
        start = end;
    }
    Ok(DeviationOutcome { certificate: None, examined: cfg.instances, max_deviation, rows })
}

/// Any certificate produced by this module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Certificate {
    Deviation(DeviationCertificate),
    Insensitivity(InsensitivityCertificate),
}

/// Outcome of re-checking a certificate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertificateCheck {
    pub passed: bool,
    pub failures: Vec<String>,
}

impl CertificateCheck {
    fn from_failures(failures: Vec<String>) -> Self {
        Self { passed: failures.is_empty(), failures }
    }
}

/// Independently re-checks a certificate. Malformed certificates (unknown
/// rule, wrong dimensions, invalid distributions) are errors; a well-formed
/// certificate whose claims do not reproduce yields `passed = false`.
pub fn verify_certificate(cert: &Certificate) -> Result<CertificateCheck> {
    match cert {
        Certificate::Deviation(c) => verify_deviation(c),
        Certificate::Insensitivity(c) => verify_insensitivity_certificate(c),
    }
}

fn build_rule(tag: &str, floor: Option<f64>, k: usize) -> Result<Rule> {
    if tag == "brier" && floor.is_some() {
        return Err(Error::Invalid("brier takes no floor".into()));
    }
    RuleSpec { rule: tag.to_string(), floor }.build(k)
}

fn verify_deviation(c: &DeviationCertificate) -> Result<CertificateCheck> {
    let dims = match c.space {
        SearchSpace::Simplex { k } => k,
        SearchSpace::Product => 2,
    };
    for v in [&c.p, &c.q0, &c.q_star] {
        if v.len() != dims {
            return Err(Error::DimensionMismatch { expected: dims, got: v.len() });
        }
    }
    let rule = build_rule(&c.rule, c.floor, c.space.outcomes())?;
    check_space(&rule, c.space)?;
    if !(c.resolution > 0.0 && c.resolution <= crate::budget::MAX_ORACLE_RESOLUTION) {
        return Err(Error::ResolutionTooCoarse(c.resolution));
    }
    let (p, q0, q) = match c.space {
        SearchSpace::Simplex { .. } => (
            Distribution::new(c.p.clone())?.probs().to_vec(),
            Distribution::new(c.q0.clone())?.probs().to_vec(),
            Distribution::new(c.q_star.clone())?.probs().to_vec(),
        ),
        SearchSpace::Product => (
            product_of(&c.p)?.expand().probs().to_vec(),
            product_of(&c.q0)?.expand().probs().to_vec(),
            product_of(&c.q_star)?.expand().probs().to_vec(),
        ),
    };
    check_domain(&rule, &p)?;
    check_domain(&rule, &q0)?;
    check_budget_value(c.b)?;
    let mut failures = Vec::new();
    if check_domain(&rule, &q).is_err() {
        failures.push("q_star outside the rule domain".into());
    } else {
        let used = raw_budget(&rule, &q0, &q);
        if used > c.b + 1e-7 {
            failures.push(format!("q_star needs budget {used} > {}", c.b));
        }
    }
    let claimed = segment_distance_raw(&c.q_star, &c.q0, &c.p).unwrap_or(0.0);
    if (claimed - c.deviation).abs() > SOLVER_TOLERANCE {
        failures.push(format!("q_star lies {claimed} from the segment, certificate says {}", c.deviation));
    }
    let o = oracle(&rule, c.space, &c.p, &c.q0, c.b, c.resolution)?;
    let gap = distance(&o.q_star, &c.q_star);
    if gap > c.resolution {
        failures.push(format!("oracle optimum is {gap} from q_star"));
    }
    if (o.deviation - c.deviation).abs() > SOLVER_TOLERANCE {
        failures.push(format!("oracle deviation {} differs from {}", o.deviation, c.deviation));
    }
    if o.deviation <= c.threshold {
        failures.push(format!("oracle deviation {} not above threshold {}", o.deviation, c.threshold));
    }
    Ok(CertificateCheck::from_failures(failures))
}

fn check_budget_value(b: f64) -> Result<()> {
    if !(b.is_finite() && b >= 0.0) {
        return Err(Error::NegativeBudget(b));
    }
    Ok(())
}

fn verify_insensitivity_certificate(c: &InsensitivityCertificate) -> Result<CertificateCheck> {
    let rule = build_rule(&c.rule, c.floor, 3)?;
    three_outcomes(&rule, &c.q0)?;
    check_budget_value(c.b)?;
    let mut slots = [c.tight[0], c.tight[1], c.slack];
    slots.sort_unstable();
    if slots != [0, 1, 2] {
        return Err(Error::Invalid("tight and slack outcomes must partition 0..3".into()));
    }
    for d in std::iter::once(&c.r).chain(&c.beliefs) {
        if d.k() != 3 {
            return Err(Error::DimensionMismatch { expected: 3, got: d.k() });
        }
    }
    let mut failures = Vec::new();
    let dt = DoubleTight { r: c.r.clone(), b: c.b, a: c.a, tight: c.tight, slack: c.slack, residual: 0.0 };
    let residuals = tight_residuals(&rule, c.q0.probs(), &dt);
    if residuals.iter().any(|&r| r > TIGHT_TOLERANCE) {
        failures.push(format!("tight residuals {residuals:?} exceed {TIGHT_TOLERANCE}"));
    }
    let a = rule.component(c.r.probs(), c.slack) - rule.component(c.q0.probs(), c.slack);
    if a.is_nan() || a <= 0.0 || (a - c.a).abs() > TIGHT_TOLERANCE {
        failures.push(format!("slack gain {a} does not match {}", c.a));
    }
    if c.common_report.distance(&c.r) > REPORT_TOLERANCE {
        failures.push("common report differs from r".into());
    }
    for (i, p) in c.beliefs.iter().enumerate() {
        if check_domain(&rule, p.probs()).is_err() || !perturbation_conditions(&rule, &dt, p.probs()) {
            failures.push(format!("belief {i} violates the perturbation conditions"));
        }
    }
    let errors: Vec<f64> = c
        .beliefs
        .par_iter()
        .map(|p| {
            solve_constrained(&rule, p, &c.q0, c.b)
                .map(|rep| rep.q_star.distance(&c.r))
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    for (i, e) in errors.iter().enumerate() {
        if *e > REPORT_TOLERANCE {
            failures.push(format!("belief {i} optimal report is {e} from r"));
        }
    }
    let eps: Vec<Vec<f64>> =
        c.beliefs.iter().map(|p| p.probs().iter().zip(c.r.probs()).map(|(a, b)| a - b).collect()).collect();
    let rank = affine_rank(&eps);
    if rank != 2 || rank != c.affine_rank {
        failures.push(format!("affine rank {rank}, certificate says {}", c.affine_rank));
    }
    Ok(CertificateCheck::from_failures(failures))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_brier_tangent() {
        let rule = Rule::brier(3).unwrap();
        let eps = tangent_direction(&rule, &Distribution::uniform(3).unwrap(), 0).unwrap();
        let e = eps.components();
        assert!(e[0].abs() < 1e-15);
        assert!((e[1] - 1.0).abs() < 1e-15 && (e[2] + 1.0).abs() < 1e-15, "{e:?}");
    }

    #[test]
    fn tangent_rejects_boundary_and_small_k() {
        let rule = Rule::brier(3).unwrap();
        assert_eq!(tangent_direction(&rule, &d(&[0.0, 0.5, 0.5]), 0), Err(Error::OnBoundary));
        let r2 = Rule::brier(2).unwrap();
        assert!(tangent_direction(&r2, &d(&[0.4, 0.6]), 0).is_err());
    }

    #[test]
    fn product_tangent_is_stationary() {
        let rule = Rule::brier(4).unwrap();
        let pb = ProductBelief::new(0.3, 0.6).unwrap();
        let eps = tangent_direction_product(&rule, &pb, 0).unwrap();
        let e = eps.components();
        let h = 1e-6;
        let s = |t: f64, l: f64| rule.component(ProductBelief::new(t, l).unwrap().expand().probs(), 0);
        let deriv = (s(0.3 + h * e[0], 0.6 + h * e[1]) - s(0.3 - h * e[0], 0.6 - h * e[1])) / (2.0 * h);
        assert!(deriv.abs() < 1e-8);
    }

    #[test]
    fn symmetric_double_tight() {
        let rule = Rule::brier(3).unwrap();
        let u = Distribution::uniform(3).unwrap();
        let t = 0.05;
        let dt = find_double_tight_with(&rule, &u, 2, 2.0 * t + 6.0 * t * t).unwrap();
        let third = 1.0 / 3.0;
        assert!(dt.r.distance(&d(&[third - t, third - t, third + 2.0 * t])) < 1e-9);
        assert!((dt.a - 0.185).abs() < 1e-9);
        assert!((dt.b - 0.115).abs() < 1e-15);
        assert_eq!(dt.tight, [0, 1]);
    }

    #[test]
    fn asymmetric_double_tight_walks_level_set() {
        for rule in [Rule::brier(3).unwrap(), Rule::log(3, 1e-3).unwrap()] {
            let q0 = d(&[0.5, 0.3, 0.2]);
            let dt = find_double_tight(&rule, &q0).unwrap();
            assert!(dt.b > 0.0 && dt.a > 0.0);
            assert!(dt.residual <= TIGHT_TOLERANCE);
            let res = tight_residuals(&rule, q0.probs(), &dt);
            assert!(res.iter().all(|&r| r <= TIGHT_TOLERANCE), "{res:?}");
        }
    }

    #[test]
    fn midpoint_precondition() {
        let rule = Rule::brier(2).unwrap();
        let q = d(&[0.3, 0.7]);
        assert_eq!(verify_midpoint(&rule, &q, &q), Err(Error::DegenerateSegment));
        let rep = verify_midpoint(&rule, &d(&[0.9, 0.1]), &q).unwrap();
        assert!(rep.holds, "{rep:?}");
    }

    #[test]
    fn affine_rank_of_line_and_patch() {
        let line = vec![vec![0.0, 0.0, 0.0], vec![1.0, -1.0, 0.0], vec![2.0, -2.0, 0.0]];
        assert_eq!(affine_rank(&line), 1);
        let patch = vec![vec![0.0, 0.0, 0.0], vec![1.0, -1.0, 0.0], vec![0.0, 1.0, -1.0]];
        assert_eq!(affine_rank(&patch), 2);
    }

    #[test]
    fn certificate_json_is_tagged() {
        let cert = Certificate::Deviation(DeviationCertificate {
            rule: "brier".into(),
            floor: None,
            space: SearchSpace::Simplex { k: 3 },
            p: vec![0.2, 0.3, 0.5],
            q0: vec![0.2, 0.3, 0.5],
            b: 0.0,
            q_star: vec![0.2, 0.3, 0.5],
            deviation: 0.0,
            threshold: 1e-3,
            resolution: 1e-3,
            oracle_residual: 0.0,
            seed: 1,
            instance: 0,
        });
        let text = serde_json::to_string(&cert).unwrap();
        assert!(text.contains("\"kind\":\"deviation\""));
        assert!(text.contains("\"space\":\"simplex\",\"k\":3"));
        let back: Certificate = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cert);
    }
}
