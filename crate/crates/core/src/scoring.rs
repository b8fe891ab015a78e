//! Proper scoring rules as per-outcome score vectors, with analytic
//! gradients and numerical checkers for properness and quasiconcavity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid;
use crate::simplex::{sample_floored, Distribution, ProductBelief};

/// Default domain floor for the logarithmic rule.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-3;

/// Slack allowed when testing domain membership of solver iterates.
pub(crate) const DOMAIN_SLACK: f64 = 1e-12;

/// A family of per-outcome score functions `S_x(q)` on a (possibly floored)
/// simplex. Implementations evaluate on raw slices; the free functions in
/// this module add validation.
pub trait ScoringRule: Send + Sync {
    fn outcomes(&self) -> usize;

    /// Every probability in the domain is at least this.
    fn floor(&self) -> f64;

    fn tag(&self) -> &str;

    /// Writes `S_x(q)` for every `x`. `q` is assumed to be in the domain.
    fn scores_into(&self, q: &[f64], out: &mut [f64]);

    /// Writes the gradient of `S_outcome` in ambient coordinates.
    fn gradient_into(&self, q: &[f64], outcome: usize, out: &mut [f64]);

    /// Closed-form maximum natural budget over the domain, if known.
    fn analytic_budget_bound(&self) -> Option<f64> {
        None
    }

    fn component(&self, q: &[f64], outcome: usize) -> f64 {
        let mut out = vec![0.0; self.outcomes()];
        self.scores_into(q, &mut out);
        out[outcome]
    }

    /// `belief . S(q)` without validation.
    fn expected(&self, belief: &[f64], q: &[f64]) -> f64 {
        let mut out = vec![0.0; self.outcomes()];
        self.scores_into(q, &mut out);
        belief.iter().zip(&out).map(|(p, s)| p * s).sum()
    }
}

/// The scoring rules offered by name.
#[derive(Clone, Debug, PartialEq)]
pub enum Rule {
    /// `S_x(q) = 2 q_x - sum_j q_j^2` on the full simplex.
    Brier { k: usize },
    /// `S_x(q) = ln q_x` on `{q : q_x >= floor}`.
    Log { k: usize, floor: f64 },
}

impl Rule {
    pub fn brier(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::TooFewOutcomes(k));
        }
        Ok(Rule::Brier { k })
    }

    pub fn log(k: usize, floor: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::TooFewOutcomes(k));
        }
        if !(floor > 0.0 && floor * k as f64 <= 1.0 + 1e-12) {
            return Err(Error::InvalidFloor { floor, k });
        }
        Ok(Rule::Log { k, floor })
    }

    /// Parses a registry tag (`"brier"` or `"log"`). The floor applies to
    /// `log` only and defaults to [`DEFAULT_LOG_FLOOR`].
    pub fn from_tag(tag: &str, k: usize, floor: Option<f64>) -> Result<Self> {
        match tag {
            "brier" => Rule::brier(k),
            "log" => Rule::log(k, floor.unwrap_or(DEFAULT_LOG_FLOOR)),
            other => Err(Error::UnknownRule(other.to_string())),
        }
    }

    /// Same family and floor with a different outcome count.
    pub fn with_outcomes(&self, k: usize) -> Result<Self> {
        match self {
            Rule::Brier { .. } => Rule::brier(k),
            Rule::Log { floor, .. } => Rule::log(k, *floor),
        }
    }

    pub fn spec(&self) -> RuleSpec {
        match self {
            Rule::Brier { .. } => RuleSpec { rule: "brier".into(), floor: None },
            Rule::Log { floor, .. } => RuleSpec { rule: "log".into(), floor: Some(*floor) },
        }
    }
}

impl ScoringRule for Rule {
    fn outcomes(&self) -> usize {
        match self {
            Rule::Brier { k } | Rule::Log { k, .. } => *k,
        }
    }

    fn floor(&self) -> f64 {
        match self {
            Rule::Brier { .. } => 0.0,
            Rule::Log { floor, .. } => *floor,
        }
    }

    fn tag(&self) -> &str {
        match self {
            Rule::Brier { .. } => "brier",
            Rule::Log { .. } => "log",
        }
    }

    fn scores_into(&self, q: &[f64], out: &mut [f64]) {
        match self {
            Rule::Brier { .. } => {
                let norm2: f64 = q.iter().map(|v| v * v).sum();
                for (o, &v) in out.iter_mut().zip(q) {
                    *o = 2.0 * v - norm2;
                }
            }
            Rule::Log { .. } => {
                for (o, &v) in out.iter_mut().zip(q) {
                    *o = v.ln();
                }
            }
        }
    }

    fn gradient_into(&self, q: &[f64], outcome: usize, out: &mut [f64]) {
        match self {
            Rule::Brier { .. } => {
                for (o, &v) in out.iter_mut().zip(q) {
                    *o = -2.0 * v;
                }
                out[outcome] += 2.0;
            }
            Rule::Log { .. } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                out[outcome] = 1.0 / q[outcome];
            }
        }
    }

    fn analytic_budget_bound(&self) -> Option<f64> {
        match self {
            // every component ranges over [-1, 1]
            Rule::Brier { .. } => Some(2.0),
            Rule::Log { k, floor } => {
                let top = 1.0 - (*k as f64 - 1.0) * floor;
                Some((top / floor).ln().max(0.0))
            }
        }
    }

    fn component(&self, q: &[f64], outcome: usize) -> f64 {
        match self {
            Rule::Brier { .. } => 2.0 * q[outcome] - q.iter().map(|v| v * v).sum::<f64>(),
            Rule::Log { .. } => q[outcome].ln(),
        }
    }
}

/// Serializable rule selector used by configs and certificates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub rule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
}

impl RuleSpec {
    pub fn build(&self, k: usize) -> Result<Rule> {
        Rule::from_tag(&self.rule, k, self.floor)
    }
}

/// One score per outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector {
    scores: Vec<f64>,
}

impl ScoreVector {
    pub fn get(&self, outcome: usize) -> f64 {
        self.scores[outcome]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub(crate) fn check_domain<R: ScoringRule + ?Sized>(rule: &R, q: &[f64]) -> Result<()> {
    if q.len() != rule.outcomes() {
        return Err(Error::DimensionMismatch { expected: rule.outcomes(), got: q.len() });
    }
    let floor = rule.floor();
    for (index, &value) in q.iter().enumerate() {
        if value < floor - DOMAIN_SLACK {
            return Err(Error::OutsideDomain { index, value, floor });
        }
    }
    Ok(())
}

pub fn score<R: ScoringRule + ?Sized>(rule: &R, q: &Distribution) -> Result<ScoreVector> {
    check_domain(rule, q.probs())?;
    let mut scores = vec![0.0; rule.outcomes()];
    rule.scores_into(q.probs(), &mut scores);
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::OutsideDomain { index, value: q.get(index), floor: rule.floor() });
    }
    Ok(ScoreVector { scores })
}

/// `belief . S(report)`.
pub fn expected_score<R: ScoringRule + ?Sized>(
    rule: &R,
    belief: &Distribution,
    report: &Distribution,
) -> Result<f64> {
    belief.check_same_k(report)?;
    let s = score(rule, report)?;
    Ok(belief.probs().iter().zip(s.as_slice()).map(|(p, s)| p * s).sum())
}

/// Gradient of `S_outcome` at an interior point, in ambient coordinates.
pub fn score_gradient<R: ScoringRule + ?Sized>(
    rule: &R,
    q: &Distribution,
    outcome: usize,
) -> Result<Vec<f64>> {
    check_domain(rule, q.probs())?;
    if outcome >= rule.outcomes() {
        return Err(Error::OutcomeOutOfRange { index: outcome, k: rule.outcomes() });
    }
    if q.probs().iter().any(|&v| v <= rule.floor()) {
        return Err(Error::OnBoundary);
    }
    let mut g = vec![0.0; rule.outcomes()];
    rule.gradient_into(q.probs(), outcome, &mut g);
    Ok(g)
}

/// Score of the joint distribution implied by a product belief.
pub fn product_score<R: ScoringRule + ?Sized>(rule: &R, pb: &ProductBelief) -> Result<ScoreVector> {
    if rule.outcomes() != 4 {
        return Err(Error::DimensionMismatch { expected: 4, got: rule.outcomes() });
    }
    score(rule, &pb.expand())
}

/// Settings for [`check_properness`].
#[derive(Clone, Debug)]
pub struct ProperCheck {
    pub trials: usize,
    pub tolerance: f64,
    /// Lattice spacing of the report grid.
    pub resolution: f64,
    /// Extra uniformly random reports per belief.
    pub random_reports: usize,
    pub seed: u64,
}

impl Default for ProperCheck {
    fn default() -> Self {
        Self { trials: 100, tolerance: 0.0, resolution: 1e-2, random_reports: 200, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProperReport {
    pub passed: bool,
    pub trials: usize,
    /// Largest `E[S(q)] - E[S(p)]` seen under belief `p`; positive means
    /// some report beat the truth.
    pub worst_violation: f64,
    pub worst_belief: Vec<f64>,
    pub worst_report: Vec<f64>,
    /// Largest max-norm distance between a belief and its best grid report.
    pub max_argmax_error: f64,
}

/// Samples beliefs and checks no grid or random report beats the truthful
/// one by more than `tolerance`.
pub fn check_properness<R: ScoringRule + ?Sized>(rule: &R, cfg: &ProperCheck) -> ProperReport {
    let k = rule.outcomes();
    let floor = rule.floor();
    let n = grid::divisions_for(cfg.resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scores = vec![0.0; k];
    let mut report = ProperReport {
        passed: true,
        trials: cfg.trials,
        worst_violation: f64::NEG_INFINITY,
        worst_belief: Vec::new(),
        worst_report: Vec::new(),
        max_argmax_error: 0.0,
    };
    for _ in 0..cfg.trials {
        let p = sample_floored(&mut rng, k, floor);
        let p = p.probs();
        let truthful = rule.expected(p, p);
        let mut best = f64::NEG_INFINITY;
        let mut best_q = Vec::new();
        let mut consider = |q: &[f64], on_grid: bool, report: &mut ProperReport| {
            rule.scores_into(q, &mut scores);
            let e: f64 = p.iter().zip(&scores).map(|(a, b)| a * b).sum();
            let gap = e - truthful;
            if gap > report.worst_violation {
                report.worst_violation = gap;
                report.worst_belief = p.to_vec();
                report.worst_report = q.to_vec();
            }
            if on_grid && e > best {
                best = e;
                best_q = q.to_vec();
            }
        };
        grid::for_each_point(k, floor, n, |q| consider(q, true, &mut report));
        for _ in 0..cfg.random_reports {
            let q = sample_floored(&mut rng, k, floor);
            consider(q.probs(), false, &mut report);
        }
        let err = best_q.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        report.max_argmax_error = report.max_argmax_error.max(err);
    }
    report.passed = report.worst_violation <= cfg.tolerance;
    report
}

#[derive(Clone, Debug, Serialize)]
pub struct QuasiconcavityReport {
    pub passed: bool,
    pub triples: usize,
    pub violations: usize,
    /// Smallest `S_x(mid) - min(S_x(p), S_x(q))` over all triples.
    pub worst_margin: f64,
}

/// Tests `S_x(p/2 + q/2) >= min(S_x(p), S_x(q))` on random pairs, with
/// equality allowed only when the two endpoint scores agree within 1e-9.
pub fn check_quasiconcavity<R: ScoringRule + ?Sized>(
    rule: &R,
    trials: usize,
    seed: u64,
) -> QuasiconcavityReport {
    let k = rule.outcomes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report =
        QuasiconcavityReport { passed: true, triples: 0, violations: 0, worst_margin: f64::INFINITY };
    let (mut sp, mut sq, mut sm) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for i in 0..trials {
        let p = sample_floored(&mut rng, k, rule.floor());
        // every 50th pair is degenerate to exercise the equality case
        let q = if i % 50 == 0 { p.clone() } else { sample_floored(&mut rng, k, rule.floor()) };
        let mid: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        rule.scores_into(p.probs(), &mut sp);
        rule.scores_into(q.probs(), &mut sq);
        rule.scores_into(&mid, &mut sm);
        for x in 0..k {
            report.triples += 1;
            let lo = sp[x].min(sq[x]);
            let margin = sm[x] - lo;
            report.worst_margin = report.worst_margin.min(margin);
            let scale = 1.0 + lo.abs();
            let tied = margin.abs() <= 1e-12 * scale;
            let endpoints_equal = (sp[x] - sq[x]).abs() <= 1e-9;
            if margin < -1e-9 * scale || (tied && !endpoints_equal) {
                report.violations += 1;
            }
        }
    }
    report.passed = report.violations == 0;
    report
}
