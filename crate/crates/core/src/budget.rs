//! Natural budgets, the budget bound `B`, and the budget-constrained optimal
//! report.
//!
//! The natural budget of a move `q0 -> q` is the worst-case loss over
//! outcomes, `max_x [S_x(q0) - S_x(q)]`. A trader with budget `b` may report
//! any `q` whose natural budget is at most `b`; [`solve_constrained`] finds the
//! report maximizing her expected score over that set. [`oracle_constrained`]
//! answers the same question by exhaustive lattice search followed by an
//! exact optimality-condition polish, and exists to cross-check the solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid;
use crate::scoring::{check_domain, ScoringRule};
use crate::search::boundary;
use crate::search::kkt::Kkt;
use crate::search::refine::{self, beats, Incumbent};
use crate::search::Space;
use crate::simplex::{mix, segment_distance_raw, Distribution, ProductBelief};

/// A budget constraint counts as binding when within this of `b`.
pub const BINDING_TOLERANCE: f64 = 1e-7;

/// Largest lattice spacing the oracle accepts.
pub const MAX_ORACLE_RESOLUTION: f64 = 1e-2;

/// Largest outcome count the oracle enumerates.
pub const MAX_ORACLE_OUTCOMES: usize = 4;

const SLIDE_ROUNDS: usize = 4;
/// Stencil step when refinement resumes after a boundary slide.
const RESTART_STEP: f64 = 1e-6;

/// `max_x [S_x(q0) - S_x(q)]`.
pub fn natural_budget<R: ScoringRule + ?Sized>(rule: &R, q0: &Distribution, q: &Distribution) -> Result<f64> {
    q0.check_same_k(q)?;
    check_domain(rule, q0.probs())?;
    check_domain(rule, q.probs())?;
    Ok(raw_budget(rule, q0.probs(), q.probs()))
}

pub(crate) fn raw_budget<R: ScoringRule + ?Sized>(rule: &R, q0: &[f64], q: &[f64]) -> f64 {
    let k = q0.len();
    let mut s0 = vec![0.0; k];
    let mut s = vec![0.0; k];
    rule.scores_into(q0, &mut s0);
    rule.scores_into(q, &mut s);
    s0.iter().zip(&s).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max)
}

/// Per-outcome maximum and minimum of `S_x` over the rule's domain, found
/// numerically.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentExtremes {
    pub max: Vec<f64>,
    pub min: Vec<f64>,
}

pub fn component_extremes<R: ScoringRule + ?Sized>(rule: &R) -> ComponentExtremes {
    let k = rule.outcomes();
    let floor = rule.floor();
    let space = Space::Simplex { k, floor };
    let center = vec![1.0 / k as f64; k - 1];
    let mut q = vec![0.0; k];
    let mut extreme = |x: usize, sign: f64| {
        let best = refine::maximize(&space, center.clone(), |c| {
            space.point_unchecked(c, &mut q);
            space.contains(c, &q).then(|| sign * rule.component(&q, x))
        });
        sign * best.value
    };
    let max = (0..k).map(|x| extreme(x, 1.0)).collect();
    let min = (0..k).map(|x| extreme(x, -1.0)).collect();
    ComponentExtremes { max, min }
}

/// The largest natural budget of any move within the domain,
/// `B = max_x [max S_x - min S_x]`. Computed numerically and, where the rule
/// knows a closed form, checked against it (within 1e-4); the larger of the
/// two is returned so that `B` never undershoots.
pub fn budget_bound<R: ScoringRule + ?Sized>(rule: &R) -> Result<f64> {
    let ext = component_extremes(rule);
    let numeric = ext.max.iter().zip(&ext.min).map(|(a, b)| a - b).fold(0.0, f64::max);
    match rule.analytic_budget_bound() {
        Some(analytic) if (analytic - numeric).abs() > 1e-4 => {
            Err(Error::BoundMismatch { numeric, analytic })
        }
        Some(analytic) => Ok(analytic.max(numeric)),
        None => Ok(numeric),
    }
}

/// Outcome of a budget-constrained report search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedReport {
    pub q_star: Distribution,
    /// Outcomes whose budget constraint is tight within [`BINDING_TOLERANCE`].
    pub binding_outcomes: Vec<usize>,
    pub budget_used: f64,
    /// `p . S(q_star) - p . S(q0)`.
    pub expected_score_gain: f64,
    /// Distance from `q_star` to the segment `[q0, p]`.
    pub segment_deviation: f64,
}

/// Budget-constrained report over product beliefs; deviation is measured in
/// `(top, left)` parameter space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductReport {
    pub q_star: ProductBelief,
    pub joint: Distribution,
    pub binding_outcomes: Vec<usize>,
    pub budget_used: f64,
    pub expected_score_gain: f64,
    pub segment_deviation: f64,
}

/// One constrained-report problem in a concrete parameterization.
struct Instance<'a, R: ScoringRule + ?Sized> {
    rule: &'a R,
    space: Space,
    belief: Vec<f64>,
    belief_coords: Vec<f64>,
    base_coords: Vec<f64>,
    /// Scores at the reconstructed base point, so the base is exactly feasible.
    base_scores: Vec<f64>,
    budget: f64,
}

impl<'a, R: ScoringRule + ?Sized> Instance<'a, R> {
    fn new(
        rule: &'a R,
        space: Space,
        belief: Vec<f64>,
        belief_coords: Vec<f64>,
        base_coords: Vec<f64>,
        budget: f64,
    ) -> Self {
        let k = space.outcomes();
        let mut base = vec![0.0; k];
        space.point_unchecked(&base_coords, &mut base);
        let mut base_scores = vec![0.0; k];
        rule.scores_into(&base, &mut base_scores);
        Self { rule, space, belief, belief_coords, base_coords, base_scores, budget }
    }

    fn evaluator(&self) -> impl FnMut(&[f64]) -> Option<f64> + '_ {
        let k = self.space.outcomes();
        let mut q = vec![0.0; k];
        let mut s = vec![0.0; k];
        move |c: &[f64]| {
            self.space.point_unchecked(c, &mut q);
            if !self.space.contains(c, &q) {
                return None;
            }
            self.rule.scores_into(&q, &mut s);
            let mut worst = f64::NEG_INFINITY;
            let mut value = 0.0;
            for x in 0..k {
                worst = worst.max(self.base_scores[x] - s[x]);
                value += self.belief[x] * s[x];
            }
            (worst <= self.budget && value.is_finite()).then_some(value)
        }
    }

    fn thresholds(&self) -> Vec<f64> {
        self.base_scores.iter().map(|s| s - self.budget).collect()
    }

    fn solve(&self) -> Vec<f64> {
        let mut eval = self.evaluator();
        let start = if eval(&self.belief_coords).is_some() {
            self.belief_coords.clone()
        } else {
            self.base_coords.clone()
        };
        let mut best = refine::maximize(&self.space, start, &mut eval);
        for _ in 0..SLIDE_ROUNDS {
            match boundary::slide(&best, &mut eval, |c| self.constraint_values(c)) {
                Some(slid) => best = refine::pattern_search(slid, RESTART_STEP, RESTART_STEP, &mut eval),
                None => break,
            }
        }
        best.coords
    }

    /// Budget slacks `S_x(q) - S_x(q0) + b` followed by the domain slacks.
    fn constraint_values(&self, c: &[f64]) -> Vec<f64> {
        let q = self.ambient(c);
        let mut s = vec![0.0; q.len()];
        self.rule.scores_into(&q, &mut s);
        let mut out: Vec<f64> =
            s.iter().zip(&self.base_scores).map(|(s, base)| s - base + self.budget).collect();
        out.extend(self.space.domain_constraints(c).into_iter().map(|(g, _)| g));
        out
    }

    /// Exhaustive lattice search (plus the base point), then an exact polish.
    fn oracle(&self, divisions: usize) -> OracleSearch {
        let mut eval = self.evaluator();
        let base_value = eval(&self.base_coords).expect("base point is feasible");
        let mut best = Incumbent { coords: self.base_coords.clone(), value: base_value };
        self.space.for_each_lattice(divisions, |c| {
            if let Some(v) = eval(c) {
                if beats(v, c, &best) {
                    best = Incumbent { coords: c.to_vec(), value: v };
                }
            }
        });
        let thresholds = self.thresholds();
        let kkt = Kkt { rule: self.rule, space: &self.space, belief: &self.belief, thresholds: &thresholds };
        let polished = kkt.polish(&best.coords).filter(|p| p.value >= best.value - 1e-12);
        OracleSearch { grid: best, polished }
    }

    fn ambient(&self, c: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.space.outcomes()];
        self.space.point_unchecked(c, &mut q);
        q
    }
}

struct OracleSearch {
    grid: Incumbent,
    polished: Option<Incumbent>,
}

fn check_budget(b: f64) -> Result<()> {
    if b.is_nan() || b < 0.0 {
        return Err(Error::NegativeBudget(b));
    }
    Ok(())
}

fn validate_simplex_inputs<R: ScoringRule + ?Sized>(
    rule: &R,
    p: &Distribution,
    q0: &Distribution,
    b: f64,
) -> Result<()> {
    check_budget(b)?;
    p.check_same_k(q0)?;
    check_domain(rule, p.probs())?;
    check_domain(rule, q0.probs())
}

fn simplex_report<R: ScoringRule + ?Sized>(
    rule: &R,
    p: &Distribution,
    q0: &Distribution,
    b: f64,
    q_star: Distribution,
) -> ConstrainedReport {
    let k = rule.outcomes();
    let mut s0 = vec![0.0; k];
    let mut s = vec![0.0; k];
    rule.scores_into(q0.probs(), &mut s0);
    rule.scores_into(q_star.probs(), &mut s);
    let losses: Vec<f64> = s0.iter().zip(&s).map(|(a, b)| a - b).collect();
    let budget_used = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gain: f64 = p.probs().iter().zip(s.iter().zip(&s0)).map(|(p, (a, b))| p * (a - b)).sum();
    let segment_deviation = segment_distance_raw(q_star.probs(), q0.probs(), p.probs()).unwrap_or(0.0);
    ConstrainedReport {
        binding_outcomes: binding(&losses, b),
        q_star,
        budget_used,
        expected_score_gain: gain,
        segment_deviation,
    }
}

fn binding(losses: &[f64], b: f64) -> Vec<usize> {
    losses.iter().enumerate().filter(|(_, &l)| l >= b - BINDING_TOLERANCE).map(|(x, _)| x).collect()
}

/// The natural budget-constrained optimal report `q*(p, q0, b)`.
///
/// Coarse lattice search seeds an adaptive local grid refinement that runs
/// to a step below 1e-10. Ties are broken toward the lexicographically
/// smallest report.
pub fn solve_constrained<R: ScoringRule + ?Sized>(
    rule: &R,
    p: &Distribution,
    q0: &Distribution,
    b: f64,
) -> Result<ConstrainedReport> {
    validate_simplex_inputs(rule, p, q0, b)?;
    if p == q0 {
        return Ok(simplex_report(rule, p, q0, b, q0.clone()));
    }
    let space = Space::Simplex { k: rule.outcomes(), floor: rule.floor() };
    let inst = Instance::new(
        rule,
        space.clone(),
        p.probs().to_vec(),
        space.coords_of(p.probs()),
        space.coords_of(q0.probs()),
        b,
    );
    let coords = inst.solve();
    let q_star = Distribution::from_iterate(&inst.ambient(&coords))?;
    Ok(simplex_report(rule, p, q0, b, q_star))
}

/// Full oracle output: the lattice incumbent and the polished optimum.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleOutcome {
    pub report: ConstrainedReport,
    /// Best lattice point (or `q0`) before polishing.
    pub grid_point: Distribution,
    pub grid_gain: f64,
    /// Whether the optimality-condition polish succeeded.
    pub polished: bool,
}

/// Exhaustive verification oracle for [`solve_constrained`].
pub fn oracle_constrained<R: ScoringRule + ?Sized>(
    rule: &R,
    p: &Distribution,
    q0: &Distribution,
    b: f64,
    resolution: f64,
) -> Result<ConstrainedReport> {
    oracle_detailed(rule, p, q0, b, resolution).map(|o| o.report)
}

/// [`oracle_constrained`] with its intermediate lattice result.
pub fn oracle_detailed<R: ScoringRule + ?Sized>(
    rule: &R,
    p: &Distribution,
    q0: &Distribution,
    b: f64,
    resolution: f64,
) -> Result<OracleOutcome> {
    validate_simplex_inputs(rule, p, q0, b)?;
    check_resolution(resolution)?;
    if rule.outcomes() > MAX_ORACLE_OUTCOMES {
        return Err(Error::OracleDimension(rule.outcomes()));
    }
    if p == q0 {
        return Ok(OracleOutcome {
            report: simplex_report(rule, p, q0, b, q0.clone()),
            grid_point: q0.clone(),
            grid_gain: 0.0,
            polished: false,
        });
    }
    let space = Space::Simplex { k: rule.outcomes(), floor: rule.floor() };
    let inst = Instance::new(
        rule,
        space.clone(),
        p.probs().to_vec(),
        space.coords_of(p.probs()),
        space.coords_of(q0.probs()),
        b,
    );
    let search = inst.oracle(grid::divisions_for(resolution));
    let grid_point = Distribution::from_iterate(&inst.ambient(&search.grid.coords))?;
    let grid_gain = simplex_report(rule, p, q0, b, grid_point.clone()).expected_score_gain;
    let polished = search.polished.is_some();
    let final_coords = search.polished.map(|p| p.coords).unwrap_or(search.grid.coords);
    let q_star = Distribution::from_iterate(&inst.ambient(&final_coords))?;
    Ok(OracleOutcome { report: simplex_report(rule, p, q0, b, q_star), grid_point, grid_gain, polished })
}

fn check_resolution(resolution: f64) -> Result<()> {
    if !(resolution > 0.0 && resolution <= MAX_ORACLE_RESOLUTION) {
        return Err(Error::ResolutionTooCoarse(resolution));
    }
    Ok(())
}

/// Largest `alpha` in `[0, 1]` whose mixture `(1 - alpha) q0 + alpha p` fits
/// in budget `b`, by bisection to 1e-12. Fails if the natural budget is seen
/// to decrease along the segment.
pub fn max_alpha<R: ScoringRule + ?Sized>(
    rule: &R,
    p: &Distribution,
    q0: &Distribution,
    b: f64,
) -> Result<f64> {
    validate_simplex_inputs(rule, p, q0, b)?;
    let at = |alpha: f64| -> Result<f64> {
        let m = mix(q0, p, alpha)?;
        Ok(raw_budget(rule, q0.probs(), m.probs()))
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let (mut nb_lo, mut nb_hi) = (at(0.0)?, at(1.0)?);
    if nb_hi <= b {
        return Ok(1.0);
    }
    const SLACK: f64 = 1e-12;
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        let v = at(mid)?;
        if v < nb_lo - SLACK || v > nb_hi + SLACK {
            return Err(Error::NonMonotoneBudget { alpha: mid });
        }
        if v <= b {
            lo = mid;
            nb_lo = v;
        } else {
            hi = mid;
            nb_hi = v;
        }
    }
    Ok(lo)
}

fn validate_product_inputs<R: ScoringRule + ?Sized>(
    rule: &R,
    p: &ProductBelief,
    q0: &ProductBelief,
    b: f64,
) -> Result<()> {
    check_budget(b)?;
    if rule.outcomes() != 4 {
        return Err(Error::DimensionMismatch { expected: 4, got: rule.outcomes() });
    }
    check_domain(rule, p.expand().probs())?;
    check_domain(rule, q0.expand().probs())
}

fn product_report<R: ScoringRule + ?Sized>(
    rule: &R,
    p: &ProductBelief,
    q0: &ProductBelief,
    b: f64,
    q_star: ProductBelief,
) -> ProductReport {
    let joint = q_star.expand();
    let base = simplex_report(rule, &p.expand(), &q0.expand(), b, joint.clone());
    let segment_deviation = segment_distance_raw(&q_star.params(), &q0.params(), &p.params()).unwrap_or(0.0);
    ProductReport {
        q_star,
        joint,
        binding_outcomes: base.binding_outcomes,
        budget_used: base.budget_used,
        expected_score_gain: base.expected_score_gain,
        segment_deviation,
    }
}

fn product_instance<'a, R: ScoringRule + ?Sized>(
    rule: &'a R,
    p: &ProductBelief,
    q0: &ProductBelief,
    b: f64,
) -> Instance<'a, R> {
    Instance::new(
        rule,
        Space::Product { floor: rule.floor() },
        p.expand().probs().to_vec(),
        p.params().to_vec(),
        q0.params().to_vec(),
        b,
    )
}

fn params_of(c: &[f64]) -> ProductBelief {
    ProductBelief { top: c[0].clamp(0.0, 1.0), left: c[1].clamp(0.0, 1.0) }
}

/// [`solve_constrained`] over independent two-dimensional beliefs: reports
/// are pairs `(top, left)` scored through their joint expansion.
pub fn solve_constrained_product<R: ScoringRule + ?Sized>(
    rule: &R,
    p: &ProductBelief,
    q0: &ProductBelief,
    b: f64,
) -> Result<ProductReport> {
    validate_product_inputs(rule, p, q0, b)?;
    if p == q0 {
        return Ok(product_report(rule, p, q0, b, *q0));
    }
    let inst = product_instance(rule, p, q0, b);
    let coords = inst.solve();
    Ok(product_report(rule, p, q0, b, params_of(&coords)))
}

/// [`oracle_constrained`] over independent two-dimensional beliefs.
pub fn oracle_constrained_product<R: ScoringRule + ?Sized>(
    rule: &R,
    p: &ProductBelief,
    q0: &ProductBelief,
    b: f64,
    resolution: f64,
) -> Result<ProductReport> {
    validate_product_inputs(rule, p, q0, b)?;
    check_resolution(resolution)?;
    if p == q0 {
        return Ok(product_report(rule, p, q0, b, *q0));
    }
    let inst = product_instance(rule, p, q0, b);
    let search = inst.oracle(grid::divisions_for(resolution));
    let coords = search.polished.map(|p| p.coords).unwrap_or(search.grid.coords);
    Ok(product_report(rule, p, q0, b, params_of(&coords)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{Rule, DEFAULT_LOG_FLOOR};

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn natural_budget_examples() {
        let b2 = Rule::brier(2).unwrap();
        let q = d(&[0.3, 0.7]);
        assert_eq!(natural_budget(&b2, &q, &q).unwrap(), 0.0);
        assert_eq!(natural_budget(&b2, &d(&[1.0, 0.0]), &d(&[0.0, 1.0])).unwrap(), 2.0);
        let third = 1.0 / 3.0;
        let nb = natural_budget(&Rule::brier(3).unwrap(), &d(&[third, third, third]), &d(&[0.5, 0.25, 0.25]))
            .unwrap();
        assert!((nb - 5.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn natural_budget_domain_violation() {
        let l = Rule::log(2, DEFAULT_LOG_FLOOR).unwrap();
        assert!(matches!(
            natural_budget(&l, &d(&[0.5, 0.5]), &d(&[1.0, 0.0])),
            Err(Error::OutsideDomain { .. })
        ));
    }

    #[test]
    fn budget_bound_examples() {
        for k in 2..=4 {
            let b = budget_bound(&Rule::brier(k).unwrap()).unwrap();
            assert!((b - 2.0).abs() < 1e-4);
            let ext = component_extremes(&Rule::brier(k).unwrap());
            for x in 0..k {
                assert!((ext.max[x] - 1.0).abs() < 1e-4);
                assert!((ext.min[x] + 1.0).abs() < 1e-4);
            }
        }
        let l = Rule::log(3, 1e-3).unwrap();
        let ext = component_extremes(&l);
        let numeric = ext.max.iter().zip(&ext.min).map(|(a, b)| a - b).fold(0.0, f64::max);
        assert!((numeric - 998f64.ln()).abs() < 1e-4);
        assert!((budget_bound(&l).unwrap() - 998f64.ln()).abs() < 1e-12);
        assert_eq!(budget_bound(&Rule::log(2, 0.5).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_two_outcome_instance() {
        let rule = Rule::brier(2).unwrap();
        let q0 = d(&[0.5, 0.5]);
        let p = d(&[1.0, 0.0]);
        let t = (-1.0 + 1.1f64.sqrt()) / 2.0;
        let rep = solve_constrained(&rule, &p, &q0, 0.05).unwrap();
        assert!((rep.q_star.get(0) - (0.5 + t)).abs() < 1e-9, "{rep:?}");
        assert!((t - 0.024404).abs() < 1e-6);
        assert!(rep.budget_used <= 0.05 + 1e-7);
        assert_eq!(rep.binding_outcomes, vec![1]);
        let alpha = max_alpha(&rule, &p, &q0, 0.05).unwrap();
        assert!((alpha - t / 0.5).abs() < 1e-9);
        assert!((alpha - 0.048809).abs() < 1e-6);
        let oracle = oracle_constrained(&rule, &p, &q0, 0.05, 1e-3).unwrap();
        assert!((oracle.q_star.get(0) - (0.5 + t)).abs() < 1e-9);
    }

    #[test]
    fn slack_and_zero_budgets() {
        let rule = Rule::brier(3).unwrap();
        let q0 = d(&[0.2, 0.3, 0.5]);
        let p = d(&[0.6, 0.1, 0.3]);
        let big = solve_constrained(&rule, &p, &q0, 2.0).unwrap();
        assert!(big.q_star.distance(&p) < 1e-9, "{big:?}");
        assert!(big.binding_outcomes.is_empty());
        let zero = solve_constrained(&rule, &p, &q0, 0.0).unwrap();
        assert!(zero.q_star.distance(&q0) < 1e-12);
        assert!(zero.expected_score_gain.abs() < 1e-12);
        assert_eq!(max_alpha(&rule, &p, &q0, 2.0).unwrap(), 1.0);
        assert_eq!(max_alpha(&rule, &p, &q0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let rule = Rule::brier(3).unwrap();
        let q0 = d(&[0.2, 0.3, 0.5]);
        let rep = solve_constrained(&rule, &q0, &q0, 0.1).unwrap();
        assert_eq!(rep.q_star, q0);
        assert_eq!(rep.expected_score_gain, 0.0);
        assert_eq!(solve_constrained(&rule, &q0, &q0, -1.0), Err(Error::NegativeBudget(-1.0)));
        assert_eq!(oracle_constrained(&rule, &q0, &q0, 0.1, 0.05), Err(Error::ResolutionTooCoarse(0.05)));
        let r5 = Rule::brier(5).unwrap();
        let u5 = Distribution::uniform(5).unwrap();
        assert_eq!(oracle_constrained(&r5, &u5, &u5, 0.1, 1e-2), Err(Error::OracleDimension(5)));
    }

    #[test]
    fn oracle_unconstrained_returns_nearest_grid_point() {
        let rule = Rule::brier(3).unwrap();
        let q0 = d(&[0.2, 0.3, 0.5]);
        let p = d(&[0.6137, 0.1049, 0.2814]);
        let out = oracle_detailed(&rule, &p, &q0, 2.0, 1e-2).unwrap();
        assert!(out.grid_point.distance(&p) <= 1e-2);
        assert!(out.report.q_star.distance(&p) < 1e-9);
        let same = oracle_detailed(&rule, &q0, &q0, 0.3, 1e-2).unwrap();
        assert_eq!(same.grid_point, q0);
    }
}
