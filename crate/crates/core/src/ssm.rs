//! The scaled scoring mechanism. A trader deposits a budget `b'`; her trade
//! is scaled by `lambda = min(1, b'/B)`, so the reference moves only to the
//! mixture `(1 - lambda) pre + lambda report` and she is paid
//! `lambda [S_x(report) - S_x(pre)]`. With this scaling, reporting the true
//! belief with the true budget is optimal, no trader can lose more than her
//! deposit, and splitting a budget across identities never helps.

use serde::{Deserialize, Serialize};

use crate::budget::budget_bound;
use crate::error::{Error, Result};
use crate::grid;
use crate::msr::{worst_case_maker_loss, MarketState, Mechanism, TradeRecord};
use crate::scoring::{check_domain, Rule, ScoringRule};
use crate::simplex::{mix, segment_distance_raw, Distribution};

/// Tolerance of the property checks in this module.
pub const PROPERTY_TOLERANCE: f64 = 1e-9;

/// `min(1, b'/B)`; a budget of at least `B` always scales by one.
pub fn scale_factor(b_prime: f64, bound: f64) -> f64 {
    if b_prime >= bound {
        1.0
    } else {
        b_prime / bound
    }
}

impl MarketState {
    /// An empty scaled market; computes and caches `B` for `rule`.
    pub fn ssm(rule: Rule, initial: Distribution) -> Result<Self> {
        let bound = budget_bound(&rule)?;
        Self::with_mechanism(rule, initial, Mechanism::Ssm { bound })
    }

    /// The cached budget bound of a scaled market.
    pub fn bound(&self) -> Option<f64> {
        match self.mechanism() {
            Mechanism::Ssm { bound } => Some(bound),
            Mechanism::Msr => None,
        }
    }

    /// Deposits `b_prime` and moves the reference toward `report`.
    pub fn ssm_trade(&mut self, agent: &str, b_prime: f64, report: Distribution) -> Result<TradeRecord> {
        let bound = self.bound().ok_or(Error::WrongMechanism { expected: "ssm" })?;
        self.check_open()?;
        if !(b_prime.is_finite() && b_prime >= 0.0) {
            return Err(Error::NegativeBudget(b_prime));
        }
        self.check_report(&report)?;
        let lambda = scale_factor(b_prime, bound);
        let pre = self.reference().clone();
        let post = mix(&pre, &report, lambda)?;
        let record = TradeRecord {
            agent_id: agent.to_string(),
            report,
            reported_budget: b_prime,
            pre_reference: pre,
            post_reference: post,
            scale: lambda,
            realized_payoff: None,
            b_prime: Some(b_prime),
            lambda: Some(lambda),
        };
        Ok(self.push(record))
    }
}

/// Recovers the report from a scaled trade: `pre + (post - pre) / lambda`.
pub fn infer_belief(record: &TradeRecord) -> Result<Distribution> {
    let lambda = record.lambda.unwrap_or(record.scale);
    if lambda <= 0.0 {
        return Err(Error::ZeroScale);
    }
    let pre = record.pre_reference.probs();
    let post = record.post_reference.probs();
    let raw: Vec<f64> = pre.iter().zip(post).map(|(a, b)| a + (b - a) / lambda).collect();
    Distribution::from_iterate(&raw)
}

/// Expected payoff under `belief` of a scaled trade from `pre`.
pub fn expected_payoff<R: ScoringRule + ?Sized>(
    rule: &R,
    belief: &[f64],
    pre: &[f64],
    report: &[f64],
    b_prime: f64,
    bound: f64,
) -> f64 {
    scale_factor(b_prime, bound) * (rule.expected(belief, report) - rule.expected(belief, pre))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthfulnessReport {
    pub passed: bool,
    pub truthful_payoff: f64,
    pub best_grid_payoff: f64,
    pub best_grid_report: Distribution,
    pub best_grid_budget: f64,
    /// `truthful_payoff - best_grid_payoff`; at least `-1e-9` when passing.
    pub margin: f64,
    /// Truthful expected payoff is non-decreasing along the budget grid.
    pub monotone_in_budget: bool,
    /// Halving the budget strictly lowers the truthful payoff, when the
    /// comparison applies (belief differs from the base and `budget/2 < B`).
    pub underreport_strict: Option<bool>,
}

/// Number of budget levels between 0 and the true budget.
const BUDGET_LEVELS: usize = 20;

/// Compares truthful participation against every `(report, b')` pair on a
/// lattice of reports at `resolution` and a grid of budgets `b' <= budget`.
pub fn verify_truthfulness<R: ScoringRule + ?Sized>(
    rule: &R,
    q_base: &Distribution,
    belief: &Distribution,
    budget: f64,
    resolution: f64,
) -> Result<TruthfulnessReport> {
    q_base.check_same_k(belief)?;
    check_domain(rule, q_base.probs())?;
    check_domain(rule, belief.probs())?;
    if !(budget.is_finite() && budget >= 0.0) {
        return Err(Error::NegativeBudget(budget));
    }
    if !(resolution > 0.0 && resolution <= 0.5) {
        return Err(Error::ResolutionTooCoarse(resolution));
    }
    let bound = budget_bound(rule)?;
    let (p, base) = (belief.probs(), q_base.probs());
    let budgets: Vec<f64> = (0..=BUDGET_LEVELS).map(|j| budget * j as f64 / BUDGET_LEVELS as f64).collect();
    let truthful_payoff = expected_payoff(rule, p, base, p, budget, bound);

    let mut best = (f64::NEG_INFINITY, belief.clone(), budget);
    grid::for_each_point(rule.outcomes(), rule.floor(), grid::divisions_for(resolution), |q| {
        for &b in &budgets {
            let v = expected_payoff(rule, p, base, q, b, bound);
            if v > best.0 {
                best = (v, Distribution::from_iterate(q).expect("lattice point"), b);
            }
        }
    });

    let along: Vec<f64> = budgets.iter().map(|&b| expected_payoff(rule, p, base, p, b, bound)).collect();
    let monotone_in_budget = along.windows(2).all(|w| w[1] >= w[0] - PROPERTY_TOLERANCE);
    let underreport_strict = (belief != q_base && budget > 0.0 && budget / 2.0 < bound)
        .then(|| expected_payoff(rule, p, base, p, budget / 2.0, bound) < truthful_payoff);
    let margin = truthful_payoff - best.0;
    Ok(TruthfulnessReport {
        passed: margin >= -PROPERTY_TOLERANCE && monotone_in_budget && underreport_strict != Some(false),
        truthful_payoff,
        best_grid_payoff: best.0,
        best_grid_report: best.1,
        best_grid_budget: best.2,
        margin,
        monotone_in_budget,
        underreport_strict,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossDominance {
    pub passed: bool,
    /// Smallest `[S_x(ref_i) - S_x(ref_{i-1})] - lambda_i [S_x(q_i) - S_x(ref_{i-1})]`.
    pub worst_margin: f64,
    pub inequalities: usize,
    /// Scaled maker loss per outcome.
    pub ssm_loss: Vec<f64>,
    /// Plain maker loss per outcome on the scaled reference sequence.
    pub reference_loss: Vec<f64>,
    pub msr_worst_case: f64,
}

/// Runs `reports` with `budgets` through a scaled market from `initial` and
/// checks the per-outcome concavity inequality on every trade, then that the
/// total scaled maker loss stays below the plain worst case.
pub fn verify_loss_dominance(
    rule: &Rule,
    initial: &Distribution,
    reports: &[Distribution],
    budgets: &[f64],
) -> Result<LossDominance> {
    if reports.len() != budgets.len() {
        return Err(Error::DimensionMismatch { expected: reports.len(), got: budgets.len() });
    }
    let mut market = MarketState::ssm(rule.clone(), initial.clone())?;
    for (i, (r, &b)) in reports.iter().zip(budgets).enumerate() {
        market.ssm_trade(&format!("trader-{i}"), b, r.clone())?;
    }
    let k = rule.outcomes();
    let mut worst_margin = f64::INFINITY;
    let mut ssm_loss = vec![0.0; k];
    for rec in market.ledger() {
        for x in 0..k {
            let moved =
                rule.component(rec.post_reference.probs(), x) - rule.component(rec.pre_reference.probs(), x);
            let paid = rec.payoff(rule, x);
            worst_margin = worst_margin.min(moved - paid);
            ssm_loss[x] += paid;
        }
    }
    let reference_loss: Vec<f64> = (0..k)
        .map(|x| rule.component(market.reference().probs(), x) - rule.component(initial.probs(), x))
        .collect();
    let msr_worst_case = worst_case_maker_loss(rule, initial)?;
    if market.ledger().is_empty() {
        worst_margin = 0.0;
    }
    let dominated = ssm_loss
        .iter()
        .zip(&reference_loss)
        .all(|(s, r)| *s <= r + PROPERTY_TOLERANCE && *s <= msr_worst_case + PROPERTY_TOLERANCE);
    Ok(LossDominance {
        passed: worst_margin >= -PROPERTY_TOLERANCE && dominated,
        worst_margin,
        inequalities: market.ledger().len() * k,
        ssm_loss,
        reference_loss,
        msr_worst_case,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SybilComparison {
    /// Expected payoff of the consecutive split trades.
    pub split_payoff: f64,
    /// Best single trade with the whole budget, over the split reports and
    /// the belief itself.
    pub single_payoff: f64,
    /// `single_payoff - split_payoff`.
    pub margin: f64,
    pub passed: bool,
}

/// Expected payoff (under `belief`) of trading consecutively with budget
/// `shares[i]` and report `reports[i]` from `q_base`, compared against one
/// trade with the combined budget.
pub fn simulate_sybil_split<R: ScoringRule + ?Sized>(
    rule: &R,
    q_base: &Distribution,
    belief: &Distribution,
    shares: &[f64],
    reports: &[Distribution],
    bound: f64,
) -> Result<SybilComparison> {
    if shares.len() != reports.len() || shares.is_empty() {
        return Err(Error::DimensionMismatch { expected: shares.len(), got: reports.len() });
    }
    if let Some(&bad) = shares.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::NegativeBudget(bad));
    }
    q_base.check_same_k(belief)?;
    check_domain(rule, q_base.probs())?;
    check_domain(rule, belief.probs())?;
    for r in reports {
        q_base.check_same_k(r)?;
        check_domain(rule, r.probs())?;
    }
    let p = belief.probs();
    let total: f64 = shares.iter().sum();
    let mut pre = q_base.clone();
    let mut split_payoff = 0.0;
    for (&share, r) in shares.iter().zip(reports) {
        split_payoff += expected_payoff(rule, p, pre.probs(), r.probs(), share, bound);
        pre = mix(&pre, r, scale_factor(share, bound))?;
    }
    let single_payoff = reports
        .iter()
        .chain(std::iter::once(belief))
        .map(|r| expected_payoff(rule, p, q_base.probs(), r.probs(), total, bound))
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = single_payoff - split_payoff;
    Ok(SybilComparison { split_payoff, single_payoff, margin, passed: margin >= -PROPERTY_TOLERANCE })
}

/// Distance from a scaled trade's post-reference to `[pre, report]`.
pub fn reference_segment_distance(record: &TradeRecord) -> f64 {
    segment_distance_raw(record.post_reference.probs(), record.pre_reference.probs(), record.report.probs())
        .unwrap_or_else(|| record.post_reference.distance(&record.pre_reference))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msr::{read_jsonl, write_jsonl};

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    fn market() -> MarketState {
        MarketState::ssm(Rule::brier(2).unwrap(), d(&[0.5, 0.5])).unwrap()
    }

    #[test]
    fn full_budget_matches_plain_engine() {
        let mut s = market();
        let rec = s.ssm_trade("a", 3.0, d(&[0.8, 0.2])).unwrap();
        assert_eq!(rec.scale, 1.0);
        assert_eq!(s.reference(), &d(&[0.8, 0.2]));
        let mut m = MarketState::msr(Rule::brier(2).unwrap(), d(&[0.5, 0.5])).unwrap();
        m.msr_trade("a", d(&[0.8, 0.2])).unwrap();
        assert_eq!(s.settle(0).unwrap().payoffs, m.settle(0).unwrap().payoffs);
    }

    #[test]
    fn half_budget_mixture() {
        let mut s = market();
        let rec = s.ssm_trade("a", 1.0, d(&[0.9, 0.1])).unwrap();
        assert_eq!(rec.lambda, Some(0.5));
        assert!(rec.post_reference.distance(&d(&[0.7, 0.3])) < 1e-15);
        let back = infer_belief(&rec).unwrap();
        assert!(back.distance(&d(&[0.9, 0.1])) < 1e-12);
    }

    #[test]
    fn zero_budget_is_inert() {
        let mut s = market();
        let rec = s.ssm_trade("a", 0.0, d(&[0.9, 0.1])).unwrap();
        assert_eq!(rec.scale, 0.0);
        assert_eq!(s.reference(), &d(&[0.5, 0.5]));
        assert_eq!(rec.payoff_vector(s.rule()), vec![0.0, 0.0]);
        assert_eq!(infer_belief(&rec), Err(Error::ZeroScale));
    }

    #[test]
    fn trade_errors() {
        let mut s = market();
        assert_eq!(s.ssm_trade("a", -1.0, d(&[0.9, 0.1])), Err(Error::NegativeBudget(-1.0)));
        s.settle(0).unwrap();
        assert_eq!(s.ssm_trade("a", 1.0, d(&[0.9, 0.1])), Err(Error::AlreadySettled));
        let mut m = MarketState::msr(Rule::brier(2).unwrap(), d(&[0.5, 0.5])).unwrap();
        assert_eq!(m.ssm_trade("a", 1.0, d(&[0.9, 0.1])), Err(Error::WrongMechanism { expected: "ssm" }));
    }

    #[test]
    fn escrow_and_no_default() {
        let mut s = market();
        s.ssm_trade("a", 0.5, d(&[1.0, 0.0])).unwrap();
        s.ssm_trade("b", 0.25, d(&[0.0, 1.0])).unwrap();
        assert_eq!(s.escrow(), 0.75);
        let settled = s.settle(1).unwrap();
        assert_eq!(s.escrow(), 0.0);
        for (rec, back) in s.ledger().iter().zip(&settled.returned) {
            assert!(rec.realized_payoff.unwrap() >= -rec.b_prime.unwrap());
            assert!(*back >= 0.0);
        }
        assert!(s.check_path_invariance().unwrap().passed);
    }

    #[test]
    fn belief_equal_to_base_ties_everything() {
        let rule = Rule::brier(3).unwrap();
        let q = d(&[0.2, 0.3, 0.5]);
        let rep = verify_truthfulness(&rule, &q, &q, 0.4, 0.05).unwrap();
        assert!(rep.passed);
        assert_eq!(rep.truthful_payoff, 0.0);
        assert!(rep.best_grid_payoff <= 1e-12);
        assert_eq!(rep.underreport_strict, None);
    }

    #[test]
    fn truthfulness_on_an_instance() {
        let rule = Rule::brier(3).unwrap();
        let rep = verify_truthfulness(&rule, &d(&[0.2, 0.3, 0.5]), &d(&[0.5, 0.1, 0.4]), 0.3, 0.01).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.underreport_strict, Some(true));
    }

    #[test]
    fn loss_dominance_extremes() {
        let rule = Rule::brier(3).unwrap();
        let u = Distribution::uniform(3).unwrap();
        let reports = vec![d(&[0.6, 0.2, 0.2]), d(&[0.1, 0.1, 0.8])];
        let full = verify_loss_dominance(&rule, &u, &reports, &[5.0, 5.0]).unwrap();
        assert!(full.passed);
        assert!(full.worst_margin.abs() < 1e-12);
        let none = verify_loss_dominance(&rule, &u, &reports, &[0.0, 0.0]).unwrap();
        assert!(none.passed);
        assert_eq!(none.worst_margin, 0.0);
    }

    #[test]
    fn sybil_degenerate_and_truthful_splits() {
        let rule = Rule::brier(3).unwrap();
        let base = d(&[0.2, 0.3, 0.5]);
        let belief = d(&[0.5, 0.3, 0.2]);
        let same =
            simulate_sybil_split(&rule, &base, &belief, &[0.6, 0.0], &[belief.clone(), belief.clone()], 2.0)
                .unwrap();
        assert!(same.margin.abs() < 1e-15);
        let halves =
            simulate_sybil_split(&rule, &base, &belief, &[0.3, 0.3], &[belief.clone(), belief.clone()], 2.0)
                .unwrap();
        assert!(halves.margin > 0.0);
        assert!(matches!(
            simulate_sybil_split(&rule, &base, &belief, &[-0.1, 0.2], &[base.clone(), base.clone()], 2.0),
            Err(Error::NegativeBudget(_))
        ));
    }

    /// With the reference moved all the way to each raw report, a sybil can
    /// first drag the market away from her belief cheaply and then profit
    /// from correcting it.
    #[test]
    fn raw_report_reference_admits_profitable_splits() {
        let rule = Rule::brier(3).unwrap();
        let bound = 2.0;
        let base = d(&[0.3, 0.3, 0.4]);
        let belief = d(&[0.6, 0.2, 0.2]);
        let decoy = d(&[0.0, 0.0, 1.0]);
        let p = belief.probs();
        let (b1, b2) = (0.01, 0.4);
        let raw_split = scale_factor(b1, bound)
            * (rule.expected(p, decoy.probs()) - rule.expected(p, base.probs()))
            + scale_factor(b2, bound) * (rule.expected(p, p) - rule.expected(p, decoy.probs()));
        let single = scale_factor(b1 + b2, bound) * (rule.expected(p, p) - rule.expected(p, base.probs()));
        assert!(raw_split > single + 1e-3);
        let scaled =
            simulate_sybil_split(&rule, &base, &belief, &[b1, b2], &[decoy, belief.clone()], bound).unwrap();
        assert!(scaled.passed);
    }

    #[test]
    fn ledger_round_trip_keeps_scaled_fields() {
        let mut s = market();
        s.ssm_trade("a", 0.3, d(&[0.9, 0.1])).unwrap();
        s.settle(0).unwrap();
        let mut buf = Vec::new();
        write_jsonl(s.ledger(), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"b_prime\":0.3") && text.contains("\"lambda\":0.15"));
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), s.ledger());
    }
}
