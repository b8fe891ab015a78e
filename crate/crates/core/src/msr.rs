//! Market scoring rule engine: a sequence of traders each move the market
//! reference, and at settlement trader `i` is paid
//! `scale_i * [S_x(report_i) - S_x(reference_{i-1})]`.
//!
//! The same [`MarketState`] also runs the scaled mechanism (see
//! [`crate::ssm`]); the two differ only in how the scale is chosen and how
//! far the reference moves.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::budget::{component_extremes, raw_budget};
use crate::error::{Error, Result};
use crate::scoring::{check_domain, Rule, RuleSpec, ScoringRule};
use crate::simplex::Distribution;

/// Residual tolerance of the telescoping identity.
pub const PATH_TOLERANCE: f64 = 1e-9;

/// One ledger line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub agent_id: String,
    pub report: Distribution,
    /// Payoff units. Recorded by the plain engine, escrowed by the scaled one.
    pub reported_budget: f64,
    pub pre_reference: Distribution,
    pub post_reference: Distribution,
    pub scale: f64,
    pub realized_payoff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_prime: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl TradeRecord {
    /// `scale * [S_outcome(report) - S_outcome(pre_reference)]`.
    pub fn payoff<R: ScoringRule + ?Sized>(&self, rule: &R, outcome: usize) -> f64 {
        self.scale
            * (rule.component(self.report.probs(), outcome)
                - rule.component(self.pre_reference.probs(), outcome))
    }

    /// Payoff under every outcome.
    pub fn payoff_vector<R: ScoringRule + ?Sized>(&self, rule: &R) -> Vec<f64> {
        (0..rule.outcomes()).map(|x| self.payoff(rule, x)).collect()
    }
}

/// Which update rule a market applies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    /// Reference jumps to each report; scale 1.
    Msr,
    /// Reference moves to a `lambda`-mixture; `bound` is the cached `B`.
    Ssm { bound: f64 },
}

impl Mechanism {
    pub fn tag(&self) -> &'static str {
        match self {
            Mechanism::Msr => "msr",
            Mechanism::Ssm { .. } => "ssm",
        }
    }
}

/// Result of [`MarketState::settle`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settlement {
    pub outcome: usize,
    /// Net payoff per trade, in ledger order.
    pub payoffs: Vec<f64>,
    /// Deposit returned plus payoff, per trade; never negative.
    pub returned: Vec<f64>,
    /// Sum of all payoffs.
    pub maker_loss: f64,
}

/// Result of [`MarketState::check_path_invariance`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathInvariance {
    pub outcome: usize,
    pub total_payoff: f64,
    /// `S_outcome(final reference) - S_outcome(initial)`.
    pub telescoped: f64,
    /// `total_payoff - telescoped`.
    pub residual: f64,
    /// Exact identity for the plain engine, `residual <= tolerance` for the
    /// scaled one.
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct MarketState {
    rule: Rule,
    initial: Distribution,
    reference: Distribution,
    ledger: Vec<TradeRecord>,
    settled_outcome: Option<usize>,
    mechanism: Mechanism,
    budget_guard: bool,
    escrow: f64,
}

impl MarketState {
    /// A plain market scoring rule market starting at `initial`.
    pub fn msr(rule: Rule, initial: Distribution) -> Result<Self> {
        Self::with_mechanism(rule, initial, Mechanism::Msr)
    }

    pub fn with_mechanism(rule: Rule, initial: Distribution, mechanism: Mechanism) -> Result<Self> {
        check_k(&rule, &initial)?;
        check_domain(&rule, initial.probs())?;
        if let Mechanism::Ssm { bound } = mechanism {
            if !(bound.is_finite() && bound >= 0.0) {
                return Err(Error::Invalid(format!("budget bound {bound}")));
            }
        }
        Ok(Self {
            rule,
            reference: initial.clone(),
            initial,
            ledger: Vec::new(),
            settled_outcome: None,
            mechanism,
            budget_guard: false,
            escrow: 0.0,
        })
    }

    /// Rebuilds a market from stored records without re-executing them.
    /// The reference becomes the last record's post-reference.
    pub fn from_parts(
        rule: Rule,
        initial: Distribution,
        mechanism: Mechanism,
        ledger: Vec<TradeRecord>,
        settled_outcome: Option<usize>,
    ) -> Result<Self> {
        let mut state = Self::with_mechanism(rule, initial, mechanism)?;
        for rec in &ledger {
            for d in [&rec.report, &rec.pre_reference, &rec.post_reference] {
                check_k(&state.rule, d)?;
            }
        }
        if let Some(x) = settled_outcome {
            state.check_outcome(x)?;
        }
        if let Some(last) = ledger.last() {
            state.reference = last.post_reference.clone();
        }
        state.escrow = ledger.iter().map(|r| r.b_prime.unwrap_or(0.0)).sum();
        state.ledger = ledger;
        state.settled_outcome = settled_outcome;
        Ok(state)
    }

    /// Reject plain trades whose natural budget exceeds the reported budget.
    pub fn with_budget_guard(mut self, enabled: bool) -> Self {
        self.budget_guard = enabled;
        self
    }

    pub fn rule(&self) -> &Rule {
        &self.rule
    }

    pub fn initial(&self) -> &Distribution {
        &self.initial
    }

    pub fn reference(&self) -> &Distribution {
        &self.reference
    }

    pub fn ledger(&self) -> &[TradeRecord] {
        &self.ledger
    }

    pub fn settled_outcome(&self) -> Option<usize> {
        self.settled_outcome
    }

    pub fn mechanism(&self) -> Mechanism {
        self.mechanism
    }

    /// Total deposits currently held.
    pub fn escrow(&self) -> f64 {
        self.escrow
    }

    pub(crate) fn check_open(&self) -> Result<()> {
        match self.settled_outcome {
            Some(_) => Err(Error::AlreadySettled),
            None => Ok(()),
        }
    }

    pub(crate) fn check_report(&self, report: &Distribution) -> Result<()> {
        check_k(&self.rule, report)?;
        check_domain(&self.rule, report.probs())
    }

    fn check_outcome(&self, outcome: usize) -> Result<()> {
        let k = self.rule.outcomes();
        if outcome >= k {
            return Err(Error::OutcomeOutOfRange { index: outcome, k });
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, record: TradeRecord) -> TradeRecord {
        self.reference = record.post_reference.clone();
        self.escrow += record.b_prime.unwrap_or(0.0);
        self.ledger.push(record.clone());
        record
    }

    /// A plain trade: the reference jumps to `report`.
    pub fn msr_trade(&mut self, agent: &str, report: Distribution) -> Result<TradeRecord> {
        self.msr_trade_with_budget(agent, report, 0.0)
    }

    /// A plain trade that records `budget`, and enforces it when the budget
    /// guard is on.
    pub fn msr_trade_with_budget(
        &mut self,
        agent: &str,
        report: Distribution,
        budget: f64,
    ) -> Result<TradeRecord> {
        if self.mechanism != Mechanism::Msr {
            return Err(Error::WrongMechanism { expected: "msr" });
        }
        self.check_open()?;
        self.check_report(&report)?;
        if budget.is_nan() || budget < 0.0 {
            return Err(Error::NegativeBudget(budget));
        }
        if self.budget_guard {
            let required = raw_budget(&self.rule, self.reference.probs(), report.probs());
            if required > budget {
                return Err(Error::BudgetExceeded { required, reported: budget });
            }
        }
        let record = TradeRecord {
            agent_id: agent.to_string(),
            pre_reference: self.reference.clone(),
            post_reference: report.clone(),
            report,
            reported_budget: budget,
            scale: 1.0,
            realized_payoff: None,
            b_prime: None,
            lambda: None,
        };
        Ok(self.push(record))
    }

    /// Fills every record's payoff, returns deposits, and closes the market.
    pub fn settle(&mut self, outcome: usize) -> Result<Settlement> {
        self.check_open()?;
        self.check_outcome(outcome)?;
        let mut payoffs = Vec::with_capacity(self.ledger.len());
        let mut returned = Vec::with_capacity(self.ledger.len());
        for rec in &mut self.ledger {
            let mut pay = rec.payoff(&self.rule, outcome);
            if let Some(deposit) = rec.b_prime {
                // the deposit caps the loss; only round-off can reach past it
                pay = pay.max(-deposit);
                returned.push(deposit + pay);
            } else {
                returned.push(pay);
            }
            rec.realized_payoff = Some(pay);
            payoffs.push(pay);
        }
        self.escrow = 0.0;
        self.settled_outcome = Some(outcome);
        let maker_loss = payoffs.iter().sum();
        Ok(Settlement { outcome, payoffs, returned, maker_loss })
    }

    /// Compares the recorded payoffs against the telescoped score change.
    pub fn check_path_invariance(&self) -> Result<PathInvariance> {
        let outcome = self.settled_outcome.ok_or(Error::NotSettled)?;
        let total_payoff: f64 = self.ledger.iter().map(|r| r.realized_payoff.unwrap_or(0.0)).sum();
        let telescoped = self.rule.component(self.reference.probs(), outcome)
            - self.rule.component(self.initial.probs(), outcome);
        let residual = total_payoff - telescoped;
        let passed = match self.mechanism {
            Mechanism::Msr => residual.abs() <= PATH_TOLERANCE,
            Mechanism::Ssm { .. } => residual <= PATH_TOLERANCE,
        };
        Ok(PathInvariance { outcome, total_payoff, telescoped, residual, passed })
    }

    /// Worst-case maker loss for this market's rule and initial forecast.
    pub fn worst_case_maker_loss(&self) -> f64 {
        worst_case_maker_loss(&self.rule, &self.initial).expect("initial is in the domain")
    }
}

fn check_k<R: ScoringRule + ?Sized>(rule: &R, d: &Distribution) -> Result<()> {
    if d.k() != rule.outcomes() {
        return Err(Error::DimensionMismatch { expected: rule.outcomes(), got: d.k() });
    }
    Ok(())
}

/// `max_q [S_x(q) - S_x(initial)]` per outcome, found numerically.
pub fn worst_case_by_outcome<R: ScoringRule + ?Sized>(rule: &R, initial: &Distribution) -> Result<Vec<f64>> {
    check_k(rule, initial)?;
    check_domain(rule, initial.probs())?;
    let ext = component_extremes(rule);
    Ok((0..rule.outcomes()).map(|x| (ext.max[x] - rule.component(initial.probs(), x)).max(0.0)).collect())
}

/// Largest possible total maker loss of a market started at `initial`.
pub fn worst_case_maker_loss<R: ScoringRule + ?Sized>(rule: &R, initial: &Distribution) -> Result<f64> {
    Ok(worst_case_by_outcome(rule, initial)?.into_iter().fold(0.0, f64::max))
}

/// Market description accepted by the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub rule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    pub initial: Distribution,
    pub mechanism: String,
}

impl MarketConfig {
    pub fn rule(&self) -> Result<Rule> {
        RuleSpec { rule: self.rule.clone(), floor: self.floor }.build(self.initial.k())
    }

    /// Builds an empty market; the scaled mechanism computes and caches `B`.
    pub fn build(&self) -> Result<MarketState> {
        let rule = self.rule()?;
        let mechanism = match self.mechanism.as_str() {
            "msr" => Mechanism::Msr,
            "ssm" => Mechanism::Ssm { bound: crate::budget::budget_bound(&rule)? },
            other => return Err(Error::Invalid(format!("unknown mechanism {other:?}"))),
        };
        MarketState::with_mechanism(rule, self.initial.clone(), mechanism)
    }
}

/// Writes one JSON object per line. Floats use the shortest representation
/// that parses back to the same bits.
pub fn write_jsonl<W: Write>(records: &[TradeRecord], mut out: W) -> Result<()> {
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::Io(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::Io(e.to_string()))
}

/// Reads records written by [`write_jsonl`]; blank lines are skipped.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TradeRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Outcome of re-executing a stored ledger.
#[derive(Clone, Debug)]
pub struct Replay {
    pub state: MarketState,
    pub settlement: Option<Settlement>,
    /// Indices of records whose stored fields disagree with re-execution.
    pub mismatches: Vec<usize>,
    /// Largest absolute difference between stored and re-derived payoffs.
    pub max_payoff_diff: f64,
}

/// Re-executes `records` from `initial` through the given mechanism, then
/// settles at `outcome` if given, and reports every record whose stored
/// references, scale, or payoff disagree with the re-derived one.
pub fn replay(
    rule: Rule,
    initial: Distribution,
    mechanism: Mechanism,
    records: &[TradeRecord],
    outcome: Option<usize>,
) -> Result<Replay> {
    let mut state = MarketState::with_mechanism(rule, initial, mechanism)?;
    for rec in records {
        match mechanism {
            Mechanism::Msr => {
                state.msr_trade_with_budget(&rec.agent_id, rec.report.clone(), rec.reported_budget)?
            }
            Mechanism::Ssm { .. } => {
                let b = rec.b_prime.unwrap_or(rec.reported_budget);
                state.ssm_trade(&rec.agent_id, b, rec.report.clone())?
            }
        };
    }
    let settlement = outcome.map(|x| state.settle(x)).transpose()?;
    let mut mismatches = Vec::new();
    let mut max_payoff_diff: f64 = 0.0;
    for (i, (stored, fresh)) in records.iter().zip(state.ledger()).enumerate() {
        let mut same = stored.pre_reference == fresh.pre_reference
            && stored.post_reference == fresh.post_reference
            && stored.scale == fresh.scale;
        if let (Some(a), Some(b)) = (stored.realized_payoff, fresh.realized_payoff) {
            max_payoff_diff = max_payoff_diff.max((a - b).abs());
            same &= a == b;
        }
        if !same {
            mismatches.push(i);
        }
    }
    Ok(Replay { state, settlement, mismatches, max_payoff_diff })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::DEFAULT_LOG_FLOOR;

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    fn brier_market() -> MarketState {
        MarketState::msr(Rule::brier(2).unwrap(), d(&[0.5, 0.5])).unwrap()
    }

    #[test]
    fn realized_payoff_example() {
        let mut m = brier_market();
        m.msr_trade("a", d(&[0.8, 0.2])).unwrap();
        let s = m.settle(0).unwrap();
        assert!((s.payoffs[0] - 0.42).abs() < 1e-15);
        assert_eq!(m.ledger()[0].realized_payoff, Some(s.payoffs[0]));
    }

    #[test]
    fn no_move_trade_pays_nothing() {
        let mut m = brier_market();
        let rec = m.msr_trade("a", d(&[0.5, 0.5])).unwrap();
        assert_eq!(rec.payoff_vector(m.rule()), vec![0.0, 0.0]);
    }

    #[test]
    fn consecutive_trades_telescope() {
        let mut two = brier_market();
        two.msr_trade("a", d(&[0.7, 0.3])).unwrap();
        two.msr_trade("b", d(&[0.9, 0.1])).unwrap();
        let mut one = brier_market();
        one.msr_trade("a", d(&[0.9, 0.1])).unwrap();
        for x in 0..2 {
            let total: f64 = two.ledger().iter().map(|r| r.payoff(two.rule(), x)).sum();
            assert!((total - one.ledger()[0].payoff(one.rule(), x)).abs() < 1e-15);
        }
    }

    #[test]
    fn settlement_rules() {
        let mut m = brier_market();
        assert_eq!(m.settle(0).unwrap().maker_loss, 0.0);
        assert_eq!(m.settle(0), Err(Error::AlreadySettled));
        assert_eq!(m.msr_trade("a", d(&[0.6, 0.4])), Err(Error::AlreadySettled));
        let mut m = brier_market();
        assert_eq!(m.settle(2), Err(Error::OutcomeOutOfRange { index: 2, k: 2 }));
        m.msr_trade("a", d(&[1.0, 0.0])).unwrap();
        assert!((m.settle(0).unwrap().maker_loss - 0.5).abs() < 1e-15);
        assert!(m.check_path_invariance().unwrap().passed);
    }

    #[test]
    fn path_invariance_requires_settlement() {
        let m = brier_market();
        assert_eq!(m.check_path_invariance(), Err(Error::NotSettled));
        let mut m = brier_market();
        m.settle(1).unwrap();
        let check = m.check_path_invariance().unwrap();
        assert!(check.passed);
        assert_eq!(check.residual, 0.0);
    }

    #[test]
    fn corrupted_record_shows_exact_residual() {
        let mut m = brier_market();
        m.msr_trade("a", d(&[0.7, 0.3])).unwrap();
        m.msr_trade("b", d(&[0.2, 0.8])).unwrap();
        m.settle(1).unwrap();
        let mut ledger = m.ledger().to_vec();
        let delta = 0.125;
        ledger[0].realized_payoff = ledger[0].realized_payoff.map(|v| v + delta);
        let bad =
            MarketState::from_parts(m.rule().clone(), m.initial().clone(), Mechanism::Msr, ledger, Some(1))
                .unwrap();
        let check = bad.check_path_invariance().unwrap();
        assert!(!check.passed);
        assert!((check.residual - delta).abs() < 1e-12);
    }

    #[test]
    fn domain_and_guard_errors() {
        let log = Rule::log(2, DEFAULT_LOG_FLOOR).unwrap();
        let mut m = MarketState::msr(log, d(&[0.5, 0.5])).unwrap();
        assert!(matches!(m.msr_trade("a", d(&[1.0, 0.0])), Err(Error::OutsideDomain { .. })));
        let mut g = brier_market().with_budget_guard(true);
        assert!(matches!(
            g.msr_trade_with_budget("a", d(&[1.0, 0.0]), 0.1),
            Err(Error::BudgetExceeded { .. })
        ));
        g.msr_trade_with_budget("a", d(&[1.0, 0.0]), 1.5).unwrap();
    }

    #[test]
    fn worst_case_examples() {
        let b = Rule::brier(2).unwrap();
        assert!((worst_case_maker_loss(&b, &d(&[0.5, 0.5])).unwrap() - 0.5).abs() < 1e-9);
        let l = Rule::log(2, 1e-3).unwrap();
        let w = worst_case_maker_loss(&l, &d(&[0.5, 0.5])).unwrap();
        assert!((w - (0.999f64 / 0.5).ln()).abs() < 1e-9);
        let corner = worst_case_by_outcome(&b, &d(&[1.0, 0.0])).unwrap();
        assert!(corner[0].abs() < 1e-12);
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let mut m = brier_market();
        m.msr_trade("a", d(&[0.1 + 0.2, 0.7])).unwrap();
        m.msr_trade("b", d(&[1.0 / 3.0, 2.0 / 3.0])).unwrap();
        m.settle(0).unwrap();
        let mut buf = Vec::new();
        write_jsonl(m.ledger(), &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, m.ledger());
        let mut again = Vec::new();
        write_jsonl(&back, &mut again).unwrap();
        assert_eq!(buf, again);
        assert!(matches!(read_jsonl("{oops\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn replay_reproduces_payoffs() {
        let mut m = brier_market();
        m.msr_trade("a", d(&[0.7, 0.3])).unwrap();
        m.msr_trade("b", d(&[0.4, 0.6])).unwrap();
        m.settle(0).unwrap();
        let r = replay(m.rule().clone(), m.initial().clone(), Mechanism::Msr, m.ledger(), Some(0)).unwrap();
        assert!(r.mismatches.is_empty());
        assert_eq!(r.max_payoff_diff, 0.0);
    }

    #[test]
    fn market_config_builds() {
        let cfg: MarketConfig = serde_json::from_str(
            r#"{"rule":"log","floor":0.01,"initial":[0.25,0.25,0.5],"mechanism":"ssm"}"#,
        )
        .unwrap();
        let m = cfg.build().unwrap();
        match m.mechanism() {
            Mechanism::Ssm { bound } => assert!((bound - (0.98f64 / 0.01).ln()).abs() < 1e-12),
            Mechanism::Msr => panic!("expected scaled market"),
        }
        let bad = MarketConfig { mechanism: "lmsr".into(), ..cfg };
        assert!(matches!(bad.build(), Err(Error::Invalid(_))));
    }
}
