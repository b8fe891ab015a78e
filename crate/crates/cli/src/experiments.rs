//! The experiments behind `msrlab run`. Each returns one CSV row per
//! instance, an optional certificate, and an overall verdict.

use anyhow::Result;
use msrlab::budget::{max_alpha, solve_constrained};
use msrlab::lab::{
    find_deviation, verify_certificate, verify_insensitivity, Certificate, DeviationSearch, InstanceRow,
    SearchSpace, CERTIFICATE_RESOLUTION, REPORT_TOLERANCE,
};
use msrlab::scoring::{check_properness, check_quasiconcavity, ProperCheck};
use msrlab::simplex::sample_floored;
use msrlab::ssm::{simulate_sybil_split, verify_loss_dominance, verify_truthfulness};
use msrlab::{budget_bound, mix, natural_budget, Distribution, Rule, ScoringRule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Experiment, ExperimentConfig};

/// Largest segment deviation tolerated at two outcomes.
const SEGMENT_TOLERANCE: f64 = 1e-5;
/// Pairs per quasiconcavity instance.
const PAIRS_PER_INSTANCE: usize = 100;
/// Trades per loss-compare market.
const TRADES_PER_MARKET: usize = 20;

pub struct Report {
    pub csv: Vec<u8>,
    /// `(x, y)` columns drawn by the gnuplot script.
    pub plot: (&'static str, &'static str),
    pub certificate: Option<Certificate>,
    pub passed: bool,
    pub summary: String,
}

pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    match cfg.experiment {
        Experiment::Properness => properness(cfg),
        Experiment::Quasiconcavity => quasiconcavity(cfg),
        Experiment::TwoOutcomeTruthfulness => two_outcome(cfg),
        Experiment::Deviation => deviation(cfg),
        Experiment::Insensitivity => insensitivity(cfg),
        Experiment::SsmProperties => ssm_properties(cfg),
        Experiment::Sybil => sybil(cfg),
        Experiment::LossCompare => loss_compare(cfg),
    }
}

fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// A belief kept a little inside the rule's domain.
fn interior(rng: &mut ChaCha8Rng, rule: &Rule) -> Distribution {
    sample_floored(rng, rule.outcomes(), rule.floor() + 0.005)
}

/// Semicolon-joined shortest round-trip decimals.
fn joined(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

fn par_rows<T, F>(trials: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..trials).into_par_iter().map(f).collect()
}

#[derive(Serialize)]
struct ProperRow {
    instance: usize,
    worst_violation: f64,
    argmax_error: f64,
    passed: bool,
}

fn properness(cfg: &ExperimentConfig) -> Result<Report> {
    let resolution = match cfg.rule.outcomes() {
        2 | 3 => 1e-2,
        4 => 5e-2,
        _ => 1e-1,
    };
    let rows = par_rows(cfg.trials, |i| {
        let check = ProperCheck {
            trials: 1,
            resolution,
            seed: cfg.seed.wrapping_add(i as u64),
            ..Default::default()
        };
        let r = check_properness(&cfg.rule, &check);
        Ok(ProperRow {
            instance: i,
            worst_violation: r.worst_violation,
            argmax_error: r.max_argmax_error,
            passed: r.passed,
        })
    })?;
    let worst = rows.iter().map(|r| r.worst_violation).fold(f64::NEG_INFINITY, f64::max);
    Ok(Report {
        passed: rows.iter().all(|r| r.passed),
        summary: format!("largest gain over truthful reporting {worst:e}"),
        plot: ("instance", "worst_violation"),
        certificate: None,
        csv: to_csv(&rows)?,
    })
}

#[derive(Serialize)]
struct QuasiRow {
    instance: usize,
    triples: usize,
    violations: usize,
    worst_margin: f64,
    passed: bool,
}

fn quasiconcavity(cfg: &ExperimentConfig) -> Result<Report> {
    let rows = par_rows(cfg.trials, |i| {
        let r = check_quasiconcavity(&cfg.rule, PAIRS_PER_INSTANCE, cfg.seed.wrapping_add(i as u64));
        Ok(QuasiRow {
            instance: i,
            triples: r.triples,
            violations: r.violations,
            worst_margin: r.worst_margin,
            passed: r.passed,
        })
    })?;
    let violations: usize = rows.iter().map(|r| r.violations).sum();
    Ok(Report {
        passed: violations == 0,
        summary: format!("{violations} violations over {} pairs", cfg.trials * PAIRS_PER_INSTANCE),
        plot: ("instance", "worst_margin"),
        certificate: None,
        csv: to_csv(&rows)?,
    })
}

#[derive(Serialize)]
struct TwoOutcomeRow {
    instance: usize,
    q0: String,
    p: String,
    b: f64,
    alpha: f64,
    q_star: String,
    deviation: f64,
    frontier_distance: f64,
    passed: bool,
}

fn two_outcome(cfg: &ExperimentConfig) -> Result<Report> {
    let rule = &cfg.rule;
    let rows = par_rows(cfg.trials, |i| {
        let mut rng = instance_rng(cfg.seed, i);
        let q0 = interior(&mut rng, rule);
        let mut p = interior(&mut rng, rule);
        while p == q0 {
            p = interior(&mut rng, rule);
        }
        let b = natural_budget(rule, &q0, &p)? * rng.random_range(0.02..1.0);
        let report = solve_constrained(rule, &p, &q0, b)?;
        let alpha = max_alpha(rule, &p, &q0, b)?;
        let frontier_distance = report.q_star.distance(&mix(&q0, &p, alpha)?);
        Ok(TwoOutcomeRow {
            instance: i,
            q0: joined(q0.probs()),
            p: joined(p.probs()),
            b,
            alpha,
            q_star: joined(report.q_star.probs()),
            deviation: report.segment_deviation,
            frontier_distance,
            passed: report.segment_deviation <= SEGMENT_TOLERANCE && frontier_distance <= SEGMENT_TOLERANCE,
        })
    })?;
    let worst = rows.iter().map(|r| r.deviation).fold(0.0, f64::max);
    Ok(Report {
        passed: rows.iter().all(|r| r.passed),
        summary: format!("max deviation {worst:e}"),
        plot: ("instance", "deviation"),
        certificate: None,
        csv: to_csv(&rows)?,
    })
}

fn deviation(cfg: &ExperimentConfig) -> Result<Report> {
    let space = cfg.outcomes.space();
    let search = DeviationSearch {
        instances: cfg.trials,
        threshold: cfg.threshold,
        seed: cfg.seed,
        resolution: CERTIFICATE_RESOLUTION,
    };
    let outcome = find_deviation(&cfg.rule, space, &search)?;
    let rows: &[InstanceRow] = &outcome.rows;
    let expect_deviation = space != SearchSpace::Simplex { k: 2 };
    let (passed, summary, certificate) = match outcome.certificate {
        Some(cert) => {
            let found = format!("deviation {} at instance {}", cert.deviation, cert.instance);
            let wrapped = Certificate::Deviation(cert);
            let check = verify_certificate(&wrapped)?;
            let summary = format!("{found} (re-verified: {})", check.passed);
            (expect_deviation && check.passed, summary, Some(wrapped))
        }
        None => (
            !expect_deviation,
            format!("no deviation above {} in {} instances", cfg.threshold, outcome.examined),
            None,
        ),
    };
    Ok(Report { passed, summary, plot: ("index", "deviation"), certificate, csv: to_csv(rows)? })
}

#[derive(Serialize)]
struct InsensitivityRow {
    instance: usize,
    belief: String,
    q_star: String,
    distance_to_r: f64,
    passed: bool,
}

fn insensitivity(cfg: &ExperimentConfig) -> Result<Report> {
    let rule = &cfg.rule;
    let q0 = Distribution::uniform(rule.outcomes())?;
    let cert = verify_insensitivity(rule, &q0, cfg.trials, cfg.seed)?;
    let rows = par_rows(cert.beliefs.len(), |i| {
        let p = &cert.beliefs[i];
        let q = solve_constrained(rule, p, &q0, cert.b)?.q_star;
        let distance = q.distance(&cert.r);
        Ok(InsensitivityRow {
            instance: i,
            belief: joined(p.probs()),
            q_star: joined(q.probs()),
            distance_to_r: distance,
            passed: distance <= REPORT_TOLERANCE,
        })
    })?;
    let found =
        format!("{} beliefs map to r = [{}] at b = {}", cert.beliefs.len(), joined(cert.r.probs()), cert.b);
    let full_rank = cert.affine_rank + 1 == rule.outcomes();
    let rank = cert.affine_rank;
    let wrapped = Certificate::Insensitivity(cert);
    let check = verify_certificate(&wrapped)?;
    let summary = format!("{found} (affine rank {rank}, re-verified: {})", check.passed);
    Ok(Report {
        passed: check.passed && full_rank && rows.iter().all(|r| r.passed),
        summary,
        plot: ("instance", "distance_to_r"),
        csv: to_csv(&rows)?,
        certificate: Some(wrapped),
    })
}

#[derive(Serialize)]
struct SsmRow {
    instance: usize,
    budget: f64,
    truthful_payoff: f64,
    best_grid_payoff: f64,
    margin: f64,
    monotone_in_budget: bool,
    underreport_strict: Option<bool>,
    passed: bool,
}

fn ssm_properties(cfg: &ExperimentConfig) -> Result<Report> {
    let rule = &cfg.rule;
    let bound = budget_bound(rule)?;
    let resolution = if rule.outcomes() <= 3 { 0.05 } else { 0.1 };
    let rows = par_rows(cfg.trials, |i| {
        let mut rng = instance_rng(cfg.seed, i);
        let base = interior(&mut rng, rule);
        let belief = interior(&mut rng, rule);
        let budget = bound * rng.random_range(0.01..1.2);
        let r = verify_truthfulness(rule, &base, &belief, budget, resolution)?;
        Ok(SsmRow {
            instance: i,
            budget,
            truthful_payoff: r.truthful_payoff,
            best_grid_payoff: r.best_grid_payoff,
            margin: r.margin,
            monotone_in_budget: r.monotone_in_budget,
            underreport_strict: r.underreport_strict,
            passed: r.passed,
        })
    })?;
    let worst = rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    Ok(Report {
        passed: rows.iter().all(|r| r.passed),
        summary: format!("smallest truthful margin {worst:e}"),
        plot: ("instance", "margin"),
        certificate: None,
        csv: to_csv(&rows)?,
    })
}

#[derive(Serialize)]
struct SybilRow {
    instance: usize,
    parts: usize,
    total_budget: f64,
    split_payoff: f64,
    single_payoff: f64,
    margin: f64,
    passed: bool,
}

fn sybil(cfg: &ExperimentConfig) -> Result<Report> {
    let rule = &cfg.rule;
    let bound = budget_bound(rule)?;
    let rows = par_rows(cfg.trials, |i| {
        let mut rng = instance_rng(cfg.seed, i);
        let base = interior(&mut rng, rule);
        let belief = interior(&mut rng, rule);
        let parts = rng.random_range(2..=4);
        let total = bound * rng.random_range(0.01..1.5);
        let weights: Vec<f64> = (0..parts).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = weights.iter().sum();
        let shares: Vec<f64> = weights.iter().map(|w| total * w / sum).collect();
        let reports: Vec<Distribution> = (0..parts)
            .map(|_| if rng.random_bool(0.5) { belief.clone() } else { interior(&mut rng, rule) })
            .collect();
        let cmp = simulate_sybil_split(rule, &base, &belief, &shares, &reports, bound)?;
        Ok(SybilRow {
            instance: i,
            parts,
            total_budget: shares.iter().sum(),
            split_payoff: cmp.split_payoff,
            single_payoff: cmp.single_payoff,
            margin: cmp.margin,
            passed: cmp.passed,
        })
    })?;
    let worst = rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    Ok(Report {
        passed: rows.iter().all(|r| r.passed),
        summary: format!("smallest single-over-split margin {worst:e}"),
        plot: ("instance", "margin"),
        certificate: None,
        csv: to_csv(&rows)?,
    })
}

#[derive(Serialize)]
struct LossRow {
    instance: usize,
    trades: usize,
    worst_margin: f64,
    ssm_loss_max: f64,
    reference_loss_max: f64,
    msr_worst_case: f64,
    passed: bool,
}

fn loss_compare(cfg: &ExperimentConfig) -> Result<Report> {
    let rule = &cfg.rule;
    let bound = budget_bound(rule)?;
    let rows = par_rows(cfg.trials, |i| {
        let mut rng = instance_rng(cfg.seed, i);
        let initial = interior(&mut rng, rule);
        let reports: Vec<Distribution> = (0..TRADES_PER_MARKET).map(|_| interior(&mut rng, rule)).collect();
        let budgets: Vec<f64> = (0..TRADES_PER_MARKET).map(|_| bound * rng.random_range(0.0..1.2)).collect();
        let r = verify_loss_dominance(rule, &initial, &reports, &budgets)?;
        let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(LossRow {
            instance: i,
            trades: TRADES_PER_MARKET,
            worst_margin: r.worst_margin,
            ssm_loss_max: max(&r.ssm_loss),
            reference_loss_max: max(&r.reference_loss),
            msr_worst_case: r.msr_worst_case,
            passed: r.passed,
        })
    })?;
    let worst = rows.iter().map(|r| r.ssm_loss_max - r.msr_worst_case).fold(f64::NEG_INFINITY, f64::max);
    Ok(Report {
        passed: rows.iter().all(|r| r.passed),
        summary: format!("scaled loss stays {:e} below the plain worst case", -worst),
        plot: ("instance", "ssm_loss_max"),
        certificate: None,
        csv: to_csv(&rows)?,
    })
}
