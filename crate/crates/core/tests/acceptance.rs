//! Acceptance suite. Each criterion runs in order and prints one PASS/FAIL
//! line; the process exits nonzero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use msrlab::budget::{max_alpha, oracle_constrained, solve_constrained};
use msrlab::lab::{
    find_deviation, find_double_tight_with, verify_certificate, verify_insensitivity, Certificate,
    DeviationSearch, SearchSpace,
};
use msrlab::msr::{read_jsonl, write_jsonl, MarketState};
use msrlab::scoring::{check_properness, check_quasiconcavity, ProperCheck, DEFAULT_LOG_FLOOR};
use msrlab::simplex::{mix, sample_floored};
use msrlab::ssm::{
    infer_belief, reference_segment_distance, simulate_sybil_split, verify_loss_dominance,
    verify_truthfulness,
};
use msrlab::{budget_bound, natural_budget, Distribution, Rule, ScoringRule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `S_x(q) = q_x`: expected score is linear, so a vertex always beats the truth.
struct LinearRule {
    k: usize,
}

impl ScoringRule for LinearRule {
    fn outcomes(&self) -> usize {
        self.k
    }

    fn floor(&self) -> f64 {
        0.0
    }

    fn tag(&self) -> &str {
        "linear"
    }

    fn scores_into(&self, q: &[f64], out: &mut [f64]) {
        out.copy_from_slice(q);
    }

    fn gradient_into(&self, _q: &[f64], outcome: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        out[outcome] = 1.0;
    }
}

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= limit, || format!("took {took:?}, limit {limit:?}"))
}

fn rules(k: usize) -> [Rule; 2] {
    [Rule::brier(k).unwrap(), Rule::log(k, DEFAULT_LOG_FLOOR).unwrap()]
}

fn interior(rng: &mut ChaCha8Rng, rule: &Rule, margin: f64) -> Distribution {
    sample_floored(rng, rule.outcomes(), rule.floor() + margin)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = f64::NEG_INFINITY;
    for (i, rule) in rules(3).iter().enumerate() {
        let cfg = ProperCheck { trials: 100, resolution: 1e-3, seed: 11 + i as u64, ..Default::default() };
        let prop = check_properness(rule, &cfg);
        ensure(prop.passed, || format!("{} properness violation {}", rule.tag(), prop.worst_violation))?;
        worst = worst.max(prop.worst_violation);
        let qc = check_quasiconcavity(rule, 10_000, 21 + i as u64);
        ensure(qc.passed && qc.violations == 0 && qc.triples >= 10_000, || {
            format!("{} quasiconcavity: {} violations", rule.tag(), qc.violations)
        })?;
    }
    let linear = check_properness(&LinearRule { k: 3 }, &ProperCheck { trials: 20, ..Default::default() });
    ensure(!linear.passed && linear.worst_violation > 0.0, || "linear rule passed properness".into())?;
    within(start, Duration::from_secs(30))?;
    Ok(format!("worst truthful gap {worst:.3e}; linear rule beaten by {:.3}", linear.worst_violation))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut max_dev, mut max_mix): (f64, f64) = (0.0, 0.0);
    for rule in rules(2) {
        for _ in 0..500 {
            let q0 = interior(&mut rng, &rule, 0.0);
            let p = interior(&mut rng, &rule, 0.0);
            if p == q0 {
                continue;
            }
            let b = natural_budget(&rule, &q0, &p).unwrap() * rng.random_range(0.0..1.2);
            let rep = solve_constrained(&rule, &p, &q0, b).map_err(|e| e.to_string())?;
            let alpha = max_alpha(&rule, &p, &q0, b).map_err(|e| e.to_string())?;
            let target = mix(&q0, &p, alpha).unwrap();
            max_dev = max_dev.max(rep.segment_deviation);
            max_mix = max_mix.max(rep.q_star.distance(&target));
        }
    }
    ensure(max_dev <= 1e-5, || format!("segment deviation {max_dev:.3e}"))?;
    ensure(max_mix <= 1e-5, || format!("distance to max-alpha mixture {max_mix:.3e}"))?;
    within(start, Duration::from_secs(60))?;
    Ok(format!("max deviation {max_dev:.2e}, max distance to mixture {max_mix:.2e}"))
}

fn deviation_certificate(
    rule: &Rule,
    space: SearchSpace,
    seed: u64,
) -> Result<(Certificate, String), String> {
    let cfg = DeviationSearch { instances: 10_000, seed, ..Default::default() };
    let out = find_deviation(rule, space, &cfg).map_err(|e| e.to_string())?;
    let cert = out
        .certificate
        .ok_or_else(|| format!("{} {:?}: no certificate in {} instances", rule.tag(), space, out.examined))?;
    ensure(cert.deviation > 1e-3, || format!("deviation {}", cert.deviation))?;
    let again = find_deviation(rule, space, &cfg).map_err(|e| e.to_string())?;
    ensure(again.certificate.as_ref() == Some(&cert), || "certificate not reproducible".into())?;
    let summary = format!(
        "{} deviation {:.4} at instance {} (oracle residual {:.1e})",
        cert.rule, cert.deviation, cert.instance, cert.oracle_residual
    );
    let wrapped = Certificate::Deviation(cert);
    let check = verify_certificate(&wrapped).map_err(|e| e.to_string())?;
    ensure(check.passed, || format!("re-verification failed: {:?}", check.failures))?;
    Ok((wrapped, summary))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    for rule in rules(3) {
        let (_, summary) = deviation_certificate(&rule, SearchSpace::Simplex { k: 3 }, 7)?;
        lines.push(summary);
    }
    within(start, Duration::from_secs(300))?;
    Ok(lines.join("; "))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let rule = Rule::brier(3).unwrap();
    let u = Distribution::uniform(3).unwrap();
    let cert = verify_insensitivity(&rule, &u, 100, 4).map_err(|e| e.to_string())?;
    ensure(cert.beliefs.len() == 100, || format!("{} beliefs", cert.beliefs.len()))?;
    ensure(cert.affine_rank == 2, || format!("affine rank {}", cert.affine_rank))?;
    ensure(cert.tight_residuals.iter().all(|&r| r <= 1e-8), || {
        format!("tight residuals {:?}", cert.tight_residuals)
    })?;
    ensure(cert.a > 0.0 && cert.b > 0.0, || "non-positive b or a".into())?;
    for p in &cert.beliefs {
        let q = solve_constrained(&rule, p, &u, cert.b).map_err(|e| e.to_string())?.q_star;
        ensure(q.distance(&cert.r) <= 1e-4, || format!("belief {:?} maps elsewhere", p.probs()))?;
    }
    // an independent check of a few samples against the oracle
    for p in cert.beliefs.iter().step_by(25) {
        let q = oracle_constrained(&rule, p, &u, cert.b, 1e-3).map_err(|e| e.to_string())?.q_star;
        ensure(q.distance(&cert.r) <= 1e-4, || format!("oracle maps {:?} elsewhere", p.probs()))?;
    }
    let check = verify_certificate(&Certificate::Insensitivity(cert.clone())).map_err(|e| e.to_string())?;
    ensure(check.passed, || format!("re-verification failed: {:?}", check.failures))?;

    let t = 0.05;
    let dt = find_double_tight_with(&rule, &u, 2, 2.0 * t + 6.0 * t * t).map_err(|e| e.to_string())?;
    let third = 1.0 / 3.0;
    let expect = Distribution::new(vec![third - t, third - t, third + 2.0 * t]).unwrap();
    ensure(dt.r.distance(&expect) <= 1e-9, || format!("symmetric r {:?}", dt.r.probs()))?;
    ensure((dt.b - 0.115).abs() <= 1e-9 && (dt.a - 0.185).abs() <= 1e-9, || {
        format!("symmetric b {} a {}", dt.b, dt.a)
    })?;
    within(start, Duration::from_secs(300))?;
    Ok(format!(
        "r = {:?}, b = {:.6}, a = {:.6}, radius {}, max report error {:.1e}",
        cert.r.probs(),
        cert.b,
        cert.a,
        cert.radius,
        cert.max_report_error
    ))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (_, summary) = deviation_certificate(&Rule::brier(4).unwrap(), SearchSpace::Product, 5)?;
    within(start, Duration::from_secs(300))?;
    Ok(summary)
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let brier = Rule::brier(3).unwrap();
    let log = Rule::log(3, DEFAULT_LOG_FLOOR).unwrap();
    let pick = |i: usize| if i.is_multiple_of(2) { &brier } else { &log };
    let bounds = [budget_bound(&brier).unwrap(), budget_bound(&log).unwrap()];

    // (a) truthful participation is grid-optimal
    let mut worst_a = f64::INFINITY;
    for i in 0..500 {
        let rule = pick(i);
        let base = interior(&mut rng, rule, 0.01);
        let belief = interior(&mut rng, rule, 0.01);
        let budget = bounds[i % 2] * rng.random_range(0.0..1.2);
        let rep = verify_truthfulness(rule, &base, &belief, budget, 0.02).map_err(|e| e.to_string())?;
        ensure(rep.passed, || format!("(a) instance {i}: {rep:?}"))?;
        worst_a = worst_a.min(rep.margin);
    }

    // (b) no default and (c) references stay on the segment
    let mut worst_c: f64 = 0.0;
    let mut trades = 0;
    while trades < 500 {
        let rule = pick(trades);
        let mut market = MarketState::ssm(rule.clone(), interior(&mut rng, rule, 0.0)).unwrap();
        for _ in 0..10 {
            let b = bounds[trades % 2] * rng.random_range(0.0..1.5);
            let report = interior(&mut rng, rule, 0.0);
            let rec = market.ssm_trade("t", b, report).map_err(|e| e.to_string())?;
            worst_c = worst_c.max(reference_segment_distance(&rec));
            trades += 1;
        }
        for x in 0..3 {
            let mut m = market.clone();
            m.settle(x).unwrap();
            for rec in m.ledger() {
                let pay = rec.realized_payoff.unwrap();
                ensure(pay >= -rec.b_prime.unwrap(), || format!("(b) payoff {pay} below -b'"))?;
            }
        }
    }
    ensure(worst_c <= 1e-12, || format!("(c) segment distance {worst_c:.3e}"))?;

    // (d) concavity inequality and maker-loss dominance
    let mut worst_d = f64::INFINITY;
    for i in 0..500 {
        let rule = pick(i);
        let n = rng.random_range(1..=20);
        let reports: Vec<Distribution> = (0..n).map(|_| interior(&mut rng, rule, 0.0)).collect();
        let budgets: Vec<f64> = (0..n).map(|_| bounds[i % 2] * rng.random_range(0.0..1.2)).collect();
        let initial = interior(&mut rng, rule, 0.0);
        let rep = verify_loss_dominance(rule, &initial, &reports, &budgets).map_err(|e| e.to_string())?;
        ensure(rep.passed, || format!("(d) sequence {i}: {rep:?}"))?;
        worst_d = worst_d.min(rep.worst_margin);
    }

    // (e) sybil splits never beat one trade
    let mut worst_e = f64::INFINITY;
    for i in 0..500 {
        let rule = pick(i);
        let bound = bounds[i % 2];
        let base = interior(&mut rng, rule, 0.0);
        let belief = interior(&mut rng, rule, 0.0);
        let j = 2 + i % 2;
        let total = bound * rng.random_range(0.01..1.5);
        let mut w: Vec<f64> = (0..j).map(|_| rng.random_range(0.0..1.0)).collect();
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v *= total / sum);
        let reports: Vec<Distribution> = (0..j)
            .map(|_| if rng.random_bool(0.5) { belief.clone() } else { interior(&mut rng, rule, 0.0) })
            .collect();
        let cmp =
            simulate_sybil_split(rule, &base, &belief, &w, &reports, bound).map_err(|e| e.to_string())?;
        ensure(cmp.margin >= -1e-9, || format!("(e) instance {i}: {cmp:?}"))?;
        worst_e = worst_e.min(cmp.margin);
    }
    within(start, Duration::from_secs(300))?;
    Ok(format!(
        "margins: truthful {worst_a:.1e}, segment {worst_c:.1e}, concavity {worst_d:.1e}, sybil {worst_e:.1e}"
    ))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let mut worst_q: f64 = 0.0;
    for (k, resolution) in [(3, 1e-3), (4, 1e-2)] {
        let rs = rules(k);
        for i in 0..200 {
            let rule = &rs[i % 2];
            let q0 = interior(&mut rng, rule, 0.005);
            let p = interior(&mut rng, rule, 0.005);
            let b = natural_budget(rule, &q0, &p).unwrap() * rng.random_range(0.02..1.0);
            let s = solve_constrained(rule, &p, &q0, b).map_err(|e| e.to_string())?;
            let o = oracle_constrained(rule, &p, &q0, b, resolution).map_err(|e| e.to_string())?;
            let gap = (s.expected_score_gain - o.expected_score_gain).abs();
            ensure(gap <= 1e-6, || {
                format!("k={k} instance {i} ({}): solver {s:?} oracle {o:?}", rule.tag())
            })?;
            let dq = s.q_star.distance(&o.q_star);
            ensure(dq <= 1e-4, || {
                format!("k={k} instance {i} ({}): reports differ by {dq:.2e}", rule.tag())
            })?;
            worst = worst.max(gap);
            worst_q = worst_q.max(dq);
        }
    }
    within(start, Duration::from_secs(600))?;
    Ok(format!("largest objective gap {worst:.2e}, largest report gap {worst_q:.2e} over 400 instances"))
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for rule in rules(3) {
        let bound = budget_bound(&rule).unwrap();
        let mut plain = MarketState::msr(rule.clone(), interior(&mut rng, &rule, 0.0)).unwrap();
        let mut scaled = MarketState::ssm(rule.clone(), interior(&mut rng, &rule, 0.0)).unwrap();
        for i in 0..50 {
            plain.msr_trade(&format!("a{i}"), interior(&mut rng, &rule, 0.0)).unwrap();
            scaled
                .ssm_trade(
                    &format!("b{i}"),
                    bound * rng.random_range(0.0..1.2),
                    interior(&mut rng, &rule, 0.0),
                )
                .unwrap();
        }
        plain.settle(1).unwrap();
        scaled.settle(2).unwrap();
        for m in [&plain, &scaled] {
            let mut text = Vec::new();
            write_jsonl(m.ledger(), &mut text).unwrap();
            let back = read_jsonl(text.as_slice()).map_err(|e| e.to_string())?;
            ensure(back == m.ledger(), || "ledger changed in round trip".into())?;
            let bits = |recs: &[msrlab::TradeRecord]| -> Vec<u64> {
                recs.iter()
                    .flat_map(|r| {
                        r.report
                            .probs()
                            .iter()
                            .chain(r.pre_reference.probs())
                            .chain(r.post_reference.probs())
                            .chain([&r.scale, &r.reported_budget, &r.realized_payoff.unwrap()])
                            .map(|v| v.to_bits())
                            .collect::<Vec<_>>()
                    })
                    .collect()
            };
            ensure(bits(&back) == bits(m.ledger()), || "float bits differ".into())?;
            let mut again = Vec::new();
            write_jsonl(&back, &mut again).unwrap();
            ensure(again == text, || "re-serialization differs".into())?;
        }
    }

    let mut worst: f64 = 0.0;
    let rule = Rule::brier(3).unwrap();
    let mut market = MarketState::ssm(rule.clone(), Distribution::uniform(3).unwrap()).unwrap();
    let mut checked = 0;
    while checked < 1000 {
        let report = interior(&mut rng, &rule, 0.0);
        let rec = market.ssm_trade("x", rng.random_range(0.05..2.5), report.clone()).unwrap();
        worst = worst.max(infer_belief(&rec).unwrap().distance(&report));
        checked += 1;
    }
    ensure(worst < 1e-12, || format!("infer_belief error {worst:.3e}"))?;

    let cfg = DeviationSearch { instances: 600, seed: 99, ..Default::default() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let out = find_deviation(&rule, SearchSpace::Simplex { k: 3 }, &cfg).unwrap();
            serde_json::to_string(&out).unwrap()
        })
    };
    let (one, four, again) = (run(1), run(4), run(4));
    ensure(one == four && four == again, || "search output depends on threads or run".into())?;
    Ok(format!("worst inverse error {worst:.1e}; search output {} bytes, identical across runs", one.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("properness and quasiconcavity", criterion_1),
        ("two-outcome constrained truthfulness", criterion_2),
        ("deviation certificates at k = 3", criterion_3),
        ("belief-insensitive region", criterion_4),
        ("deviation over product beliefs", criterion_5),
        ("scaled mechanism properties", criterion_6),
        ("solver and oracle agree", criterion_7),
        ("determinism and round trips", criterion_8),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str()) || *o == (i + 1).to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id} ({name}) [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} ({name}) [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
