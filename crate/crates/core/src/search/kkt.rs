use nalgebra::{DMatrix, DVector};

use super::refine::Incumbent;
use super::Space;
use crate::scoring::ScoringRule;

const FEASIBILITY_SLACK: f64 = 1e-10;
const MAX_NEWTON: usize = 60;

/// First-order optimality conditions of
/// `max belief . S(q(c))  s.t.  S_x(q(c)) >= threshold_x,  c in domain`,
/// solved by Newton's method once per candidate active set.
pub(crate) struct Kkt<'a, R: ScoringRule + ?Sized> {
    pub rule: &'a R,
    pub space: &'a Space,
    pub belief: &'a [f64],
    pub thresholds: &'a [f64],
}

impl<R: ScoringRule + ?Sized> Kkt<'_, R> {
    fn ambient(&self, c: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.space.outcomes()];
        self.space.point_unchecked(c, &mut q);
        q
    }

    /// Chain rule: `J^T g` for an ambient gradient `g`.
    fn pull_back(&self, jac: &[f64], g: &[f64]) -> Vec<f64> {
        let d = self.space.dim();
        (0..d).map(|i| g.iter().enumerate().map(|(x, gx)| jac[x * d + i] * gx).sum()).collect()
    }

    pub fn objective(&self, c: &[f64]) -> f64 {
        self.rule.expected(self.belief, &self.ambient(c))
    }

    fn objective_gradient(&self, c: &[f64]) -> Vec<f64> {
        let q = self.ambient(c);
        let k = q.len();
        let mut total = vec![0.0; k];
        let mut g = vec![0.0; k];
        for x in 0..k {
            if self.belief[x] == 0.0 {
                continue;
            }
            self.rule.gradient_into(&q, x, &mut g);
            for (t, gi) in total.iter_mut().zip(&g) {
                *t += self.belief[x] * gi;
            }
        }
        self.pull_back(&self.space.jacobian(c), &total)
    }

    /// Budget constraints first (one per outcome), then domain constraints.
    fn constraints(&self, c: &[f64]) -> Vec<(f64, Vec<f64>)> {
        let q = self.ambient(c);
        let k = q.len();
        let jac = self.space.jacobian(c);
        let mut s = vec![0.0; k];
        self.rule.scores_into(&q, &mut s);
        let mut g = vec![0.0; k];
        let mut out: Vec<(f64, Vec<f64>)> = (0..k)
            .map(|x| {
                self.rule.gradient_into(&q, x, &mut g);
                (s[x] - self.thresholds[x], self.pull_back(&jac, &g))
            })
            .collect();
        out.extend(self.space.domain_constraints(c));
        out
    }

    fn residual(&self, c: &[f64], mu: &[f64], active: &[usize]) -> Vec<f64> {
        let cons = self.constraints(c);
        let mut stationarity = self.objective_gradient(c);
        for (m, &j) in mu.iter().zip(active) {
            for (s, gj) in stationarity.iter_mut().zip(&cons[j].1) {
                *s += m * gj;
            }
        }
        stationarity.extend(active.iter().map(|&j| cons[j].0));
        stationarity
    }

    fn newton(&self, start: &[f64], active: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.space.dim();
        let n = d + active.len();
        let mut c = start.to_vec();
        let mut mu = vec![0.0; active.len()];
        let norm = |r: &[f64]| r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut r = self.residual(&c, &mu, active);
        for _ in 0..MAX_NEWTON {
            if r.iter().any(|v| !v.is_finite()) {
                return None;
            }
            if norm(&r) < 1e-13 {
                return Some((c, mu));
            }
            let mut jm = DMatrix::<f64>::zeros(n, n);
            for i in 0..d {
                let h = 1e-7 * c[i].abs().max(1.0);
                let mut up = c.clone();
                let mut dn = c.clone();
                up[i] += h;
                dn[i] -= h;
                let ru = self.residual(&up, &mu, active);
                let rd = self.residual(&dn, &mu, active);
                for row in 0..n {
                    jm[(row, i)] = (ru[row] - rd[row]) / (2.0 * h);
                }
            }
            let cons = self.constraints(&c);
            for (col, &j) in active.iter().enumerate() {
                for row in 0..d {
                    jm[(row, d + col)] = cons[j].1[row];
                }
            }
            let rhs = DVector::from_iterator(n, r.iter().map(|v| -v));
            let delta = jm.lu().solve(&rhs)?;
            let base = norm(&r);
            let mut t = 1.0;
            loop {
                let trial_c: Vec<f64> = (0..d).map(|i| c[i] + t * delta[i]).collect();
                let trial_mu: Vec<f64> = (0..active.len()).map(|i| mu[i] + t * delta[d + i]).collect();
                let trial_r = self.residual(&trial_c, &trial_mu, active);
                let finite = trial_r.iter().all(|v| v.is_finite());
                if finite && (norm(&trial_r) < base || t < 1e-3) {
                    c = trial_c;
                    mu = trial_mu;
                    r = trial_r;
                    break;
                }
                if t < 1e-3 {
                    return None;
                }
                t *= 0.5;
            }
        }
        (norm(&r) < 1e-11).then_some((c, mu))
    }

    /// Best point satisfying the optimality conditions for some active set
    /// of at most `dim` constraints, searched from `start`.
    pub fn polish(&self, start: &[f64]) -> Option<Incumbent> {
        let d = self.space.dim();
        let m = self.space.outcomes() + self.space.domain_constraint_count();
        let mut best: Option<Incumbent> = None;
        for size in 0..=d {
            for active in combinations(m, size) {
                let Some((c, mu)) = self.newton(start, &active) else { continue };
                if mu.iter().any(|&v| v < -FEASIBILITY_SLACK) {
                    continue;
                }
                let q = self.ambient(&c);
                if !self.space.contains(&c, &q) {
                    continue;
                }
                if self.constraints(&c).iter().any(|(g, _)| *g < -FEASIBILITY_SLACK) {
                    continue;
                }
                let value = self.objective(&c);
                if !value.is_finite() {
                    continue;
                }
                if best.as_ref().is_none_or(|b| value > b.value) {
                    best = Some(Incumbent { coords: c, value });
                }
            }
        }
        best
    }
}

fn combinations(m: usize, size: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, m: usize, size: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for j in start..m {
            cur.push(j);
            go(j + 1, m, size, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, m, size, &mut Vec::new(), &mut out);
    out
}
