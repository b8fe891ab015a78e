//! Refinement along the active constraint boundary.
//!
//! Near a maximum on a curved boundary the improving feasible directions
//! form a wedge that narrows toward the maximum, so a fixed stencil stalls.
//! This stage runs the same stencil refinement in tangent coordinates of
//! the active constraints, mapping every trial point back onto the boundary
//! with Newton steps on finite-difference constraint Jacobians.

use nalgebra::{DMatrix, DVector};

use super::refine::{noise, pattern_search, Incumbent};

/// Constraint slack below which a constraint counts as active.
const ACTIVE_TOLERANCE: f64 = 1e-8;
/// Slack the restored points keep, so float round-off cannot flip them
/// infeasible.
const MARGIN: f64 = 1e-12;
const FD_STEP: f64 = 1e-7;
const RESTORE_ITERS: usize = 40;
const RESTORE_TOLERANCE: f64 = 1e-14;
const INITIAL_STEP: f64 = 1e-4;
const MAX_STEP: f64 = 1e-2;

/// Slides `start` along its active boundary. Returns the improved point, or
/// `None` when the boundary offers no gain beyond round-off.
///
/// `constraints` returns every constraint value at a point, nonnegative when
/// satisfied; it must stay finite slightly outside the feasible set.
pub(crate) fn slide<E, G>(start: &Incumbent, mut eval: E, constraints: G) -> Option<Incumbent>
where
    E: FnMut(&[f64]) -> Option<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let d = start.coords.len();
    let active: Vec<usize> = constraints(&start.coords)
        .iter()
        .enumerate()
        .filter(|(_, g)| **g <= ACTIVE_TOLERANCE)
        .map(|(i, _)| i)
        .collect();
    if active.is_empty() || active.len() >= d {
        return None;
    }
    let active_values = |c: &[f64]| -> Vec<f64> {
        let all = constraints(c);
        active.iter().map(|&i| all[i]).collect()
    };
    let jac = jacobian(&active_values, &start.coords);
    let tangent = tangent_basis(&jac, d)?;
    let m = tangent.len();

    let mut point = vec![0.0; d];
    let mut lift = |u: &[f64]| -> Option<f64> {
        for (i, p) in point.iter_mut().enumerate() {
            *p = start.coords[i] + (0..m).map(|j| tangent[j][i] * u[j]).sum::<f64>();
        }
        restore(&active_values, &mut point)?;
        eval(&point)
    };
    let origin = vec![0.0; m];
    let value = lift(&origin)?;
    let best = pattern_search(Incumbent { coords: origin, value }, INITIAL_STEP, MAX_STEP, &mut lift);
    if best.value <= start.value + noise(start.value) {
        return None;
    }
    let mut coords = start.coords.clone();
    for (i, c) in coords.iter_mut().enumerate() {
        *c += (0..m).map(|j| tangent[j][i] * best.coords[j]).sum::<f64>();
    }
    restore(&active_values, &mut coords)?;
    let value = eval(&coords)?;
    (value > start.value + noise(start.value)).then_some(Incumbent { coords, value })
}

/// Central-difference Jacobian, one row per constraint.
fn jacobian<G: Fn(&[f64]) -> Vec<f64>>(g: &G, c: &[f64]) -> Vec<Vec<f64>> {
    let d = c.len();
    let mut probe = c.to_vec();
    let mut columns = Vec::with_capacity(d);
    for i in 0..d {
        probe[i] = c[i] + FD_STEP;
        let up = g(&probe);
        probe[i] = c[i] - FD_STEP;
        let down = g(&probe);
        probe[i] = c[i];
        columns.push(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * FD_STEP)).collect::<Vec<f64>>());
    }
    let rows = columns.first().map_or(0, Vec::len);
    (0..rows).map(|r| columns.iter().map(|col| col[r]).collect()).collect()
}

/// Orthonormal basis of the null space of `jac`, or `None` if its rows are
/// numerically dependent.
fn tangent_basis(jac: &[Vec<f64>], d: usize) -> Option<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    for row in jac {
        let v = orthogonalize(row, &basis);
        let scale = norm(row);
        let n = norm(&v);
        if !n.is_finite() || n <= 1e-8 * scale.max(f64::MIN_POSITIVE) {
            return None;
        }
        basis.push(v.iter().map(|x| x / n).collect());
    }
    let normals = basis.len();
    for axis in 0..d {
        if basis.len() == d {
            break;
        }
        let mut e = vec![0.0; d];
        e[axis] = 1.0;
        let v = orthogonalize(&e, &basis);
        let n = norm(&v);
        if n > 1e-3 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    (basis.len() == d).then(|| basis.split_off(normals))
}

fn orthogonalize(v: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let mut out = v.to_vec();
    // two passes for numerical orthogonality
    for _ in 0..2 {
        for b in basis {
            let dot: f64 = out.iter().zip(b).map(|(x, y)| x * y).sum();
            for (o, bi) in out.iter_mut().zip(b) {
                *o -= dot * bi;
            }
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Minimum-norm Newton steps onto `g = MARGIN`.
fn restore<G: Fn(&[f64]) -> Vec<f64>>(g: &G, c: &mut [f64]) -> Option<()> {
    let d = c.len();
    for _ in 0..RESTORE_ITERS {
        let r: Vec<f64> = g(c).iter().map(|v| v - MARGIN).collect();
        if r.iter().any(|v| !v.is_finite()) {
            return None;
        }
        if r.iter().all(|v| v.abs() <= RESTORE_TOLERANCE) {
            return Some(());
        }
        let jac = jacobian(g, c);
        let m = jac.len();
        let j = DMatrix::from_fn(m, d, |i, k| jac[i][k]);
        let lambda = (&j * j.transpose()).lu().solve(&DVector::from_vec(r))?;
        let step = j.transpose() * lambda;
        for (ci, s) in c.iter_mut().zip(step.iter()) {
            *ci -= s;
        }
    }
    let ok = g(c).iter().all(|v| (v - MARGIN).abs() <= 1e3 * RESTORE_TOLERANCE);
    ok.then_some(())
}
