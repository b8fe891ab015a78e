use std::cmp::Ordering;

use super::Space;

/// Smallest pattern step; coordinates are resolved well below 1e-6.
pub(crate) const MIN_STEP: f64 = 1e-11;

const MAX_ROUNDS: usize = 200_000;

#[derive(Clone, Debug)]
pub(crate) struct Incumbent {
    pub coords: Vec<f64>,
    pub value: f64,
}

/// Strictly better objective, or equal objective at a lexicographically
/// smaller point.
pub(crate) fn beats(value: f64, coords: &[f64], best: &Incumbent) -> bool {
    match value.partial_cmp(&best.value) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Equal) => coords < best.coords.as_slice(),
        _ => false,
    }
}

/// Maximizes `eval` over `space` by coarse lattice search followed by
/// adaptive local grid refinement. `eval` returns `None` for infeasible
/// coordinates; `start` must be feasible.
pub(crate) fn maximize<F>(space: &Space, start: Vec<f64>, mut eval: F) -> Incumbent
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let value = eval(&start).expect("refinement start must be feasible");
    let mut best = Incumbent { coords: start, value };

    let (divisions, coarse_step) = space.coarse_divisions();
    space.for_each_lattice(divisions, |c| {
        if let Some(v) = eval(c) {
            if beats(v, c, &best) {
                best = Incumbent { coords: c.to_vec(), value: v };
            }
        }
    });
    pattern_search(best, coarse_step, coarse_step, eval)
}

/// Local grid refinement around `best`: poll a `(2h+1)^d` stencil at the
/// current step, move to its best strictly improving point, double the
/// step (up to `max_step`) after a move to the stencil edge, and halve it
/// when nothing improves.
pub(crate) fn pattern_search<F>(mut best: Incumbent, step: f64, max_step: f64, mut eval: F) -> Incumbent
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let d = best.coords.len();
    if d == 0 {
        return best;
    }
    let half: i64 = if d <= 4 { 2 } else { 1 };
    let offsets = lattice_offsets(d, half);
    let mut step = step;
    let mut candidate = vec![0.0; d];
    for _ in 0..MAX_ROUNDS {
        if step < MIN_STEP {
            break;
        }
        let mut round_best: Option<(Incumbent, bool)> = None;
        let anchor = best.clone();
        for off in &offsets {
            for i in 0..d {
                candidate[i] = anchor.coords[i] + off[i] as f64 * step;
            }
            if let Some(v) = eval(&candidate) {
                let current = round_best.as_ref().map(|(inc, _)| inc).unwrap_or(&anchor);
                if beats(v, &candidate, current) {
                    let edge = off.iter().any(|o| o.abs() == half);
                    round_best = Some((Incumbent { coords: candidate.clone(), value: v }, edge));
                }
            }
        }
        match round_best {
            Some((inc, edge)) if inc.value > anchor.value + noise(anchor.value) => {
                best = inc;
                if edge {
                    step = (step * 2.0).min(max_step);
                }
            }
            // near a smooth maximum, equal values are round-off; stay put
            _ => step *= 0.5,
        }
    }
    best
}

/// Gains at or below this are indistinguishable from round-off.
pub(crate) fn noise(value: f64) -> f64 {
    8.0 * f64::EPSILON * value.abs()
}

fn lattice_offsets(d: usize, half: i64) -> Vec<Vec<i64>> {
    let width = (2 * half + 1) as usize;
    let total = width.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            (0..d)
                .map(|_| {
                    let o = (idx % width) as i64 - half;
                    idx /= width;
                    o
                })
                .collect::<Vec<i64>>()
        })
        .filter(|o| o.iter().any(|&v| v != 0))
        .collect()
}
