//! Lattice enumeration over a floored simplex.

/// Number of lattice points when splitting `n` units over `k` outcomes.
pub(crate) fn lattice_size(k: usize, n: usize) -> u128 {
    // C(n + k - 1, k - 1)
    let mut acc: u128 = 1;
    for i in 0..(k as u128 - 1) {
        acc = acc * (n as u128 + 1 + i) / (i + 1);
    }
    acc
}

/// Smallest lattice divisor whose spacing is at most `resolution`.
pub(crate) fn divisions_for(resolution: f64) -> usize {
    (1.0 / resolution - 1e-9).ceil().max(1.0) as usize
}

/// Largest divisor `n` with at most `max_points` lattice points.
pub(crate) fn divisions_within(k: usize, max_points: u128, cap: usize) -> usize {
    let mut n = 1;
    while n < cap && lattice_size(k, n + 1) <= max_points {
        n += 1;
    }
    n
}

/// Calls `visit` on every point `floor + (1 - k floor) c / n` where `c` ranges
/// over the compositions of `n` into `k` non-negative parts, in lexicographic
/// order of `c` (hence of the point).
pub(crate) fn for_each_point<F: FnMut(&[f64])>(k: usize, floor: f64, n: usize, mut visit: F) {
    let free = 1.0 - k as f64 * floor;
    let step = free / n as f64;
    let mut counts = vec![0usize; k];
    let mut point = vec![0.0; k];
    // counts[k-1] is implied by the others.
    fn recurse<F: FnMut(&[f64])>(
        depth: usize,
        remaining: usize,
        counts: &mut [usize],
        point: &mut [f64],
        floor: f64,
        step: f64,
        free: f64,
        n: usize,
        visit: &mut F,
    ) {
        let k = counts.len();
        if depth == k - 1 {
            counts[depth] = remaining;
            point[depth] = if remaining == n { floor + free } else { floor + remaining as f64 * step };
            visit(point);
            return;
        }
        for c in 0..=remaining {
            counts[depth] = c;
            point[depth] = if c == n { floor + free } else { floor + c as f64 * step };
            recurse(depth + 1, remaining - c, counts, point, floor, step, free, n, visit);
        }
    }
    recurse(0, n, &mut counts, &mut point, floor, step, free, n, &mut visit);
}
