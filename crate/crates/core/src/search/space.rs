use crate::grid;
use crate::scoring::DOMAIN_SLACK;
use crate::simplex::{expand_jacobian, expand_params};

/// Free coordinates of a report space. Simplex reports use their first
/// `k - 1` probabilities; product reports use `(top, left)`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Space {
    Simplex { k: usize, floor: f64 },
    Product { floor: f64 },
}

impl Space {
    pub fn dim(&self) -> usize {
        match self {
            Space::Simplex { k, .. } => k - 1,
            Space::Product { .. } => 2,
        }
    }

    pub fn outcomes(&self) -> usize {
        match self {
            Space::Simplex { k, .. } => *k,
            Space::Product { .. } => 4,
        }
    }

    /// Ambient distribution for any coordinates, even outside the domain.
    pub fn point_unchecked(&self, c: &[f64], out: &mut [f64]) {
        match self {
            Space::Simplex { k, .. } => {
                let mut rest = 1.0;
                for i in 0..k - 1 {
                    out[i] = c[i];
                    rest -= c[i];
                }
                out[k - 1] = rest;
            }
            Space::Product { .. } => out.copy_from_slice(&expand_params(c[0], c[1])),
        }
    }

    pub fn contains(&self, c: &[f64], ambient: &[f64]) -> bool {
        match self {
            Space::Simplex { floor, .. } => ambient.iter().all(|&v| v >= floor - DOMAIN_SLACK),
            Space::Product { floor } => {
                c.iter().all(|&v| (-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&v))
                    && ambient.iter().all(|&v| v >= floor - DOMAIN_SLACK)
            }
        }
    }

    pub fn coords_of(&self, ambient: &[f64]) -> Vec<f64> {
        match self {
            Space::Simplex { k, .. } => ambient[..k - 1].to_vec(),
            Space::Product { .. } => unreachable!("product coordinates are supplied directly"),
        }
    }

    /// `d ambient / d coords`, row-major `outcomes x dim`.
    pub fn jacobian(&self, c: &[f64]) -> Vec<f64> {
        match self {
            Space::Simplex { k, .. } => {
                let d = k - 1;
                let mut j = vec![0.0; k * d];
                for i in 0..d {
                    j[i * d + i] = 1.0;
                    j[(k - 1) * d + i] = -1.0;
                }
                j
            }
            Space::Product { .. } => {
                let rows = expand_jacobian(c[0], c[1]);
                rows.iter().flat_map(|r| r.iter().copied()).collect()
            }
        }
    }

    /// Domain inequalities `g(c) >= 0` with their coordinate gradients.
    pub fn domain_constraints(&self, c: &[f64]) -> Vec<(f64, Vec<f64>)> {
        let k = self.outcomes();
        let d = self.dim();
        let mut ambient = vec![0.0; k];
        self.point_unchecked(c, &mut ambient);
        let jac = self.jacobian(c);
        match self {
            Space::Simplex { floor, .. } => {
                (0..k).map(|x| (ambient[x] - floor, jac[x * d..(x + 1) * d].to_vec())).collect()
            }
            Space::Product { floor } => {
                let mut out = vec![
                    (c[0], vec![1.0, 0.0]),
                    (1.0 - c[0], vec![-1.0, 0.0]),
                    (c[1], vec![0.0, 1.0]),
                    (1.0 - c[1], vec![0.0, -1.0]),
                ];
                if *floor > 0.0 {
                    for x in 0..k {
                        out.push((ambient[x] - floor, jac[x * d..(x + 1) * d].to_vec()));
                    }
                }
                out
            }
        }
    }

    /// Number of domain constraints reported by [`Self::domain_constraints`].
    pub fn domain_constraint_count(&self) -> usize {
        match self {
            Space::Simplex { k, .. } => *k,
            Space::Product { floor } => {
                if *floor > 0.0 {
                    8
                } else {
                    4
                }
            }
        }
    }

    /// Visits the lattice at `divisions` per unit in lexicographic order of
    /// the coordinates.
    pub fn for_each_lattice<F: FnMut(&[f64])>(&self, divisions: usize, mut visit: F) {
        match self {
            Space::Simplex { k, floor } => {
                let d = k - 1;
                grid::for_each_point(*k, *floor, divisions, |q| visit(&q[..d]));
            }
            Space::Product { .. } => {
                let n = divisions as f64;
                for i in 0..=divisions {
                    for j in 0..=divisions {
                        visit(&[i as f64 / n, j as f64 / n]);
                    }
                }
            }
        }
    }

    /// Lattice used to seed local refinement, with its spacing.
    pub fn coarse_divisions(&self) -> (usize, f64) {
        match self {
            Space::Simplex { k, floor } => {
                let n = grid::divisions_within(*k, 6000, 60);
                let free = 1.0 - *k as f64 * floor;
                (n, (free / n as f64).max(1e-3))
            }
            Space::Product { .. } => (60, 1.0 / 60.0),
        }
    }
}
