//! Constructive couplings between two path-measure clouds with the
//! measurability structure needed for regularity arguments: each first-cloud
//! sample must be recoverable *as a function of* the paired second-cloud
//! observation and an auxiliary Brownian path.
//!
//! Construction, for clouds `μ` (atoms `ξ` draws from) and `ν` (atoms `η`
//! draws from) observed at marginal times `π`:
//!
//! 1. solve the exact assignment between the `π`-marginal vectors of `μ` and
//!    `ν` under the max-over-`π`-times Euclidean ground cost;
//! 2. quantise the `ν` marginals into cells of diameter `eps/2` (side
//!    `eps / (2·sqrt(dim))` per coordinate), grouping duplicate and
//!    near-duplicate observations — within a group the observation `η_π`
//!    alone cannot identify the pair;
//! 3. give every pair an auxiliary Brownian path `B̃` on `[0, delta]`,
//!    generated from the seed and independent of everything else;
//! 4. within each group, reassign the group's optimal partners by rank:
//!    members sorted by `B̃` terminal value against partners sorted by their
//!    marginal vectors.
//!
//! The result keeps the multiset of `ξ` atoms exactly equal to `μ`'s atoms
//! (law preservation is exact), makes `ξ_π` a pure lookup in `(η_π, B̃)`
//! (stored in [`CoupledSystem::reconstruct_xi_pi`]), and pays at most the
//! cell diameter over the optimal cost per pair, so the realised transport
//! cost is within `eps` of optimal.

use std::collections::HashMap;

use crate::assignment::{self, CostMatrix};
use crate::grid::{SamplePath, TimeGrid};
use crate::measure::PathMeasure;
use crate::rng::{Purpose, Rng, StreamKey};
use crate::{Error, Result};

/// One coupled draw: `ξ` is atom `mu_index` of the first cloud, `η` is atom
/// `nu_index` (== pair position) of the second, `btilde` the auxiliary path.
#[derive(Debug, Clone)]
pub struct CoupledPair {
    pub mu_index: usize,
    pub nu_index: usize,
    pub btilde: SamplePath,
}

#[derive(Debug, Clone)]
pub struct CoupledSystem {
    pub pairs: Vec<CoupledPair>,
    pub pi_indices: Vec<usize>,
    pub btilde_grid: TimeGrid,
    /// Root-mean-square max-over-`π` distance of the optimal assignment.
    pub optimal_cost: f64,
    mu: PathMeasure,
    nu: PathMeasure,
    cell_side: f64,
    /// Per cell: `B̃` terminal values (lexicographically sorted) with the
    /// `μ` atom assigned to that terminal value.
    table: HashMap<Vec<i64>, Vec<(Vec<f64>, usize)>>,
}

/// Builds the coupled system. `pi_times` must be non-empty grid times of the
/// common grid of `mu` and `nu`; clouds must have equal particle counts.
pub fn build_coupling(
    mu: &PathMeasure,
    nu: &PathMeasure,
    pi_times: &[f64],
    eps: f64,
    delta: f64,
    btilde_steps: usize,
    key: StreamKey,
) -> Result<CoupledSystem> {
    if !(eps > 0.0) || !(delta > 0.0) {
        return Err(Error::Domain(format!("need eps > 0 and delta > 0, got {eps}, {delta}")));
    }
    if pi_times.is_empty() {
        return Err(Error::Domain("need at least one marginal time".into()));
    }
    if mu.dim() != nu.dim() || mu.grid() != nu.grid() {
        return Err(Error::Shape("clouds must share dimension and grid".into()));
    }
    if mu.len() != nu.len() {
        return Err(Error::Shape(format!(
            "coupling needs equal particle counts, got {} vs {}",
            mu.len(),
            nu.len()
        )));
    }
    let pi_indices: Vec<usize> = pi_times
        .iter()
        .map(|&t| mu.grid().aligned_index(t))
        .collect::<Result<_>>()?;

    let n = mu.len();
    let d = mu.dim();
    let dim = d * pi_indices.len();

    let marginal = |m: &PathMeasure, i: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(dim);
        for &k in &pi_indices {
            v.extend_from_slice(m.point(i, k));
        }
        v
    };
    let mu_pi: Vec<Vec<f64>> = (0..n).map(|i| marginal(mu, i)).collect();
    let nu_pi: Vec<Vec<f64>> = (0..n).map(|i| marginal(nu, i)).collect();

    let ground = |a: &[f64], b: &[f64]| -> f64 {
        // Max over π-times of the Euclidean distance at that time.
        let mut worst = 0.0f64;
        for p in 0..pi_indices.len() {
            let mut s = 0.0;
            for j in 0..d {
                let diff = a[p * d + j] - b[p * d + j];
                s += diff * diff;
            }
            worst = worst.max(s);
        }
        worst.sqrt()
    };

    // Optimal assignment on squared costs (rows: μ atoms, cols: ν atoms).
    let cost = CostMatrix::from_fn(n, |i, j| {
        let c = ground(&mu_pi[i], &nu_pi[j]);
        c * c
    })?;
    let perm = assignment::solve(&cost);
    let optimal_cost = (assignment::assignment_cost(&cost, &perm) / n as f64).sqrt();
    // Invert: partner_of_nu[j] = μ atom optimally matched to ν atom j.
    let mut partner_of_nu = vec![0usize; n];
    for (i, &j) in perm.iter().enumerate() {
        partner_of_nu[j] = i;
    }

    // Auxiliary Brownian paths, one per pair, independent of both clouds.
    let btilde_grid = TimeGrid::new(delta, btilde_steps.max(1))?;
    let bkey = key.purpose(Purpose::Brownian);
    let sqrt_dt = btilde_grid.dt().sqrt();
    let btildes: Vec<SamplePath> = (0..n)
        .map(|i| {
            let mut rng = Rng::from_key(bkey.child(i as u64));
            let mut p = SamplePath::constant(btilde_grid.points(), &vec![0.0; d]);
            for k in 0..btilde_grid.steps() {
                for j in 0..d {
                    let prev = p.values[k * d + j];
                    p.values[(k + 1) * d + j] = prev + sqrt_dt * rng.normal();
                }
            }
            p
        })
        .collect();

    // Group ν atoms by quantised marginal cell; cell diameter <= eps/2.
    let cell_side = eps / (2.0 * (dim as f64).sqrt());
    let quantize = |v: &[f64]| -> Vec<i64> {
        v.iter().map(|x| (x / cell_side).floor() as i64).collect()
    };
    let mut groups: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for j in 0..n {
        groups.entry(quantize(&nu_pi[j])).or_default().push(j);
    }

    // Within each group, rank-match B̃ terminals against canonically sorted
    // partners. The terminal values must be distinct within a group for the
    // (η_π, B̃) lookup to be well defined; with continuous draws a collision
    // indicates a broken RNG rather than bad luck.
    let lex = |a: &[f64], b: &[f64]| -> std::cmp::Ordering {
        for (x, y) in a.iter().zip(b) {
            match x.partial_cmp(y).unwrap() {
                std::cmp::Ordering::Equal => continue,
                o => return o,
            }
        }
        std::cmp::Ordering::Equal
    };

    let mut assigned_mu = vec![usize::MAX; n];
    let mut table: HashMap<Vec<i64>, Vec<(Vec<f64>, usize)>> = HashMap::new();
    for (cell, members) in &groups {
        // ν pairs sorted by B̃ terminal (lex), tiebreak by pair index.
        let mut by_terminal: Vec<(Vec<f64>, usize)> = members
            .iter()
            .map(|&j| (btildes[j].view().terminal().to_vec(), j))
            .collect();
        by_terminal.sort_by(|a, b| lex(&a.0, &b.0).then(a.1.cmp(&b.1)));
        for w in by_terminal.windows(2) {
            if lex(&w[0].0, &w[1].0) == std::cmp::Ordering::Equal {
                return Err(Error::Numerics(
                    "auxiliary Brownian terminals collide within a cell".into(),
                ));
            }
        }
        // Group's optimal partners sorted by marginal vector, tiebreak index.
        let mut partners: Vec<usize> = members.iter().map(|&j| partner_of_nu[j]).collect();
        partners.sort_by(|&a, &b| lex(&mu_pi[a], &mu_pi[b]).then(a.cmp(&b)));

        let mut entries = Vec::with_capacity(members.len());
        for (rank, (term, j)) in by_terminal.iter().enumerate() {
            assigned_mu[*j] = partners[rank];
            entries.push((term.clone(), partners[rank]));
        }
        // Entries are already terminal-sorted by construction.
        table.insert(cell.clone(), entries);
    }

    let pairs = (0..n)
        .map(|j| CoupledPair { mu_index: assigned_mu[j], nu_index: j, btilde: btildes[j].clone() })
        .collect();

    Ok(CoupledSystem {
        pairs,
        pi_indices,
        btilde_grid,
        optimal_cost,
        mu: mu.clone(),
        nu: nu.clone(),
        cell_side,
        table,
    })
}

impl CoupledSystem {
    /// Full `ξ` path of a pair (an exact atom of the first cloud).
    pub fn xi_path(&self, pair: &CoupledPair) -> crate::grid::PathView<'_> {
        self.mu.path(pair.mu_index)
    }

    /// Full `η` path of a pair (an exact atom of the second cloud).
    pub fn eta_path(&self, pair: &CoupledPair) -> crate::grid::PathView<'_> {
        self.nu.path(pair.nu_index)
    }

    /// `π`-marginal vector of a pair's `η`.
    pub fn eta_pi(&self, pair: &CoupledPair) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.pi_indices.len() * self.nu.dim());
        for &k in &self.pi_indices {
            v.extend_from_slice(self.nu.point(pair.nu_index, k));
        }
        v
    }

    /// `π`-marginal vector of a pair's `ξ`.
    pub fn xi_pi(&self, pair: &CoupledPair) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.pi_indices.len() * self.mu.dim());
        for &k in &self.pi_indices {
            v.extend_from_slice(self.mu.point(pair.mu_index, k));
        }
        v
    }

    /// The measurability property made executable: recover `ξ_π` from the
    /// observation `(η_π, B̃)` alone, via the stored cell tables. Unknown
    /// observations are a domain error.
    pub fn reconstruct_xi_pi(&self, eta_pi: &[f64], btilde: &SamplePath) -> Result<Vec<f64>> {
        let cell: Vec<i64> =
            eta_pi.iter().map(|x| (x / self.cell_side).floor() as i64).collect();
        let entries = self
            .table
            .get(&cell)
            .ok_or_else(|| Error::Domain("observation does not match any coupled cell".into()))?;
        let term = btilde.view().terminal();
        let found = entries
            .iter()
            .find(|(t, _)| t.iter().zip(term).all(|(a, b)| a.to_bits() == b.to_bits()))
            .ok_or_else(|| {
                Error::Domain("auxiliary path does not match any pair in the cell".into())
            })?;
        let mut v = Vec::with_capacity(self.pi_indices.len() * self.mu.dim());
        for &k in &self.pi_indices {
            v.extend_from_slice(self.mu.point(found.1, k));
        }
        Ok(v)
    }

    /// Root-mean-square of the realised max-over-`π` pair distances.
    pub fn realized_cost(&self) -> f64 {
        let d = self.mu.dim();
        let np = self.pi_indices.len();
        let mut acc = 0.0;
        for pair in &self.pairs {
            let xi = self.xi_pi(pair);
            let eta = self.eta_pi(pair);
            let mut worst = 0.0f64;
            for p in 0..np {
                let mut s = 0.0;
                for j in 0..d {
                    let diff = xi[p * d + j] - eta[p * d + j];
                    s += diff * diff;
                }
                worst = worst.max(s);
            }
            acc += worst;
        }
        (acc / self.pairs.len() as f64).sqrt()
    }

    /// Multiset check support: indices of `μ` atoms used by the pairs.
    pub fn mu_usage(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.mu.len()];
        for p in &self.pairs {
            counts[p.mu_index] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 4).unwrap()
    }

    fn key() -> StreamKey {
        StreamKey::root(101)
    }

    #[test]
    fn identical_single_atom_clouds_couple_at_distance_zero() {
        let mu = PathMeasure::from_initial_states(grid(), 1, &[0.7, 0.7, 0.7]).unwrap();
        let sys = build_coupling(&mu, &mu, &[0.5], 1e-3, 0.1, 4, key()).unwrap();
        assert_eq!(sys.optimal_cost, 0.0);
        assert_eq!(sys.realized_cost(), 0.0);
        for p in &sys.pairs {
            assert_eq!(sys.xi_pi(p), sys.eta_pi(p));
        }
    }

    #[test]
    fn point_mass_against_two_atoms_costs_eps_spread() {
        // μ = δ_0, ν = ½δ_ε + ½δ_{-ε}: every pairing costs exactly ε.
        let eps_atoms = 0.25;
        let mu = PathMeasure::from_initial_states(grid(), 1, &[0.0, 0.0]).unwrap();
        let nu = PathMeasure::from_initial_states(grid(), 1, &[eps_atoms, -eps_atoms]).unwrap();
        let sys = build_coupling(&mu, &nu, &[1.0], 1e-3, 0.1, 4, key()).unwrap();
        assert!((sys.optimal_cost - eps_atoms).abs() < 1e-15);
        assert!((sys.realized_cost() - eps_atoms).abs() < 1e-15);
        // ξ is always the zero atom: determined by B̃ alone.
        for p in &sys.pairs {
            assert_eq!(sys.xi_pi(p), vec![0.0]);
        }
    }

    #[test]
    fn reconstruction_is_bit_exact() {
        // Duplicate ν atoms force the auxiliary path to do the disambiguation.
        let mu = PathMeasure::from_initial_states(grid(), 1, &[0.1, 0.2, 0.1, 0.2]).unwrap();
        let nu = PathMeasure::from_initial_states(grid(), 1, &[0.1, 0.1, 0.2, 0.2]).unwrap();
        let sys = build_coupling(&mu, &nu, &[0.25, 1.0], 1e-2, 0.05, 8, key()).unwrap();
        for p in &sys.pairs {
            let rebuilt = sys.reconstruct_xi_pi(&sys.eta_pi(p), &p.btilde).unwrap();
            let direct = sys.xi_pi(p);
            assert_eq!(rebuilt.len(), direct.len());
            for (a, b) in rebuilt.iter().zip(&direct) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn law_of_xi_is_exactly_mu() {
        let mu =
            PathMeasure::from_initial_states(grid(), 1, &[0.0, 0.5, 0.5, 1.0, -0.3, 0.0]).unwrap();
        let nu =
            PathMeasure::from_initial_states(grid(), 1, &[0.1, 0.1, 0.4, 0.9, 0.9, -0.2]).unwrap();
        let sys = build_coupling(&mu, &nu, &[1.0], 1e-2, 0.1, 4, key()).unwrap();
        // Every μ atom used exactly once.
        assert!(sys.mu_usage().iter().all(|&c| c == 1));
    }

    #[test]
    fn matched_marginals_stay_within_eps() {
        // Same multiset of marginal values in different atom order; optimal
        // cost is 0, the realised cost must stay below eps.
        let eps = 1e-3;
        let mu = PathMeasure::from_initial_states(grid(), 1, &[0.3, -0.4, 0.8, 0.0]).unwrap();
        let nu = PathMeasure::from_initial_states(grid(), 1, &[0.8, 0.0, 0.3, -0.4]).unwrap();
        let sys = build_coupling(&mu, &nu, &[0.5, 1.0], eps, 0.1, 4, key()).unwrap();
        assert_eq!(sys.optimal_cost, 0.0);
        assert!(sys.realized_cost() <= eps);
    }

    #[test]
    fn invalid_parameters_are_domain_errors() {
        let mu = PathMeasure::from_initial_states(grid(), 1, &[0.0]).unwrap();
        assert!(matches!(
            build_coupling(&mu, &mu, &[1.0], 0.0, 0.1, 4, key()),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            build_coupling(&mu, &mu, &[1.0], 1e-3, -1.0, 4, key()),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            build_coupling(&mu, &mu, &[], 1e-3, 0.1, 4, key()),
            Err(Error::Domain(_))
        ));
    }
}
