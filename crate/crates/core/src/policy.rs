//! Piecewise-constant closed-loop policies.
//!
//! A policy divides `[t, T]` into intervals; at each interval start it reads
//! the particle's own discrete past and commits to one action until the next
//! start. Stages are constants, binned lookup tables over finitely many
//! observation times (the discrete-observation policy class), or arbitrary
//! closures of the path-so-far for reference constructions.
//!
//! Tables observe the scalar state at fixed grid indices, classify each
//! observation into bins by sorted edges, and look the action up in a dense
//! row-major table — the concrete form of "finitely many actions from
//! finitely many observed values" that the control-value experiments search
//! over.

use std::sync::Arc;

use crate::grid::PathView;
use crate::{Error, Result};

/// Binned lookup policy stage (scalar state observations).
#[derive(Clone)]
pub struct FeedbackTable {
    /// Grid indices observed (must not exceed the interval start it serves).
    pub obs_indices: Vec<usize>,
    /// Sorted bin edges per observation time; `e` edges make `e + 1` bins.
    pub edges: Vec<Vec<f64>>,
    /// Dense action table, row-major over the bin multi-index
    /// (last observation varies fastest).
    pub actions: Vec<f64>,
}

impl FeedbackTable {
    pub fn new(obs_indices: Vec<usize>, edges: Vec<Vec<f64>>, actions: Vec<f64>) -> Result<Self> {
        if obs_indices.len() != edges.len() {
            return Err(Error::Config(format!(
                "{} observation times but {} edge lists",
                obs_indices.len(),
                edges.len()
            )));
        }
        let mut cells = 1usize;
        for (j, e) in edges.iter().enumerate() {
            if e.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("edges for observation {j} are not sorted")));
            }
            cells = cells
                .checked_mul(e.len() + 1)
                .ok_or_else(|| Error::Config("bin table too large".into()))?;
        }
        if actions.len() != cells {
            return Err(Error::Config(format!(
                "action table has {} entries, bins require {cells}",
                actions.len()
            )));
        }
        Ok(FeedbackTable { obs_indices, edges, actions })
    }

    /// Classify the path's observations and look up the action.
    pub fn action(&self, path: &PathView<'_>) -> f64 {
        debug_assert_eq!(path.d, 1, "feedback tables observe scalar states");
        let mut flat = 0usize;
        for (k, edges) in self.obs_indices.iter().zip(&self.edges) {
            let x = path.scalar(*k);
            let bin = edges.partition_point(|&e| e <= x);
            flat = flat * (edges.len() + 1) + bin;
        }
        self.actions[flat]
    }
}

impl std::fmt::Debug for FeedbackTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeedbackTable")
            .field("obs_indices", &self.obs_indices)
            .field("bins", &self.edges.iter().map(|e| e.len() + 1).collect::<Vec<_>>())
            .field("actions", &self.actions)
            .finish()
    }
}

/// One policy stage.
#[derive(Clone)]
pub enum Stage {
    Const(f64),
    Table(FeedbackTable),
    /// Closure of (interval start index, path-so-far). Must not read the path
    /// beyond the interval start.
    Fn(Arc<dyn Fn(usize, &PathView<'_>) -> f64 + Sync + Send>),
}

impl std::fmt::Debug for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Const(a) => write!(f, "Const({a})"),
            Stage::Table(t) => write!(f, "Table({t:?})"),
            Stage::Fn(_) => write!(f, "Fn(..)"),
        }
    }
}

/// Piecewise-constant-in-time policy: `stages[i]` applies on
/// `[interval_starts[i], interval_starts[i+1])` (last stage runs to `T`).
#[derive(Debug, Clone)]
pub struct PiecewisePolicy {
    interval_starts: Vec<usize>,
    stages: Vec<Stage>,
}

impl PiecewisePolicy {
    pub fn new(interval_starts: Vec<usize>, stages: Vec<Stage>) -> Result<Self> {
        if interval_starts.is_empty() || interval_starts.len() != stages.len() {
            return Err(Error::Config(format!(
                "{} interval starts vs {} stages",
                interval_starts.len(),
                stages.len()
            )));
        }
        if interval_starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("interval starts must be strictly increasing".into()));
        }
        for (i, stage) in stages.iter().enumerate() {
            if let Stage::Table(t) = stage {
                if t.obs_indices.iter().any(|&k| k > interval_starts[i]) {
                    return Err(Error::Config(format!(
                        "stage {i} observes the future of its interval start"
                    )));
                }
            }
        }
        Ok(PiecewisePolicy { interval_starts, stages })
    }

    /// Single-stage policy applying one constant action from index `k0`.
    pub fn constant(k0: usize, action: f64) -> Self {
        PiecewisePolicy { interval_starts: vec![k0], stages: vec![Stage::Const(action)] }
    }

    /// Concatenate with a later policy: this policy's stages govern strictly
    /// before `second`'s first interval start, `second` governs from there on.
    pub fn then(&self, second: &PiecewisePolicy) -> Result<Self> {
        let cut = second.interval_starts[0];
        let keep = self.interval_starts.partition_point(|&s| s < cut);
        if keep == 0 {
            return Err(Error::Config(format!(
                "second policy starts at index {cut}, before the first policy begins"
            )));
        }
        let mut starts = self.interval_starts[..keep].to_vec();
        let mut stages: Vec<Stage> = self.stages[..keep].to_vec();
        starts.extend_from_slice(&second.interval_starts);
        stages.extend(second.stages.iter().cloned());
        PiecewisePolicy::new(starts, stages)
    }

    pub fn interval_starts(&self) -> &[usize] {
        &self.interval_starts
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Index of the stage governing grid index `k` (`None` before the first start).
    pub fn stage_at(&self, k: usize) -> Option<usize> {
        match self.interval_starts.partition_point(|&s| s <= k) {
            0 => None,
            i => Some(i - 1),
        }
    }

    /// Whether a new action must be computed when arriving at grid index `k`.
    pub fn is_interval_start(&self, k: usize) -> bool {
        self.interval_starts.binary_search(&k).is_ok()
    }

    /// Action chosen by the governing stage, evaluated on the path-so-far.
    pub fn action(&self, stage: usize, path: &PathView<'_>) -> f64 {
        match &self.stages[stage] {
            Stage::Const(a) => *a,
            Stage::Table(t) => t.action(path),
            Stage::Fn(f) => f(self.interval_starts[stage], path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SamplePath;

    #[test]
    fn table_bins_by_sorted_edges() {
        // One observation at index 2, edges [0.0]: bin 0 for x < 0, bin 1 else.
        let t = FeedbackTable::new(vec![2], vec![vec![0.0]], vec![-1.0, 1.0]).unwrap();
        let below = SamplePath { d: 1, values: vec![0.0, 0.0, -0.5, 0.0] };
        let above = SamplePath { d: 1, values: vec![0.0, 0.0, 0.5, 0.0] };
        assert_eq!(t.action(&below.view()), -1.0);
        assert_eq!(t.action(&above.view()), 1.0);
        // Edge value lands in the upper bin (edges are lower-exclusive).
        let at = SamplePath { d: 1, values: vec![0.0, 0.0, 0.0, 0.0] };
        assert_eq!(t.action(&at.view()), 1.0);
    }

    #[test]
    fn multi_observation_table_is_row_major() {
        let t = FeedbackTable::new(
            vec![0, 1],
            vec![vec![0.0], vec![0.0]],
            vec![11.0, 12.0, 21.0, 22.0], // (lo,lo) (lo,hi) (hi,lo) (hi,hi)
        )
        .unwrap();
        let p = SamplePath { d: 1, values: vec![-1.0, 1.0] };
        assert_eq!(t.action(&p.view()), 12.0);
        let p = SamplePath { d: 1, values: vec![1.0, -1.0] };
        assert_eq!(t.action(&p.view()), 21.0);
    }

    #[test]
    fn stage_lookup_and_interval_starts() {
        let p = PiecewisePolicy::new(
            vec![0, 5],
            vec![Stage::Const(1.0), Stage::Const(2.0)],
        )
        .unwrap();
        assert_eq!(p.stage_at(0), Some(0));
        assert_eq!(p.stage_at(4), Some(0));
        assert_eq!(p.stage_at(5), Some(1));
        assert_eq!(p.stage_at(9), Some(1));
        assert!(p.is_interval_start(5));
        assert!(!p.is_interval_start(3));
    }

    #[test]
    fn config_errors_are_loud() {
        assert!(PiecewisePolicy::new(vec![], vec![]).is_err());
        assert!(PiecewisePolicy::new(vec![3, 3], vec![Stage::Const(0.0), Stage::Const(0.0)])
            .is_err());
        // Table observing beyond its interval start.
        let t = FeedbackTable::new(vec![7], vec![vec![0.0]], vec![0.0, 1.0]).unwrap();
        assert!(PiecewisePolicy::new(vec![5], vec![Stage::Table(t)]).is_err());
        // Bad table shapes.
        assert!(FeedbackTable::new(vec![0], vec![vec![1.0, 0.0]], vec![0.0; 3]).is_err());
        assert!(FeedbackTable::new(vec![0], vec![vec![0.0]], vec![0.0; 3]).is_err());
    }
}
