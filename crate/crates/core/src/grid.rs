//! Uniform time grids and discrete sample paths.
//!
//! Every object in the crate lives on a shared uniform grid over `[0, T]`
//! with `steps` intervals; grid point `k` sits at `T * k / steps`, so both
//! endpoints are exact in floating point. Continuous times entering from the
//! outside are rounded *down* to the grid (with a small snap window for times
//! that are meant to be grid points but arrive with rounding error), after
//! which all computations work in index space.

use crate::{Error, Result};

/// Absolute snap window when rounding continuous times to grid points.
/// Times within this distance of a grid point are treated as that point;
/// otherwise rounding is downward. Generous enough for accumulated f64 error
/// in `t = k * dt` style arithmetic, far below any grid spacing in use.
pub const TIME_SNAP: f64 = 1e-9;

/// A uniform grid on `[0, horizon]` with `steps` intervals (`steps + 1` points).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive and finite, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Domain("grid needs at least one step".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of grid points, `steps + 1`.
    pub fn points(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of grid point `k`; exact at both endpoints.
    pub fn time(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        self.horizon * k as f64 / self.steps as f64
    }

    /// Greatest grid index whose time is `<= t`, snapping to the nearest grid
    /// point when `t` is within [`TIME_SNAP`] of it. Times outside `[0, T]`
    /// are a domain error.
    pub fn floor_index(&self, t: f64) -> Result<usize> {
        if !t.is_finite() || t < -TIME_SNAP || t > self.horizon + TIME_SNAP {
            return Err(Error::Domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        let nearest = (t / self.dt()).round();
        let nearest_k = (nearest.max(0.0) as usize).min(self.steps);
        if (t - self.time(nearest_k)).abs() <= TIME_SNAP {
            return Ok(nearest_k);
        }
        Ok(((t / self.dt()).floor().max(0.0) as usize).min(self.steps))
    }

    /// Index of a time that must *be* a grid point (within the snap window).
    pub fn aligned_index(&self, t: f64) -> Result<usize> {
        let k = self.floor_index(t)?;
        if (t - self.time(k)).abs() > TIME_SNAP {
            return Err(Error::Domain(format!(
                "time {t} is not a grid point of [0, {}] with {} steps",
                self.horizon, self.steps
            )));
        }
        Ok(k)
    }
}

/// Immutable view of one discrete path: `points` grid values in `R^d`,
/// stored flat as `values[k * d + j]`.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub d: usize,
    pub values: &'a [f64],
}

impl<'a> PathView<'a> {
    pub fn points(&self) -> usize {
        self.values.len() / self.d
    }

    /// State at grid point `k`.
    #[inline]
    pub fn point(&self, k: usize) -> &'a [f64] {
        &self.values[k * self.d..(k + 1) * self.d]
    }

    /// Scalar state at grid point `k` (dimension 1 only).
    #[inline]
    pub fn scalar(&self, k: usize) -> f64 {
        debug_assert_eq!(self.d, 1);
        self.values[k]
    }

    pub fn terminal(&self) -> &'a [f64] {
        self.point(self.points() - 1)
    }

    /// Sup-over-grid-points Euclidean distance to another path on the same grid.
    pub fn sup_distance(&self, other: &PathView<'_>) -> f64 {
        debug_assert_eq!(self.d, other.d);
        debug_assert_eq!(self.values.len(), other.values.len());
        let mut worst = 0.0f64;
        for (a, b) in self.values.chunks_exact(self.d).zip(other.values.chunks_exact(self.d)) {
            let mut s = 0.0;
            for j in 0..self.d {
                let diff = a[j] - b[j];
                s += diff * diff;
            }
            worst = worst.max(s);
        }
        worst.sqrt()
    }

    /// Owned copy.
    pub fn to_path(&self) -> SamplePath {
        SamplePath { d: self.d, values: self.values.to_vec() }
    }
}

/// Owned discrete path; same layout as [`PathView`].
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub d: usize,
    pub values: Vec<f64>,
}

impl SamplePath {
    /// Constant path at `init`, with `points` grid points.
    pub fn constant(points: usize, init: &[f64]) -> Self {
        let d = init.len();
        let mut values = Vec::with_capacity(points * d);
        for _ in 0..points {
            values.extend_from_slice(init);
        }
        SamplePath { d, values }
    }

    pub fn view(&self) -> PathView<'_> {
        PathView { d: self.d, values: &self.values }
    }

    pub fn points(&self) -> usize {
        self.values.len() / self.d
    }

    #[inline]
    pub fn point_mut(&mut self, k: usize) -> &mut [f64] {
        let d = self.d;
        &mut self.values[k * d..(k + 1) * d]
    }

    /// Freeze the path after grid point `k`: values at indices `> k` are
    /// replaced by the value at `k`.
    pub fn stop_in_place(&mut self, k: usize) {
        let d = self.d;
        let frozen = self.values[k * d..(k + 1) * d].to_vec();
        for p in (k + 1)..self.points() {
            self.values[p * d..(p + 1) * d].copy_from_slice(&frozen);
        }
    }

    /// Add `delta` to every grid point with index `>= k` (a vertical bump
    /// acting on the future-and-present portion of the path).
    pub fn bump_from(&mut self, k: usize, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.d);
        let d = self.d;
        for p in k..self.points() {
            for j in 0..d {
                self.values[p * d + j] += delta[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_are_exact() {
        let g = TimeGrid::new(1.0, 7).unwrap();
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(7), 1.0);
        let g = TimeGrid::new(0.3, 3).unwrap();
        assert_eq!(g.time(3), 0.3);
    }

    #[test]
    fn floor_index_rounds_down_and_snaps() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        assert_eq!(g.floor_index(0.0).unwrap(), 0);
        assert_eq!(g.floor_index(0.25).unwrap(), 2);
        assert_eq!(g.floor_index(0.3).unwrap(), 3);
        // A time epsilon below a grid point snaps up rather than flooring.
        assert_eq!(g.floor_index(0.3 - 1e-12).unwrap(), 3);
        assert_eq!(g.floor_index(0.3 + 1e-12).unwrap(), 3);
        // Beyond the snap window, flooring.
        assert_eq!(g.floor_index(0.3999).unwrap(), 3);
        assert_eq!(g.floor_index(1.0).unwrap(), 10);
        assert!(g.floor_index(1.1).is_err());
        assert!(g.floor_index(-0.1).is_err());
    }

    #[test]
    fn aligned_index_rejects_off_grid_times() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.aligned_index(0.75).unwrap(), 3);
        assert!(g.aligned_index(0.7).is_err());
    }

    #[test]
    fn stop_freezes_the_tail() {
        let mut p = SamplePath { d: 1, values: vec![0.0, 1.0, 2.0, 3.0] };
        p.stop_in_place(1);
        assert_eq!(p.values, vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn bump_shifts_present_and_future() {
        let mut p = SamplePath { d: 2, values: vec![0.0; 8] };
        p.bump_from(2, &[1.0, -1.0]);
        assert_eq!(p.values, vec![0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn sup_distance_is_worst_grid_point_gap() {
        let a = SamplePath { d: 1, values: vec![0.0, 1.0, 0.0] };
        let b = SamplePath { d: 1, values: vec![0.0, -1.0, 0.5] };
        assert_eq!(a.view().sup_distance(&b.view()), 2.0);
    }
}
