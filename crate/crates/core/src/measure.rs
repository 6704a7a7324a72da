//! Empirical measures on path space.
//!
//! A [`PathMeasure`] is `n` equally weighted discrete paths on a shared
//! [`TimeGrid`], stored as one flat particle-major array
//! (`values[i * stride + k * d + j]`). The flat layout keeps simulation and
//! reductions cache-friendly and makes cloning cheap enough for the
//! bump-and-reevaluate derivative estimators.
//!
//! Stopping (`μ ↦ μ_{t∧·}`) is the central measure operation: adapted
//! functionals must be invariant under it, and all time/measure geometry is
//! defined through stopped marginals.

use crate::grid::{PathView, TimeGrid};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct PathMeasure {
    grid: TimeGrid,
    d: usize,
    n: usize,
    values: Vec<f64>,
}

impl PathMeasure {
    /// All-zero cloud.
    pub fn zeros(grid: TimeGrid, d: usize, n: usize) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(Error::Domain("measure needs d >= 1 and n >= 1".into()));
        }
        Ok(PathMeasure { grid, d, n, values: vec![0.0; n * grid.points() * d] })
    }

    /// Cloud of constant paths through the given initial states
    /// (`init.len() == n * d`, particle-major).
    pub fn from_initial_states(grid: TimeGrid, d: usize, init: &[f64]) -> Result<Self> {
        if d == 0 || init.is_empty() || init.len() % d != 0 {
            return Err(Error::Shape(format!(
                "initial states length {} is not a positive multiple of d={}",
                init.len(),
                d
            )));
        }
        let n = init.len() / d;
        let mut m = PathMeasure::zeros(grid, d, n)?;
        for i in 0..n {
            let x0 = &init[i * d..(i + 1) * d];
            for k in 0..grid.points() {
                m.point_mut(i, k).copy_from_slice(x0);
            }
        }
        Ok(m)
    }

    /// Cloud built from explicit per-particle paths (all on `grid`).
    pub fn from_paths(grid: TimeGrid, d: usize, paths: &[crate::grid::SamplePath]) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Domain("measure needs at least one path".into()));
        }
        let mut m = PathMeasure::zeros(grid, d, paths.len())?;
        for (i, p) in paths.iter().enumerate() {
            if p.d != d || p.points() != grid.points() {
                return Err(Error::Shape(format!(
                    "path {i} has d={} points={}, expected d={d} points={}",
                    p.d,
                    p.points(),
                    grid.points()
                )));
            }
            m.particle_mut(i).copy_from_slice(&p.values);
        }
        Ok(m)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn stride(&self) -> usize {
        self.grid.points() * self.d
    }

    pub fn path(&self, i: usize) -> PathView<'_> {
        let s = self.stride();
        PathView { d: self.d, values: &self.values[i * s..(i + 1) * s] }
    }

    pub fn particle_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.values[i * s..(i + 1) * s]
    }

    #[inline]
    pub fn point(&self, i: usize, k: usize) -> &[f64] {
        let s = self.stride();
        &self.values[i * s + k * self.d..i * s + (k + 1) * self.d]
    }

    #[inline]
    pub fn point_mut(&mut self, i: usize, k: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.values[i * s + k * self.d..i * s + (k + 1) * self.d]
    }

    /// Scalar state of particle `i` at grid point `k` (dimension 1 only).
    #[inline]
    pub fn scalar(&self, i: usize, k: usize) -> f64 {
        debug_assert_eq!(self.d, 1);
        self.values[i * self.stride() + k]
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Parallel iteration support: split the storage into per-particle slices.
    pub fn particles_mut(&mut self) -> impl rayon::iter::IndexedParallelIterator<Item = &mut [f64]> {
        use rayon::prelude::*;
        let s = self.stride();
        self.values.par_chunks_exact_mut(s)
    }

    /// Stopped copy: every path frozen after grid index `k`.
    pub fn stop(&self, k: usize) -> Self {
        let mut out = self.clone();
        out.stop_in_place(k);
        out
    }

    pub fn stop_in_place(&mut self, k: usize) {
        let (d, points, s) = (self.d, self.grid.points(), self.stride());
        for i in 0..self.n {
            let base = i * s;
            let (head, tail) = self.values[base..base + s].split_at_mut((k + 1) * d);
            let frozen = &head[k * d..(k + 1) * d];
            for p in 0..points - k - 1 {
                tail[p * d..(p + 1) * d].copy_from_slice(frozen);
            }
        }
    }

    /// Bootstrap resample of `m` particles (with replacement).
    pub fn resample(&self, m: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 {
            return Err(Error::Domain("resample needs m >= 1".into()));
        }
        let s = self.stride();
        let mut values = Vec::with_capacity(m * s);
        for _ in 0..m {
            let i = rng.index(self.n);
            values.extend_from_slice(&self.values[i * s..(i + 1) * s]);
        }
        Ok(PathMeasure { grid: self.grid, d: self.d, n: m, values })
    }

    /// Mean state at grid point `k`, written into `out` (`d` entries).
    pub fn mean_at(&self, k: usize, out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.n {
            let x = self.point(i, k);
            for j in 0..self.d {
                out[j] += x[j];
            }
        }
        let inv = 1.0 / self.n as f64;
        for v in out.iter_mut() {
            *v *= inv;
        }
    }

    /// Empirical expectation of a state function at grid point `k`.
    pub fn expectation_at(&self, k: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            acc += f(self.point(i, k));
        }
        acc / self.n as f64
    }

    /// Empirical expectation of a path functional.
    pub fn expectation_path(&self, f: impl Fn(PathView<'_>) -> f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            acc += f(self.path(i));
        }
        acc / self.n as f64
    }

    /// Unbiased sample variance of a scalar state function at grid point `k`.
    /// Returns 0 for a single particle.
    pub fn variance_at(&self, k: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let mean = self.expectation_at(k, &f);
        let mut acc = 0.0;
        for i in 0..self.n {
            let v = f(self.point(i, k)) - mean;
            acc += v * v;
        }
        acc / (self.n - 1) as f64
    }

    /// Error if any stored value is non-finite.
    pub fn validate_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(pos) => {
                let s = self.stride();
                Err(Error::Numerics(format!(
                    "non-finite value at particle {} grid point {}",
                    pos / s,
                    (pos % s) / self.d
                )))
            }
        }
    }
}
