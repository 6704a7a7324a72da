//! Functionals of time and a path measure, with optional closed-form
//! derivative bundles.
//!
//! A [`MeasureFunctional`] evaluates `f(t, mu)` and may carry closed forms
//! for the time derivative, the measure derivative (one `d`-vector per
//! particle) and the pathwise derivative of the measure derivative (one
//! `d x d` matrix per particle). Derivative closures are batch-oriented —
//! they fill one flat buffer for the whole cloud — so verifiers that sweep
//! every (particle, step) pair touch each snapshot once.
//!
//! Functionals must be adapted: the value at `t` may depend on paths only
//! through their history up to the stop index of `t`. [`adaptedness_gap`]
//! measures the violation directly and is used by property tests.

use std::sync::Arc;

use crate::measure::PathMeasure;
use crate::{Error, Result};

type ScalarFn = Arc<dyn Fn(f64, &PathMeasure) -> f64 + Sync + Send>;
type BatchFn = Arc<dyn Fn(f64, &PathMeasure, &mut [f64]) + Sync + Send>;

/// A real-valued functional of `(t, mu)` with optional closed-form
/// derivatives.
#[derive(Clone)]
pub struct MeasureFunctional {
    name: String,
    eval: ScalarFn,
    dt: Option<ScalarFn>,
    /// Measure derivative: fills `n * d` entries, particle-major.
    dmu: Option<BatchFn>,
    /// Pathwise derivative of the measure derivative: fills `n * d * d`
    /// entries, particle-major row-major matrices.
    domega_dmu: Option<BatchFn>,
    /// Declared growth: bounded time derivative, linear-growth measure
    /// derivatives. Recorded for audits; not enforced pointwise.
    pub bounded_time_derivative: bool,
    pub linear_growth_derivatives: bool,
}

impl MeasureFunctional {
    pub fn new(
        name: impl Into<String>,
        eval: impl Fn(f64, &PathMeasure) -> f64 + Sync + Send + 'static,
    ) -> Self {
        MeasureFunctional {
            name: name.into(),
            eval: Arc::new(eval),
            dt: None,
            dmu: None,
            domega_dmu: None,
            bounded_time_derivative: true,
            linear_growth_derivatives: true,
        }
    }

    pub fn with_dt(mut self, dt: impl Fn(f64, &PathMeasure) -> f64 + Sync + Send + 'static) -> Self {
        self.dt = Some(Arc::new(dt));
        self
    }

    pub fn with_dmu(
        mut self,
        dmu: impl Fn(f64, &PathMeasure, &mut [f64]) + Sync + Send + 'static,
    ) -> Self {
        self.dmu = Some(Arc::new(dmu));
        self
    }

    pub fn with_domega_dmu(
        mut self,
        g: impl Fn(f64, &PathMeasure, &mut [f64]) + Sync + Send + 'static,
    ) -> Self {
        self.domega_dmu = Some(Arc::new(g));
        self
    }

    /// `exp(lambda t) f(t, mu)`, with the chain-rule bundle: the time
    /// derivative gains `lambda exp(lambda t) f`, the measure derivatives
    /// scale by `exp(lambda t)`. Applying `lambda` then `-lambda` recovers
    /// the original values at machine precision.
    pub fn exponential_time_scaling(self, lambda: f64) -> Self {
        let name = if lambda == 0.0 {
            self.name.clone()
        } else {
            format!("{}*exp({lambda}t)", self.name)
        };
        let eval = self.eval.clone();
        let scaled_eval: ScalarFn =
            Arc::new(move |t: f64, mu: &PathMeasure| (lambda * t).exp() * eval(t, mu));
        let dt = self.dt.as_ref().map(|dt| {
            let dt = dt.clone();
            let eval = self.eval.clone();
            let f: ScalarFn = Arc::new(move |t: f64, mu: &PathMeasure| {
                (lambda * t).exp() * (dt(t, mu) + lambda * eval(t, mu))
            });
            f
        });
        let scale_batch = |b: &BatchFn| -> BatchFn {
            let b = b.clone();
            Arc::new(move |t: f64, mu: &PathMeasure, out: &mut [f64]| {
                b(t, mu, out);
                let s = (lambda * t).exp();
                for v in out.iter_mut() {
                    *v *= s;
                }
            })
        };
        MeasureFunctional {
            name,
            eval: scaled_eval,
            dt,
            dmu: self.dmu.as_ref().map(&scale_batch),
            domega_dmu: self.domega_dmu.as_ref().map(&scale_batch),
            bounded_time_derivative: self.bounded_time_derivative,
            linear_growth_derivatives: self.linear_growth_derivatives,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Evaluate `f(t, mu)`; non-finite values are reported as numeric errors
    /// with the functional's name attached.
    pub fn eval(&self, t: f64, mu: &PathMeasure) -> Result<f64> {
        let v = (self.eval)(t, mu);
        if !v.is_finite() {
            return Err(Error::Numerics(format!(
                "functional '{}' returned {v} at t = {t}",
                self.name
            )));
        }
        Ok(v)
    }

    /// Raw evaluation without the finiteness check (hot loops that check in
    /// bulk).
    pub fn eval_raw(&self, t: f64, mu: &PathMeasure) -> f64 {
        (self.eval)(t, mu)
    }

    pub fn has_dt(&self) -> bool {
        self.dt.is_some()
    }

    pub fn has_dmu(&self) -> bool {
        self.dmu.is_some()
    }

    pub fn has_domega_dmu(&self) -> bool {
        self.domega_dmu.is_some()
    }

    /// Closed-form time derivative.
    pub fn dt_closed(&self, t: f64, mu: &PathMeasure) -> Result<f64> {
        let f = self.dt.as_ref().ok_or_else(|| {
            Error::Config(format!("functional '{}' has no closed-form time derivative", self.name))
        })?;
        Ok(f(t, mu))
    }

    /// Closed-form measure derivative for the whole cloud; `out` must hold
    /// `n * d` entries.
    pub fn dmu_closed(&self, t: f64, mu: &PathMeasure, out: &mut [f64]) -> Result<()> {
        let f = self.dmu.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "functional '{}' has no closed-form measure derivative",
                self.name
            ))
        })?;
        debug_assert_eq!(out.len(), mu.len() * mu.dim());
        f(t, mu, out);
        Ok(())
    }

    /// Closed-form pathwise derivative of the measure derivative; `out` must
    /// hold `n * d * d` entries.
    pub fn domega_dmu_closed(&self, t: f64, mu: &PathMeasure, out: &mut [f64]) -> Result<()> {
        let f = self.domega_dmu.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "functional '{}' has no closed-form second derivative",
                self.name
            ))
        })?;
        debug_assert_eq!(out.len(), mu.len() * mu.dim() * mu.dim());
        f(t, mu, out);
        Ok(())
    }
}

impl std::fmt::Debug for MeasureFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeasureFunctional")
            .field("name", &self.name)
            .field("dt", &self.dt.is_some())
            .field("dmu", &self.dmu.is_some())
            .field("domega_dmu", &self.domega_dmu.is_some())
            .finish()
    }
}

/// `|f(t, mu) - f(t, mu stopped at t)|` — zero for adapted functionals.
pub fn adaptedness_gap(f: &MeasureFunctional, t: f64, mu: &PathMeasure) -> Result<f64> {
    let k = mu.grid().floor_index(t)?;
    let stopped = mu.stop(k);
    Ok((f.eval(t, mu)? - f.eval(t, &stopped)?).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;

    fn mean_at_t() -> MeasureFunctional {
        MeasureFunctional::new("mean-at-t", |t, mu: &PathMeasure| {
            let k = mu.grid().floor_index(t).expect("t on grid span");
            mu.expectation_at(k, |x| x[0])
        })
    }

    #[test]
    fn eval_checks_finiteness() {
        let f = MeasureFunctional::new("bad", |_t, _mu| f64::NAN);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let mu = PathMeasure::from_initial_states(grid, 1, &[0.0]).unwrap();
        assert!(matches!(f.eval(0.0, &mu), Err(Error::Numerics(_))));
    }

    #[test]
    fn missing_closed_forms_are_config_errors() {
        let f = mean_at_t();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let mu = PathMeasure::from_initial_states(grid, 1, &[1.0, 3.0]).unwrap();
        assert!(matches!(f.dt_closed(0.0, &mu), Err(Error::Config(_))));
        let mut buf = vec![0.0; 2];
        assert!(matches!(f.dmu_closed(0.0, &mu, &mut buf), Err(Error::Config(_))));
    }

    #[test]
    fn adaptedness_gap_detects_future_peeking() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let mut mu = PathMeasure::from_initial_states(grid, 1, &[1.0]).unwrap();
        mu.point_mut(0, 4)[0] = 7.0;
        let adapted = mean_at_t();
        assert_eq!(adaptedness_gap(&adapted, 0.5, &mu).unwrap(), 0.0);
        let peeking = MeasureFunctional::new("terminal", |_t, mu: &PathMeasure| {
            let last = mu.grid().steps();
            mu.expectation_at(last, |x| x[0])
        });
        assert!(adaptedness_gap(&peeking, 0.5, &mu).unwrap() > 1.0);
    }
}
