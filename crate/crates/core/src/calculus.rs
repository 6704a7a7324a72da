//! Difference-quotient derivative estimators on path-measure space and the
//! pathwise Itô verifier.
//!
//! The measure derivative is probed through the lifting construction: bump
//! one particle — one atom of mass `1/N` — by `eps` along a coordinate from
//! the stop index of `t` onward, and scale the central difference quotient by
//! `N`. The second derivative applies two bumps to the same particle and
//! takes the mixed quotient; its `O(1/N)` contamination from the
//! second-order measure derivative is accepted (the verifier never needs that
//! term) and can be measured by doubling `N`.
//!
//! [`ito_residual`] integrates a functional's derivative bundle along one
//! simulated cloud and reports how far the telescoped value change is from
//! the integral — the discrete shadow of the pathwise chain rule.

use crate::functional::MeasureFunctional;
use crate::measure::PathMeasure;
use crate::sim::SimResult;
use crate::stats::mean_and_stderr;
use crate::{Error, Result};

/// `1e-4 * (1 + RMS particle norm at index k)` — a bump size scaled to the
/// cloud.
pub fn default_bump(mu: &PathMeasure, k: usize) -> f64 {
    let ms = mu.expectation_at(k, |x| x.iter().map(|v| v * v).sum());
    1e-4 * (1.0 + ms.sqrt())
}

/// Forward time difference on the stopped measure, Richardson-extrapolated
/// over `h` and `h / 2`. Requires `t + h <= T`.
pub fn time_derivative(f: &MeasureFunctional, t: f64, mu: &PathMeasure, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("time step must be positive (got {h})")));
    }
    let horizon = mu.grid().horizon();
    if t + h > horizon + crate::grid::TIME_SNAP {
        return Err(Error::Domain(format!(
            "time derivative at t = {t} with h = {h} leaves the horizon {horizon}"
        )));
    }
    let k = mu.grid().floor_index(t)?;
    let stopped = mu.stop(k);
    let f0 = f.eval(t, mu)?;
    let d_full = (f.eval(t + h, &stopped)? - f0) / h;
    let d_half = (f.eval(t + 0.5 * h, &stopped)? - f0) / (0.5 * h);
    Ok(2.0 * d_half - d_full)
}

/// Add `eps` to component `comp` of particle `i` at all grid indices `>= from`.
fn bump(work: &mut PathMeasure, i: usize, comp: usize, from: usize, eps: f64) {
    let d = work.dim();
    let chunk = work.particle_mut(i);
    for k in from..=(chunk.len() / d - 1) {
        chunk[k * d + comp] += eps;
    }
}

/// Save the affected slice so bumps can be undone bit-for-bit.
fn save(work: &PathMeasure, i: usize, comp: usize, from: usize, out: &mut Vec<f64>) {
    let points = work.grid().points();
    out.clear();
    for k in from..points {
        out.push(work.point(i, k)[comp]);
    }
}

fn restore(work: &mut PathMeasure, i: usize, comp: usize, from: usize, saved: &[f64]) {
    let d = work.dim();
    let chunk = work.particle_mut(i);
    for (j, v) in saved.iter().enumerate() {
        chunk[(from + j) * d + comp] = *v;
    }
}

/// Measure derivative at `(t, mu)` evaluated at particle `i`, with the bump
/// support starting at an explicit grid index (property tests use supports
/// strictly after `t` to certify adaptedness).
pub fn lions_derivative_with_support(
    f: &MeasureFunctional,
    t: f64,
    mu: &PathMeasure,
    i: usize,
    eps: f64,
    support: usize,
) -> Result<Vec<f64>> {
    if i >= mu.len() {
        return Err(Error::Shape(format!("particle {i} out of range (n = {})", mu.len())));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("bump size must be positive (got {eps})")));
    }
    if support >= mu.grid().points() {
        return Err(Error::Shape(format!("bump support {support} beyond the grid")));
    }
    let d = mu.dim();
    let n = mu.len() as f64;
    let mut work = mu.clone();
    let mut saved = Vec::new();
    let mut out = vec![0.0; d];
    for comp in 0..d {
        save(&work, i, comp, support, &mut saved);
        bump(&mut work, i, comp, support, eps);
        let f_plus = f.eval(t, &work)?;
        restore(&mut work, i, comp, support, &saved);
        bump(&mut work, i, comp, support, -eps);
        let f_minus = f.eval(t, &work)?;
        restore(&mut work, i, comp, support, &saved);
        out[comp] = n * (f_plus - f_minus) / (2.0 * eps);
    }
    Ok(out)
}

/// Measure derivative at `(t, mu)` evaluated at particle `i`: the central
/// single-atom difference quotient scaled by `N`, bumping from the stop index
/// of `t`.
pub fn lions_derivative(
    f: &MeasureFunctional,
    t: f64,
    mu: &PathMeasure,
    i: usize,
    eps: f64,
) -> Result<Vec<f64>> {
    let k = mu.grid().floor_index(t)?;
    lions_derivative_with_support(f, t, mu, i, eps, k)
}

/// Pathwise derivative of the measure derivative at particle `i`: the mixed
/// second quotient with both bumps on the same particle. Row-major `d x d`.
/// Bias is `O(eps^2)` plus `O(1/N)` from the unmodeled second-order measure
/// term.
pub fn second_pathwise_derivative(
    f: &MeasureFunctional,
    t: f64,
    mu: &PathMeasure,
    i: usize,
    eps1: f64,
    eps2: f64,
) -> Result<Vec<f64>> {
    if i >= mu.len() {
        return Err(Error::Shape(format!("particle {i} out of range (n = {})", mu.len())));
    }
    if !(eps1 > 0.0) || !(eps2 > 0.0) {
        return Err(Error::Config(format!(
            "bump sizes must be positive (got {eps1}, {eps2})"
        )));
    }
    let k0 = mu.grid().floor_index(t)?;
    let d = mu.dim();
    let n = mu.len() as f64;
    let mut work = mu.clone();
    let base = f.eval(t, mu)?;

    let mut saved = Vec::new();
    let mut singles1 = vec![0.0; d];
    let mut singles2 = vec![0.0; d];
    for comp in 0..d {
        save(&work, i, comp, k0, &mut saved);
        bump(&mut work, i, comp, k0, eps1);
        singles1[comp] = f.eval(t, &work)?;
        restore(&mut work, i, comp, k0, &saved);
        bump(&mut work, i, comp, k0, eps2);
        singles2[comp] = f.eval(t, &work)?;
        restore(&mut work, i, comp, k0, &saved);
    }

    let mut out = vec![0.0; d * d];
    let mut saved2 = Vec::new();
    for r in 0..d {
        for c in 0..d {
            save(&work, i, r, k0, &mut saved);
            bump(&mut work, i, r, k0, eps1);
            save(&work, i, c, k0, &mut saved2);
            bump(&mut work, i, c, k0, eps2);
            let both = f.eval(t, &work)?;
            restore(&mut work, i, c, k0, &saved2);
            restore(&mut work, i, r, k0, &saved);
            out[r * d + c] = n * (both - singles1[r] - singles2[c] + base) / (eps1 * eps2);
        }
    }
    Ok(out)
}

/// Which quadratic step the second-order term integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QvConvention {
    /// Realized increments `dX dX^T` per step.
    IncrementSquared,
    /// Recorded coefficients `sigma sigma^T dt` per step.
    VolDt,
}

/// Step sizes for numeric-fallback derivatives inside the verifier.
#[derive(Debug, Clone, Copy)]
pub struct NumericDiff {
    /// Particle bump; default `default_bump` at the step.
    pub eps: Option<f64>,
    /// Time step; default half the grid step.
    pub h: Option<f64>,
}

/// Options for [`ito_residual`].
#[derive(Debug, Clone, Default)]
pub struct ItoOpts {
    /// `None` selects recorded coefficients when present, otherwise realized
    /// increments.
    pub convention: Option<QvConvention>,
    /// Permit numeric differencing for missing closed forms. Expensive: the
    /// measure derivative costs one functional sweep per particle.
    pub numeric: Option<NumericDiff>,
}

/// Decomposed verification of the pathwise chain rule along one run.
#[derive(Debug, Clone)]
pub struct ItoReport {
    /// `f` at the end minus `f` at the start of the window.
    pub change: f64,
    /// Integrated time-derivative term.
    pub time_term: f64,
    /// Particle-averaged first-order term (measure derivative dotted with
    /// increments).
    pub first_order_term: f64,
    /// Particle-averaged second-order term (symmetrized matrix against the
    /// quadratic step).
    pub second_order_term: f64,
    /// `change - time_term - first_order_term - second_order_term`.
    pub residual: f64,
    /// Residual over the scale of the identity (largest term magnitude).
    pub relative_residual: f64,
    /// Standard error of the particle-averaged integral terms; the
    /// cross-particle part of the Monte Carlo uncertainty.
    pub stderr: f64,
    pub particles: usize,
    pub steps_used: usize,
    pub convention: QvConvention,
}

/// Integrate `f`'s derivative bundle along the simulated window of `run` up
/// to `t_end` and compare with the realized change of `f`. Closed forms are
/// used when present; otherwise numeric fallbacks must be explicitly enabled.
pub fn ito_residual(
    f: &MeasureFunctional,
    run: &SimResult,
    t_end: f64,
    opts: &ItoOpts,
) -> Result<ItoReport> {
    let mu = &run.measure;
    let grid = mu.grid().clone();
    let d = mu.dim();
    let n = mu.len();
    let k_start = run.start_index;
    let k_end = grid.floor_index(t_end)?;
    if k_end <= k_start {
        return Err(Error::Config(format!(
            "window [{k_start}, {k_end}] leaves nothing to integrate"
        )));
    }
    let convention = opts.convention.unwrap_or(if run.vol_qv.is_some() {
        QvConvention::VolDt
    } else {
        QvConvention::IncrementSquared
    });
    if convention == QvConvention::VolDt && run.vol_qv.is_none() {
        return Err(Error::Config(
            "coefficient convention requested but the run recorded no volatility".into(),
        ));
    }
    let need_numeric = !f.has_dt() || !f.has_dmu() || !f.has_domega_dmu();
    if need_numeric && opts.numeric.is_none() {
        return Err(Error::Config(format!(
            "functional '{}' lacks closed-form derivatives and numeric fallback is off",
            f.name()
        )));
    }

    let dt = grid.dt();
    let mut dmu_buf = vec![0.0; n * d];
    let mut gamma_buf = vec![0.0; n * d * d];
    let mut first = vec![0.0f64; n];
    let mut second = vec![0.0f64; n];
    let mut time_term = 0.0;

    for k in k_start..k_end {
        let tk = grid.time(k);
        let dtf = if f.has_dt() {
            f.dt_closed(tk, mu)?
        } else {
            let nd = opts.numeric.expect("checked above");
            let h = nd.h.unwrap_or(0.5 * dt);
            time_derivative(f, tk, mu, h)?
        };
        time_term += dtf * dt;

        if f.has_dmu() {
            f.dmu_closed(tk, mu, &mut dmu_buf)?;
        } else {
            let nd = opts.numeric.expect("checked above");
            let eps = nd.eps.unwrap_or_else(|| default_bump(mu, k));
            for i in 0..n {
                let g = lions_derivative(f, tk, mu, i, eps)?;
                dmu_buf[i * d..(i + 1) * d].copy_from_slice(&g);
            }
        }
        if f.has_domega_dmu() {
            f.domega_dmu_closed(tk, mu, &mut gamma_buf)?;
        } else {
            let nd = opts.numeric.expect("checked above");
            let eps = nd.eps.unwrap_or_else(|| default_bump(mu, k));
            for i in 0..n {
                let g = second_pathwise_derivative(f, tk, mu, i, eps, eps)?;
                gamma_buf[i * d * d..(i + 1) * d * d].copy_from_slice(&g);
            }
        }

        for i in 0..n {
            let x0 = mu.point(i, k);
            let x1 = mu.point(i, k + 1);
            let z = &dmu_buf[i * d..(i + 1) * d];
            let gam = &gamma_buf[i * d * d..(i + 1) * d * d];
            let mut zdot = 0.0;
            for r in 0..d {
                zdot += z[r] * (x1[r] - x0[r]);
            }
            first[i] += zdot;
            let mut quad = 0.0;
            match convention {
                QvConvention::IncrementSquared => {
                    for r in 0..d {
                        for c in 0..d {
                            let sym = 0.5 * (gam[r * d + c] + gam[c * d + r]);
                            quad += sym * (x1[r] - x0[r]) * (x1[c] - x0[c]);
                        }
                    }
                }
                QvConvention::VolDt => {
                    let q = run.vol_qv_at(i, k);
                    for r in 0..d {
                        for c in 0..d {
                            let sym = 0.5 * (gam[r * d + c] + gam[c * d + r]);
                            quad += sym * q[r * d + c] * dt;
                        }
                    }
                }
            }
            second[i] += 0.5 * quad;
        }
    }

    let change = f.eval(grid.time(k_end), mu)? - f.eval(grid.time(k_start), mu)?;
    let (first_order_term, se1) = mean_and_stderr(&first);
    let (second_order_term, se2) = mean_and_stderr(&second);
    // Correlated in general; the quadrature sum is a conservative width.
    let stderr = (se1 * se1 + se2 * se2).sqrt();
    let residual = change - time_term - first_order_term - second_order_term;
    let scale = change
        .abs()
        .max(time_term.abs())
        .max(first_order_term.abs())
        .max(second_order_term.abs())
        .max(1e-30);
    Ok(ItoReport {
        change,
        time_term,
        first_order_term,
        second_order_term,
        residual,
        relative_residual: residual.abs() / scale,
        stderr,
        particles: n,
        steps_used: k_end - k_start,
        convention,
    })
}
