//! Singular drift evaluation and the boundary-respecting path integrator.
//!
//! The volatility solves `Y(t) = y0 + int_0^t b(s, Y(s)) ds + Z(t)` with
//! `b(t, y) = theta1(t)/(y - phi(t))^gamma1 - theta2(t)/(psi(t) - y)^gamma2 + a(t, y)`.
//! Each step of the drift-implicit Euler scheme solves
//! `g(y) = y - dt b(t_{i+1}, y) - rhs = 0` on the open band. Under the
//! step-size gate `g` is strictly increasing and runs from `-inf` at `phi` to
//! `+inf` at `psi`, so the root is unique and lies inside the band.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{BoundFunctions, SandwichDrift, SandwichModel};
use crate::rng::brownian_increments;

/// Absolute tolerance of the implicit root in `y`.
pub const ROOT_TOL: f64 = 1e-12;
const MIN_BAND_WIDTH: f64 = 1e-14;
const MAX_ROOT_ITERS: usize = 400;

/// `b`, `b'_y` and `b''_yy` at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftValue {
    pub b: f64,
    pub b_y: f64,
    pub b_yy: f64,
}

#[inline]
fn eval_unchecked(drift: &SandwichDrift, bounds: &BoundFunctions, t: f64, y: f64) -> DriftValue {
    let (a, a_y, a_yy) = drift.a.eval(y);
    if drift.is_disabled() {
        return DriftValue { b: a, b_y: a_y, b_yy: a_yy };
    }
    let (g1, g2) = (drift.gamma1, drift.gamma2);
    let th1 = drift.theta1.eval(t);
    let th2 = drift.theta2.eval(t);
    let lo = y - bounds.phi.eval(t);
    let hi = bounds.psi.eval(t) - y;
    // p = theta lo^{-gamma}; derivatives follow by dividing by lo
    let p1 = th1 * lo.powf(-g1);
    let p2 = th2 * hi.powf(-g2);
    let b = p1 - p2 + a;
    let b_y = -g1 * p1 / lo - g2 * p2 / hi + a_y;
    let b_yy = g1 * (g1 + 1.0) * p1 / (lo * lo) - g2 * (g2 + 1.0) * p2 / (hi * hi) + a_yy;
    DriftValue { b, b_y, b_yy }
}

/// `b(t, y)` and its first two `y`-derivatives. Outside the open band
/// `(phi(t), psi(t))` this is an error, never an extrapolation.
pub fn drift_eval(drift: &SandwichDrift, bounds: &BoundFunctions, t: f64, y: f64) -> Result<DriftValue> {
    if !drift.is_disabled() {
        let (lower, upper) = (bounds.phi.eval(t), bounds.psi.eval(t));
        if !(y > lower && y < upper) {
            return Err(Error::OutOfBand { t, y, lower, upper });
        }
    }
    Ok(eval_unchecked(drift, bounds, t, y))
}

/// Root of `y - dt b(t, y) = rhs` in the open band.
fn solve_implicit(
    drift: &SandwichDrift,
    bounds: &BoundFunctions,
    t: f64,
    rhs: f64,
    dt: f64,
) -> std::result::Result<f64, String> {
    if drift.is_disabled() {
        let (c0, c1) = drift.a.affine();
        return Ok((rhs + dt * c0) / (1.0 - dt * c1));
    }
    let (mut lo, mut hi) = (bounds.phi.eval(t), bounds.psi.eval(t));
    if !(hi - lo > MIN_BAND_WIDTH) {
        return Err(format!("band ({lo}, {hi}) is numerically degenerate"));
    }
    let residual = |y: f64| {
        let d = eval_unchecked(drift, bounds, t, y);
        (y - dt * d.b - rhs, 1.0 - dt * d.b_y)
    };
    // safeguarded Newton: every iterate shrinks the bracket, a Newton step is
    // accepted only if it stays inside it, otherwise we bisect
    let mut y = if rhs > lo && rhs < hi { rhs } else { 0.5 * (lo + hi) };
    for _ in 0..MAX_ROOT_ITERS {
        let (g, dg) = residual(y);
        if g == 0.0 {
            return Ok(y);
        }
        if g > 0.0 {
            hi = y;
        } else if g < 0.0 {
            lo = y;
        }
        let newton = y - g / dg;
        let next = if newton.is_finite() && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        let step = (next - y).abs();
        y = next;
        if step < ROOT_TOL || hi - lo < ROOT_TOL {
            // polish
            let (g, dg) = residual(y);
            let polished = y - g / dg;
            if polished.is_finite() && polished > bounds.phi.eval(t) && polished < bounds.psi.eval(t) {
                y = polished;
            }
            return Ok(y);
        }
    }
    Err(format!("root search did not converge in {MAX_ROOT_ITERS} iterations (bracket [{lo}, {hi}])"))
}

/// One drift-implicit Euler step: the root `y*` of
/// `y - dt b(t_next, y) - (y_prev + dz) = 0` in `(phi(t_next), psi(t_next))`.
pub fn implicit_step(
    drift: &SandwichDrift,
    bounds: &BoundFunctions,
    t_next: f64,
    y_prev: f64,
    dt: f64,
    dz: f64,
) -> Result<f64> {
    if !(dt > 0.0 && dt.is_finite() && y_prev.is_finite() && dz.is_finite()) {
        return Err(Error::invalid(format!("bad step inputs: dt = {dt}, y_prev = {y_prev}, dz = {dz}")));
    }
    if dt * drift.a.max_slope() >= 1.0 {
        return Err(Error::invalid("step-size gate dt * sup a'_y < 1 violated"));
    }
    solve_implicit(drift, bounds, t_next, y_prev + dz, dt).map_err(|reason| Error::Integration {
        path_index: 0,
        step: 0,
        reason,
    })
}

/// One simulated realisation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathBundle {
    pub seed: u64,
    pub path_index: u64,
    /// Increments of the volatility driver, `n` cells.
    pub db1: Vec<f64>,
    /// Increments of the independent price driver, `n` cells.
    pub db2: Vec<f64>,
    /// `Z(t_i)`, `n + 1` nodes.
    pub z: Vec<f64>,
    /// `Y(t_i)`, `n + 1` nodes.
    pub y: Vec<f64>,
    /// `b'_y(t_i, Y(t_i))`, `n + 1` nodes.
    pub bprime: Vec<f64>,
}

/// Integrates the volatility for given Brownian increments.
pub fn simulate_from_increments(
    model: &SandwichModel,
    db1: Vec<f64>,
    db2: Vec<f64>,
    seed: u64,
    path_index: u64,
) -> Result<PathBundle> {
    let grid = model.grid();
    let n = grid.steps();
    if db1.len() != n || db2.len() != n {
        return Err(Error::invalid(format!("expected {n} increments, got {} and {}", db1.len(), db2.len())));
    }
    let dt = grid.dt();
    let drift = model.drift();
    let bounds = model.bounds();
    let y0 = model.spec().y0;
    let z = model.weights().convolve(&db1);
    let mut y = vec![y0; n + 1];
    let mut bprime = vec![0.0; n + 1];
    bprime[0] = eval_unchecked(drift, bounds, 0.0, y0).b_y;
    // Y_i = y0 + Z_i + D_i with D_i the accumulated drift
    let mut drift_sum = 0.0;
    for i in 1..=n {
        let t = grid.node(i);
        let rhs = (y0 + z[i]) + drift_sum;
        let yi = solve_implicit(drift, bounds, t, rhs, dt).map_err(|reason| Error::Integration {
            path_index,
            step: i,
            reason,
        })?;
        let d = eval_unchecked(drift, bounds, t, yi);
        drift_sum += dt * d.b;
        y[i] = yi;
        bprime[i] = d.b_y;
    }
    Ok(PathBundle { seed, path_index, db1, db2, z, y, bprime })
}

/// Simulates the path keyed by `(seed, path_index)`.
pub fn simulate_path(model: &SandwichModel, seed: u64, path_index: u64) -> Result<PathBundle> {
    let grid = model.grid();
    let (db1, db2) = brownian_increments(seed, path_index, grid.steps(), grid.dt());
    simulate_from_increments(model, db1, db2, seed, path_index)
}

/// Simulates paths `first..first + count` in parallel; output is ordered by index.
pub fn simulate_paths(model: &SandwichModel, seed: u64, first: u64, count: u64) -> Result<Vec<PathBundle>> {
    (first..first + count).into_par_iter().map(|k| simulate_path(model, seed, k)).collect()
}

/// `b''_yy` along a path.
pub fn second_drift_derivative(model: &SandwichModel, path: &PathBundle) -> Vec<f64> {
    let grid = model.grid();
    path.y
        .iter()
        .enumerate()
        .map(|(i, &y)| eval_unchecked(model.drift(), model.bounds(), grid.node(i), y).b_yy)
        .collect()
}

/// Boundedness diagnostics over a collection of paths.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SandwichStats {
    pub paths: usize,
    /// Nodes with `Y <= phi` or `Y >= psi`.
    pub violations: usize,
    /// `min (Y - phi)` over all nodes.
    pub min_margin_lower: f64,
    /// `min (psi - Y)` over all nodes.
    pub min_margin_upper: f64,
    /// `E[(sup_t 1/(Y - phi))^k]`, `k = 1..=4`.
    pub inverse_moments: [f64; 4],
}

pub fn empirical_sandwich_stats(model: &SandwichModel, paths: &[PathBundle]) -> Result<SandwichStats> {
    if paths.is_empty() {
        return Err(Error::invalid("sandwich statistics need at least one path"));
    }
    let grid = model.grid();
    let bounds = model.bounds();
    let phi: Vec<f64> = grid.nodes().map(|t| bounds.phi.eval(t)).collect();
    let psi: Vec<f64> = grid.nodes().map(|t| bounds.psi.eval(t)).collect();
    let mut stats = SandwichStats {
        paths: paths.len(),
        violations: 0,
        min_margin_lower: f64::INFINITY,
        min_margin_upper: f64::INFINITY,
        inverse_moments: [0.0; 4],
    };
    for p in paths {
        let mut sup_inv: f64 = 0.0;
        for (i, &y) in p.y.iter().enumerate() {
            let lo = y - phi[i];
            let hi = psi[i] - y;
            if !(lo > 0.0 && hi > 0.0) {
                stats.violations += 1;
            }
            stats.min_margin_lower = stats.min_margin_lower.min(lo);
            stats.min_margin_upper = stats.min_margin_upper.min(hi);
            sup_inv = sup_inv.max(1.0 / lo);
        }
        for (k, m) in stats.inverse_moments.iter_mut().enumerate() {
            *m += sup_inv.powi(k as i32 + 1);
        }
    }
    for m in stats.inverse_moments.iter_mut() {
        *m /= paths.len() as f64;
    }
    Ok(stats)
}

/// Writes `path,t,Z,Y,bprime` rows.
pub fn write_paths_csv<W: Write>(writer: W, model: &SandwichModel, paths: &[PathBundle]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["path", "t", "Z", "Y", "bprime"])?;
    let grid = model.grid();
    for p in paths {
        for i in 0..p.y.len() {
            w.write_record(&[
                p.path_index.to_string(),
                format!("{}", grid.node(i)),
                format!("{:e}", p.z[i]),
                format!("{:e}", p.y[i]),
                format!("{:e}", p.bprime[i]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AFn, ModelSpec};
    use crate::volterra::KernelSpec;

    fn unit_drift() -> (SandwichDrift, BoundFunctions) {
        (SandwichDrift::symmetric(1.0, 1.0), BoundFunctions::constant(0.05, 1.0))
    }

    #[test]
    fn midpoint_drift_vanishes() {
        let (d, b) = unit_drift();
        let v = drift_eval(&d, &b, 0.3, 0.525).unwrap();
        assert_eq!(v.b, 0.0);
    }

    #[test]
    fn drift_values_near_lower_bound() {
        let (d, b) = unit_drift();
        let v = drift_eval(&d, &b, 0.0, 0.1).unwrap();
        assert!((v.b - (1.0 / 0.05 - 1.0 / 0.9)).abs() < 1e-12);
        assert!((v.b - 18.8889).abs() < 5e-5);
        assert!((v.b_y - (-401.234_567_901_234_6)).abs() < 1e-9, "{}", v.b_y);
    }

    #[test]
    fn drift_derivatives_match_finite_differences() {
        let d =
            SandwichDrift { a: AFn::MeanReversion { speed: 2.0, level: 0.4 }, ..SandwichDrift::symmetric(0.02, 2.5) };
        let b = BoundFunctions::constant(0.05, 1.0);
        let h = 1e-6;
        for y in [0.1, 0.3, 0.7, 0.95] {
            let c = drift_eval(&d, &b, 0.0, y).unwrap();
            let up = drift_eval(&d, &b, 0.0, y + h).unwrap();
            let dn = drift_eval(&d, &b, 0.0, y - h).unwrap();
            let fd1 = (up.b - dn.b) / (2.0 * h);
            let fd2 = (up.b_y - dn.b_y) / (2.0 * h);
            assert!((fd1 - c.b_y).abs() < 1e-5 * c.b_y.abs().max(1.0), "{fd1} {}", c.b_y);
            assert!((fd2 - c.b_yy).abs() < 1e-5 * c.b_yy.abs().max(1.0), "{fd2} {}", c.b_yy);
        }
    }

    #[test]
    fn out_of_band_is_an_error() {
        let (d, b) = unit_drift();
        assert!(matches!(drift_eval(&d, &b, 0.0, 0.05), Err(Error::OutOfBand { .. })));
        assert!(matches!(drift_eval(&d, &b, 0.0, 1.2), Err(Error::OutOfBand { .. })));
        let off = SandwichDrift::disabled(AFn::Zero);
        assert!(drift_eval(&off, &b, 0.0, 1.2).is_ok());
    }

    #[test]
    fn implicit_step_fixed_point() {
        let (d, b) = unit_drift();
        let y = implicit_step(&d, &b, 0.5, 0.525, 0.01, 0.0).unwrap();
        assert!((y - 0.525).abs() < 1e-15);
    }

    #[test]
    fn implicit_step_matches_bisection_oracle() {
        let d = SandwichDrift::symmetric(1.0, 2.0);
        let b = BoundFunctions::constant(0.05, 1.0);
        let (dt, rhs) = (0.01, 0.2 - 0.3);
        let y = implicit_step(&d, &b, 0.0, 0.2, dt, -0.3).unwrap();
        // independent 200-iteration bisection on g
        let g = |y: f64| y - dt * (1.0 / (y - 0.05).powi(2) - 1.0 / (1.0 - y).powi(2)) - rhs;
        let (mut lo, mut hi) = (0.05 + 1e-15, 1.0 - 1e-15);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        assert!((y - 0.5 * (lo + hi)).abs() < 1e-10, "{y} vs {lo}");
        assert!(y > 0.05 && y < 1.0);
    }

    #[test]
    fn extreme_pushes_stay_in_band() {
        let d = SandwichDrift::symmetric(0.01, 2.0);
        let b = BoundFunctions::constant(0.05, 1.0);
        for dz in [-50.0, -1.0, 1.0, 50.0, 1e6] {
            let y = implicit_step(&d, &b, 0.0, 0.5, 1e-3, dz).unwrap();
            assert!(y > 0.05 && y < 1.0, "dz = {dz}: {y}");
        }
    }

    #[test]
    fn degenerate_band_fails() {
        let d = SandwichDrift::symmetric(0.01, 2.0);
        let b = BoundFunctions::constant(0.5, 0.5 + 1e-15);
        assert!(matches!(implicit_step(&d, &b, 0.0, 0.5, 1e-3, 0.0), Err(Error::Integration { .. })));
    }

    fn model(kernel: KernelSpec, drift: SandwichDrift) -> SandwichModel {
        SandwichModel::new(ModelSpec {
            kernel,
            bounds: BoundFunctions::constant(0.05, 1.0),
            drift,
            y0: 0.5,
            x0: 0.0,
            r: 0.0,
            rho: -0.5,
            horizon: 1.0,
            steps: 128,
        })
        .unwrap()
    }

    #[test]
    fn disabled_drift_reproduces_convolution_bitwise() {
        let m = model(KernelSpec::single_power(1.0, 0.3).unwrap(), SandwichDrift::disabled(AFn::Zero));
        let p = simulate_path(&m, 9, 4).unwrap();
        for i in 0..=128 {
            assert_eq!(p.y[i], 0.5 + p.z[i]);
        }
    }

    #[test]
    fn paths_are_deterministic_and_sandwiched() {
        let m = model(KernelSpec::single_power(1.0, 0.3).unwrap(), SandwichDrift::symmetric(0.01, 3.0));
        let a = simulate_paths(&m, 5, 0, 50).unwrap();
        let b = simulate_paths(&m, 5, 0, 50).unwrap();
        assert_eq!(a, b);
        let s = empirical_sandwich_stats(&m, &a).unwrap();
        assert_eq!(s.violations, 0);
        assert!(s.min_margin_lower > 0.0 && s.min_margin_upper > 0.0);
    }

    #[test]
    fn zero_kernel_margin() {
        let m = model(KernelSpec::Zero, SandwichDrift::disabled(AFn::Zero));
        let p = simulate_path(&m, 1, 0).unwrap();
        assert!(p.y.iter().all(|&y| y == 0.5));
        let s = empirical_sandwich_stats(&m, &[p]).unwrap();
        assert_eq!(s.min_margin_lower, 0.5 - 0.05);
        assert!(empirical_sandwich_stats(&m, &[]).is_err());
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let m = model(KernelSpec::single_power(0.3, 0.3).unwrap(), SandwichDrift::symmetric(0.01, 3.0));
        let paths = simulate_paths(&m, 1, 0, 3).unwrap();
        let mut buf = Vec::new();
        write_paths_csv(&mut buf, &m, &paths).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 129);
        assert!(text.starts_with("path,t,Z,Y,bprime\n"));
    }
}
