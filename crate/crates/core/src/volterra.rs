//! Volterra kernels, the discretisation grid and the kernel-level diagnostics.
//!
//! A kernel `K(t, s)` vanishes for `t <= s`. The Gaussian driver is
//! `Z(t) = int_0^t K(t, s) dB(s)`, discretised on a uniform grid as
//! `Z(t_i) = sum_j w_ij dB_j` where `w_ij` is the *cell average* of
//! `K(t_i, .)` over `[t_j, t_{j+1}]`. Point evaluation would miss the
//! integrable singularity at `s = t` when `H < 1/2`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;

/// Uniform grid `t_i = i T / n`, `i = 0..=n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!("grid horizon must be > 0, got {horizon}")));
        }
        if steps < 2 {
            return Err(Error::invalid(format!("grid needs at least 2 steps, got {steps}")));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |i| self.node(i))
    }

    /// Index of the node equal to `t` (relative tolerance 1e-9 of a step).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let i = x.round();
        if i < 0.0 || i > self.steps as f64 || (x - i).abs() > 1e-9 * x.max(1.0) {
            return None;
        }
        Some(i as usize)
    }
}

/// Tabulated kernel values on a uniform square grid of step `step`.
///
/// Values are stored for `s_b < t_a` only. Between columns the kernel is
/// interpolated linearly in `s`; on the cell touching the diagonal it follows
/// the profile `K(t_a, s_{a-1}) ((t_a - s)/step)^{H - 1/2}` with the declared
/// Hölder index, so the integrable singularity keeps its mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTable {
    step: f64,
    rows: usize,
    hurst: f64,
    values: Vec<f64>,
}

impl KernelTable {
    /// Builds a table from a row-sampler `f(t, s)` on `t_a = a * step`, `a = 0..=rows`.
    pub fn sample(horizon: f64, rows: usize, hurst: f64, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        let step = horizon / rows as f64;
        let mut values = Vec::with_capacity(rows * (rows + 1) / 2);
        for a in 0..=rows {
            for b in 0..a {
                values.push(f(a as f64 * step, b as f64 * step));
            }
        }
        Self::from_parts(step, rows, hurst, values)
    }

    fn from_parts(step: f64, rows: usize, hurst: f64, values: Vec<f64>) -> Result<Self> {
        if !(hurst > 0.0 && hurst < 1.0) {
            return Err(Error::Assumption {
                label: "(K2)",
                message: format!("tabulated kernel Hölder index must lie in (0,1), got {hurst}"),
            });
        }
        if rows < 1 || !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid("tabulated kernel needs a positive step and at least one row"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("tabulated kernel value {v} is not finite")));
        }
        Ok(KernelTable { step, rows, hurst, values })
    }

    /// Reads a `t,s,k` CSV. Rows with `s >= t` must carry `k = 0`.
    pub fn from_csv<R: Read>(reader: R, hurst: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "s", "k"] {
            return Err(Error::invalid(format!("kernel table header must be t,s,k, got {:?}", headers)));
        }
        let mut triples = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |idx: usize| -> Result<f64> {
                rec.get(idx)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::invalid(format!("kernel table line {}: bad field {}", line + 2, idx + 1)))
            };
            triples.push((parse(0)?, parse(1)?, parse(2)?, line + 2));
        }
        let t_max = triples.iter().map(|x| x.0).fold(0.0, f64::max);
        let mut ts: Vec<f64> = triples.iter().map(|x| x.0).collect();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * t_max.max(1.0));
        if ts.len() < 2 || ts[0].abs() > 1e-12 * t_max.max(1.0) {
            return Err(Error::invalid("kernel table rows must start at t = 0 and contain at least two nodes"));
        }
        let rows = ts.len() - 1;
        let step = t_max / rows as f64;
        let to_index = |x: f64, line: usize| -> Result<usize> {
            let i = (x / step).round();
            if (x / step - i).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "kernel table line {line}: {x} is not on the uniform grid of step {step}"
                )));
            }
            Ok(i as usize)
        };
        let mut values = vec![f64::NAN; rows * (rows + 1) / 2];
        for &(t, s, k, line) in &triples {
            let a = to_index(t, line)?;
            let b = to_index(s, line)?;
            if b >= a {
                if k != 0.0 {
                    return Err(Error::Assumption {
                        label: "(K1)",
                        message: format!(
                            "kernel table line {line}: K({t},{s}) = {k} but a Volterra kernel vanishes for s >= t"
                        ),
                    });
                }
                continue;
            }
            values[a * (a - 1) / 2 + b] = k;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("kernel table is missing entries below the diagonal"));
        }
        Self::from_parts(step, rows, hurst, values)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "s", "k"])?;
        for a in 0..=self.rows {
            for b in 0..=self.rows {
                let k = if b < a { self.at(a, b) } else { 0.0 };
                w.write_record(&[
                    format!("{}", a as f64 * self.step),
                    format!("{}", b as f64 * self.step),
                    format!("{k:e}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn horizon(&self) -> f64 {
        self.step * self.rows as f64
    }

    fn at(&self, a: usize, b: usize) -> f64 {
        self.values[a * (a - 1) / 2 + b]
    }

    fn row_index(&self, t: f64) -> Result<usize> {
        let x = t / self.step;
        let a = x.round();
        if (x - a).abs() > 1e-9 * x.max(1.0) || a > self.rows as f64 {
            return Err(Error::invalid(format!(
                "tabulated kernel can only be evaluated on table rows (step {}), got t = {t}",
                self.step
            )));
        }
        Ok(a as usize)
    }

    fn eval_row(&self, a: usize, t: f64, s: f64) -> f64 {
        if s >= t || a == 0 {
            return 0.0;
        }
        let x = s / self.step;
        let b = (x.floor() as usize).min(a - 1);
        if b + 1 == a {
            let q = self.hurst - 0.5;
            self.at(a, a - 1) * ((t - s) / self.step).powf(q)
        } else {
            let frac = x - b as f64;
            self.at(a, b) * (1.0 - frac) + self.at(a, b + 1) * frac
        }
    }

    /// `int_lo^hi K(t_a, u) du` for `0 <= lo <= hi <= t_a`.
    fn integrate_row(&self, a: usize, lo: f64, hi: f64) -> f64 {
        if hi <= lo || a == 0 {
            return 0.0;
        }
        let t = a as f64 * self.step;
        let h = self.step;
        let first = ((lo / h).floor() as usize).min(a - 1);
        let last = (((hi / h).ceil() as usize).max(1) - 1).min(a - 1);
        let mut acc = 0.0;
        for b in first..=last {
            let c0 = (b as f64 * h).max(lo);
            let c1 = ((b + 1) as f64 * h).min(hi);
            if c1 <= c0 {
                continue;
            }
            if b + 1 == a {
                let p = self.hurst + 0.5;
                let v = self.at(a, a - 1);
                acc += v * h / p * (((t - c0) / h).powf(p) - ((t - c1) / h).max(0.0).powf(p));
            } else {
                let lin = |s: f64| {
                    let frac = s / h - b as f64;
                    self.at(a, b) * (1.0 - frac) + self.at(a, b + 1) * frac
                };
                acc += 0.5 * (lin(c0) + lin(c1)) * (c1 - c0);
            }
        }
        acc
    }
}

/// Parametric description of a Volterra kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `sum_k alpha_k (t - s)^{H_k - 1/2} 1_{s < t}`.
    PowerSum {
        alphas: Vec<f64>,
        hursts: Vec<f64>,
    },
    Tabulated(KernelTable),
    /// Identically zero. A degenerate test family that turns the volatility
    /// into a deterministic function; it does not satisfy (K2).
    Zero,
}

impl KernelSpec {
    pub fn power_sum(alphas: Vec<f64>, hursts: Vec<f64>) -> Result<Self> {
        let k = KernelSpec::PowerSum { alphas, hursts };
        k.validate()?;
        Ok(k)
    }

    pub fn single_power(alpha: f64, hurst: f64) -> Result<Self> {
        Self::power_sum(vec![alpha], vec![hurst])
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::PowerSum { alphas, hursts } => {
                if alphas.is_empty() || alphas.len() != hursts.len() {
                    return Err(Error::invalid(format!(
                        "power-sum kernel needs equally many alphas and hursts (>= 1), got {} and {}",
                        alphas.len(),
                        hursts.len()
                    )));
                }
                if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
                    return Err(Error::invalid(format!("kernel coefficient alpha = {a} must be positive")));
                }
                if let Some(h) = hursts.iter().find(|h| !(**h > 0.0 && **h < 1.0)) {
                    return Err(Error::Assumption {
                        label: "(K2)",
                        message: format!("kernel exponent H = {h} must lie in (0, 1)"),
                    });
                }
                if hursts.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::invalid("kernel exponents must be strictly increasing"));
                }
                Ok(())
            }
            KernelSpec::Tabulated(t) => {
                if !(t.hurst > 0.0 && t.hurst < 1.0) {
                    return Err(Error::Assumption {
                        label: "(K2)",
                        message: format!("tabulated kernel H = {} must lie in (0, 1)", t.hurst),
                    });
                }
                Ok(())
            }
            KernelSpec::Zero => Ok(()),
        }
    }

    /// The Hölder index `H` of the kernel: the smallest exponent of a power sum.
    pub fn effective_hurst(&self) -> f64 {
        match self {
            KernelSpec::PowerSum { hursts, .. } => hursts[0],
            KernelSpec::Tabulated(t) => t.hurst,
            KernelSpec::Zero => 0.5,
        }
    }

    /// Kernel depends on `t - s` only.
    pub fn is_stationary(&self) -> bool {
        !matches!(self, KernelSpec::Tabulated(_))
    }

    /// Checks that `grid` nodes are usable with this kernel.
    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if let KernelSpec::Tabulated(t) = self {
            let ratio = grid.dt() / t.step;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio || ratio.round() < 1.0 {
                return Err(Error::invalid(format!(
                    "grid step {} is not a multiple of the kernel table step {}",
                    grid.dt(),
                    t.step
                )));
            }
            if grid.horizon() > t.horizon() * (1.0 + 1e-12) {
                return Err(Error::invalid(format!(
                    "grid horizon {} exceeds the kernel table horizon {}",
                    grid.horizon(),
                    t.horizon()
                )));
            }
        }
        Ok(())
    }

    fn eval_unchecked(&self, t: f64, s: f64) -> Result<f64> {
        if t <= s {
            return Ok(0.0);
        }
        Ok(match self {
            KernelSpec::PowerSum { alphas, hursts } => {
                let d = t - s;
                alphas.iter().zip(hursts).map(|(a, h)| a * d.powf(h - 0.5)).sum()
            }
            KernelSpec::Tabulated(tab) => {
                let a = tab.row_index(t)?;
                tab.eval_row(a, t, s)
            }
            KernelSpec::Zero => 0.0,
        })
    }

    /// `int_lo^hi K(t, u) du` for `lo <= hi <= t`, in closed form.
    pub fn cell_integral(&self, t: f64, lo: f64, hi: f64) -> Result<f64> {
        if !(lo <= hi && hi <= t * (1.0 + 1e-12) + 1e-300) {
            return Err(Error::invalid(format!("cell [{lo}, {hi}] must lie below t = {t}")));
        }
        let hi = hi.min(t);
        Ok(match self {
            KernelSpec::PowerSum { alphas, hursts } => alphas
                .iter()
                .zip(hursts)
                .map(|(a, h)| {
                    let p = h + 0.5;
                    a * ((t - lo).powf(p) - (t - hi).powf(p)) / p
                })
                .sum(),
            KernelSpec::Tabulated(tab) => {
                let a = tab.row_index(t)?;
                tab.integrate_row(a, lo, hi)
            }
            KernelSpec::Zero => 0.0,
        })
    }

    /// `int_0^t K(t, s)^2 ds` in closed form (power sums only).
    pub fn variance_closed_form(&self, t: f64) -> Option<f64> {
        match self {
            KernelSpec::PowerSum { alphas, hursts } => {
                let mut v = 0.0;
                for (ak, hk) in alphas.iter().zip(hursts) {
                    for (al, hl) in alphas.iter().zip(hursts) {
                        v += ak * al * t.powf(hk + hl) / (hk + hl);
                    }
                }
                Some(v)
            }
            KernelSpec::Zero => Some(0.0),
            KernelSpec::Tabulated(_) => None,
        }
    }
}

/// `K(t, s)`; exactly zero for `t <= s`.
pub fn kernel_eval(spec: &KernelSpec, t: f64, s: f64) -> Result<f64> {
    if !(t.is_finite() && s.is_finite()) {
        return Err(Error::invalid(format!("kernel arguments must be finite, got t = {t}, s = {s}")));
    }
    if t < 0.0 || s < 0.0 {
        return Err(Error::invalid(format!("kernel arguments must be non-negative, got t = {t}, s = {s}")));
    }
    spec.eval_unchecked(t, s)
}

/// Cell-averaged weights `w_ij = (1/dt) int_{t_j}^{t_{j+1}} K(t_i, u) du`, `j = 0..i`.
pub fn cell_weights(spec: &KernelSpec, grid: &TimeGrid, i: usize) -> Result<Vec<f64>> {
    if i < 1 || i > grid.steps() {
        return Err(Error::invalid(format!("node index {i} outside 1..={}", grid.steps())));
    }
    spec.check_grid(grid)?;
    let dt = grid.dt();
    let t = grid.node(i);
    (0..i).map(|j| Ok(spec.cell_integral(t, grid.node(j), grid.node(j + 1))? / dt)).collect()
}

/// All convolution weights of a grid, stored by lag for stationary kernels.
#[derive(Clone, Debug)]
pub enum ConvolutionWeights {
    /// `lags[m]` is the weight for `i - j = m` (`lags[0]` unused).
    Toeplitz { lags: Vec<f64> },
    /// `rows[i][j]`, `j < i`.
    Dense { rows: Vec<Vec<f64>> },
}

impl ConvolutionWeights {
    pub fn build(spec: &KernelSpec, grid: &TimeGrid) -> Result<Self> {
        spec.check_grid(grid)?;
        let n = grid.steps();
        let dt = grid.dt();
        if spec.is_stationary() {
            let mut lags = vec![0.0; n + 1];
            for (m, w) in lags.iter_mut().enumerate().skip(1) {
                let tm = m as f64 * dt;
                *w = spec.cell_integral(tm, 0.0, dt)? / dt;
            }
            Ok(ConvolutionWeights::Toeplitz { lags })
        } else {
            let mut rows = vec![Vec::new()];
            for i in 1..=n {
                rows.push(cell_weights(spec, grid, i)?);
            }
            Ok(ConvolutionWeights::Dense { rows })
        }
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if j >= i {
            return 0.0;
        }
        match self {
            ConvolutionWeights::Toeplitz { lags } => lags[i - j],
            ConvolutionWeights::Dense { rows } => rows[i][j],
        }
    }

    /// `Z_i = sum_{j < i} w_ij dB_j` for `i = 0..=n`.
    pub fn convolve(&self, db: &[f64]) -> Vec<f64> {
        let n = db.len();
        let mut z = vec![0.0; n + 1];
        match self {
            ConvolutionWeights::Toeplitz { lags } => {
                for (i, zi) in z.iter_mut().enumerate().skip(1) {
                    *zi = db[..i].iter().zip(lags[1..=i].iter().rev()).map(|(b, w)| b * w).sum();
                }
            }
            ConvolutionWeights::Dense { rows } => {
                for (i, zi) in z.iter_mut().enumerate().skip(1) {
                    *zi = db[..i].iter().zip(&rows[i]).map(|(b, w)| b * w).sum();
                }
            }
        }
        z
    }

    /// Variance of the discretised `Z(t_i)`: `dt sum_j w_ij^2`.
    pub fn variance(&self, i: usize, dt: f64) -> f64 {
        (0..i).map(|j| self.weight(i, j).powi(2)).sum::<f64>() * dt
    }
}

const CERT_GL_POINTS: usize = 24;

/// `int_0^{t2} (K(t2, s) - K(t1, s))^2 ds` for mesh nodes `t1 < t2`, integrated
/// cell by cell on `mesh` with graded rules on the two singular cells.
fn increment_energy(spec: &KernelSpec, gl: &GaussLegendre, mesh: f64, i1: usize, i2: usize) -> Result<f64> {
    let t1 = i1 as f64 * mesh;
    let t2 = i2 as f64 * mesh;
    let grade = 1.0 / spec.effective_hurst();
    let mut acc = 0.0;
    let mut err = None;
    let mut f = |s: f64| match (spec.eval_unchecked(t2, s), spec.eval_unchecked(t1, s)) {
        (Ok(a), Ok(b)) => (a - b).powi(2),
        (Err(e), _) | (_, Err(e)) => {
            err = Some(e);
            0.0
        }
    };
    for c in 0..i2 {
        let lo = c as f64 * mesh;
        let hi = (c + 1) as f64 * mesh;
        acc += if c + 1 == i1 || c + 1 == i2 {
            gl.integrate_graded_right(lo, hi, grade, |d| f(hi - d))
        } else {
            gl.integrate(lo, hi, &mut f)
        };
    }
    match err {
        Some(e) => Err(e),
        None => Ok(acc),
    }
}

/// `sup_{t1 < t2} [int_0^T (K(t2,s) - K(t1,s))^2 ds] / |t2 - t1|^lambda` over grid pairs,
/// with no restriction on `lambda`.
///
/// For stationary kernels the numerator grows with `t1` at fixed `t2 - t1`,
/// so only pairs ending at `T` are visited.
pub fn holder_ratio_sup(spec: &KernelSpec, grid: &TimeGrid, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    spec.check_grid(grid)?;
    let gl = GaussLegendre::new(CERT_GL_POINTS);
    let n = grid.steps();
    let (mesh, sub) = match spec {
        KernelSpec::Tabulated(t) => (t.step, (grid.dt() / t.step).round() as usize),
        _ => (grid.dt(), 1),
    };
    let mut best: f64 = 0.0;
    let ratio = |i1: usize, i2: usize| -> Result<f64> {
        let e = increment_energy(spec, &gl, mesh, i1 * sub, i2 * sub)?;
        Ok(e / (grid.node(i2) - grid.node(i1)).powf(lambda))
    };
    if spec.is_stationary() {
        for i1 in 0..n {
            best = best.max(ratio(i1, n)?);
        }
    } else {
        for i2 in 1..=n {
            for i1 in 0..i2 {
                best = best.max(ratio(i1, i2)?);
            }
        }
    }
    Ok(best)
}

/// Empirical Hölder constant of (K2) for `0 < lambda < H`.
pub fn holder_certificate(spec: &KernelSpec, grid: &TimeGrid, lambda: f64) -> Result<f64> {
    let h = spec.effective_hurst();
    if !(lambda > 0.0 && lambda < h) {
        return Err(Error::invalid(format!("certificate requires 0 < lambda < H = {h}, got lambda = {lambda}")));
    }
    holder_ratio_sup(spec, grid, lambda)
}

/// Smallest number of table rows a maturity must span in the tabulated limit.
const LIMIT_MIN_ROWS: usize = 8;

/// `K_Y = lim_{tau -> 0} tau^{-3/2 - H} int_0^tau int_s^tau K(t, s) dt ds`.
pub fn limit_constant(spec: &KernelSpec) -> Result<f64> {
    match spec {
        KernelSpec::PowerSum { alphas, hursts } => {
            let h = hursts[0];
            Ok(alphas[0] / ((h + 0.5) * (h + 1.5)))
        }
        KernelSpec::Zero => Ok(0.0),
        KernelSpec::Tabulated(tab) => tabulated_limit(tab),
    }
}

/// `tau^{-3/2-H} int_0^tau G(t) dt` with `G(t_a) = int_0^{t_a} K(t_a, s) ds`.
fn normalized_double_integral(tab: &KernelTable, rows: usize) -> f64 {
    let h = tab.step;
    let g: Vec<f64> = (0..=rows).map(|a| tab.integrate_row(a, 0.0, a as f64 * h)).collect();
    let p = tab.hurst + 0.5;
    // G(t) ~ G(h) (t/h)^{H+1/2} on the first cell, trapezoid afterwards
    let mut acc = g[1] * h / (p + 1.0);
    for a in 1..rows {
        acc += 0.5 * (g[a] + g[a + 1]) * h;
    }
    let tau = rows as f64 * h;
    acc / tau.powf(tab.hurst + 1.5)
}

fn tabulated_limit(tab: &KernelTable) -> Result<f64> {
    let mut seq = Vec::new();
    for m in 4..=12 {
        let rows_f = tab.rows as f64 / 2f64.powi(m);
        if rows_f < LIMIT_MIN_ROWS as f64 || rows_f.fract() != 0.0 {
            continue;
        }
        seq.push(normalized_double_integral(tab, rows_f as usize));
    }
    if seq.len() < 4 {
        return Err(Error::NonConvergence(format!(
            "only {} dyadic maturities span at least {LIMIT_MIN_ROWS} table rows; need 4",
            seq.len()
        )));
    }
    // Aitken delta-squared on consecutive triples
    let extrapolated: Vec<f64> = seq
        .windows(3)
        .map(|w| {
            let denom = w[2] - 2.0 * w[1] + w[0];
            if denom.abs() <= 1e-14 * w[2].abs() {
                w[2]
            } else {
                w[2] - (w[2] - w[1]).powi(2) / denom
            }
        })
        .collect();
    let k = extrapolated.len();
    let (prev, last) = (extrapolated[k - 2], extrapolated[k - 1]);
    if (last - prev).abs() > 0.01 * last.abs() {
        return Err(Error::NonConvergence(format!("successive extrapolates {prev} and {last} differ by more than 1%")));
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(t: f64, n: usize) -> TimeGrid {
        TimeGrid::new(t, n).unwrap()
    }

    #[test]
    fn constant_kernel_values() {
        let k = KernelSpec::single_power(1.0, 0.5).unwrap();
        assert_eq!(kernel_eval(&k, 0.7, 0.3).unwrap(), 1.0);
        assert_eq!(kernel_eval(&k, 0.5, 0.5).unwrap(), 0.0);
        assert_eq!(kernel_eval(&k, 0.2, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn rough_kernel_value() {
        let k = KernelSpec::single_power(1.0, 0.1).unwrap();
        // 0.25^{-0.4} = 2^{0.8}
        let v = kernel_eval(&k, 1.0, 0.75).unwrap();
        assert!((v - 1.741_101_126_592_248).abs() < 1e-12, "{v}");
    }

    #[test]
    fn non_finite_arguments_rejected() {
        let k = KernelSpec::single_power(1.0, 0.3).unwrap();
        assert!(matches!(kernel_eval(&k, f64::NAN, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(kernel_eval(&k, 1.0, f64::INFINITY), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::power_sum(vec![1.0], vec![]).is_err());
        assert!(KernelSpec::power_sum(vec![1.0, 1.0], vec![0.3, 0.2]).is_err());
        assert!(KernelSpec::power_sum(vec![-1.0], vec![0.3]).is_err());
        assert!(matches!(KernelSpec::power_sum(vec![1.0], vec![1.2]), Err(Error::Assumption { label: "(K2)", .. })));
        let k = KernelSpec::power_sum(vec![1.0, 2.0], vec![0.2, 0.4]).unwrap();
        assert_eq!(k.effective_hurst(), 0.2);
    }

    #[test]
    fn volterra_property_on_grid() {
        let k = KernelSpec::power_sum(vec![0.7, 1.3], vec![0.15, 0.6]).unwrap();
        let g = grid(1.0, 32);
        for i in 0..=32 {
            for j in i..=32 {
                assert_eq!(kernel_eval(&k, g.node(i), g.node(j)).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn constant_kernel_weights_are_one() {
        let k = KernelSpec::single_power(1.0, 0.5).unwrap();
        let g = grid(2.0, 10);
        for i in 1..=10 {
            let w = cell_weights(&k, &g, i).unwrap();
            assert_eq!(w.len(), i);
            for x in w {
                assert!((x - 1.0).abs() < 1e-14);
            }
        }
        assert!(cell_weights(&k, &g, 0).is_err());
        assert!(cell_weights(&k, &g, 11).is_err());
    }

    #[test]
    fn weights_by_lag_match_direct() {
        let k = KernelSpec::power_sum(vec![0.5, 1.0], vec![0.2, 0.45]).unwrap();
        let g = grid(1.0, 40);
        let cw = ConvolutionWeights::build(&k, &g).unwrap();
        for i in [1usize, 7, 40] {
            let w = cell_weights(&k, &g, i).unwrap();
            for (j, x) in w.iter().enumerate() {
                assert!((cw.weight(i, j) - x).abs() <= 1e-12 * x.abs());
            }
        }
    }

    #[test]
    fn certificate_constant_kernel_bounded_by_horizon() {
        let k = KernelSpec::single_power(1.0, 0.5).unwrap();
        let g = grid(1.0, 64);
        let c = holder_certificate(&k, &g, 0.49).unwrap();
        assert!(c <= 1.0 + 1e-9, "{c}");
        assert!(c > 0.9);
    }

    #[test]
    fn certificate_gate() {
        let k = KernelSpec::single_power(1.0, 0.3).unwrap();
        let g = grid(1.0, 16);
        assert!(holder_certificate(&k, &g, 0.3).is_err());
        assert!(holder_certificate(&k, &g, 0.0).is_err());
        assert!(holder_ratio_sup(&k, &g, 0.45).is_ok());
    }

    #[test]
    fn limit_constant_closed_forms() {
        let k = KernelSpec::single_power(1.0, 0.1).unwrap();
        assert!((limit_constant(&k).unwrap() - 1.0 / 0.96).abs() < 1e-15);
        let k = KernelSpec::single_power(1.0, 0.5).unwrap();
        assert_eq!(limit_constant(&k).unwrap(), 0.5);
        let k = KernelSpec::power_sum(vec![1.0, 1.0], vec![0.1, 0.4]).unwrap();
        assert!((limit_constant(&k).unwrap() - 1.041_666_666_666_666_7).abs() < 1e-12);
    }

    fn table_from_power(alpha: f64, h: f64, rows: usize) -> KernelTable {
        let k = KernelSpec::single_power(alpha, h).unwrap();
        KernelTable::sample(1.0, rows, h, |t, s| kernel_eval(&k, t, s).unwrap()).unwrap()
    }

    #[test]
    fn tabulated_last_cell_matches_power_profile() {
        let tab = table_from_power(1.0, 0.3, 64);
        let k = KernelSpec::Tabulated(tab);
        let p = KernelSpec::single_power(1.0, 0.3).unwrap();
        let t = 0.5;
        let h = 1.0 / 64.0;
        for s in [t - 0.3 * h, t - 0.9 * h] {
            let a = kernel_eval(&k, t, s).unwrap();
            let b = kernel_eval(&p, t, s).unwrap();
            assert!((a - b).abs() < 1e-12 * b);
        }
        // last-cell integral is exact; interior cells are trapezoids
        let a = k.cell_integral(t, t - h, t).unwrap();
        let b = p.cell_integral(t, t - h, t).unwrap();
        assert!((a - b).abs() < 1e-12 * b);
        assert!(kernel_eval(&k, 0.5 + 0.3 * h, 0.1).is_err());
    }

    #[test]
    fn tabulated_csv_round_trip() {
        let tab = table_from_power(0.8, 0.25, 8);
        let mut buf = Vec::new();
        tab.write_csv(&mut buf).unwrap();
        let back = KernelTable::from_csv(buf.as_slice(), 0.25).unwrap();
        assert_eq!(back.rows(), 8);
        for a in 1..=8 {
            for b in 0..a {
                assert!((back.at(a, b) - tab.at(a, b)).abs() <= 1e-14 * tab.at(a, b).abs());
            }
        }
    }

    #[test]
    fn tabulated_csv_rejects_upper_triangle() {
        let csv = "t,s,k\n0,0,0\n0.5,0,1\n0.5,0.5,0\n1,0,1\n1,0.5,1\n1,1,3\n";
        assert!(matches!(KernelTable::from_csv(csv.as_bytes(), 0.3), Err(Error::Assumption { label: "(K1)", .. })));
        let csv = "t,s,value\n";
        assert!(KernelTable::from_csv(csv.as_bytes(), 0.3).is_err());
    }

    #[test]
    fn tabulated_limit_matches_closed_form() {
        let tab = table_from_power(1.0, 0.3, 1024);
        let got = limit_constant(&KernelSpec::Tabulated(tab)).unwrap();
        let want = 1.0 / (0.8 * 1.8);
        assert!((got - want).abs() < 0.01 * want, "{got} vs {want}");
    }

    #[test]
    fn tabulated_limit_needs_resolution() {
        let tab = table_from_power(1.0, 0.3, 64);
        assert!(matches!(limit_constant(&KernelSpec::Tabulated(tab)), Err(Error::NonConvergence(_))));
    }

    #[test]
    fn grid_index_lookup() {
        let g = grid(1.0, 8);
        assert_eq!(g.index_of(0.25), Some(2));
        assert_eq!(g.index_of(1.0), Some(8));
        assert_eq!(g.index_of(0.3), None);
        assert_eq!(g.index_of(1.5), None);
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
    }
}
