//! Closed-form Malliavin derivatives of the volatility along simulated paths.
//!
//! First order:
//! `D_s Y(t) = K(t,s) + int_s^t K(u,s) F1(t,u) du`, with
//! `F1(t,u) = b'_y(u,Y(u)) exp(int_u^t b'_y(v,Y(v)) dv)`.
//!
//! Second order:
//! `D_r D_s Y(t) = int_s^t K(u,s) F1(t,u) (int_u^t b''_yy(v,Y(v)) D_r Y(v) dv) du
//!               + int_s^t K(u,s) F2(t,u) D_r Y(u) du`,
//! `F2(t,u) = b''_yy(u,Y(u)) exp(int_u^t b'_y(v,Y(v)) dv)`.
//!
//! Both are discretised with the quadrature induced by the drift-implicit
//! path scheme. `K(u, s_j)` is the cell-averaged weight `w_kj`, the `u`-sum runs
//! over nodes `t_k` with `s_j < t_k <= t_i`, and the exponential factor is the
//! implicit one, `exp(int_{t_k}^{t_i} b'_y dv) ~ prod_{m=k}^{i} 1/(1 - dt b'_m)`,
//! accumulated as a sum of logarithms. The inner integral of the second-order
//! formula uses the matching weights `dt/(1 - dt b'_m)`. With this rule the
//! discrete fields are the exact derivatives of the discrete path map, and
//! they converge to the continuous formulas as `dt |b'_y| -> 0`.
//!
//! `D_{s_j} Y(t_i)` is the average of `D_u Y(t_i)` over cell `j`, which is
//! what a bump of the increment `dB1_j` measures.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SandwichModel;
use crate::sandwich::{second_drift_derivative, simulate_from_increments, PathBundle};

/// Lower-triangular field `d1[i][j] = D_{s_j} Y(t_i)`, `0 <= j < i <= n`.
#[derive(Clone, Debug, PartialEq)]
pub struct MalliavinField {
    steps: usize,
    dt: f64,
    path_index: u64,
    values: Vec<f64>,
}

#[inline]
fn offset(i: usize) -> usize {
    i * (i - 1) / 2
}

impl MalliavinField {
    fn zeros(steps: usize, dt: f64, path_index: u64) -> Self {
        MalliavinField { steps, dt, path_index, values: vec![0.0; steps * (steps + 1) / 2] }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    /// `D_{s_j} Y(t_i)`; panics unless `j < i <= n`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(j < i && i <= self.steps, "field index ({i}, {j}) outside the lower triangle");
        self.values[offset(i) + j]
    }

    /// `D_{s_j} Y(t_i)` for all `j < i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[offset(i)..offset(i) + i]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[offset(i) + j] = v;
    }

    /// `D_r Y(t_m)`, zero when `m <= r`.
    #[inline]
    fn causal(&self, m: usize, r: usize) -> f64 {
        if m > r {
            self.values[offset(m) + r]
        } else {
            0.0
        }
    }
}

fn check_path(path: &PathBundle, model: &SandwichModel) -> Result<usize> {
    let n = model.grid().steps();
    if path.y.len() != n + 1 || path.bprime.len() != n + 1 {
        return Err(Error::invalid(format!("path has {} nodes but the model grid has {}", path.y.len(), n + 1)));
    }
    Ok(n)
}

/// `1/(1 - dt b'_m)` along the path.
fn implicit_factors(path: &PathBundle, dt: f64) -> Vec<f64> {
    path.bprime.iter().map(|b| 1.0 / (1.0 - dt * b)).collect()
}

/// First-order field in `O(n^2)`. For a fixed cell `j` the correction
/// `A_i = sum_{k=j+1}^{i} w_kj b'_k dt prod_{m=k}^{i} g_m` obeys
/// `A_i = g_i (A_{i-1} + w_ij b'_i dt)`, and `d1[i][j] = w_ij + A_i`.
pub fn first_field(path: &PathBundle, model: &SandwichModel) -> Result<MalliavinField> {
    let n = check_path(path, model)?;
    let dt = model.grid().dt();
    let w = model.weights();
    let g = implicit_factors(path, dt);
    let mut field = MalliavinField::zeros(n, dt, path.path_index);
    for j in 0..n {
        let mut acc = 0.0;
        for i in j + 1..=n {
            let wij = w.weight(i, j);
            acc = g[i] * (acc + wij * path.bprime[i] * dt);
            field.set(i, j, wij + acc);
        }
    }
    Ok(field)
}

/// One entry `D_{s_r} D_{s_s} Y(t_t)` of the second-order derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SecondDerivativeEntry {
    pub r_index: usize,
    pub s_index: usize,
    pub t_index: usize,
    pub value: f64,
}

/// Second-order entries at the requested `(r, s, t)` cell/node triples,
/// `O(t - s)` each.
pub fn second_entries(
    path: &PathBundle,
    model: &SandwichModel,
    field: &MalliavinField,
    triples: &[(usize, usize, usize)],
) -> Result<Vec<SecondDerivativeEntry>> {
    let n = check_path(path, model)?;
    if field.steps != n {
        return Err(Error::invalid("field and model grids differ"));
    }
    let dt = model.grid().dt();
    let w = model.weights();
    let bpp = second_drift_derivative(model, path);
    let bp = &path.bprime;
    let g = implicit_factors(path, dt);
    triples
        .iter()
        .map(|&(r, s, t)| {
            if !(r < t && s < t && t <= n) {
                return Err(Error::invalid(format!("triple (r={r}, s={s}, t={t}) needs r < t, s < t <= {n}")));
            }
            // backward sweep over u-nodes k = t, t-1, ..., s+1
            let mut inner = 0.0; // sum_{m=k}^{t} b''_m D_r Y(t_m) dt g_m
            let mut log_growth = 0.0; // sum_{m=k}^{t} ln g_m
            let mut value = 0.0;
            for k in (s + 1..=t).rev() {
                let dr = field.causal(k, r);
                inner += bpp[k] * dr * dt * g[k];
                log_growth += g[k].ln();
                let f1_term = bp[k] * inner;
                let f2_term = bpp[k] * dr;
                value += w.weight(k, s) * dt * log_growth.exp() * (f2_term + f1_term);
            }
            Ok(SecondDerivativeEntry { r_index: r, s_index: s, t_index: t, value })
        })
        .collect()
}

pub const BUMP_EPS_MIN: f64 = 1e-7;
pub const BUMP_EPS_MAX: f64 = 1e-2;

fn check_eps(eps: f64) -> Result<()> {
    if !(BUMP_EPS_MIN..=BUMP_EPS_MAX).contains(&eps) {
        return Err(Error::invalid(format!(
            "bump size {eps} outside the validated window [{BUMP_EPS_MIN}, {BUMP_EPS_MAX}]"
        )));
    }
    Ok(())
}

fn bumped_y(model: &SandwichModel, path: &PathBundle, shifts: &[(usize, f64)], t_index: usize) -> Result<f64> {
    let mut db1 = path.db1.clone();
    for &(cell, eps) in shifts {
        db1[cell] += eps;
    }
    let p = simulate_from_increments(model, db1, path.db2.clone(), path.seed, path.path_index)?;
    Ok(p.y[t_index])
}

/// Finite-difference estimate of `D_{s_j} Y(t_i)` on an already simulated path:
/// `(Y^eps(t_i) - Y(t_i)) / eps` with `dB1_j` shifted by `eps`.
pub fn bump_first_on(model: &SandwichModel, path: &PathBundle, j: usize, t_index: usize, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let n = check_path(path, model)?;
    if !(j < t_index && t_index <= n) {
        return Err(Error::invalid(format!("bump cell {j} must precede node {t_index} <= {n}")));
    }
    Ok((bumped_y(model, path, &[(j, eps)], t_index)? - path.y[t_index]) / eps)
}

/// [`bump_first_on`] for the path keyed by `(seed, path_index)`.
pub fn bump_first(
    model: &SandwichModel,
    seed: u64,
    path_index: u64,
    j: usize,
    t_index: usize,
    eps: f64,
) -> Result<f64> {
    check_eps(eps)?;
    let path = crate::sandwich::simulate_path(model, seed, path_index)?;
    bump_first_on(model, &path, j, t_index, eps)
}

/// Mixed second difference in cells `r` and `s`.
pub fn bump_second_on(
    model: &SandwichModel,
    path: &PathBundle,
    r: usize,
    s: usize,
    t_index: usize,
    eps: f64,
) -> Result<f64> {
    check_eps(eps)?;
    let n = check_path(path, model)?;
    if !(r < t_index && s < t_index && t_index <= n) {
        return Err(Error::invalid(format!("bump cells ({r}, {s}) must precede node {t_index} <= {n}")));
    }
    let both = bumped_y(model, path, &[(r, eps), (s, eps)], t_index)?;
    let only_r = bumped_y(model, path, &[(r, eps)], t_index)?;
    let only_s = bumped_y(model, path, &[(s, eps)], t_index)?;
    Ok((both - only_r - only_s + path.y[t_index]) / (eps * eps))
}

/// Normalised second moments of the derivative fields.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplosionStats {
    pub steps: usize,
    pub paths: usize,
    pub hurst: f64,
    /// Packed lower triangle of `mean (D_{s_j} Y(t_i))^2 (t_i - s_j)^{1-2H}`.
    first: Vec<f64>,
    /// `mean (D_r D_s Y(t))^2 ((t-s)/(t-r))^{1-2H}` per stored triple.
    pub second: Vec<SecondDerivativeEntry>,
}

impl ExplosionStats {
    pub fn first(&self, i: usize, j: usize) -> f64 {
        assert!(j < i && i <= self.steps);
        self.first[offset(i) + j]
    }

    pub fn max_first(&self) -> f64 {
        self.first.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_second(&self) -> f64 {
        self.second.iter().map(|e| e.value).fold(0.0, f64::max)
    }
}

/// Streaming accumulator for [`ExplosionStats`]. Fields must be added in a
/// fixed order (path index) for bitwise reproducible sums.
#[derive(Clone, Debug)]
pub struct ExplosionAccumulator {
    steps: usize,
    dt: f64,
    hurst: f64,
    paths: usize,
    first: Vec<f64>,
    second: Vec<SecondDerivativeEntry>,
    second_count: usize,
    lag_weights: Vec<f64>,
}

impl ExplosionAccumulator {
    pub fn new(steps: usize, dt: f64, hurst: f64) -> Self {
        ExplosionAccumulator {
            steps,
            dt,
            hurst,
            paths: 0,
            first: vec![0.0; steps * (steps + 1) / 2],
            second: Vec::new(),
            second_count: 0,
            lag_weights: Vec::new(),
        }
    }

    pub fn add_field(&mut self, field: &MalliavinField) -> Result<()> {
        if field.steps != self.steps || (field.dt - self.dt).abs() > 1e-15 * self.dt {
            return Err(Error::invalid(format!(
                "field on grid ({}, {}) does not match ({}, {})",
                field.steps, field.dt, self.steps, self.dt
            )));
        }
        let expo = 1.0 - 2.0 * self.hurst;
        if self.lag_weights.is_empty() {
            self.lag_weights = (0..=self.steps).map(|l| (l as f64 * self.dt).powf(expo)).collect();
        }
        for i in 1..=self.steps {
            let row = &mut self.first[offset(i)..offset(i) + i];
            for (j, acc) in row.iter_mut().enumerate() {
                let d = field.values[offset(i) + j];
                *acc += d * d * self.lag_weights[i - j];
            }
        }
        self.paths += 1;
        Ok(())
    }

    /// Adds one path's second-order entries; every path must use the same triples.
    pub fn add_second(&mut self, entries: &[SecondDerivativeEntry]) -> Result<()> {
        if self.second_count == 0 {
            self.second = entries.iter().map(|e| SecondDerivativeEntry { value: 0.0, ..*e }).collect();
        } else if entries.len() != self.second.len()
            || entries
                .iter()
                .zip(&self.second)
                .any(|(a, b)| (a.r_index, a.s_index, a.t_index) != (b.r_index, b.s_index, b.t_index))
        {
            return Err(Error::invalid("second-order entries differ between paths"));
        }
        let expo = 1.0 - 2.0 * self.hurst;
        for (acc, e) in self.second.iter_mut().zip(entries) {
            let t = e.t_index as f64;
            let ratio = (t - e.s_index as f64) / (t - e.r_index as f64);
            acc.value += e.value * e.value * ratio.powf(expo);
        }
        self.second_count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<ExplosionStats> {
        if self.paths == 0 {
            return Err(Error::invalid("no fields accumulated"));
        }
        let np = self.paths as f64;
        let ns = self.second_count.max(1) as f64;
        Ok(ExplosionStats {
            steps: self.steps,
            paths: self.paths,
            hurst: self.hurst,
            first: self.first.into_iter().map(|v| v / np).collect(),
            second: self.second.into_iter().map(|e| SecondDerivativeEntry { value: e.value / ns, ..e }).collect(),
        })
    }
}

/// Normalised second moments over a collection of fields (and optionally
/// their second-order entries, one list per field).
pub fn explosion_stats(
    fields: &[MalliavinField],
    seconds: &[Vec<SecondDerivativeEntry>],
    hurst: f64,
) -> Result<ExplosionStats> {
    let first = fields.first().ok_or_else(|| Error::invalid("no fields"))?;
    let mut acc = ExplosionAccumulator::new(first.steps, first.dt, hurst);
    for f in fields {
        acc.add_field(f)?;
    }
    for s in seconds {
        acc.add_second(s)?;
    }
    acc.finish()
}

/// Writes `path,i,j,d1` rows.
pub fn write_field_csv<W: Write>(writer: W, fields: &[MalliavinField]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["path", "i", "j", "d1"])?;
    for f in fields {
        for i in 1..=f.steps {
            for (j, v) in f.row(i).iter().enumerate() {
                w.write_record(&[f.path_index.to_string(), i.to_string(), j.to_string(), format!("{v:e}")])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `path,r,s,t,d2` rows.
pub fn write_second_csv<W: Write>(writer: W, entries: &[(u64, Vec<SecondDerivativeEntry>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["path", "r", "s", "t", "d2"])?;
    for (path, list) in entries {
        for e in list {
            w.write_record(&[
                path.to_string(),
                e.r_index.to_string(),
                e.s_index.to_string(),
                e.t_index.to_string(),
                format!("{:e}", e.value),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `i,j,m` rows of the first-order statistic.
pub fn write_stats_csv<W: Write>(writer: W, stats: &ExplosionStats) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["i", "j", "m"])?;
    for i in 1..=stats.steps {
        for j in 0..i {
            w.write_record(&[i.to_string(), j.to_string(), format!("{:e}", stats.first(i, j))])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Seed domain of the sampled bump positions.
pub const BUMP_DOMAIN: u64 = 0x6275_6d70;

/// One formula/bump comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BumpSample {
    pub path_index: u64,
    pub r_index: Option<usize>,
    pub s_index: usize,
    pub t_index: usize,
    pub formula: f64,
    pub bump: f64,
}

impl BumpSample {
    /// `|bump - formula| / (|formula| + 1e-8)`.
    pub fn relative_deviation(&self) -> f64 {
        (self.bump - self.formula).abs() / (self.formula.abs() + 1e-8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BumpReport {
    pub samples: Vec<BumpSample>,
    pub median_relative: f64,
    pub max_absolute: f64,
    /// Largest `|D_r D_s - D_s D_r| / max(|D_r D_s|, |D_s D_r|)`; second order only.
    pub max_asymmetry: Option<f64>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn report(samples: Vec<BumpSample>, max_asymmetry: Option<f64>) -> BumpReport {
    let median_relative = median(samples.iter().map(BumpSample::relative_deviation).collect());
    let max_absolute = samples.iter().map(|s| (s.bump - s.formula).abs()).fold(0.0, f64::max);
    BumpReport { samples, median_relative, max_absolute, max_asymmetry }
}

/// Uniform integer in `lo..=hi`.
fn uniform(rng: &mut rand_chacha::ChaCha8Rng, lo: usize, hi: usize) -> usize {
    use rand_chacha::rand_core::RngCore;
    lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize
}

fn position_rng(seed: u64, kind: u64) -> rand_chacha::ChaCha8Rng {
    use rand_chacha::rand_core::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(seed, BUMP_DOMAIN, kind))
}

fn check_lag(n: usize, min_lag: usize) -> Result<()> {
    if min_lag == 0 || min_lag + 1 > n {
        return Err(Error::invalid(format!("minimum lag {min_lag} does not fit a grid of {n} steps")));
    }
    Ok(())
}

/// Compares [`first_field`] with single bumps at `count` random pairs with
/// `t - s >= min_lag` cells. Sample `k` uses path `k`.
pub fn first_bump_check(
    model: &SandwichModel,
    seed: u64,
    count: usize,
    eps: f64,
    min_lag: usize,
) -> Result<BumpReport> {
    check_eps(eps)?;
    let n = model.grid().steps();
    check_lag(n, min_lag)?;
    let mut rng = position_rng(seed, 1);
    let positions: Vec<(usize, usize)> = (0..count)
        .map(|_| {
            let t = uniform(&mut rng, min_lag, n);
            (uniform(&mut rng, 0, t - min_lag), t)
        })
        .collect();
    let samples = positions
        .par_iter()
        .enumerate()
        .map(|(k, &(s, t))| {
            let path = crate::sandwich::simulate_path(model, seed, k as u64)?;
            let field = first_field(&path, model)?;
            let bump = bump_first_on(model, &path, s, t, eps)?;
            Ok(BumpSample {
                path_index: k as u64,
                r_index: None,
                s_index: s,
                t_index: t,
                formula: field.get(t, s),
                bump,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(samples, None))
}

/// Compares [`second_entries`] with mixed double bumps at `count` random
/// triples with distinct `r, s` and `t - max(r, s) >= min_lag`, and checks the
/// `(r, s)` symmetry of the formula. Sample `k` uses path `k`.
pub fn second_bump_check(
    model: &SandwichModel,
    seed: u64,
    count: usize,
    eps: f64,
    min_lag: usize,
) -> Result<BumpReport> {
    check_eps(eps)?;
    let n = model.grid().steps();
    check_lag(n, min_lag)?;
    if min_lag + 2 > n {
        return Err(Error::invalid("grid too short for distinct bump cells"));
    }
    let mut rng = position_rng(seed, 2);
    let triples: Vec<(usize, usize, usize)> = (0..count)
        .map(|_| {
            let t = uniform(&mut rng, min_lag + 1, n);
            let r = uniform(&mut rng, 0, t - min_lag);
            let mut s = uniform(&mut rng, 0, t - min_lag - 1);
            if s >= r {
                s += 1;
            }
            (r, s, t)
        })
        .collect();
    let rows = triples
        .par_iter()
        .enumerate()
        .map(|(k, &(r, s, t))| {
            let path = crate::sandwich::simulate_path(model, seed, k as u64)?;
            let field = first_field(&path, model)?;
            let e = second_entries(&path, model, &field, &[(r, s, t), (s, r, t)])?;
            let bump = bump_second_on(model, &path, r, s, t, eps)?;
            let (a, b) = (e[0].value, e[1].value);
            let scale = a.abs().max(b.abs());
            let asym = if scale > 0.0 { (a - b).abs() / scale } else { 0.0 };
            Ok((BumpSample { path_index: k as u64, r_index: Some(r), s_index: s, t_index: t, formula: a, bump }, asym))
        })
        .collect::<Result<Vec<_>>>()?;
    let asym = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(report(rows.into_iter().map(|r| r.0).collect(), Some(asym)))
}

/// Writes `path,r,s,t,formula,bump,rel_dev` rows.
pub fn write_bump_csv<W: Write>(writer: W, report: &BumpReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["path", "r", "s", "t", "formula", "bump", "rel_dev"])?;
    for b in &report.samples {
        w.write_record(&[
            b.path_index.to_string(),
            b.r_index.map(|r| r.to_string()).unwrap_or_default(),
            b.s_index.to_string(),
            b.t_index.to_string(),
            format!("{:e}", b.formula),
            format!("{:e}", b.bump),
            format!("{:e}", b.relative_deviation()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Normalised first-order statistic over paths `0..paths`, accumulated in
/// path order in batches so that memory stays bounded.
pub fn explosion_first(model: &SandwichModel, seed: u64, paths: usize) -> Result<ExplosionStats> {
    let grid = model.grid();
    let mut acc = ExplosionAccumulator::new(grid.steps(), grid.dt(), model.kernel().effective_hurst());
    let batch = 64usize;
    let mut start = 0usize;
    while start < paths {
        let end = (start + batch).min(paths);
        let fields = (start as u64..end as u64)
            .into_par_iter()
            .map(|k| first_field(&crate::sandwich::simulate_path(model, seed, k)?, model))
            .collect::<Result<Vec<_>>>()?;
        for f in &fields {
            acc.add_field(f)?;
        }
        start = end;
    }
    acc.finish()
}
