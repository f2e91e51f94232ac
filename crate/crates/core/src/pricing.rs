//! Log-price simulation, Monte Carlo call prices, Black-Scholes inversion and
//! the at-the-money skew.
//!
//! All strikes of one experiment are priced from a single [`LogPriceSample`],
//! so that differences between strikes see the same noise. With antithetic
//! sampling each path `k` is paired with the path driven by `(-dB1, -dB2)` and
//! the pair average is the Monte Carlo unit.

use std::f64::consts::SQRT_2;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::model::SandwichModel;
use crate::sandwich::{simulate_from_increments, simulate_path, PathBundle};

/// Bracket of the implied-volatility search.
pub const VOL_MIN: f64 = 1e-6;
pub const VOL_MAX: f64 = 5.0;
/// Absolute tolerance of [`implied_vol`] in volatility units.
pub const VOL_TOL: f64 = 1e-10;
pub const MIN_PATHS: usize = 1_000;
pub const MIN_SKEW_PATHS: usize = 10_000;
/// Finite-difference half-width of the skew is `DKAPPA_SCALE * sqrt(tau)`.
pub const DKAPPA_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PriceEstimate {
    pub strike: f64,
    pub tau: f64,
    pub price: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SkewPoint {
    pub tau: f64,
    /// `d sigma_hat / d kappa` at `kappa = 0`.
    pub atm_skew: f64,
    pub stderr: f64,
    pub dkappa: f64,
}

/// Sum by recursive halving, so the result does not depend on thread count.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn check_bs_inputs(s0: f64, k: f64, r: f64, tau: f64) -> Result<()> {
    if !(s0 > 0.0 && k > 0.0 && tau > 0.0 && r.is_finite() && s0.is_finite() && k.is_finite() && tau.is_finite()) {
        return Err(Error::invalid(format!(
            "Black-Scholes needs S0, K, tau > 0 and finite r (S0 = {s0}, K = {k}, tau = {tau}, r = {r})"
        )));
    }
    Ok(())
}

/// Black-Scholes call price.
pub fn bs_call(s0: f64, k: f64, r: f64, tau: f64, sigma: f64) -> Result<f64> {
    check_bs_inputs(s0, k, r, tau)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma = {sigma} must be finite and non-negative")));
    }
    let df = (-r * tau).exp();
    if sigma == 0.0 {
        return Ok((s0 - k * df).max(0.0));
    }
    let sd = sigma * tau.sqrt();
    let d1 = ((s0 / k).ln() + r * tau) / sd + 0.5 * sd;
    let d2 = d1 - sd;
    Ok(s0 * norm_cdf(d1) - k * df * norm_cdf(d2))
}

/// `d C / d sigma`.
pub fn bs_vega(s0: f64, k: f64, r: f64, tau: f64, sigma: f64) -> Result<f64> {
    check_bs_inputs(s0, k, r, tau)?;
    if !(sigma > 0.0) {
        return Ok(0.0);
    }
    let sd = sigma * tau.sqrt();
    let d1 = ((s0 / k).ln() + r * tau) / sd + 0.5 * sd;
    Ok(s0 * norm_pdf(d1) * tau.sqrt())
}

/// Black-Scholes implied volatility of a call price: bisection on
/// `[VOL_MIN, VOL_MAX]` followed by a Newton polish.
///
/// Prices on or outside the open no-arbitrage band `(max(S0 - K e^{-r tau}, 0), S0)`
/// have no solution and are reported, not clamped.
pub fn implied_vol(price: f64, s0: f64, k: f64, r: f64, tau: f64) -> Result<f64> {
    check_bs_inputs(s0, k, r, tau)?;
    let lower = (s0 - k * (-r * tau).exp()).max(0.0);
    if !(price > lower && price < s0) {
        return Err(Error::NoSolution(format!(
            "price {price} outside the open band ({lower}, {s0}) for K = {k}, tau = {tau}"
        )));
    }
    let f = |s: f64| bs_call(s0, k, r, tau, s).map(|c| c - price);
    let (mut lo, mut hi) = (VOL_MIN, VOL_MAX);
    let (f_lo, f_hi) = (f(lo)?, f(hi)?);
    if f_lo > 0.0 || f_hi < 0.0 {
        return Err(Error::NoSolution(format!(
            "price {price} implies a volatility outside [{VOL_MIN}, {VOL_MAX}] for K = {k}, tau = {tau}"
        )));
    }
    while hi - lo > 0.25 * VOL_TOL {
        let mid = 0.5 * (lo + hi);
        if f(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut sigma = 0.5 * (lo + hi);
    // the bracket is already below tolerance; Newton only removes the bisection bias
    for _ in 0..2 {
        let vega = bs_vega(s0, k, r, tau, sigma)?;
        if vega <= 0.0 {
            break;
        }
        let next = sigma - f(sigma)? / vega;
        if !(next > lo - VOL_TOL && next < hi + VOL_TOL) {
            break;
        }
        sigma = next;
    }
    Ok(sigma)
}

fn check_maturity(model: &SandwichModel, tau: f64) -> Result<usize> {
    model
        .grid()
        .index_of(tau)
        .filter(|&m| m > 0)
        .ok_or_else(|| Error::invalid(format!("maturity {tau} is not a positive node of the model grid")))
}

/// Left-point log-price at node `m` along an already simulated path.
fn log_price_on(model: &SandwichModel, path: &PathBundle, m: usize) -> f64 {
    let spec = model.spec();
    let dt = model.grid().dt();
    let rho = spec.rho;
    let rho_bar = (1.0 - rho * rho).sqrt();
    let mut var = 0.0;
    let mut mart = 0.0;
    for i in 0..m {
        let y = path.y[i];
        var += y * y;
        mart += y * (rho * path.db1[i] + rho_bar * path.db2[i]);
    }
    spec.x0 + spec.r * model.grid().node(m) - 0.5 * var * dt + mart
}

/// `X(tau)` on the path keyed by `(seed, path_index)`; `tau` must be a grid node.
pub fn simulate_log_price(model: &SandwichModel, tau: f64, seed: u64, path_index: u64) -> Result<f64> {
    let m = check_maturity(model, tau)?;
    let path = simulate_path(model, seed, path_index)?;
    Ok(log_price_on(model, &path, m))
}

/// Terminal log-prices of one Monte Carlo experiment, stored in path order.
/// With antithetic sampling entries `2k` and `2k + 1` form pair `k`.
#[derive(Clone, Debug)]
pub struct LogPriceSample {
    pub tau: f64,
    pub r: f64,
    pub x0: f64,
    pub antithetic: bool,
    pub log_prices: Vec<f64>,
}

impl LogPriceSample {
    /// Simulates `n_paths` terminal log-prices (`n_paths / 2` pairs when antithetic).
    pub fn simulate(model: &SandwichModel, tau: f64, n_paths: usize, seed: u64, antithetic: bool) -> Result<Self> {
        let m = check_maturity(model, tau)?;
        if n_paths < MIN_PATHS {
            return Err(Error::invalid(format!("n_paths = {n_paths} below the minimum {MIN_PATHS}")));
        }
        if antithetic && n_paths % 2 != 0 {
            return Err(Error::invalid(format!("antithetic sampling needs an even n_paths, got {n_paths}")));
        }
        let units = if antithetic { n_paths / 2 } else { n_paths };
        let per_unit: Vec<[f64; 2]> = (0..units as u64)
            .into_par_iter()
            .map(|k| {
                let path = simulate_path(model, seed, k)?;
                let x = log_price_on(model, &path, m);
                if !antithetic {
                    return Ok([x, f64::NAN]);
                }
                let neg = |v: &[f64]| v.iter().map(|d| -d).collect::<Vec<_>>();
                let mirror = simulate_from_increments(model, neg(&path.db1), neg(&path.db2), seed, k)?;
                Ok([x, log_price_on(model, &mirror, m)])
            })
            .collect::<Result<_>>()?;
        let log_prices = if antithetic {
            per_unit.iter().flatten().copied().collect()
        } else {
            per_unit.iter().map(|u| u[0]).collect()
        };
        let spec = model.spec();
        Ok(LogPriceSample { tau, r: spec.r, x0: spec.x0, antithetic, log_prices })
    }

    pub fn n_paths(&self) -> usize {
        self.log_prices.len()
    }

    pub fn spot(&self) -> f64 {
        self.x0.exp()
    }

    fn discount(&self) -> f64 {
        (-self.r * self.tau).exp()
    }

    /// Per-unit discounted values of `g(S(tau))`.
    fn unit_values(&self, g: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
        let df = self.discount();
        if self.antithetic {
            self.log_prices.chunks_exact(2).map(|p| 0.5 * df * (g(p[0].exp()) + g(p[1].exp()))).collect()
        } else {
            self.log_prices.iter().map(|&x| df * g(x.exp())).collect()
        }
    }

    fn estimate(&self, strike: f64, values: &[f64]) -> PriceEstimate {
        let (price, var) = mean_var(values);
        PriceEstimate {
            strike,
            tau: self.tau,
            price,
            stderr: (var / values.len() as f64).sqrt(),
            n_paths: self.n_paths(),
        }
    }

    fn check_strikes(strikes: &[f64]) -> Result<()> {
        if strikes.is_empty() {
            return Err(Error::invalid("no strikes given"));
        }
        if let Some(k) = strikes.iter().find(|k| !(**k >= 0.0 && k.is_finite())) {
            return Err(Error::invalid(format!("strike {k} must be finite and non-negative")));
        }
        Ok(())
    }

    pub fn call_prices(&self, strikes: &[f64]) -> Result<Vec<PriceEstimate>> {
        Self::check_strikes(strikes)?;
        Ok(strikes.iter().map(|&k| self.estimate(k, &self.unit_values(|s| (s - k).max(0.0)))).collect())
    }

    pub fn put_prices(&self, strikes: &[f64]) -> Result<Vec<PriceEstimate>> {
        Self::check_strikes(strikes)?;
        Ok(strikes.iter().map(|&k| self.estimate(k, &self.unit_values(|s| (k - s).max(0.0)))).collect())
    }

    /// Discounted mean of `S(tau)`; equals `S0` up to noise.
    pub fn discounted_spot(&self) -> PriceEstimate {
        self.estimate(0.0, &self.unit_values(|s| s))
    }

    /// SHA-256 of the terminal log-prices, for checking that two prices were
    /// computed from bit-identical inputs.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for x in &self.log_prices {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Mean and unbiased sample variance, both summed pairwise.
fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, pairwise_sum(&dev) / (n - 1.0).max(1.0))
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (pairwise_sum(a) / n, pairwise_sum(b) / n);
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    pairwise_sum(&prod) / (n - 1.0).max(1.0)
}

/// Discounted call prices `e^{-r tau} E[(S(tau) - K)^+]` for all strikes from
/// one common path set.
pub fn mc_call_price(
    model: &SandwichModel,
    tau: f64,
    strikes: &[f64],
    n_paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<Vec<PriceEstimate>> {
    LogPriceSample::check_strikes(strikes)?;
    LogPriceSample::simulate(model, tau, n_paths, seed, antithetic)?.call_prices(strikes)
}

/// ATM skew `d sigma_hat / d kappa` by a central difference over
/// `kappa = +-dkappa`, `dkappa = 0.05 sqrt(tau)`.
pub fn atm_skew(model: &SandwichModel, tau: f64, n_paths: usize, seed: u64, antithetic: bool) -> Result<SkewPoint> {
    if n_paths < MIN_SKEW_PATHS {
        return Err(Error::invalid(format!("n_paths = {n_paths} below the skew minimum {MIN_SKEW_PATHS}")));
    }
    let sample = LogPriceSample::simulate(model, tau, n_paths, seed, antithetic)?;
    skew_from_sample(&sample)
}

/// Skew estimate from an existing sample, with a delta-method standard error
/// that uses the empirical covariance of the two strikes.
pub fn skew_from_sample(sample: &LogPriceSample) -> Result<SkewPoint> {
    let tau = sample.tau;
    let dkappa = DKAPPA_SCALE * tau.sqrt();
    let s0 = sample.spot();
    let forward_log = sample.x0 + sample.r * tau;
    let (k_up, k_dn) = ((forward_log + dkappa).exp(), (forward_log - dkappa).exp());
    let v_up = sample.unit_values(|s| (s - k_up).max(0.0));
    let v_dn = sample.unit_values(|s| (s - k_dn).max(0.0));
    let (p_up, var_up) = mean_var(&v_up);
    let (p_dn, var_dn) = mean_var(&v_dn);
    let undefined = |e: Error| Error::SkewUndefined { tau, reason: e.to_string() };
    let iv_up = implied_vol(p_up, s0, k_up, sample.r, tau).map_err(undefined)?;
    let iv_dn = implied_vol(p_dn, s0, k_dn, sample.r, tau).map_err(undefined)?;
    let vega_up = bs_vega(s0, k_up, sample.r, tau, iv_up)?;
    let vega_dn = bs_vega(s0, k_dn, sample.r, tau, iv_dn)?;
    let units = v_up.len() as f64;
    let cov = covariance(&v_up, &v_dn);
    let g = 1.0 / (2.0 * dkappa);
    let var_skew =
        g * g * (var_up / (vega_up * vega_up) + var_dn / (vega_dn * vega_dn) - 2.0 * cov / (vega_up * vega_dn)) / units;
    Ok(SkewPoint { tau, atm_skew: (iv_up - iv_dn) * g, stderr: var_skew.max(0.0).sqrt(), dkappa })
}

/// CSV with header `tau,strike,price,stderr`.
pub fn write_prices_csv<W: Write>(writer: W, prices: &[PriceEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tau", "strike", "price", "stderr"])?;
    for p in prices {
        w.write_record([p.tau, p.strike, p.price, p.stderr].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// CSV with header `tau,skew,stderr,dkappa`.
pub fn write_skew_csv<W: Write>(writer: W, points: &[SkewPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tau", "skew", "stderr", "dkappa"])?;
    for p in points {
        w.write_record([p.tau, p.atm_skew, p.stderr, p.dkappa].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
