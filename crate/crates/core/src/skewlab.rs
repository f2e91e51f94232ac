//! Skew term-structure experiments: per-maturity ATM skews, a weighted
//! log-log fit of the exponent and the comparison of the short-maturity
//! level with `rho K_Y / y0`.
//!
//! Each maturity is an independent job with its own seed
//! `derive_seed(seed, TAU_DOMAIN, tau.to_bits())`. With `steps_per_tau` set,
//! every maturity is simulated on its own grid `[0, tau]` with that many
//! cells, so the smallest maturity is resolved as well as the largest.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, SandwichModel};
use crate::pricing::{atm_skew, write_skew_csv, SkewPoint};
use crate::rng::derive_seed;
use crate::volterra::limit_constant;

pub const TAU_DOMAIN: u64 = 0x0074_6175;
/// A point is significant when `|skew| > SIGNIFICANCE * stderr`.
pub const SIGNIFICANCE: f64 = 3.0;
pub const MIN_FIT_POINTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkewPlan {
    /// Maturities in years.
    pub taus: Vec<f64>,
    /// Paths per maturity.
    pub n_paths: usize,
    #[serde(default)]
    pub antithetic: bool,
    /// Cells of the per-maturity grid `[0, tau]`. `None` prices every
    /// maturity on the model grid, where it must be a node.
    #[serde(default)]
    pub steps_per_tau: Option<usize>,
}

impl SkewPlan {
    /// `tau_m = horizon 2^{-m}` for `m = m_min..=m_max`, ascending.
    pub fn dyadic(horizon: f64, m_min: u32, m_max: u32, n_paths: usize, steps_per_tau: Option<usize>) -> Self {
        let taus = (m_min..=m_max).rev().map(|m| horizon / 2f64.powi(m as i32)).collect();
        SkewPlan { taus, n_paths, antithetic: false, steps_per_tau }
    }
}

fn tau_model(model: &SandwichModel, plan: &SkewPlan, tau: f64) -> Result<SandwichModel> {
    match plan.steps_per_tau {
        Some(n) => model.with_grid(tau, n),
        None => Ok(model.clone()),
    }
}

/// ATM skews for every maturity of the plan, sorted by ascending `tau`.
pub fn skew_term_structure(model: &SandwichModel, plan: &SkewPlan, seed: u64) -> Result<Vec<SkewPoint>> {
    if plan.taus.is_empty() {
        return Err(Error::invalid("no maturities in the skew plan"));
    }
    let mut taus = plan.taus.clone();
    taus.sort_by(f64::total_cmp);
    if taus.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("maturities must be distinct"));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::invalid(format!("maturity {t} must be positive")));
    }
    taus.par_iter()
        .map(|&tau| {
            let m = tau_model(model, plan, tau)?;
            let s = derive_seed(seed, TAU_DOMAIN, tau.to_bits());
            atm_skew(&m, tau, plan.n_paths, s, plan.antithetic)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// Estimates `H - 1/2`.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Number of significant points the fit used.
    pub points: usize,
}

/// Weighted least squares of `ln|skew|` on `ln tau` over the significant
/// points, weights `(skew / stderr)^2`; uniform weights when every point has
/// zero standard error.
pub fn fit_power_law(points: &[SkewPoint]) -> Result<PowerLawFit> {
    let sig: Vec<&SkewPoint> =
        points.iter().filter(|p| p.atm_skew.is_finite() && p.atm_skew.abs() > SIGNIFICANCE * p.stderr).collect();
    if sig.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientSignal(format!(
            "{} of {} points have |skew| > {SIGNIFICANCE} stderr; need {MIN_FIT_POINTS}",
            sig.len(),
            points.len()
        )));
    }
    if sig.iter().any(|p| p.atm_skew.signum() != sig[0].atm_skew.signum()) {
        return Err(Error::InsufficientSignal("significant skews change sign".into()));
    }
    let all_exact = sig.iter().all(|p| p.stderr == 0.0);
    let w: Vec<f64> = sig
        .iter()
        .map(|p| if all_exact { 1.0 } else { (p.atm_skew / p.stderr.max(f64::MIN_POSITIVE)).powi(2) })
        .collect();
    let x: Vec<f64> = sig.iter().map(|p| p.tau.ln()).collect();
    let y: Vec<f64> = sig.iter().map(|p| p.atm_skew.abs().ln()).collect();
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(w, x)| w * (x - xm).powi(2)).sum();
    let sxy: f64 = w.iter().zip(&x).zip(&y).map(|((w, x), y)| w * (x - xm) * (y - ym)).sum();
    let syy: f64 = w.iter().zip(&y).map(|(w, y)| w * (y - ym).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InsufficientSignal("significant points share one maturity".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ss_res: f64 = w.iter().zip(&x).zip(&y).map(|((w, x), y)| w * (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 1.0 };
    Ok(PowerLawFit { slope, intercept, r_squared, points: sig.len() })
}

/// `tau^{1/2-H} skew(tau_min) / (rho K_Y / y0)`; the theory predicts `+1` as
/// `tau_min -> 0`.
pub fn limit_check(points: &[SkewPoint], model: &SandwichModel, k_y: f64) -> Result<f64> {
    let spec = model.spec();
    if (spec.rho * k_y).abs() < 1e-12 {
        return Err(Error::UndefinedLimit(format!("|rho K_Y| = {} is below 1e-12", (spec.rho * k_y).abs())));
    }
    let p = points.iter().min_by(|a, b| a.tau.total_cmp(&b.tau)).ok_or_else(|| Error::invalid("no skew points"))?;
    if !(p.atm_skew.abs() > SIGNIFICANCE * p.stderr) {
        return Err(Error::InsufficientSignal(format!(
            "skew {} at the smallest maturity {} is within {SIGNIFICANCE} stderr ({}) of zero",
            p.atm_skew, p.tau, p.stderr
        )));
    }
    let h = model.kernel().effective_hurst();
    Ok(p.tau.powf(0.5 - h) * p.atm_skew / (spec.rho * k_y / spec.y0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkewReport {
    pub points: Vec<SkewPoint>,
    pub fit: Option<PowerLawFit>,
    /// Why the fit is missing, when it is.
    pub fit_error: Option<String>,
    pub k_y: f64,
    pub limit_ratio: Option<f64>,
    pub limit_error: Option<String>,
    pub config_digest: String,
}

/// SHA-256 of the canonical JSON of `(model, plan, seed)`.
pub fn config_digest(spec: &ModelSpec, plan: &SkewPlan, seed: u64) -> String {
    let canonical = serde_json::json!({ "model": spec, "plan": plan, "seed": seed });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// Term structure, fit and limit comparison. Fit and limit failures that are
/// statistical (too little signal, undefined limit) are recorded in the
/// report; everything else is an error.
pub fn run_skew_experiment(model: &SandwichModel, plan: &SkewPlan, seed: u64) -> Result<SkewReport> {
    let points = skew_term_structure(model, plan, seed)?;
    let (fit, fit_error) = match fit_power_law(&points) {
        Ok(f) => (Some(f), None),
        Err(e @ Error::InsufficientSignal(_)) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let k_y = limit_constant(model.kernel())?;
    let (limit_ratio, limit_error) = match limit_check(&points, model, k_y) {
        Ok(r) => (Some(r), None),
        Err(e @ (Error::InsufficientSignal(_) | Error::UndefinedLimit(_))) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(SkewReport {
        points,
        fit,
        fit_error,
        k_y,
        limit_ratio,
        limit_error,
        config_digest: config_digest(model.spec(), plan, seed),
    })
}

impl SkewReport {
    /// `skew_report.csv`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_skew_csv(writer, &self.points)
    }

    /// `skew_fit.json`: slope, intercept, r2, limit ratio and digest; missing
    /// values are `null`.
    pub fn fit_json(&self) -> serde_json::Value {
        serde_json::json!({
            "slope": self.fit.map(|f| f.slope),
            "intercept": self.fit.map(|f| f.intercept),
            "r2": self.fit.map(|f| f.r_squared),
            "fit_points": self.fit.map(|f| f.points),
            "fit_error": self.fit_error,
            "k_y": self.k_y,
            "limit_ratio": self.limit_ratio,
            "limit_error": self.limit_error,
            "config_digest": self.config_digest,
        })
    }

    /// Plain-text summary for humans.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("config digest  {}\n", self.config_digest));
        s.push_str(&format!("{:>12} {:>14} {:>12} {:>10}\n", "tau", "skew", "stderr", "dkappa"));
        for p in &self.points {
            s.push_str(&format!("{:>12.6e} {:>14.6e} {:>12.4e} {:>10.4e}\n", p.tau, p.atm_skew, p.stderr, p.dkappa));
        }
        match (&self.fit, &self.fit_error) {
            (Some(f), _) => s.push_str(&format!(
                "power-law fit  slope {:.4}  intercept {:.4}  r2 {:.4}  ({} points)\n",
                f.slope, f.intercept, f.r_squared, f.points
            )),
            (None, e) => s.push_str(&format!("power-law fit  null ({})\n", e.as_deref().unwrap_or("n/a"))),
        }
        s.push_str(&format!("K_Y            {:.6e}\n", self.k_y));
        match (self.limit_ratio, &self.limit_error) {
            (Some(r), _) => s.push_str(&format!("limit ratio    {r:.4}\n")),
            (None, e) => s.push_str(&format!("limit ratio    null ({})\n", e.as_deref().unwrap_or("n/a"))),
        }
        s
    }
}
