use serde::Serialize;
use sha2::{Digest, Sha256};
use svv_core::malliavin::{
    explosion_first, first_bump_check, first_field, second_bump_check, write_bump_csv, write_field_csv, write_stats_csv,
};
use svv_core::sandwich::{empirical_sandwich_stats, simulate_path, simulate_paths, write_paths_csv};
use svv_core::skewlab::{run_skew_experiment, SkewPlan};
use svv_core::volterra::{holder_certificate, limit_constant};
use svv_core::{SandwichModel, TimeGrid};

use crate::output::Staging;
use crate::{CliError, Context};

/// Tolerances of the Malliavin checks.
const FIRST_MEDIAN_TOL: f64 = 2e-2;
const SECOND_MEDIAN_TOL: f64 = 5e-2;
const SYMMETRY_TOL: f64 = 1e-2;
const EXPLOSION_GROWTH: f64 = 1.1;
/// Formula and bump coincide up to rounding when the drift is off.
const DISABLED_FIRST_TOL: f64 = 1e-10;

/// Certificate ratios between consecutive refinements must stay in this band.
const CERT_BAND: (f64, f64) = (0.5, 2.0);

fn invalid(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{name}: {msg}"))
}

/// SHA-256 of everything that determines the outputs of `command`.
fn run_digest(command: &str, model: &SandwichModel, section: &impl Serialize, ctx: &Context) -> String {
    let canonical = serde_json::json!({
        "command": command,
        "model": model.spec(),
        "experiment": section,
        "seed": ctx.seed,
        "antithetic": ctx.antithetic,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

fn meta(command: &str, digest: &str, ctx: &Context) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "seed": ctx.seed,
        "config_digest": digest,
        "version": env!("CARGO_PKG_VERSION"),
    })
}

fn assumption_notes(model: &SandwichModel) -> String {
    model.assumption_violations().iter().map(|e| format!("note: {e}\n")).collect()
}

fn to_json(v: &impl Serialize) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| CliError::Io(e.to_string()))
}

pub fn simulate(ctx: &Context) -> Result<String, CliError> {
    let model = ctx.config.model(&ctx.config_dir)?;
    let section = &ctx.config.simulate;
    if section.n_paths == 0 {
        return Err(invalid("simulate.n_paths", "must be at least 1"));
    }
    let mut out = Staging::new(&ctx.out, ctx.force)?;
    let paths = simulate_paths(&model, ctx.seed, 0, section.n_paths as u64)?;
    write_paths_csv(out.create("paths.csv")?, &model, &paths)?;
    let stats = empirical_sandwich_stats(&model, &paths)?;
    out.write("sandwich_stats.json", &to_json(&stats)?)?;

    let digest = run_digest("simulate", &model, section, ctx);
    let mut s = format!("config digest  {digest}\n");
    s.push_str(&format!(
        "paths {}  steps {}  rows {}\n",
        stats.paths,
        model.grid().steps(),
        paths.len() * (model.grid().steps() + 1)
    ));
    s.push_str(&format!("band violations {}\n", stats.violations));
    s.push_str(&format!("min margins  lower {:.4e}  upper {:.4e}\n", stats.min_margin_lower, stats.min_margin_upper));
    s.push_str(&format!("E[sup 1/(Y - phi)]^k  {:?}\n", stats.inverse_moments));
    s.push_str(&assumption_notes(&model));
    out.write("summary.txt", &s)?;
    out.commit(meta("simulate", &digest, ctx))?;
    Ok(s)
}

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

pub fn malliavin_check(ctx: &Context) -> Result<String, CliError> {
    let model = ctx.config.model(&ctx.config_dir)?;
    let c = &ctx.config.malliavin;
    if !(c.eps > 0.0 && c.eps.is_finite()) {
        return Err(invalid("malliavin.eps", "must be positive"));
    }
    for (name, v) in [
        ("malliavin.bump_paths", c.bump_paths),
        ("malliavin.second_paths", c.second_paths),
        ("malliavin.explosion_paths", c.explosion_paths),
    ] {
        if v == 0 {
            return Err(invalid(name, "must be at least 1"));
        }
    }
    let n = model.grid().steps();
    if n % 2 != 0 || n / 2 < c.min_lag + 2 {
        return Err(invalid(
            "model.steps",
            format!("the explosion check compares n/2 with n; need an even n with n/2 >= min_lag + 2, got {n}"),
        ));
    }
    let mut out = Staging::new(&ctx.out, ctx.force)?;
    let disabled = model.drift().is_disabled();

    let first = first_bump_check(&model, ctx.seed, c.bump_paths, c.eps, c.min_lag)?;
    write_bump_csv(out.create("bump_first.csv")?, &first)?;
    let second = second_bump_check(&model, ctx.seed, c.second_paths, c.eps, c.min_lag)?;
    write_bump_csv(out.create("bump_second.csv")?, &second)?;
    let coarse = model.with_grid(model.grid().horizon(), n / 2)?;
    let m_coarse = explosion_first(&coarse, ctx.seed, c.explosion_paths)?.max_first();
    let fine = explosion_first(&model, ctx.seed, c.explosion_paths)?;
    let m_fine = fine.max_first();
    write_stats_csv(out.create("explosion_stats.csv")?, &fine)?;
    let fields = (0..c.field_paths as u64)
        .map(|k| Ok(first_field(&simulate_path(&model, ctx.seed, k)?, &model)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    write_field_csv(out.create("field.csv")?, &fields)?;

    let asym = second.max_asymmetry.unwrap_or(0.0);
    let growth = m_fine / m_coarse;
    let mut checks = Vec::new();
    if disabled {
        // the scheme is linear in the noise: first bumps are exact and every
        // second derivative vanishes identically
        checks.push(Check {
            name: "first-order bump",
            pass: first.max_absolute < DISABLED_FIRST_TOL,
            detail: format!("max abs dev {:.3e} (< {DISABLED_FIRST_TOL:e})", first.max_absolute),
        });
        let nonzero = second.samples.iter().filter(|s| s.formula != 0.0).count();
        checks.push(Check {
            name: "second-order entries",
            pass: nonzero == 0,
            detail: format!("{nonzero} nonzero formula entries (bump noise {:.3e})", second.max_absolute),
        });
    } else {
        checks.push(Check {
            name: "first-order bump",
            pass: first.median_relative < FIRST_MEDIAN_TOL,
            detail: format!("median rel dev {:.3e} (< {FIRST_MEDIAN_TOL:e})", first.median_relative),
        });
        checks.push(Check {
            name: "second-order bump",
            pass: second.median_relative < SECOND_MEDIAN_TOL,
            detail: format!("median rel dev {:.3e} (< {SECOND_MEDIAN_TOL:e})", second.median_relative),
        });
    }
    checks.push(Check {
        name: "(r,s) symmetry",
        pass: asym < SYMMETRY_TOL,
        detail: format!("max asymmetry {asym:.3e} (< {SYMMETRY_TOL:e})"),
    });
    checks.push(Check {
        name: "explosion statistic",
        pass: growth <= EXPLOSION_GROWTH,
        detail: format!(
            "max {m_coarse:.4e} (n={}) -> {m_fine:.4e} (n={n}), ratio {growth:.4} (<= {EXPLOSION_GROWTH})",
            n / 2
        ),
    });

    let digest = run_digest("malliavin-check", &model, c, ctx);
    let mut s = format!("config digest  {digest}\n");
    for ch in &checks {
        s.push_str(&format!("{} {}: {}\n", if ch.pass { "PASS" } else { "FAIL" }, ch.name, ch.detail));
    }
    s.push_str(&assumption_notes(&model));
    out.write("summary.txt", &s)?;
    out.commit(meta("malliavin-check", &digest, ctx))?;
    let failed: Vec<_> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(s)
    } else {
        Err(CliError::Numerical(format!("{s}failed checks: {}", failed.join(", "))))
    }
}

pub fn kernel_check(ctx: &Context) -> Result<String, CliError> {
    let model = ctx.config.model(&ctx.config_dir)?;
    let c = &ctx.config.kernel_check;
    let kernel = model.kernel();
    let h = kernel.effective_hurst();
    let lambda = c.lambda.unwrap_or(0.5 * h);
    if !(lambda > 0.0 && lambda < h) {
        return Err(invalid("kernel_check.lambda", format!("{lambda} must lie in (0, H) = (0, {h})")));
    }
    if c.refinements.is_empty() || c.refinements.contains(&0) {
        return Err(invalid("kernel_check.refinements", "need at least one positive step count"));
    }
    let mut out = Staging::new(&ctx.out, ctx.force)?;
    let horizon = model.grid().horizon();
    let mut rows = Vec::new();
    for &n in &c.refinements {
        let grid = TimeGrid::new(horizon, n)?;
        rows.push((n, grid.dt(), holder_certificate(kernel, &grid, lambda)?));
    }
    let k_y = limit_constant(kernel)?;

    let mut csv = String::from("steps,dt,certificate\n");
    for (n, dt, cert) in &rows {
        csv.push_str(&format!("{n},{dt:e},{cert:e}\n"));
    }
    out.write("kernel_check.csv", &csv)?;
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[1].2 / w[0].2).collect();
    let stable = ratios.iter().all(|r| (CERT_BAND.0..=CERT_BAND.1).contains(r));
    let report = serde_json::json!({
        "hurst": h,
        "lambda": lambda,
        "certificates": rows.iter().map(|r| serde_json::json!({ "steps": r.0, "certificate": r.2 })).collect::<Vec<_>>(),
        "refinement_ratios": ratios,
        "certificate_stable": stable,
        "limit_constant": k_y,
    });
    out.write("kernel_check.json", &to_json(&report)?)?;

    let digest = run_digest("kernel-check", &model, c, ctx);
    let mut s = format!("config digest  {digest}\nH {h}  lambda {lambda}\n");
    for (n, _, cert) in &rows {
        s.push_str(&format!("n = {n:>6}  certificate {cert:.6e}\n"));
    }
    s.push_str(&format!(
        "{} certificate stable under refinement (ratios {ratios:.4?} in [{}, {}])\n",
        if stable { "PASS" } else { "FAIL" },
        CERT_BAND.0,
        CERT_BAND.1
    ));
    s.push_str(&format!("K_Y {k_y:.10e}\n"));
    s.push_str(&assumption_notes(&model));
    out.write("summary.txt", &s)?;
    out.commit(meta("kernel-check", &digest, ctx))?;
    if stable {
        Ok(s)
    } else {
        Err(CliError::Numerical(format!("{s}certificate grows under refinement")))
    }
}

pub fn skew(ctx: &Context) -> Result<String, CliError> {
    let model = ctx.config.model(&ctx.config_dir)?;
    let c = &ctx.config.skew;
    let plan = match &c.taus {
        Some(taus) => SkewPlan {
            taus: taus.clone(),
            n_paths: c.n_paths,
            antithetic: ctx.antithetic,
            steps_per_tau: c.steps_per_tau,
        },
        None => {
            if c.m_min > c.m_max {
                return Err(invalid("skew.m_min", format!("{} exceeds m_max = {}", c.m_min, c.m_max)));
            }
            let mut p = SkewPlan::dyadic(model.grid().horizon(), c.m_min, c.m_max, c.n_paths, c.steps_per_tau);
            p.antithetic = ctx.antithetic;
            p
        }
    };
    let mut out = Staging::new(&ctx.out, ctx.force)?;
    let report = run_skew_experiment(&model, &plan, ctx.seed)?;
    report.write_csv(out.create("skew_report.csv")?)?;
    out.write("skew_fit.json", &to_json(&report.fit_json())?)?;
    let s = report.summary() + &assumption_notes(&model);
    out.write("summary.txt", &s)?;
    out.commit(meta("skew", &report.config_digest, ctx))?;
    Ok(s)
}
