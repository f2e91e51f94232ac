//! Run configuration: a TOML file with a `[model]` section and one optional
//! section per subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svv_core::{BoundFunctions, KernelSpec, KernelTable, ModelSpec, SandwichDrift, SandwichModel};

use crate::CliError;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub malliavin: MalliavinConfig,
    #[serde(default)]
    pub kernel_check: KernelCheckConfig,
    #[serde(default)]
    pub skew: SkewConfig,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kernel: KernelConfig,
    pub bounds: BoundFunctions,
    pub drift: SandwichDrift,
    pub y0: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub r: f64,
    #[serde(default)]
    pub rho: f64,
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    PowerSum {
        alphas: Vec<f64>,
        hursts: Vec<f64>,
    },
    /// CSV with header `t,s,k`; a relative `file` is resolved against the
    /// directory of the config file.
    Tabulated {
        file: PathBuf,
        hurst: f64,
    },
    Zero,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n_paths: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { n_paths: 16 }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct MalliavinConfig {
    pub bump_paths: usize,
    pub second_paths: usize,
    pub eps: f64,
    /// Smallest `t - s` in grid cells at which bumps are compared.
    pub min_lag: usize,
    pub explosion_paths: usize,
    /// Paths whose full first-order field goes to `field.csv`.
    pub field_paths: usize,
}

impl Default for MalliavinConfig {
    fn default() -> Self {
        MalliavinConfig {
            bump_paths: 200,
            second_paths: 50,
            eps: 1e-4,
            min_lag: 11,
            explosion_paths: 1000,
            field_paths: 2,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelCheckConfig {
    /// Defaults to half the effective Hurst index.
    pub lambda: Option<f64>,
    /// Grid sizes on `[0, horizon]`.
    pub refinements: Vec<usize>,
}

impl Default for KernelCheckConfig {
    fn default() -> Self {
        KernelCheckConfig { lambda: None, refinements: vec![64, 128, 256] }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkewConfig {
    /// Explicit maturities in years; otherwise `horizon 2^-m` for `m = m_min..=m_max`.
    pub taus: Option<Vec<f64>>,
    pub m_min: u32,
    pub m_max: u32,
    pub n_paths: usize,
    /// Cells per maturity grid; `None` prices on the model grid.
    pub steps_per_tau: Option<usize>,
    pub antithetic: bool,
}

impl Default for SkewConfig {
    fn default() -> Self {
        SkewConfig { taus: None, m_min: 2, m_max: 9, n_paths: 100_000, steps_per_tau: Some(64), antithetic: false }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{name}: {msg}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))
    }

    /// Builds and validates the model. Every failure names the offending key.
    pub fn model(&self, base_dir: &Path) -> Result<SandwichModel, CliError> {
        let m = &self.model;
        if !(m.rho > -1.0 && m.rho < 1.0) {
            return Err(field("model.rho", format!("{} must lie in (-1, 1)", m.rho)));
        }
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            return Err(field("model.horizon", format!("{} must be positive", m.horizon)));
        }
        if m.steps == 0 {
            return Err(field("model.steps", "must be at least 1"));
        }
        let kernel = self.kernel(base_dir)?;
        let spec = ModelSpec {
            kernel,
            bounds: m.bounds.clone(),
            drift: m.drift.clone(),
            y0: m.y0,
            x0: m.x0,
            r: m.r,
            rho: m.rho,
            horizon: m.horizon,
            steps: m.steps,
        };
        let dt = m.horizon / m.steps as f64;
        let gate = dt * m.drift.a.max_slope();
        if gate >= 1.0 {
            return Err(field("model.steps", format!("step-size gate violated: dt * sup a'_y = {gate} must be < 1")));
        }
        if !m.drift.is_disabled() {
            for i in 0..=m.steps {
                let t = i as f64 * dt;
                let (phi, psi) = (m.bounds.phi.eval(t), m.bounds.psi.eval(t));
                if !(phi > 0.0 && phi < psi) {
                    return Err(field(
                        "model.bounds",
                        format!("need 0 < phi < psi; at t = {t} phi = {phi}, psi = {psi}"),
                    ));
                }
            }
            let (phi0, psi0) = (m.bounds.phi.eval(0.0), m.bounds.psi.eval(0.0));
            if !(phi0 < m.y0 && m.y0 < psi0) {
                return Err(field("model.y0", format!("{} must lie in (phi(0), psi(0)) = ({phi0}, {psi0})", m.y0)));
            }
            let h = spec.kernel.effective_hurst();
            let threshold = 1.0 / h - 1.0;
            for (name, g) in [("model.drift.gamma1", m.drift.gamma1), ("model.drift.gamma2", m.drift.gamma2)] {
                if !(g > threshold) {
                    return Err(field(name, format!("(B1) {g} must exceed 1/H - 1 = {threshold:.6} (H = {h})")));
                }
            }
        }
        SandwichModel::new(spec).map_err(|e| field("model", e))
    }

    fn kernel(&self, base_dir: &Path) -> Result<KernelSpec, CliError> {
        let spec = match &self.model.kernel {
            KernelConfig::PowerSum { alphas, hursts } => KernelSpec::power_sum(alphas.clone(), hursts.clone()),
            KernelConfig::Tabulated { file, hurst } => {
                let path = base_dir.join(file);
                let f = std::fs::File::open(&path)
                    .map_err(|e| CliError::Io(format!("model.kernel.file: cannot open {}: {e}", path.display())))?;
                KernelTable::from_csv(std::io::BufReader::new(f), *hurst).map(KernelSpec::Tabulated)
            }
            KernelConfig::Zero => Ok(KernelSpec::Zero),
        };
        spec.map_err(|e| match e {
            svv_core::Error::Io(m) => CliError::Io(format!("model.kernel: {m}")),
            e => field("model.kernel", e),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        [model]
        y0 = 0.5
        horizon = 1.0
        steps = 32
        kernel = { family = "power_sum", alphas = [0.3], hursts = [0.3] }
        bounds = { phi = { kind = "constant", value = 0.05 }, psi = { kind = "constant", value = 1.0 } }
        drift = { theta1 = { kind = "constant", value = 0.01 }, theta2 = { kind = "constant", value = 0.01 }, gamma1 = 3.0, gamma2 = 3.0 }
    "#;

    #[test]
    fn minimal_config_builds() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.simulate.n_paths, 16);
        c.model(Path::new(".")).unwrap();
    }

    #[test]
    fn unknown_key_reports_position() {
        let text = MINIMAL.replace("steps = 32", "steps = 32\nstpes = 4");
        let CliError::Validation(msg) = RunConfig::parse(&text).unwrap_err() else { panic!() };
        assert!(msg.contains("line") && msg.contains("stpes"), "{msg}");
    }

    #[test]
    fn rho_and_gamma_are_field_addressed() {
        let c = RunConfig::parse(&MINIMAL.replace("y0 = 0.5", "y0 = 0.5\nrho = 1.0")).unwrap();
        let e = c.model(Path::new(".")).unwrap_err().to_string();
        assert!(e.starts_with("model.rho"), "{e}");
        let c = RunConfig::parse(&MINIMAL.replace("gamma1 = 3.0", "gamma1 = 2.0")).unwrap();
        let e = c.model(Path::new(".")).unwrap_err().to_string();
        assert!(e.starts_with("model.drift.gamma1") && e.contains("(B1)"), "{e}");
    }
}
