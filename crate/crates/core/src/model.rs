//! Model parameters: bounds, drift families and the validated model.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volterra::{ConvolutionWeights, KernelSpec, TimeGrid};

/// Deterministic functions of time used for the bounds and the drift intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeFn {
    Constant {
        value: f64,
    },
    /// `intercept + slope * t`
    Affine {
        intercept: f64,
        slope: f64,
    },
    /// `mean + amplitude * sin(2 pi frequency t + phase)`
    Sinusoid {
        mean: f64,
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl TimeFn {
    pub fn constant(value: f64) -> Self {
        TimeFn::Constant { value }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            TimeFn::Constant { value } => value,
            TimeFn::Affine { intercept, slope } => intercept + slope * t,
            TimeFn::Sinusoid { mean, amplitude, frequency, phase } => {
                mean + amplitude * (std::f64::consts::TAU * frequency * t + phase).sin()
            }
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            TimeFn::Constant { value } => value.is_finite(),
            TimeFn::Affine { intercept, slope } => intercept.is_finite() && slope.is_finite(),
            TimeFn::Sinusoid { mean, amplitude, frequency, phase } => {
                [mean, amplitude, frequency, phase].iter().all(|x| x.is_finite())
            }
        }
    }
}

/// The smooth part `a(t, y)` of the drift. All families are time-homogeneous
/// and at most affine in `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AFn {
    #[default]
    Zero,
    /// `c0 + c1 y`
    Affine { c0: f64, c1: f64 },
    /// `speed (level - y)`
    MeanReversion { speed: f64, level: f64 },
}

impl AFn {
    /// `(a, a'_y, a''_yy)`
    #[inline]
    pub fn eval(&self, y: f64) -> (f64, f64, f64) {
        match *self {
            AFn::Zero => (0.0, 0.0, 0.0),
            AFn::Affine { c0, c1 } => (c0 + c1 * y, c1, 0.0),
            AFn::MeanReversion { speed, level } => (speed * (level - y), -speed, 0.0),
        }
    }

    /// `sup a'_y` over the band.
    pub fn max_slope(&self) -> f64 {
        match *self {
            AFn::Zero => 0.0,
            AFn::Affine { c1, .. } => c1,
            AFn::MeanReversion { speed, .. } => -speed,
        }
    }

    /// `(intercept, slope)` of the affine representation.
    pub(crate) fn affine(&self) -> (f64, f64) {
        match *self {
            AFn::Zero => (0.0, 0.0),
            AFn::Affine { c0, c1 } => (c0, c1),
            AFn::MeanReversion { speed, level } => (speed * level, -speed),
        }
    }
}

/// Lower and upper bounds `0 < phi(t) < psi(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundFunctions {
    pub phi: TimeFn,
    pub psi: TimeFn,
}

impl BoundFunctions {
    pub fn constant(phi: f64, psi: f64) -> Self {
        BoundFunctions { phi: TimeFn::constant(phi), psi: TimeFn::constant(psi) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// `b = theta1/(y-phi)^gamma1 - theta2/(psi-y)^gamma2 + a`
    #[default]
    Sandwich,
    /// `b = a` only. Test mode: the power terms are switched off and the
    /// sandwich assumptions do not hold.
    Disabled,
}

/// Drift parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandwichDrift {
    #[serde(default)]
    pub mode: DriftMode,
    pub theta1: TimeFn,
    pub theta2: TimeFn,
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(default)]
    pub a: AFn,
}

impl SandwichDrift {
    /// Equal constant intensities and exponents on both sides, `a = 0`.
    pub fn symmetric(theta: f64, gamma: f64) -> Self {
        SandwichDrift {
            mode: DriftMode::Sandwich,
            theta1: TimeFn::constant(theta),
            theta2: TimeFn::constant(theta),
            gamma1: gamma,
            gamma2: gamma,
            a: AFn::Zero,
        }
    }

    /// Power terms off, drift equal to `a`.
    pub fn disabled(a: AFn) -> Self {
        SandwichDrift {
            mode: DriftMode::Disabled,
            theta1: TimeFn::constant(0.0),
            theta2: TimeFn::constant(0.0),
            gamma1: 1.0,
            gamma2: 1.0,
            a,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.mode == DriftMode::Disabled
    }
}

/// Full parameter set of the model. Serialisable; turned into a
/// [`SandwichModel`] by validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kernel: KernelSpec,
    pub bounds: BoundFunctions,
    pub drift: SandwichDrift,
    /// Initial volatility.
    pub y0: f64,
    /// Initial log-price.
    #[serde(default)]
    pub x0: f64,
    /// Interest rate per year.
    #[serde(default)]
    pub r: f64,
    /// Leverage correlation.
    #[serde(default)]
    pub rho: f64,
    /// Horizon in years.
    pub horizon: f64,
    /// Number of time steps.
    pub steps: usize,
}

/// Validated, immutable model with precomputed convolution weights.
#[derive(Clone, Debug)]
pub struct SandwichModel {
    spec: ModelSpec,
    grid: TimeGrid,
    weights: Arc<ConvolutionWeights>,
}

impl SandwichModel {
    /// Validates the structural invariants the integrator relies on.
    ///
    /// The regularity condition (B1) is not enforced here; see
    /// [`SandwichModel::assumption_violations`].
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let grid = TimeGrid::new(spec.horizon, spec.steps)?;
        spec.kernel.validate()?;
        let d = &spec.drift;
        if !spec.y0.is_finite() || !spec.x0.is_finite() || !spec.r.is_finite() {
            return Err(Error::invalid("y0, x0 and r must be finite"));
        }
        if !(spec.rho > -1.0 && spec.rho < 1.0) {
            return Err(Error::invalid(format!("rho = {} must lie in (-1, 1)", spec.rho)));
        }
        for f in [&spec.bounds.phi, &spec.bounds.psi, &d.theta1, &d.theta2] {
            if !f.is_finite() {
                return Err(Error::invalid("time-function parameters must be finite"));
            }
        }
        let dt = grid.dt();
        let gate = dt * d.a.max_slope();
        if gate >= 1.0 {
            return Err(Error::invalid(format!("step-size gate violated: dt * sup a'_y = {gate} must be < 1")));
        }
        if !d.is_disabled() {
            if !(d.gamma1 > 0.0 && d.gamma2 > 0.0) {
                return Err(Error::invalid(format!("gamma1 = {}, gamma2 = {} must be positive", d.gamma1, d.gamma2)));
            }
            for (i, t) in grid.nodes().enumerate() {
                let (phi, psi) = (spec.bounds.phi.eval(t), spec.bounds.psi.eval(t));
                if !(phi > 0.0 && phi < psi) {
                    return Err(Error::invalid(format!(
                        "bounds must satisfy 0 < phi < psi; at node {i} (t = {t}) phi = {phi}, psi = {psi}"
                    )));
                }
                let (th1, th2) = (d.theta1.eval(t), d.theta2.eval(t));
                if !(th1 > 0.0 && th2 > 0.0) {
                    return Err(Error::Assumption {
                        label: "(B2)",
                        message: format!("theta1 = {th1}, theta2 = {th2} at t = {t} must be positive"),
                    });
                }
            }
            let (phi0, psi0) = (spec.bounds.phi.eval(0.0), spec.bounds.psi.eval(0.0));
            if !(phi0 < spec.y0 && spec.y0 < psi0) {
                return Err(Error::invalid(format!(
                    "y0 = {} must lie strictly between phi(0) = {phi0} and psi(0) = {psi0}",
                    spec.y0
                )));
            }
        }
        let weights = Arc::new(ConvolutionWeights::build(&spec.kernel, &grid)?);
        Ok(SandwichModel { spec, grid, weights })
    }

    /// Violations of the standing assumptions that the integrator itself
    /// does not need: (B1) `gamma > 1/H - 1`, and the drift-disabled or
    /// zero-kernel test modes.
    pub fn assumption_violations(&self) -> Vec<Error> {
        let mut out = Vec::new();
        let h = self.spec.kernel.effective_hurst();
        let d = &self.spec.drift;
        if matches!(self.spec.kernel, KernelSpec::Zero) {
            out.push(Error::Assumption { label: "(K2)", message: "zero kernel is a degenerate test family".into() });
        }
        if d.is_disabled() {
            out.push(Error::Assumption {
                label: "(B2)",
                message: "drift disabled: power terms are switched off".into(),
            });
        } else {
            let threshold = 1.0 / h - 1.0;
            for (name, g) in [("gamma1", d.gamma1), ("gamma2", d.gamma2)] {
                if g <= threshold {
                    out.push(Error::Assumption {
                        label: "(B1)",
                        message: format!("{name} = {g} must exceed 1/H - 1 = {threshold:.6} (H = {h})"),
                    });
                }
            }
        }
        out
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn weights(&self) -> &ConvolutionWeights {
        &self.weights
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.spec.kernel
    }

    pub fn drift(&self) -> &SandwichDrift {
        &self.spec.drift
    }

    pub fn bounds(&self) -> &BoundFunctions {
        &self.spec.bounds
    }

    /// Same model on a different uniform grid.
    pub fn with_grid(&self, horizon: f64, steps: usize) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.horizon = horizon;
        spec.steps = steps;
        SandwichModel::new(spec)
    }

    /// Same model with a different correlation.
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::invalid(format!("rho = {rho} must lie in (-1, 1)")));
        }
        let mut m = self.clone();
        m.spec.rho = rho;
        Ok(m)
    }
}
