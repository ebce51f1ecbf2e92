//! Model primitives shared by every variant: preferences, technology,
//! disaster hazard and damage, the drift of both stocks, the control
//! Hamiltonian with its first-order conditions, and the power-separable
//! candidate value function.
//!
//! Production is `Y(K) = A K` throughout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("utility undefined at c = {c} (epsilon = {epsilon})")]
    UtilityDomain { c: f64, epsilon: f64 },
    #[error("pollution must be positive, got {0}")]
    PollutionDomain(f64),
    #[error("abatement share {theta} outside [0, {bar_theta}]")]
    AbatementOutOfRange { theta: f64, bar_theta: f64 },
    #[error("no interior consumption optimum for marginal value of capital {0}")]
    ConsumptionFoc(f64),
    #[error("closed form requires the decoupled regime: {0}")]
    NotDecoupled(String),
    #[error("invalid mark model: {0}")]
    InvalidMarks(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which jump / noise mechanism drives the economy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// Constant disaster rate `lambda0`, deterministic pollution.
    Hpp,
    /// Disaster rate `lambda0 + lambda1 P`, deterministic pollution.
    Nhpp,
    /// Pollution-dependent rate plus geometric noise on pollution.
    JumpDiffusion,
    /// Marked disasters (random magnitudes) plus geometric noise on pollution.
    Prm,
    /// Marked disasters, deterministic pollution.
    PrmNoDiffusion,
}

impl Variant {
    pub fn is_marked(self) -> bool {
        matches!(self, Variant::Prm | Variant::PrmNoDiffusion)
    }

    pub fn is_diffusive(self) -> bool {
        matches!(self, Variant::JumpDiffusion | Variant::Prm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hpp => "HPP",
            Variant::Nhpp => "NHPP",
            Variant::JumpDiffusion => "JUMP_DIFFUSION",
            Variant::Prm => "PRM",
            Variant::PrmNoDiffusion => "PRM_NO_DIFFUSION",
        }
    }
}

/// Scalar model constants.
///
/// Fields are public for convenient construction; every entry point of the
/// crate calls [`ModelParams::validate`] before using a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Discount rate.
    pub rho: f64,
    /// Productivity in `Y = A K`.
    #[serde(rename = "A")]
    pub a: f64,
    /// Emissions per unit of output.
    pub phi: f64,
    /// Abatement efficiency.
    pub sigma_ab: f64,
    /// Natural pollution decay rate.
    pub alpha: f64,
    /// Weight of pollution disutility.
    pub chi: f64,
    /// Relative risk aversion.
    pub epsilon: f64,
    /// Curvature of pollution disutility.
    pub beta: f64,
    pub delta: f64,
    pub xi: f64,
    pub eta: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    /// Proportional volatility of pollution.
    #[serde(rename = "sigma_P")]
    pub sigma_p: f64,
    pub variant: Variant,
}

fn check(cond: bool, name: &'static str, reason: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter { name, reason: reason() })
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("rho", self.rho),
            ("A", self.a),
            ("phi", self.phi),
            ("sigma_ab", self.sigma_ab),
            ("alpha", self.alpha),
            ("chi", self.chi),
            ("epsilon", self.epsilon),
            ("beta", self.beta),
            ("delta", self.delta),
            ("xi", self.xi),
            ("eta", self.eta),
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("sigma_P", self.sigma_p),
        ];
        for (name, value) in finite {
            check(value.is_finite(), name, || format!("{value} is not finite"))?;
        }
        check(self.rho > 0.0, "rho", || "must be > 0".into())?;
        check(self.a >= 0.0, "A", || "must be >= 0".into())?;
        check(self.phi >= 0.0, "phi", || "must be >= 0".into())?;
        check(self.sigma_ab > 0.0, "sigma_ab", || "must be > 0".into())?;
        check((0.0..1.0).contains(&self.alpha), "alpha", || "must lie in [0, 1)".into())?;
        check(self.chi >= 0.0, "chi", || "must be >= 0".into())?;
        check(self.epsilon > 0.0 && self.epsilon != 1.0, "epsilon", || {
            "must be > 0 and != 1".into()
        })?;
        check(self.beta > 0.0, "beta", || "must be > 0".into())?;
        check(self.delta >= 0.0, "delta", || "must be >= 0".into())?;
        check(self.xi >= 0.0, "xi", || "must be >= 0".into())?;
        check(self.eta >= 0.0, "eta", || "must be >= 0".into())?;
        check(self.lambda0 >= 0.0, "lambda0", || "must be >= 0".into())?;
        check(self.lambda1 >= 0.0, "lambda1", || "must be >= 0".into())?;
        check(self.sigma_p >= 0.0, "sigma_P", || "must be >= 0".into())?;
        match self.variant {
            Variant::Hpp => {
                check(self.lambda1 == 0.0, "lambda1", || "HPP requires lambda1 = 0".into())?;
                check(self.sigma_p == 0.0, "sigma_P", || "HPP requires sigma_P = 0".into())?;
            }
            Variant::Nhpp | Variant::PrmNoDiffusion => {
                check(self.sigma_p == 0.0, "sigma_P", || {
                    format!("{} requires sigma_P = 0", self.variant.name())
                })?;
            }
            Variant::JumpDiffusion | Variant::Prm => {}
        }
        Ok(())
    }

    /// Upper bound of the abatement share, `min(1, phi / sigma_ab)`.
    pub fn bar_theta(&self) -> f64 {
        (self.phi / self.sigma_ab).min(1.0)
    }

    pub fn output(&self, k: f64) -> f64 {
        self.a * k
    }
}

/// A point of the state space; both stocks strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "P")]
    pub p: f64,
}

impl State {
    pub fn new(k: f64, p: f64) -> Result<Self> {
        check(k > 0.0 && k.is_finite(), "K", || format!("state requires K > 0, got {k}"))?;
        check(p > 0.0 && p.is_finite(), "P", || format!("state requires P > 0, got {p}"))?;
        Ok(Self { k, p })
    }
}

/// Consumption and abatement share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    #[serde(rename = "C")]
    pub c: f64,
    pub theta: f64,
}

impl Control {
    pub fn new(c: f64, theta: f64, params: &ModelParams) -> Result<Self> {
        check(c >= 0.0 && c.is_finite(), "C", || format!("consumption must be >= 0, got {c}"))?;
        let bar = params.bar_theta();
        if !(0.0..=bar).contains(&theta) {
            return Err(ModelError::AbatementOutOfRange { theta, bar_theta: bar });
        }
        Ok(Self { c, theta })
    }
}

/// Law of disaster magnitudes.
///
/// The disaster rate of a marked model at pollution `p` is
/// `(lambda0 + lambda1 p) * total_mass`; magnitudes scale the damage
/// exponent of the survival fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum MarkModel {
    /// Unit-sized disasters.
    #[default]
    None,
    /// Finite measure with atoms `atoms[i]` of weight `weights[i]`.
    Discrete { atoms: Vec<f64>, weights: Vec<f64> },
    /// Magnitudes distributed `Gamma(shape = P, scale = 1)` at pollution `P`.
    Gamma,
}

impl MarkModel {
    pub fn validate(&self) -> Result<()> {
        if let MarkModel::Discrete { atoms, weights } = self {
            if atoms.is_empty() || atoms.len() != weights.len() {
                return Err(ModelError::InvalidMarks(format!(
                    "{} atoms but {} weights",
                    atoms.len(),
                    weights.len()
                )));
            }
            if atoms.iter().any(|z| !(z.is_finite() && *z > 0.0)) {
                return Err(ModelError::InvalidMarks("atoms must be finite and > 0".into()));
            }
            if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(ModelError::InvalidMarks("weights must be finite and > 0".into()));
            }
            let second: f64 = atoms.iter().zip(weights).map(|(z, w)| w * (1.0 + z * z)).sum();
            if !second.is_finite() {
                return Err(ModelError::InvalidMarks("second moment is not finite".into()));
            }
        }
        Ok(())
    }

    /// Total mass of the mark measure (1 for unmarked and Gamma marks).
    pub fn total_mass(&self) -> f64 {
        match self {
            MarkModel::Discrete { weights, .. } => weights.iter().sum(),
            MarkModel::None | MarkModel::Gamma => 1.0,
        }
    }
}

/// Parameters together with the mark law; validated as a unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub params: ModelParams,
    #[serde(default)]
    pub marks: MarkModel,
}

impl Model {
    pub fn new(params: ModelParams, marks: MarkModel) -> Result<Self> {
        let model = Self { params, marks };
        model.validate()?;
        Ok(model)
    }

    /// Unmarked model; rejects marked variants.
    pub fn unmarked(params: ModelParams) -> Result<Self> {
        Self::new(params, MarkModel::None)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.marks.validate()?;
        let marked = self.params.variant.is_marked();
        match (&self.marks, marked) {
            (MarkModel::None, true) => Err(ModelError::InvalidMarks(format!(
                "variant {} needs a DISCRETE or GAMMA mark model",
                self.params.variant.name()
            ))),
            (MarkModel::Discrete { .. } | MarkModel::Gamma, false) => Err(ModelError::InvalidMarks(
                format!("variant {} takes no marks", self.params.variant.name()),
            )),
            _ => Ok(()),
        }
    }

    /// Total disaster arrival rate at pollution `p`.
    pub fn total_intensity(&self, p: f64) -> f64 {
        intensity(p, &self.params) * self.marks.total_mass()
    }
}

/// `C^(1-eps)/(1-eps) - chi P^(1+beta)/(1+beta)`.
pub fn utility(c: f64, p: f64, params: &ModelParams) -> Result<f64> {
    if !(p > 0.0) {
        return Err(ModelError::PollutionDomain(p));
    }
    if c < 0.0 || !c.is_finite() || (c == 0.0 && params.epsilon >= 1.0) {
        return Err(ModelError::UtilityDomain { c, epsilon: params.epsilon });
    }
    Ok(utility_unchecked(c, p, params))
}

#[inline]
pub(crate) fn utility_unchecked(c: f64, p: f64, params: &ModelParams) -> f64 {
    consumption_utility(c, params) - pollution_disutility(p, params)
}

#[inline]
pub(crate) fn consumption_utility(c: f64, params: &ModelParams) -> f64 {
    let e = 1.0 - params.epsilon;
    c.powf(e) / e
}

#[inline]
pub(crate) fn pollution_disutility(p: f64, params: &ModelParams) -> f64 {
    let b = 1.0 + params.beta;
    params.chi * p.powf(b) / b
}

/// Marginal utility of consumption, `C^(-eps)`.
pub fn marginal_utility(c: f64, params: &ModelParams) -> f64 {
    c.powf(-params.epsilon)
}

/// Marginal utility of pollution, `-chi P^beta`.
pub fn marginal_pollution_utility(p: f64, params: &ModelParams) -> f64 {
    -params.chi * p.powf(params.beta)
}

/// Share of capital surviving a disaster, `exp(-delta P^xi K^eta zeta)`.
///
/// `mark = None` is the unmarked form (equivalently `zeta = 1`).
pub fn survival_fraction(k: f64, p: f64, params: &ModelParams, mark: Option<f64>) -> f64 {
    (-damage_exponent(k, p, params) * mark.unwrap_or(1.0)).exp()
}

/// `delta P^xi K^eta`, the negative log survival fraction of a unit disaster.
#[inline]
pub fn damage_exponent(k: f64, p: f64, params: &ModelParams) -> f64 {
    if params.delta == 0.0 {
        return 0.0;
    }
    params.delta * pow_nonneg(p, params.xi) * pow_nonneg(k, params.eta)
}

#[inline]
fn pow_nonneg(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else {
        x.powf(e)
    }
}

/// Net emissions `(phi - sigma_ab theta) A K`.
pub fn emissions(theta: f64, k: f64, params: &ModelParams) -> Result<f64> {
    let bar = params.bar_theta();
    if !(0.0..=bar).contains(&theta) {
        return Err(ModelError::AbatementOutOfRange { theta, bar_theta: bar });
    }
    Ok(((params.phi - params.sigma_ab * theta) * params.output(k)).max(0.0))
}

/// `(1 - theta) A K - C`.
#[inline]
pub fn drift_capital(state: State, control: Control, params: &ModelParams) -> f64 {
    (1.0 - control.theta) * params.output(state.k) - control.c
}

/// `(phi - sigma_ab theta) A K - alpha P`.
#[inline]
pub fn drift_pollution(state: State, control: Control, params: &ModelParams) -> f64 {
    (params.phi - params.sigma_ab * control.theta) * params.output(state.k) - params.alpha * state.p
}

/// Disaster hazard `lambda0 + lambda1 p`.
#[inline]
pub fn intensity(p: f64, params: &ModelParams) -> f64 {
    params.lambda0 + params.lambda1 * p
}

/// Control-dependent part of the HJB right-hand side:
/// `U(C, P) + v_K b_K + v_P b_P`.
pub fn hamiltonian(control: Control, state: State, v_k: f64, v_p: f64, params: &ModelParams) -> Result<f64> {
    let u = utility(control.c, state.p, params)?;
    Ok(u + v_k * drift_capital(state, control, params) + v_p * drift_pollution(state, control, params))
}

/// Interior consumption optimum `v_K^(-1/eps)`; requires `v_K > 0`.
pub fn foc_consumption(v_k: f64, params: &ModelParams) -> Result<f64> {
    if !(v_k > 0.0) || !v_k.is_finite() {
        return Err(ModelError::ConsumptionFoc(v_k));
    }
    Ok(v_k.powf(-1.0 / params.epsilon))
}

/// Bang-bang abatement rule driven by the sign of `v_K + sigma_ab v_P`.
///
/// Values within `tol` of zero resolve to `bar_theta`.
pub fn foc_abatement(v_k: f64, v_p: f64, params: &ModelParams, tol: f64) -> f64 {
    let switching = v_k + params.sigma_ab * v_p;
    if switching > tol {
        0.0
    } else {
        params.bar_theta()
    }
}

/// Pointwise maximizer of [`hamiltonian`] over admissible controls.
pub fn maximize_hamiltonian(v_k: f64, v_p: f64, params: &ModelParams) -> Result<Control> {
    let c = foc_consumption(v_k, params)?;
    let theta = foc_abatement(v_k, v_p, params, 0.0);
    Ok(Control { c, theta })
}

/// Power-separable candidate
/// `psi^(-eps) K^(1-eps)/(1-eps) - x P^(1+beta)/(1+beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateValue {
    pub psi: f64,
    pub x: f64,
}

impl CandidateValue {
    pub fn new(psi: f64, x: f64) -> Result<Self> {
        check(psi > 0.0 && psi.is_finite(), "psi", || format!("must be > 0, got {psi}"))?;
        check(x >= 0.0 && x.is_finite(), "x", || format!("must be >= 0, got {x}"))?;
        Ok(Self { psi, x })
    }

    /// Coefficients that solve the HJB exactly in the decoupled regime.
    pub fn decoupled(params: &ModelParams) -> Result<Self> {
        let (psi, x) = decoupled_coefficients(params)?;
        Ok(Self { psi, x })
    }

    pub fn value(&self, state: State, params: &ModelParams) -> f64 {
        let e = params.epsilon;
        let b = 1.0 + params.beta;
        self.psi.powf(-e) * state.k.powf(1.0 - e) / (1.0 - e) - self.x * state.p.powf(b) / b
    }

    /// `(psi K)^(-eps)`.
    pub fn v_k(&self, state: State, params: &ModelParams) -> f64 {
        (self.psi * state.k).powf(-params.epsilon)
    }

    /// `-x P^beta`.
    pub fn v_p(&self, state: State, params: &ModelParams) -> f64 {
        -self.x * state.p.powf(params.beta)
    }

    pub fn v_kk(&self, state: State, params: &ModelParams) -> f64 {
        let e = params.epsilon;
        -e * self.psi.powf(-e) * state.k.powf(-e - 1.0)
    }

    pub fn v_pp(&self, state: State, params: &ModelParams) -> f64 {
        -self.x * params.beta * state.p.powf(params.beta - 1.0)
    }

    /// Feedback control induced by the candidate: `C = psi K`, sign rule for theta.
    pub fn control(&self, state: State, params: &ModelParams) -> Control {
        let theta = foc_abatement(self.v_k(state, params), self.v_p(state, params), params, 0.0);
        Control { c: self.psi * state.k, theta }
    }
}

/// `(psi, x)` making the candidate an exact HJB solution when emissions,
/// disasters and pollution noise are all switched off.
pub fn decoupled_coefficients(params: &ModelParams) -> Result<(f64, f64)> {
    params.validate()?;
    let mut why = Vec::new();
    if params.phi != 0.0 {
        why.push("phi != 0");
    }
    if params.lambda0 != 0.0 || params.lambda1 != 0.0 {
        why.push("disaster hazard is not zero");
    }
    if params.sigma_p != 0.0 {
        why.push("sigma_P != 0");
    }
    if !why.is_empty() {
        return Err(ModelError::NotDecoupled(why.join(", ")));
    }
    let e = params.epsilon;
    let num = params.rho - (1.0 - e) * params.a;
    if !(num > 0.0) {
        return Err(ModelError::InvalidParameter {
            name: "rho",
            reason: format!("need rho > (1 - epsilon) A for a finite value, got rho = {}", params.rho),
        });
    }
    let psi = num / e;
    let x = params.chi / (params.rho + params.alpha * (1.0 + params.beta));
    Ok((psi, x))
}
