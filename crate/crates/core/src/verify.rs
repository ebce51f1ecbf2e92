//! Numerical verification: the solver, the simulator and the closed forms
//! checked against one another.
//!
//! Every check compares a statistic with a tolerance built from three
//! standard errors plus explicitly budgeted deterministic error (grid and
//! horizon truncation). Each check names the identity it exercises.

use std::io::{self, Write};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{ConsumptionRegime, ValueField};
use crate::grid::{Grid, GridSpec};
use crate::jumps::{sample_mark, JumpEvent};
use crate::model::{
    intensity, marginal_utility, survival_fraction, CandidateValue, Control, MarkModel, Model, ModelError,
    ModelParams, State, Variant,
};
use crate::rng::{child, derive_seed, PathRng};
use crate::simulate::{
    ensemble, mean_stderr, summarize, Horizon, NoObserver, Observer, PathSummary, Policy, SimError, SimSpec,
    ValueEstimate,
};
use crate::solver::{solve, SchemeOpts, SolveError, Solution};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("check not applicable: {0}")]
    NotApplicable(String),
}

/// One named comparison of a statistic against its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// The identity or theorem being exercised.
    pub anchor: String,
    pub statistic: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// Passes when `statistic <= tolerance`.
    fn at_most(name: impl Into<String>, anchor: &str, statistic: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            anchor: anchor.to_string(),
            statistic,
            tolerance,
            passed: statistic <= tolerance,
            detail,
        }
    }
}

const ANCHOR_CANDIDATE: &str = "verification of the power-separable candidate value in the decoupled regime";
const ANCHOR_MC: &str = "verification theorem: the gain of the feedback policy equals the value";
const ANCHOR_SUBOPTIMAL: &str = "verification theorem: the gain of any admissible policy is at most the value";
const ANCHOR_MARTINGALE: &str = "compensated jump sums are martingales";
const ANCHOR_TRANSVERSALITY: &str = "transversality: discounted terminal value vanishes";
const ANCHOR_DPP: &str = "dynamic programming principle over a short horizon";
const ANCHOR_FOC: &str = "interior first-order condition in consumption";
const ANCHOR_BANG_BANG: &str = "abatement is bang-bang in the sign of v_K + sigma v_P";
const ANCHOR_RESIDUAL: &str = "grid fixed point of the HJB equation";
const ANCHOR_MONOTONE: &str = "value is non-decreasing in capital and non-increasing in pollution";
const ANCHOR_NESTING: &str = "model nesting between disaster mechanisms";

/// Constant policy scaled to the starting state: `C = consumption_share * A * K_0`,
/// `theta = theta_share * bar_theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantRule {
    pub consumption_share: f64,
    pub theta_share: f64,
}

impl ConstantRule {
    pub fn policy(&self, state0: State, prm: &ModelParams) -> Policy {
        Policy::Constant { c: self.consumption_share * prm.a * state0.k, theta: self.theta_share * prm.bar_theta() }
    }

    fn label(&self) -> String {
        format!("C={}AK0,theta={}bar", self.consumption_share, self.theta_share)
    }
}

/// Sizes and tolerances of the verification suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySettings {
    /// Deterministic grid error allowed in MC-vs-solver comparisons, relative to `|v|`.
    pub grid_budget: f64,
    /// Share of each axis, centred, over which field norms are taken.
    pub core_share: f64,
    /// Relative sup-norm tolerance against the closed form.
    pub closed_form_tol: f64,
    pub suboptimal: Vec<ConstantRule>,
    pub suboptimal_paths: usize,
    pub martingale_paths: usize,
    pub martingale_horizon: f64,
    pub transversality_horizons: Vec<f64>,
    pub transversality_paths: usize,
    pub transversality_tol: f64,
    pub dpp_horizon: f64,
    pub dpp_paths: usize,
    pub foc_tol: f64,
    /// Largest share of nodes with abatement strictly inside `(0, bar_theta)`.
    pub tie_share: f64,
    /// Relative sup-norm tolerance between nested models.
    pub nesting_tol: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            grid_budget: 0.02,
            core_share: 0.6,
            closed_form_tol: 0.01,
            // Full abatement: with any less, pollution grows with capital
            // until repeated disasters ruin a fixed consumption level.
            suboptimal: vec![
                ConstantRule { consumption_share: 0.05, theta_share: 1.0 },
                ConstantRule { consumption_share: 0.1, theta_share: 1.0 },
                ConstantRule { consumption_share: 0.15, theta_share: 1.0 },
            ],
            suboptimal_paths: 2000,
            martingale_paths: 4000,
            martingale_horizon: 50.0,
            transversality_horizons: vec![50.0, 100.0, 200.0],
            transversality_paths: 1000,
            transversality_tol: 1e-3,
            dpp_horizon: 1.0,
            dpp_paths: 4000,
            foc_tol: 1e-6,
            tie_share: 0.02,
            nesting_tol: 1e-6,
        }
    }
}

impl VerifySettings {
    pub fn validate(&self) -> Result<(), VerifyError> {
        let bad = |m: String| Err(VerifyError::NotApplicable(m));
        if !(self.grid_budget >= 0.0 && self.closed_form_tol > 0.0 && self.foc_tol > 0.0 && self.nesting_tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if !(self.core_share > 0.0 && self.core_share <= 1.0) {
            return bad(format!("core_share = {}", self.core_share));
        }
        if [self.suboptimal_paths, self.martingale_paths, self.transversality_paths, self.dpp_paths].iter().any(|&n| n < 2) {
            return bad("every ensemble needs at least 2 paths".into());
        }
        if self.transversality_horizons.is_empty() || self.transversality_horizons.windows(2).any(|w| w[1] <= w[0]) {
            return bad("transversality horizons must be increasing and non-empty".into());
        }
        if !(self.martingale_horizon > 0.0 && self.dpp_horizon > 0.0) {
            return bad("horizons must be positive".into());
        }
        for r in &self.suboptimal {
            if !(r.consumption_share > 0.0 && (0.0..=1.0).contains(&r.theta_share)) {
                return bad(format!("constant rule {r:?}"));
            }
        }
        Ok(())
    }
}

/// Five states on the diagonal of the grid, at 30% to 70% of each log-axis.
pub fn default_probes(spec: &GridSpec) -> Vec<State> {
    [0.3, 0.4, 0.5, 0.6, 0.7]
        .iter()
        .map(|f| State {
            k: (spec.k_lo.ln() + f * (spec.k_hi / spec.k_lo).ln()).exp(),
            p: (spec.p_lo.ln() + f * (spec.p_hi / spec.p_lo).ln()).exp(),
        })
        .collect()
}

/// Whether every path of the model is the same: no effective disasters and
/// no pollution noise.
pub fn is_deterministic(prm: &ModelParams) -> bool {
    let no_disasters = (prm.lambda0 == 0.0 && prm.lambda1 == 0.0) || prm.delta == 0.0;
    no_disasters && prm.sigma_p == 0.0
}

/// Whether the closed-form candidate solves the model exactly.
pub fn is_decoupled(prm: &ModelParams) -> bool {
    prm.phi == 0.0 && prm.lambda0 == 0.0 && prm.lambda1 == 0.0 && prm.sigma_p == 0.0
}

// Sub-seed tags; each ensemble of the suite draws from its own family of streams.
const TAG_CANDIDATE: u64 = 1;
const TAG_FIELD: u64 = 2;
const TAG_SUBOPTIMAL: u64 = 3;
const TAG_MARTINGALE: u64 = 4;
const TAG_MARKS: u64 = 5;
const TAG_TRANSVERSALITY: u64 = 6;
const TAG_DPP: u64 = 7;

fn seed(master: u64, tag: u64, probe: usize, sub: usize) -> u64 {
    derive_seed(master, tag << 32 | (probe as u64) << 16 | sub as u64)
}

fn paths_for(prm: &ModelParams, n: usize) -> usize {
    if is_deterministic(prm) {
        2
    } else {
        n
    }
}

fn estimate(model: &Model, policy: &Policy, s0: State, n: usize, t_end: f64, sim: &SimSpec, seed: u64) -> Result<ValueEstimate, VerifyError> {
    let h = Horizon::new(t_end, sim.dt)?;
    let n = paths_for(&model.params, n);
    let out = ensemble(model, policy, s0, h, &sim.opts, n, seed, |_| NoObserver)?;
    let sums: Vec<PathSummary> = out.into_iter().map(|(s, _)| s).collect();
    Ok(summarize(&sums, model.params.rho, t_end)?)
}

/// Relative sup-norm `max |a - b| / max |b|` over the central share of the grid.
pub fn core_sup_error(grid: &Grid, a: &[f64], b: &[f64], share: f64) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for j in Grid::central_range(grid.n_p(), share) {
        for i in Grid::central_range(grid.n_k(), share) {
            let m = grid.idx(i, j);
            num = num.max((a[m] - b[m]).abs());
            den = den.max(b[m].abs());
        }
    }
    num / den
}

fn probe_name(base: &str, n: usize) -> String {
    format!("{base}[probe {n}]")
}

/// Closed-form regime: the solved field against the candidate value, and
/// Monte Carlo under the candidate feedback at every probe.
pub fn check_candidate_closed_form(
    model: &Model,
    sol: &Solution,
    sim: &SimSpec,
    probes: &[State],
    settings: &VerifySettings,
) -> Result<Vec<Check>, VerifyError> {
    let prm = &model.params;
    if !is_decoupled(prm) {
        return Err(VerifyError::NotApplicable("closed form needs phi = 0, lambda = 0 and sigma_P = 0".into()));
    }
    let cv = CandidateValue::decoupled(prm)?;
    let g = &sol.value.grid;
    let exact = ValueField::from_fn(g.clone(), *prm, |s| cv.value(s, prm));
    let err = core_sup_error(g, &sol.value.values, &exact.values, settings.core_share);
    let mut out = vec![Check::at_most(
        "closed_form_sup_norm",
        ANCHOR_CANDIDATE,
        err,
        settings.closed_form_tol,
        format!("psi = {}, x = {}, central {}% of the grid", cv.psi, cv.x, 100.0 * settings.core_share),
    )];
    for (n, s0) in probes.iter().enumerate() {
        let est = estimate(model, &Policy::Candidate(cv), *s0, sim.n_paths, sim.t_end, sim, seed(sim.master_seed, TAG_CANDIDATE, n, 0))?;
        let v = cv.value(*s0, prm);
        out.push(Check::at_most(
            probe_name("closed_form_mc", n),
            ANCHOR_CANDIDATE,
            (est.mean - v).abs(),
            3.0 * est.stderr + est.tail_bound,
            format!("K = {}, P = {}: MC {} (stderr {}, tail {}) vs candidate {v}", s0.k, s0.p, est.mean, est.stderr, est.tail_bound),
        ));
    }
    Ok(out)
}

/// Monte Carlo under the solved feedback against the solved value at each probe.
pub fn check_mc_vs_solver(model: &Model, sol: &Solution, sim: &SimSpec, probes: &[State], settings: &VerifySettings) -> Result<Vec<Check>, VerifyError> {
    let policy = Policy::field(&sol.policy);
    let mut out = Vec::new();
    for (n, s0) in probes.iter().enumerate() {
        let est = estimate(model, &policy, *s0, sim.n_paths, sim.t_end, sim, seed(sim.master_seed, TAG_FIELD, n, 0))?;
        let v = sol.value.interpolate(s0.k, s0.p);
        out.push(Check::at_most(
            probe_name("mc_vs_solver", n),
            ANCHOR_MC,
            (est.mean - v).abs(),
            3.0 * est.stderr + est.tail_bound + settings.grid_budget * v.abs(),
            format!(
                "K = {}, P = {}: MC {} (stderr {}, tail {}, {} paths, {} terminated) vs solver {v}",
                s0.k, s0.p, est.mean, est.stderr, est.tail_bound, est.n_paths, est.terminated
            ),
        ));
    }
    Ok(out)
}

/// Constant policies never beat the value: `MC <= v + 3 stderr`.
pub fn check_suboptimal(model: &Model, sol: &Solution, sim: &SimSpec, probes: &[State], settings: &VerifySettings) -> Result<Vec<Check>, VerifyError> {
    let prm = &model.params;
    let mut out = Vec::new();
    for (n, s0) in probes.iter().enumerate() {
        let v = sol.value.interpolate(s0.k, s0.p);
        for (r, rule) in settings.suboptimal.iter().enumerate() {
            let policy = rule.policy(*s0, prm);
            let est = estimate(model, &policy, *s0, settings.suboptimal_paths, sim.t_end, sim, seed(sim.master_seed, TAG_SUBOPTIMAL, n, r))?;
            out.push(Check::at_most(
                format!("suboptimal[probe {n}, policy {r}]"),
                ANCHOR_SUBOPTIMAL,
                est.mean - v,
                3.0 * est.stderr,
                format!("{} at K = {}, P = {}: MC {} (stderr {}) vs value {v}", rule.label(), s0.k, s0.p, est.mean, est.stderr),
            ));
        }
    }
    Ok(out)
}

/// Accumulates, along one path, the jump sums and compensators of the three
/// test integrands `1`, `e^{-rho s}` and `e^{-rho s} (v(omega K, P) - v(K, P))`.
///
/// The disaster rate is frozen at the start of each step in the simulator,
/// so the compensator is the left-point sum of that rate; only the discount
/// factor is integrated exactly over the step.
struct Martingale<'a> {
    prm: &'a ModelParams,
    marks: &'a MarkModel,
    mass: f64,
    value: &'a ValueField,
    dt: f64,
    steps: usize,
    step_discount: f64,
    step_integral: f64,
    disc: f64,
    rng: PathRng,
    jumps: [f64; 3],
    comp: [f64; 3],
}

impl Martingale<'_> {
    fn increment(&self, k: f64, p: f64, mark: f64) -> f64 {
        let w = survival_fraction(k, p, self.prm, Some(mark));
        self.value.interpolate(w * k, p) - self.value.interpolate(k, p)
    }

    /// `E_zeta[v(omega K, P) - v(K, P)]`; a single draw for Gamma marks keeps
    /// the compensator unbiased.
    fn mean_increment(&mut self, k: f64, p: f64) -> f64 {
        match self.marks {
            MarkModel::None => self.increment(k, p, 1.0),
            MarkModel::Discrete { atoms, weights } => {
                atoms.iter().zip(weights).map(|(z, w)| w / self.mass * self.increment(k, p, *z)).sum()
            }
            MarkModel::Gamma => {
                let z = sample_mark(p, self.marks, &mut self.rng).unwrap_or(1.0);
                self.increment(k, p, z)
            }
        }
    }
}

impl Observer for Martingale<'_> {
    fn at_time(&mut self, step: usize, _t: f64, k: f64, p: f64, _control: Control, _running: f64) {
        if step >= self.steps {
            return;
        }
        let rate = intensity(p, self.prm) * self.mass;
        let d = self.disc * self.step_integral;
        self.comp[0] += rate * self.dt;
        self.comp[1] += rate * d;
        let dv = self.mean_increment(k, p);
        self.comp[2] += rate * d * dv;
        self.disc *= self.step_discount;
    }

    fn on_jump(&mut self, t: f64, k_before: f64, p: f64, event: &JumpEvent) {
        let d = (-self.prm.rho * t).exp();
        self.jumps[0] += 1.0;
        self.jumps[1] += d;
        self.jumps[2] += d * (self.value.interpolate(event.survival * k_before, p) - self.value.interpolate(k_before, p));
    }
}

/// Compensated jump sums have mean zero, from the middle probe under the
/// solved feedback.
pub fn check_martingale(model: &Model, sol: &Solution, sim: &SimSpec, state0: State, settings: &VerifySettings) -> Result<Vec<Check>, VerifyError> {
    let prm = &model.params;
    if prm.lambda0 == 0.0 && prm.lambda1 == 0.0 {
        return Err(VerifyError::NotApplicable("no disasters".into()));
    }
    let t_end = settings.martingale_horizon;
    let h = Horizon::new(t_end, sim.dt)?;
    let policy = Policy::field(&sol.policy);
    let mark_seed = seed(sim.master_seed, TAG_MARKS, 0, 0);
    let (dt, rho) = (sim.dt, prm.rho);
    let out = ensemble(model, &policy, state0, h, &sim.opts, settings.martingale_paths, seed(sim.master_seed, TAG_MARTINGALE, 0, 0), |i| {
        Martingale {
            prm,
            marks: &model.marks,
            mass: model.marks.total_mass(),
            value: &sol.value,
            dt,
            steps: h.steps,
            step_discount: (-rho * dt).exp(),
            step_integral: -(-rho * dt).exp_m1() / rho,
            disc: 1.0,
            rng: child(mark_seed, i as u64),
            jumps: [0.0; 3],
            comp: [0.0; 3],
        }
    })?;
    let names = ["martingale_count", "martingale_discounted", "martingale_value_increment"];
    let mut checks = Vec::new();
    for (q, name) in names.iter().enumerate() {
        let xs: Vec<f64> = out.iter().map(|(_, o)| o.jumps[q] - o.comp[q]).collect();
        let comp: Vec<f64> = out.iter().map(|(_, o)| o.comp[q]).collect();
        let (m, se) = mean_stderr(&xs);
        let (mc, _) = mean_stderr(&comp);
        checks.push(Check::at_most(
            *name,
            ANCHOR_MARTINGALE,
            m.abs(),
            3.0 * se,
            format!("T = {t_end}, {} paths: mean {m} (stderr {se}), mean compensator {mc}", xs.len()),
        ));
    }
    Ok(checks)
}

/// Records `e^{-rho t} |v(K_t, P_t)|` at chosen steps.
struct Terminal<'a, V> {
    v: &'a V,
    rho: f64,
    at: &'a [usize],
    out: Vec<f64>,
}

impl<V: Fn(State) -> f64> Observer for Terminal<'_, V> {
    fn at_time(&mut self, step: usize, t: f64, k: f64, p: f64, _control: Control, _running: f64) {
        if self.at.contains(&step) {
            self.out.push((-self.rho * t).exp() * (self.v)(State { k, p }).abs());
        }
    }
}

/// `E[e^{-rho T} |v(K_T, P_T)|]` decreases over the horizons and ends below
/// `transversality_tol * |v(state0)|`.
pub fn check_transversality<V: Fn(State) -> f64 + Sync>(
    model: &Model,
    policy: &Policy,
    v: &V,
    state0: State,
    sim: &SimSpec,
    settings: &VerifySettings,
) -> Result<Vec<Check>, VerifyError> {
    let hs = &settings.transversality_horizons;
    let last = *hs.last().expect("validated non-empty");
    let h = Horizon::new(last, sim.dt)?;
    let at: Vec<usize> = hs.iter().map(|t| Horizon::new(*t, sim.dt).map(|h| h.steps)).collect::<Result<_, _>>()?;
    let n = paths_for(&model.params, settings.transversality_paths);
    let rho = model.params.rho;
    let out = ensemble(model, policy, state0, h, &sim.opts, n, seed(sim.master_seed, TAG_TRANSVERSALITY, 0, 0), |_| Terminal {
        v,
        rho,
        at: &at,
        out: Vec::with_capacity(at.len()),
    })?;
    let sums: Vec<PathSummary> = out.iter().map(|(s, _)| *s).collect();
    summarize(&sums, rho, last)?;
    let kept: Vec<&Vec<f64>> = out.iter().filter(|(s, _)| !s.terminated).map(|(_, o)| &o.out).collect();
    let means: Vec<f64> = (0..at.len()).map(|q| mean_stderr(&kept.iter().map(|o| o[q]).collect::<Vec<_>>()).0).collect();
    let worst_rise = means.windows(2).map(|w| (w[1] - w[0]) / w[0]).fold(f64::NEG_INFINITY, f64::max);
    let v0 = v(state0).abs();
    let listing = hs.iter().zip(&means).map(|(t, m)| format!("T = {t}: {m}")).collect::<Vec<_>>().join("; ");
    Ok(vec![
        Check {
            name: "transversality_monotone".into(),
            anchor: ANCHOR_TRANSVERSALITY.into(),
            statistic: worst_rise,
            tolerance: 0.0,
            passed: worst_rise < 0.0,
            detail: format!("largest relative change between consecutive horizons; {listing}"),
        },
        Check::at_most(
            "transversality_final",
            ANCHOR_TRANSVERSALITY,
            means.last().unwrap() / v0,
            settings.transversality_tol,
            format!("relative to |v(state0)| = {v0}"),
        ),
    ])
}

/// `h`-step recursion `v(x) = E[int_0^h e^{-rho s} U ds + e^{-rho h} v(X_h)]`
/// under the solved feedback (equality), and `>=` under constant policies.
pub fn check_dpp(model: &Model, sol: &Solution, sim: &SimSpec, probes: &[State], settings: &VerifySettings) -> Result<Vec<Check>, VerifyError> {
    let prm = &model.params;
    let h = Horizon::new(settings.dpp_horizon, sim.dt)?;
    let disc_h = (-prm.rho * settings.dpp_horizon).exp();
    let n = paths_for(prm, settings.dpp_paths);
    let field = Policy::field(&sol.policy);
    let recursion = |policy: &Policy, s0: State, seed: u64| -> Result<(f64, f64), VerifyError> {
        let out = ensemble(model, policy, s0, h, &sim.opts, n, seed, |_| NoObserver)?;
        let sums: Vec<PathSummary> = out.into_iter().map(|(s, _)| s).collect();
        summarize(&sums, prm.rho, settings.dpp_horizon)?;
        let ys: Vec<f64> = sums
            .iter()
            .filter(|s| !s.terminated)
            .map(|s| s.integral + disc_h * sol.value.interpolate(s.final_state.k, s.final_state.p))
            .collect();
        Ok(mean_stderr(&ys))
    };
    let mut out = Vec::new();
    for (n, s0) in probes.iter().enumerate() {
        let v = sol.value.interpolate(s0.k, s0.p);
        let (m, se) = recursion(&field, *s0, seed(sim.master_seed, TAG_DPP, n, 0))?;
        out.push(Check::at_most(
            probe_name("dpp_equality", n),
            ANCHOR_DPP,
            (m - v).abs(),
            3.0 * se + settings.grid_budget * v.abs(),
            format!("h = {}: recursion {m} (stderr {se}) vs value {v}", settings.dpp_horizon),
        ));
        for (r, rule) in settings.suboptimal.iter().enumerate() {
            let (m, se) = recursion(&rule.policy(*s0, prm), *s0, seed(sim.master_seed, TAG_DPP, n, r + 1))?;
            out.push(Check::at_most(
                format!("dpp_inequality[probe {n}, policy {r}]"),
                ANCHOR_DPP,
                m - v,
                3.0 * se,
                format!("{}: recursion {m} (stderr {se}) vs value {v}", rule.label()),
            ));
        }
    }
    Ok(out)
}

/// `U_C(C) = v_K` at interior consumption optima; at zero-drift nodes `U_C`
/// lies between the forward and backward slopes.
pub fn check_foc(model: &Model, sol: &Solution, settings: &VerifySettings) -> Check {
    let prm = &model.params;
    let (g, v, pol) = (&sol.value.grid, &sol.value, &sol.policy);
    let mut worst = 0.0f64;
    let mut counted = 0;
    for j in 1..g.n_p() - 1 {
        for i in 1..g.n_k() - 1 {
            let m = g.idx(i, j);
            let uc = marginal_utility(pol.consumption[m], prm);
            let (fk, bk) = (v.dk_fwd[m], v.dk_bwd[m]);
            let err = match pol.regime[m] {
                ConsumptionRegime::Forward => (uc - fk).abs() / fk.abs(),
                ConsumptionRegime::Backward => (uc - bk).abs() / bk.abs(),
                ConsumptionRegime::ZeroDrift => (fk - uc).max(uc - bk).max(0.0) / uc,
                ConsumptionRegime::Bound => continue,
            };
            worst = worst.max(err);
            counted += 1;
        }
    }
    Check::at_most(
        "foc_consumption",
        ANCHOR_FOC,
        worst,
        settings.foc_tol,
        format!("largest relative violation over {counted} interior nodes with an inactive consumption bound"),
    )
}

/// The extracted abatement takes the values `0` and `bar_theta` except on a small tie band.
pub fn check_bang_bang(model: &Model, sol: &Solution, settings: &VerifySettings) -> Check {
    let share = sol.policy.interior_theta_share(model.params.bar_theta());
    Check::at_most(
        "bang_bang_abatement",
        ANCHOR_BANG_BANG,
        share,
        settings.tie_share,
        "share of nodes with 0 < theta < bar_theta".into(),
    )
}

/// Interior fixed-point residual and monotonicity of the solved field.
pub fn check_solution(sol: &Solution, scheme: &SchemeOpts) -> Vec<Check> {
    let (wk, wp) = sol.value.monotonicity_violation();
    let scale_k = sol.value.v_k.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale_p = sol.value.v_p.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    vec![
        Check::at_most(
            "hjb_residual",
            ANCHOR_RESIDUAL,
            sol.report.interior_residual,
            10.0 * scheme.tol,
            format!("max |rhs - rho v| / (1 + |rho v|) after {} iterations", sol.report.iterations),
        ),
        Check::at_most(
            "value_monotonicity",
            ANCHOR_MONOTONE,
            (wk / scale_k).max(wp / scale_p),
            1e-9,
            format!("largest interior v_K < 0 is {wk}, largest v_P > 0 is {wp}"),
        ),
    ]
}

/// Solve two models that must coincide and compare their fields.
fn nesting(name: &str, a: &Model, b: &Model, grid: &Grid, scheme: &SchemeOpts, tol: f64, what: &str) -> Result<Check, VerifyError> {
    let sa = solve(a, grid, scheme)?;
    let sb = solve(b, grid, scheme)?;
    let g = &sa.value.grid;
    let err = core_sup_error(g, &sa.value.values, &sb.value.values, 1.0);
    Ok(Check::at_most(name, ANCHOR_NESTING, err, tol, what.to_string()))
}

/// NHPP with `lambda1 = 0` against HPP with the same constants.
pub fn check_nesting_hpp(model: &Model, grid: &Grid, scheme: &SchemeOpts, settings: &VerifySettings) -> Result<Check, VerifyError> {
    let mut prm = model.params;
    if prm.sigma_p != 0.0 || prm.variant.is_marked() {
        return Err(VerifyError::NotApplicable("HPP nesting needs an unmarked model without pollution noise".into()));
    }
    prm.lambda1 = 0.0;
    let hpp = Model::unmarked(ModelParams { variant: Variant::Hpp, ..prm })?;
    let nhpp = Model::unmarked(ModelParams { variant: Variant::Nhpp, ..prm })?;
    nesting("nesting_nhpp_hpp", &nhpp, &hpp, grid, scheme, settings.nesting_tol, "NHPP with lambda1 = 0 vs HPP, relative sup-norm")
}

/// Marked model with a single unit atom against its unmarked twin.
pub fn check_nesting_unit_atom(model: &Model, grid: &Grid, scheme: &SchemeOpts, settings: &VerifySettings) -> Result<Check, VerifyError> {
    let prm = model.params;
    let (plain, marked) = if prm.sigma_p > 0.0 {
        (Variant::JumpDiffusion, Variant::Prm)
    } else {
        (Variant::Nhpp, Variant::PrmNoDiffusion)
    };
    let a = Model::unmarked(ModelParams { variant: plain, ..prm })?;
    let b = Model::new(ModelParams { variant: marked, ..prm }, MarkModel::Discrete { atoms: vec![1.0], weights: vec![1.0] })?;
    nesting(
        "nesting_unit_atom",
        &b,
        &a,
        grid,
        scheme,
        settings.nesting_tol,
        &format!("{} with a single unit atom vs {}, relative sup-norm", marked.name(), plain.name()),
    )
}

/// Everything the suite needs besides the model.
#[derive(Debug, Clone)]
pub struct SuiteInputs<'a> {
    pub model: &'a Model,
    pub grid: &'a Grid,
    pub scheme: &'a SchemeOpts,
    pub sim: &'a SimSpec,
    pub probes: &'a [State],
    pub settings: &'a VerifySettings,
}

/// Run every check that applies to the model, given its solution.
pub fn run_suite(inp: &SuiteInputs, sol: &Solution) -> Result<Vec<Check>, VerifyError> {
    let (model, sim, probes, st) = (inp.model, inp.sim, inp.probes, inp.settings);
    let prm = &model.params;
    st.validate()?;
    sim.validate()?;
    let mid = probes[probes.len() / 2];
    let mut checks = check_solution(sol, inp.scheme);
    checks.push(check_foc(model, sol, st));
    if prm.bar_theta() > 0.0 {
        checks.push(check_bang_bang(model, sol, st));
    }
    let timed = |name: &str, checks: &mut Vec<Check>, f: &dyn Fn() -> Result<Vec<Check>, VerifyError>| {
        let t = Instant::now();
        checks.extend(f()?);
        info!("{name}: {:.1?}", t.elapsed());
        Ok::<(), VerifyError>(())
    };
    if is_decoupled(prm) {
        timed("closed form", &mut checks, &|| check_candidate_closed_form(model, sol, sim, probes, st))?;
    }
    timed("MC vs solver", &mut checks, &|| check_mc_vs_solver(model, sol, sim, probes, st))?;
    timed("suboptimal policies", &mut checks, &|| check_suboptimal(model, sol, sim, probes, st))?;
    if prm.lambda0 > 0.0 || prm.lambda1 > 0.0 {
        timed("martingale", &mut checks, &|| check_martingale(model, sol, sim, mid, st))?;
    }
    timed("transversality", &mut checks, &|| {
        if is_decoupled(prm) {
            let cv = CandidateValue::decoupled(prm)?;
            check_transversality(model, &Policy::Candidate(cv), &|s: State| cv.value(s, prm), mid, sim, st)
        } else {
            let v = |s: State| sol.value.interpolate(s.k, s.p);
            check_transversality(model, &Policy::field(&sol.policy), &v, mid, sim, st)
        }
    })?;
    timed("dynamic programming", &mut checks, &|| check_dpp(model, sol, sim, probes, st))?;
    timed("nesting", &mut checks, &|| {
        Ok(vec![match prm.variant {
            Variant::Hpp | Variant::Nhpp => check_nesting_hpp(model, inp.grid, inp.scheme, st)?,
            Variant::JumpDiffusion | Variant::Prm | Variant::PrmNoDiffusion => {
                check_nesting_unit_atom(model, inp.grid, inp.scheme, st)?
            }
        }])
    })?;
    Ok(checks)
}

/// Machine-readable outcome of a verification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub variant: Variant,
    pub config_hash: String,
    pub master_seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn new(variant: Variant, config_hash: String, master_seed: u64, checks: Vec<Check>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { variant, config_hash, master_seed, passed, checks }
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per check: `name,statistic,tolerance,passed,anchor`.
    pub fn write_csv<W: Write>(&self, mut w: W, header_comment: &str) -> io::Result<()> {
        writeln!(w, "# {header_comment}")?;
        writeln!(w, "name,statistic,tolerance,passed,anchor")?;
        for c in &self.checks {
            writeln!(w, "\"{}\",{},{},{},\"{}\"", c.name, c.statistic, c.tolerance, c.passed, c.anchor)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures;

    fn jumpy() -> ModelParams {
        ModelParams { phi: 0.5, alpha: 0.05, delta: 0.1, xi: 1.0, lambda0: 0.05, ..fixtures::decoupled() }
    }

    fn grid(n: usize) -> Grid {
        Grid::new(0.1, 10.0, n, 0.1, 10.0, n).unwrap()
    }

    fn sim(n_paths: usize, t_end: f64, dt: f64) -> SimSpec {
        SimSpec { n_paths, t_end, dt, master_seed: 11, opts: Default::default() }
    }

    fn solved(model: &Model, g: &Grid) -> Solution {
        solve(model, g, &SchemeOpts::default()).unwrap()
    }

    /// Same solution with its value field replaced by `f(v)`.
    fn corrupt(sol: &Solution, f: impl Fn(f64) -> f64) -> Solution {
        let v = &sol.value;
        let values = v.values.iter().map(|x| f(*x)).collect();
        Solution { value: ValueField::from_values(v.grid.clone(), v.params, values), ..sol.clone() }
    }

    fn all_pass(checks: &[Check]) -> bool {
        checks.iter().all(|c| c.passed)
    }

    #[test]
    fn closed_form_regime_passes() {
        let m = Model::unmarked(fixtures::decoupled()).unwrap();
        let g = Grid::new(0.25, 4.0, 128, 0.3, 3.0, 128).unwrap();
        let sol = solved(&m, &g);
        let probes = default_probes(&g.spec);
        let checks = check_candidate_closed_form(&m, &sol, &sim(2, 200.0, 1.0 / 256.0), &probes, &VerifySettings::default()).unwrap();
        assert_eq!(checks.len(), 1 + probes.len());
        assert!(all_pass(&checks), "{checks:#?}");
    }

    #[test]
    fn closed_form_refuses_coupled_models() {
        let m = Model::unmarked(jumpy()).unwrap();
        let g = grid(24);
        let sol = solved(&m, &g);
        let r = check_candidate_closed_form(&m, &sol, &sim(2, 10.0, 0.125), &default_probes(&g.spec), &VerifySettings::default());
        assert!(matches!(r, Err(VerifyError::NotApplicable(_))));
    }

    #[test]
    fn monte_carlo_agrees_with_the_solver_and_catches_a_wrong_value() {
        let m = Model::unmarked(jumpy()).unwrap();
        let g = grid(64);
        let sol = solved(&m, &g);
        let probes = [State { k: 1.0, p: 1.0 }];
        let spec = sim(400, 100.0, 1.0 / 32.0);
        let st = VerifySettings::default();
        let good = check_mc_vs_solver(&m, &sol, &spec, &probes, &st).unwrap();
        assert!(all_pass(&good), "{good:#?}");
        let bad = check_mc_vs_solver(&m, &corrupt(&sol, |v| 0.8 * v), &spec, &probes, &st).unwrap();
        assert!(!bad[0].passed, "{bad:#?}");
    }

    #[test]
    fn constant_policies_stay_below_the_value() {
        let m = Model::unmarked(jumpy()).unwrap();
        let g = grid(48);
        let sol = solved(&m, &g);
        let probes = [State { k: 1.0, p: 1.0 }, State { k: 2.0, p: 0.5 }];
        let spec = sim(100, 100.0, 1.0 / 16.0);
        let st = VerifySettings { suboptimal_paths: 100, ..Default::default() };
        let checks = check_suboptimal(&m, &sol, &spec, &probes, &st).unwrap();
        assert_eq!(checks.len(), probes.len() * st.suboptimal.len());
        assert!(all_pass(&checks), "{checks:#?}");
        // a value far below every policy's gain is caught
        let low = check_suboptimal(&m, &corrupt(&sol, |v| 100.0 * v), &spec, &probes, &st).unwrap();
        assert!(low.iter().all(|c| !c.passed));
    }

    #[test]
    fn compensated_sums_have_zero_mean() {
        let st = VerifySettings { martingale_paths: 1000, martingale_horizon: 20.0, ..Default::default() };
        let spec = sim(2, 20.0, 1.0 / 32.0);
        let g = grid(32);
        let s0 = State { k: 1.0, p: 1.0 };
        let nhpp = Model::unmarked(ModelParams { lambda0: 0.1, lambda1: 0.2, variant: Variant::Nhpp, ..jumpy() }).unwrap();
        let gamma = Model::new(
            ModelParams { lambda0: 0.1, lambda1: 0.2, xi: 0.0, sigma_p: 0.1, variant: Variant::Prm, ..jumpy() },
            MarkModel::Gamma,
        )
        .unwrap();
        for m in [nhpp, gamma] {
            let sol = solved(&m, &g);
            let checks = check_martingale(&m, &sol, &spec, s0, &st).unwrap();
            assert_eq!(checks.len(), 3);
            assert!(all_pass(&checks), "{checks:#?}");
        }
        let calm = Model::unmarked(fixtures::decoupled()).unwrap();
        let sol = solved(&calm, &g);
        assert!(matches!(check_martingale(&calm, &sol, &spec, s0, &st), Err(VerifyError::NotApplicable(_))));
    }

    #[test]
    fn transversality_needs_long_horizons() {
        let prm = fixtures::decoupled();
        let m = Model::unmarked(prm).unwrap();
        let cv = CandidateValue::decoupled(&prm).unwrap();
        let v = |s: State| cv.value(s, &prm);
        let s0 = State { k: 1.0, p: 1.0 };
        let spec = sim(2, 200.0, 1.0 / 64.0);
        let long = check_transversality(&m, &Policy::Candidate(cv), &v, s0, &spec, &VerifySettings::default()).unwrap();
        assert!(all_pass(&long), "{long:#?}");
        let st = VerifySettings { transversality_horizons: vec![1.0, 2.0, 4.0], ..Default::default() };
        let short = check_transversality(&m, &Policy::Candidate(cv), &v, s0, &spec, &st).unwrap();
        assert!(short[0].passed && !short[1].passed, "{short:#?}");
    }

    #[test]
    fn dynamic_programming_holds_in_the_closed_form_regime() {
        let m = Model::unmarked(fixtures::decoupled()).unwrap();
        let g = Grid::new(0.25, 4.0, 96, 0.3, 3.0, 96).unwrap();
        let sol = solved(&m, &g);
        let probes = default_probes(&g.spec);
        let checks = check_dpp(&m, &sol, &sim(2, 10.0, 1.0 / 256.0), &probes, &VerifySettings::default()).unwrap();
        assert_eq!(checks.len(), probes.len() * 4);
        assert!(all_pass(&checks), "{checks:#?}");
    }

    #[test]
    fn solved_fields_pass_structural_checks() {
        let m = Model::unmarked(jumpy()).unwrap();
        let sol = solved(&m, &grid(64));
        let st = VerifySettings::default();
        let mut checks = check_solution(&sol, &SchemeOpts::default());
        checks.push(check_foc(&m, &sol, &st));
        assert!(all_pass(&checks), "{checks:#?}");
        let bb = check_bang_bang(&m, &sol, &st);
        assert!(bb.statistic > 0.0 && bb.statistic < 0.1, "{bb:?}");
        // a field decreasing in capital is flagged
        let flipped = corrupt(&sol, |v| -v);
        assert!(!check_solution(&flipped, &SchemeOpts::default())[1].passed);
    }

    #[test]
    fn nested_models_coincide() {
        let g = grid(24);
        let st = VerifySettings::default();
        let nhpp = Model::unmarked(ModelParams { lambda1: 0.1, variant: Variant::Nhpp, ..jumpy() }).unwrap();
        let c = check_nesting_hpp(&nhpp, &g, &SchemeOpts::default(), &st).unwrap();
        assert_eq!(c.statistic, 0.0);
        let c = check_nesting_unit_atom(&nhpp, &g, &SchemeOpts::default(), &st).unwrap();
        assert!(c.passed, "{c:?}");
        let jd = Model::unmarked(ModelParams { sigma_p: 0.1, variant: Variant::JumpDiffusion, ..jumpy() }).unwrap();
        assert!(check_nesting_unit_atom(&jd, &g, &SchemeOpts::default(), &st).unwrap().passed);
        assert!(matches!(check_nesting_hpp(&jd, &g, &SchemeOpts::default(), &st), Err(VerifyError::NotApplicable(_))));
    }

    #[test]
    fn report_round_trips_and_fails_on_any_check() {
        let ok = Check::at_most("a", ANCHOR_MC, 1.0, 2.0, String::new());
        let bad = Check::at_most("b", ANCHOR_DPP, 3.0, 2.0, "x".into());
        let r = VerificationReport::new(Variant::Hpp, "h".into(), 5, vec![ok.clone(), bad]);
        assert!(!r.passed);
        assert_eq!(r.failures().count(), 1);
        let back: VerificationReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let mut csv = Vec::new();
        r.write_csv(&mut csv, "config_hash=h, master_seed=5").unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 2 + 2);
        assert!(text.starts_with("# config_hash=h, master_seed=5\n"));
        assert!(VerificationReport::new(Variant::Hpp, "h".into(), 5, vec![ok]).passed);
    }

    #[test]
    fn settings_and_probes_are_validated() {
        assert!(VerifySettings::default().validate().is_ok());
        for st in [
            VerifySettings { core_share: 0.0, ..Default::default() },
            VerifySettings { dpp_paths: 1, ..Default::default() },
            VerifySettings { transversality_horizons: vec![100.0, 50.0], ..Default::default() },
            VerifySettings { suboptimal: vec![ConstantRule { consumption_share: 0.1, theta_share: 2.0 }], ..Default::default() },
        ] {
            assert!(st.validate().is_err(), "{st:?}");
        }
        let g = grid(16);
        let probes = default_probes(&g.spec);
        assert_eq!(probes.len(), 5);
        assert!((probes[2].k - 1.0).abs() < 1e-12 && (probes[2].p - 1.0).abs() < 1e-12);
        assert!(probes.windows(2).all(|w| w[1].k > w[0].k && w[1].p > w[0].p));
    }

    #[test]
    fn sub_seeds_differ_between_checks() {
        let mut s: Vec<u64> = (1..=7).flat_map(|tag| (0..5).map(move |p| seed(9, tag, p, 0))).collect();
        let n = s.len();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), n);
    }
}
