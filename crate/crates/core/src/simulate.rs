//! Controlled path simulation and Monte Carlo value estimates.
//!
//! Capital moves by explicit Euler on its drift. Pollution moves on the log
//! scale, `ln P += (b_P / P - sigma_P^2 / 2) dt + sigma_P sqrt(dt) Z`, so it
//! stays positive. Disasters are drawn by thinning with the rate frozen at
//! the start of the step and hit capital after the drift update, in time
//! order.

use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::PolicyField;
use crate::grid::Grid;
use crate::jumps::{sample_mark, JumpError, JumpEvent, ThinningClock};
use crate::model::{
    foc_abatement, intensity, survival_fraction, utility, CandidateValue, Control, Model,
    ModelError, ModelParams, State,
};
use crate::rng::{child, PathRng};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Jump(#[from] JumpError),
    #[error("invalid simulation setting: {0}")]
    Invalid(String),
    #[error("thinning bound {rate_dt} = majorant * dt exceeds {limit} at t = {t}, P = {p}")]
    StepTooLong { rate_dt: f64, limit: f64, t: f64, p: f64 },
    #[error("{terminated} of {n_paths} paths hit the capital floor (more than 1%)")]
    TooManyTerminated { terminated: usize, n_paths: usize },
}

/// Feedback interpolated from a solved policy grid: consumption per unit of
/// capital and abatement, bilinear in `(K, P)` on each cell of the
/// log-spaced grid, held constant beyond the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPolicy {
    grid: Grid,
    /// Corner values of every cell, one cache line each; diffusing paths
    /// change cells often and a refill then touches a single line.
    cells: Vec<Corners>,
    inv_dk: Vec<f64>,
    inv_dp: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[repr(C, align(64))]
struct Corners {
    ratio: [f64; 4],
    theta: [f64; 4],
}

/// Cell a path is currently in, with its corner values cached; the search
/// for the next cell starts here.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Cursor {
    i: usize,
    j: usize,
    // Validity window of the cached cell (infinite on the outer sides).
    k_lo: f64,
    k_hi: f64,
    p_lo: f64,
    p_hi: f64,
    k0: f64,
    p0: f64,
    inv_dk: f64,
    inv_dp: f64,
    corners: Corners,
}

impl Default for Cursor {
    fn default() -> Self {
        // Empty window: the first lookup always refills.
        Self {
            i: 0,
            j: 0,
            k_lo: f64::INFINITY,
            k_hi: f64::NEG_INFINITY,
            p_lo: f64::INFINITY,
            p_hi: f64::NEG_INFINITY,
            k0: 0.0,
            p0: 0.0,
            inv_dk: 0.0,
            inv_dp: 0.0,
            corners: Corners::default(),
        }
    }
}

/// Cell of `x` on increasing `nodes` (clamped), walking from `start`.
#[inline]
fn locate(nodes: &[f64], x: f64, start: usize) -> usize {
    let last = nodes.len() - 2;
    let mut c = start.min(last);
    while c > 0 && x < nodes[c] {
        c -= 1;
    }
    while c < last && x >= nodes[c + 1] {
        c += 1;
    }
    c
}

impl FieldPolicy {
    pub fn new(policy: &PolicyField) -> Self {
        let g = &policy.grid;
        let (nk, np) = (g.n_k(), g.n_p());
        let ratio = |m: usize| policy.consumption[m] / g.k[m % nk];
        let mut cells = Vec::with_capacity((nk - 1) * (np - 1));
        for j in 0..np - 1 {
            for i in 0..nk - 1 {
                let m = i + nk * j;
                let at = [m, m + 1, m + nk, m + nk + 1];
                cells.push(Corners { ratio: at.map(ratio), theta: at.map(|n| policy.theta[n]) });
            }
        }
        let inv = |x: &[f64]| x.windows(2).map(|w| 1.0 / (w[1] - w[0])).collect();
        Self { grid: g.clone(), cells, inv_dk: inv(&g.k), inv_dp: inv(&g.p) }
    }

    /// `(C, theta)` at `(k, p)`.
    pub fn control(&self, k: f64, p: f64) -> (f64, f64) {
        let mut cur = Cursor { i: self.grid.n_k() / 2, j: self.grid.n_p() / 2, ..Cursor::default() };
        self.control_from(k, p, &mut cur)
    }

    #[cold]
    fn refill(&self, k: f64, p: f64, cur: &mut Cursor) {
        let g = &self.grid;
        let nk = g.n_k();
        let ci = locate(&g.k, k, cur.i);
        let cj = locate(&g.p, p, cur.j);
        *cur = Cursor {
            i: ci,
            j: cj,
            k_lo: if ci == 0 { f64::NEG_INFINITY } else { g.k[ci] },
            k_hi: if ci + 2 == g.n_k() { f64::INFINITY } else { g.k[ci + 1] },
            p_lo: if cj == 0 { f64::NEG_INFINITY } else { g.p[cj] },
            p_hi: if cj + 2 == g.n_p() { f64::INFINITY } else { g.p[cj + 1] },
            k0: g.k[ci],
            p0: g.p[cj],
            inv_dk: self.inv_dk[ci],
            inv_dp: self.inv_dp[cj],
            corners: self.cells[ci + (nk - 1) * cj],
        };
    }

    #[inline]
    pub(crate) fn control_from(&self, k: f64, p: f64, cur: &mut Cursor) -> (f64, f64) {
        if !(k >= cur.k_lo && k < cur.k_hi && p >= cur.p_lo && p < cur.p_hi) {
            self.refill(k, p, cur);
        }
        let fi = ((k - cur.k0) * cur.inv_dk).clamp(0.0, 1.0);
        let fj = ((p - cur.p0) * cur.inv_dp).clamp(0.0, 1.0);
        let bil = |v: &[f64; 4]| {
            let lo = v[0] + fi * (v[1] - v[0]);
            let hi = v[2] + fi * (v[3] - v[2]);
            lo + fj * (hi - lo)
        };
        (bil(&cur.corners.ratio) * k, bil(&cur.corners.theta))
    }
}

/// Rule producing the control from the current state.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// Fixed consumption level and abatement share.
    Constant { c: f64, theta: f64 },
    /// `C = psi K` with the sign rule on the exact candidate gradients.
    Candidate(CandidateValue),
    /// Solved feedback from the HJB solver.
    Field(Arc<FieldPolicy>),
}

impl Policy {
    pub fn field(policy: &PolicyField) -> Self {
        Policy::Field(Arc::new(FieldPolicy::new(policy)))
    }

    fn validate(&self, prm: &ModelParams) -> Result<(), SimError> {
        if let Policy::Constant { c, theta } = *self {
            if !(c.is_finite() && theta.is_finite()) || c < 0.0 {
                return Err(SimError::Invalid(format!("constant policy ({c}, {theta})")));
            }
            if c == 0.0 && prm.epsilon >= 1.0 {
                return Err(SimError::Invalid("zero consumption has utility -inf when epsilon >= 1".into()));
            }
        }
        Ok(())
    }

    /// Admissible control at `(k, p)`; the flag reports whether clamping was needed.
    #[inline(always)]
    fn control(&self, k: f64, p: f64, prm: &ModelParams, bar: f64, cur: &mut Cursor) -> (Control, bool) {
        let (c, theta) = match self {
            Policy::Constant { c, theta } => (*c, *theta),
            Policy::Candidate(cv) => {
                let theta = if bar > 0.0 {
                    let s = State { k, p };
                    foc_abatement(cv.v_k(s, prm), cv.v_p(s, prm), prm, 0.0)
                } else {
                    0.0
                };
                (cv.psi * k, theta)
            }
            Policy::Field(f) => f.control_from(k, p, cur),
        };
        let t = theta.clamp(0.0, bar);
        let cc = c.max(0.0);
        (Control { c: cc, theta: t }, t != theta || cc != c)
    }
}

/// `x^e` with cheap paths for the exponents that show up in practice.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Power {
    Zero,
    One,
    Square,
    Sqrt,
    ThreeHalves,
    Inv,
    InvSqrt,
    General(f64),
}

impl Power {
    pub fn new(e: f64) -> Self {
        if e == 0.0 {
            Power::Zero
        } else if e == 1.0 {
            Power::One
        } else if e == 2.0 {
            Power::Square
        } else if e == 0.5 {
            Power::Sqrt
        } else if e == 1.5 {
            Power::ThreeHalves
        } else if e == -1.0 {
            Power::Inv
        } else if e == -0.5 {
            Power::InvSqrt
        } else {
            Power::General(e)
        }
    }

    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Power::Zero => 1.0,
            Power::One => x,
            Power::Square => x * x,
            Power::Sqrt => x.sqrt(),
            Power::ThreeHalves => x * x.sqrt(),
            Power::Inv => 1.0 / x,
            Power::InvSqrt => 1.0 / x.sqrt(),
            Power::General(e) => x.powf(e),
        }
    }
}

/// Flow utility with the powers resolved once per run.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FastUtility {
    c_pow: Power,
    c_scale: f64,
    p_pow: Power,
    p_scale: f64,
}

impl FastUtility {
    pub fn new(prm: &ModelParams) -> Self {
        let e = 1.0 - prm.epsilon;
        let b = 1.0 + prm.beta;
        Self { c_pow: Power::new(e), c_scale: 1.0 / e, p_pow: Power::new(b), p_scale: prm.chi / b }
    }

    #[inline]
    pub fn eval(&self, c: f64, p: f64) -> f64 {
        let pol = if self.p_scale == 0.0 { 0.0 } else { self.p_scale * self.p_pow.eval(p) };
        self.c_scale * self.c_pow.eval(c) - pol
    }
}

/// Numerical settings of the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOpts {
    /// Paths whose capital falls below this are terminated.
    pub k_floor: f64,
    /// Thinning majorant is the rate at `P * majorant_factor`.
    pub majorant_factor: f64,
    /// Upper bound on `majorant * dt`.
    pub max_step_rate: f64,
}

impl SimOpts {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.k_floor >= 0.0 && self.k_floor.is_finite()) {
            return Err(SimError::Invalid(format!("k_floor = {}", self.k_floor)));
        }
        if !(self.majorant_factor >= 1.0 && self.majorant_factor.is_finite()) {
            return Err(SimError::Invalid(format!("majorant_factor = {} must be >= 1", self.majorant_factor)));
        }
        if !(self.max_step_rate > 0.0 && self.max_step_rate < 1.0) {
            return Err(SimError::Invalid(format!("max_step_rate = {} must lie in (0, 1)", self.max_step_rate)));
        }
        Ok(())
    }
}

impl Default for SimOpts {
    fn default() -> Self {
        Self { k_floor: 1e-12, majorant_factor: 1.5, max_step_rate: 0.1 }
    }
}

/// Monte Carlo settings of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub n_paths: usize,
    /// Horizon; a multiple of `dt`.
    #[serde(rename = "T")]
    pub t_end: f64,
    pub dt: f64,
    pub master_seed: u64,
    #[serde(default)]
    pub opts: SimOpts,
}

impl SimSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_paths < 2 {
            return Err(SimError::Invalid(format!("need at least 2 paths, got {}", self.n_paths)));
        }
        Horizon::new(self.t_end, self.dt)?;
        self.opts.validate()
    }
}

/// Hooks into the path kernel.
pub(crate) trait Observer {
    /// Called at every grid time (including 0 and T) with the control applied from there.
    fn at_time(&mut self, _step: usize, _t: f64, _k: f64, _p: f64, _control: Control, _running: f64) {}
    /// Called for each disaster with the capital just before it.
    fn on_jump(&mut self, _t: f64, _k_before: f64, _p: f64, _event: &JumpEvent) {}
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NoObserver;
impl Observer for NoObserver {}

/// What the kernel reports for one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct PathSummary {
    pub integral: f64,
    pub sup_abs_u: f64,
    pub terminated: bool,
    pub clamps: u32,
    pub jumps: u32,
    pub final_state: State,
}

/// Time discretization of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Horizon {
    pub steps: usize,
    pub dt: f64,
}

impl Horizon {
    pub fn new(t: f64, dt: f64) -> Result<Self, SimError> {
        if !(t > 0.0 && dt > 0.0 && t.is_finite()) {
            return Err(SimError::Invalid(format!("horizon {t}, step {dt}")));
        }
        let steps = (t / dt).round();
        if ((steps * dt - t) / t).abs() > 1e-9 {
            return Err(SimError::Invalid(format!("horizon {t} is not a multiple of dt = {dt}")));
        }
        Ok(Self { steps: steps as usize, dt })
    }
}

/// `e^x`, by its Taylor series when `|x|` is small enough for eight terms to
/// reach machine precision (`0.03^8 / 8! < 2e-17`).
#[inline]
fn exp_small(x: f64) -> f64 {
    if x.abs() < 0.03 {
        const C: [f64; 8] = [1.0, 1.0, 1.0 / 2.0, 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0, 1.0 / 720.0, 1.0 / 5040.0];
        let x2 = x * x;
        let x4 = x2 * x2;
        let a = (C[0] + C[1] * x) + x2 * (C[2] + C[3] * x);
        let b = (C[4] + C[5] * x) + x2 * (C[6] + C[7] * x);
        a + x4 * b
    } else {
        x.exp()
    }
}

/// Shared path kernel.
/// Per-path state of the stepping kernel, shared by the single-path and the
/// interleaved drivers.
struct Walker<'m> {
    model: &'m Model,
    policy: &'m Policy,
    opts: &'m SimOpts,
    bar: f64,
    dt: f64,
    sqdt: f64,
    half_s2: f64,
    mass: f64,
    hazard: bool,
    step_disc: f64,
    fu: FastUtility,
    cur: Cursor,
    k: f64,
    p: f64,
    ctl: Control,
    u: f64,
    disc: f64,
    integral: f64,
    sup_u: f64,
    clamps: u32,
    n_jumps: u32,
    events: Vec<f64>,
    clock: ThinningClock,
}

impl<'m> Walker<'m> {
    fn start<O: Observer>(
        model: &'m Model,
        policy: &'m Policy,
        state0: State,
        dt: f64,
        opts: &'m SimOpts,
        rng: &mut PathRng,
        obs: &mut O,
    ) -> Result<Self, SimError> {
        let prm = &model.params;
        let bar = prm.bar_theta();
        let mut cur = Cursor::default();
        let fu = FastUtility::new(prm);
        let clock = ThinningClock::new(rng);
        let (ctl, cl) = policy.control(state0.k, state0.p, prm, bar, &mut cur);
        let u = fu.eval(ctl.c, state0.p);
        if !u.is_finite() {
            utility(ctl.c, state0.p, prm)?;
        }
        obs.at_time(0, 0.0, state0.k, state0.p, ctl, 0.0);
        Ok(Self {
            model,
            policy,
            opts,
            bar,
            dt,
            sqdt: dt.sqrt(),
            half_s2: 0.5 * prm.sigma_p * prm.sigma_p,
            mass: model.marks.total_mass(),
            hazard: prm.lambda0 > 0.0 || prm.lambda1 > 0.0,
            step_disc: (-prm.rho * dt).exp(),
            fu,
            cur,
            k: state0.k,
            p: state0.p,
            ctl,
            u,
            disc: 1.0,
            integral: 0.0,
            sup_u: u.abs(),
            clamps: cl as u32,
            n_jumps: 0,
            events: Vec::new(),
            clock,
        })
    }

    fn summary(&self, terminated: bool) -> PathSummary {
        PathSummary {
            integral: self.integral,
            sup_abs_u: self.sup_u,
            terminated,
            clamps: self.clamps,
            jumps: self.n_jumps,
            final_state: State { k: self.k.max(0.0), p: self.p },
        }
    }

    /// Advance from step `s` to `s + 1`; `false` once capital hits the floor.
    #[inline(always)]
    fn step<O: Observer>(&mut self, s: usize, rng: &mut PathRng, obs: &mut O) -> Result<bool, SimError> {
        let prm = &self.model.params;
        let dt = self.dt;
        let t = s as f64 * dt;
        let (k, p, ctl) = (self.k, self.p, self.ctl);
        let b_k = (1.0 - ctl.theta) * prm.a * k - ctl.c;
        let b_p = (prm.phi - prm.sigma_ab * ctl.theta) * prm.a * k - prm.alpha * p;
        let mut k = k + b_k * dt;
        let mut dlp = (b_p / p - self.half_s2) * dt;
        if prm.sigma_p > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            dlp += prm.sigma_p * self.sqdt * z;
        }
        let p_start = p;
        let p = p * exp_small(dlp);
        if self.hazard {
            let rate = intensity(p_start, prm) * self.mass;
            let major = intensity(self.opts.majorant_factor * p_start, prm) * self.mass;
            if major * dt > self.opts.max_step_rate {
                return Err(SimError::StepTooLong { rate_dt: major * dt, limit: self.opts.max_step_rate, t, p: p_start });
            }
            self.events.clear();
            if self.clock.step(t, rate, dt, major, rng, &mut self.events)? > 0 {
                // rate from the state at the start of the step; jumps act on
                // the state after the drift and diffusion update
                for &te in &self.events {
                    let mark = sample_mark(p, &self.model.marks, rng)?;
                    let w = survival_fraction(k.max(0.0), p, prm, Some(mark));
                    let ev = JumpEvent { time: te, mark, survival: w };
                    obs.on_jump(te, k, p, &ev);
                    k *= w;
                    self.n_jumps += 1;
                }
            }
        }
        self.k = k;
        self.p = p;
        if !(k > self.opts.k_floor) {
            return Ok(false);
        }
        let (c2, cl) = self.policy.control(k, p, prm, self.bar, &mut self.cur);
        self.clamps += cl as u32;
        self.ctl = c2;
        let u2 = self.fu.eval(c2.c, p);
        if !u2.is_finite() {
            utility(c2.c, p, prm)?;
        }
        self.sup_u = self.sup_u.max(u2.abs());
        let disc2 = self.disc * self.step_disc;
        self.integral += 0.5 * dt * (self.disc * self.u + disc2 * u2);
        self.disc = disc2;
        self.u = u2;
        obs.at_time(s + 1, (s + 1) as f64 * dt, k, p, c2, self.integral);
        Ok(true)
    }
}

pub(crate) fn run_path<O: Observer>(
    model: &Model,
    policy: &Policy,
    state0: State,
    horizon: Horizon,
    opts: &SimOpts,
    rng: &mut PathRng,
    obs: &mut O,
) -> Result<PathSummary, SimError> {
    let mut w = Walker::start(model, policy, state0, horizon.dt, opts, rng, obs)?;
    for s in 0..horizon.steps {
        if !w.step(s, rng, obs)? {
            return Ok(w.summary(true));
        }
    }
    Ok(w.summary(false))
}

/// Paths advanced together in one loop so that their independent update
/// chains overlap in the pipeline.
const LANES: usize = 4;

/// `run_path` for up to `LANES` paths at once; identical results lane by lane.
fn run_lanes<O: Observer>(
    model: &Model,
    policy: &Policy,
    state0: State,
    horizon: Horizon,
    opts: &SimOpts,
    rngs: &mut [PathRng],
    obs: &mut [O],
) -> Result<Vec<PathSummary>, SimError> {
    let n = rngs.len();
    debug_assert!(n <= LANES && obs.len() == n);
    let mut walkers = Vec::with_capacity(n);
    for (rng, o) in rngs.iter_mut().zip(obs.iter_mut()) {
        walkers.push(Walker::start(model, policy, state0, horizon.dt, opts, rng, o)?);
    }
    let mut done: [Option<bool>; LANES] = [None; LANES];
    let mut live = n;
    for s in 0..horizon.steps {
        for l in 0..n {
            if done[l].is_none() && !walkers[l].step(s, &mut rngs[l], &mut obs[l])? {
                done[l] = Some(true);
                live -= 1;
            }
        }
        if live == 0 {
            break;
        }
    }
    Ok(walkers.iter().zip(done).map(|(w, d)| w.summary(d.unwrap_or(false))).collect())
}

/// One simulated trajectory on the time grid `0, dt, ..., T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub times: Vec<f64>,
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    pub controls: Vec<Control>,
    pub jumps: Vec<JumpEvent>,
    /// Running discounted utility at each grid time.
    pub running_utility: Vec<f64>,
    pub discounted_utility: f64,
    pub terminated: bool,
    pub clamps: u32,
}

impl PathRecord {
    /// `e^{-rho T}` at the last recorded time.
    pub fn terminal_discount(&self, rho: f64) -> f64 {
        (-rho * self.times.last().copied().unwrap_or(0.0)).exp()
    }

    /// Discounted terminal value `e^{-rho T} v(K_T, P_T)` for any value function.
    pub fn terminal_weight(&self, rho: f64, v: impl Fn(State) -> f64) -> f64 {
        let n = self.k.len() - 1;
        self.terminal_discount(rho) * v(State { k: self.k[n], p: self.p[n] })
    }

    /// CSV with columns `t, K, P, C, theta, jump_flag, mark`; the mark column
    /// holds the last mark of the step ending at `t` and is empty otherwise.
    pub fn write_csv<W: Write>(&self, mut w: W, header_comment: &str) -> io::Result<()> {
        writeln!(w, "# {header_comment}")?;
        writeln!(w, "t,K,P,C,theta,jump_flag,mark")?;
        let dt = if self.times.len() > 1 { self.times[1] - self.times[0] } else { 0.0 };
        let mut e = 0;
        for s in 0..self.times.len() {
            let t = self.times[s];
            let mut mark = None;
            while e < self.jumps.len() && s > 0 && self.jumps[e].time <= t + 1e-9 * dt {
                mark = Some(self.jumps[e].mark);
                e += 1;
            }
            let c = &self.controls[s];
            match mark {
                Some(m) => writeln!(w, "{t},{},{},{},{},1,{m}", self.k[s], self.p[s], c.c, c.theta)?,
                None => writeln!(w, "{t},{},{},{},{},0,", self.k[s], self.p[s], c.c, c.theta)?,
            }
        }
        Ok(())
    }
}

struct Recorder {
    rec: PathRecord,
}

impl Observer for Recorder {
    fn at_time(&mut self, _step: usize, t: f64, k: f64, p: f64, control: Control, running: f64) {
        self.rec.times.push(t);
        self.rec.k.push(k);
        self.rec.p.push(p);
        self.rec.controls.push(control);
        self.rec.running_utility.push(running);
    }
    fn on_jump(&mut self, _t: f64, _k: f64, _p: f64, event: &JumpEvent) {
        self.rec.jumps.push(*event);
    }
}

fn check_start(model: &Model, state0: State) -> Result<(), SimError> {
    model.validate()?;
    State::new(state0.k, state0.p)?;
    Ok(())
}

/// Simulate one path of length `t_end` with step `dt`.
pub fn simulate_path(
    model: &Model,
    policy: &Policy,
    state0: State,
    t_end: f64,
    dt: f64,
    opts: &SimOpts,
    rng: &mut PathRng,
) -> Result<PathRecord, SimError> {
    check_start(model, state0)?;
    policy.validate(&model.params)?;
    let h = Horizon::new(t_end, dt)?;
    let mut obs = Recorder {
        rec: PathRecord {
            times: Vec::with_capacity(h.steps + 1),
            k: Vec::with_capacity(h.steps + 1),
            p: Vec::with_capacity(h.steps + 1),
            controls: Vec::with_capacity(h.steps + 1),
            jumps: Vec::new(),
            running_utility: Vec::with_capacity(h.steps + 1),
            discounted_utility: 0.0,
            terminated: false,
            clamps: 0,
        },
    };
    let sum = run_path(model, policy, state0, h, opts, rng, &mut obs)?;
    let mut rec = obs.rec;
    rec.discounted_utility = sum.integral;
    rec.terminated = sum.terminated;
    rec.clamps = sum.clamps;
    Ok(rec)
}

/// Trapezoidal `∫ e^{-rho t} U(C_t, P_t) dt` along a recorded path.
pub fn discounted_utility(path: &PathRecord, params: &ModelParams) -> Result<f64, ModelError> {
    let mut vals = Vec::with_capacity(path.times.len());
    for s in 0..path.times.len() {
        let u = utility(path.controls[s].c, path.p[s], params)?;
        vals.push((-params.rho * path.times[s]).exp() * u);
    }
    let mut sum = 0.0;
    for s in 1..vals.len() {
        sum += 0.5 * (path.times[s] - path.times[s - 1]) * (vals[s] + vals[s - 1]);
    }
    Ok(sum)
}

/// Pairwise (cascade) summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error with the first sample as a shift, so identical
/// samples give exactly that value and a zero error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let x0 = xs[0];
    let dev: Vec<f64> = xs.iter().map(|x| x - x0).collect();
    let md = pairwise_sum(&dev) / n as f64;
    let mean = x0 + md;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let sq: Vec<f64> = dev.iter().map(|d| (d - md) * (d - md)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Monte Carlo estimate of the gain of a policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// `sup |U|` over visited states times `e^{-rho T} / rho`.
    pub tail_bound: f64,
    pub n_paths: usize,
    pub terminated: usize,
    pub clamps: u64,
    pub mean_jumps: f64,
}

/// Run `n_paths` independent paths in parallel; path `i` uses stream `i`
/// of `master_seed`. Results come back in path order.
pub(crate) fn ensemble<O, F>(
    model: &Model,
    policy: &Policy,
    state0: State,
    horizon: Horizon,
    opts: &SimOpts,
    n_paths: usize,
    master_seed: u64,
    make: F,
) -> Result<Vec<(PathSummary, O)>, SimError>
where
    O: Observer + Send,
    F: Fn(usize) -> O + Sync,
{
    check_start(model, state0)?;
    policy.validate(&model.params)?;
    let chunks: Vec<Vec<(PathSummary, O)>> = (0..n_paths.div_ceil(LANES))
        .into_par_iter()
        .map(|c| {
            let ids = c * LANES..((c + 1) * LANES).min(n_paths);
            let mut rngs: Vec<PathRng> = ids.clone().map(|i| child(master_seed, i as u64)).collect();
            let mut obs: Vec<O> = ids.map(&make).collect();
            let sums = run_lanes(model, policy, state0, horizon, opts, &mut rngs, &mut obs)?;
            Ok(sums.into_iter().zip(obs).collect())
        })
        .collect::<Result<_, SimError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Aggregate path results; paths that hit the capital floor are excluded
/// from the mean and the run fails if more than 1% of them did.
pub(crate) fn summarize(sums: &[PathSummary], rho: f64, t_end: f64) -> Result<ValueEstimate, SimError> {
    let n = sums.len();
    let terminated = sums.iter().filter(|s| s.terminated).count();
    if terminated * 100 > n {
        return Err(SimError::TooManyTerminated { terminated, n_paths: n });
    }
    let vals: Vec<f64> = sums.iter().filter(|s| !s.terminated).map(|s| s.integral).collect();
    let (mean, stderr) = mean_stderr(&vals);
    let sup = sums.iter().fold(0.0f64, |m, s| m.max(s.sup_abs_u));
    let jumps: Vec<f64> = sums.iter().map(|s| s.jumps as f64).collect();
    Ok(ValueEstimate {
        mean,
        stderr,
        tail_bound: sup * (-rho * t_end).exp() / rho,
        n_paths: n,
        terminated,
        clamps: sums.iter().map(|s| s.clamps as u64).sum(),
        mean_jumps: pairwise_sum(&jumps) / n as f64,
    })
}

/// Sample mean and standard error of the discounted utility over `n_paths`
/// independent paths.
#[allow(clippy::too_many_arguments)]
pub fn estimate_value(
    model: &Model,
    policy: &Policy,
    state0: State,
    n_paths: usize,
    t_end: f64,
    dt: f64,
    master_seed: u64,
    opts: &SimOpts,
) -> Result<ValueEstimate, SimError> {
    if n_paths < 2 {
        return Err(SimError::Invalid(format!("need at least 2 paths, got {n_paths}")));
    }
    let h = Horizon::new(t_end, dt)?;
    let out = ensemble(model, policy, state0, h, opts, n_paths, master_seed, |_| NoObserver)?;
    let sums: Vec<PathSummary> = out.into_iter().map(|(s, _)| s).collect();
    summarize(&sums, model.params.rho, t_end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jumps::compensator_integral;
    use crate::model::{fixtures, MarkModel, Variant};
    use approx::assert_relative_eq;

    fn model(f: impl FnOnce(&mut ModelParams)) -> Model {
        let mut p = fixtures::decoupled();
        f(&mut p);
        let marks = if p.variant.is_marked() { MarkModel::Gamma } else { MarkModel::None };
        Model::new(p, marks).unwrap()
    }

    fn path(m: &Model, pol: &Policy, s0: State, t: f64, dt: f64, seed: u64) -> PathRecord {
        simulate_path(m, pol, s0, t, dt, &SimOpts::default(), &mut child(seed, 0)).unwrap()
    }

    #[test]
    fn pure_growth_follows_exponential() {
        let m = model(|p| {
            p.epsilon = 0.5;
            p.chi = 0.0;
        });
        let pol = Policy::Constant { c: 0.0, theta: 0.0 };
        let s0 = State::new(1.0, 1.0).unwrap();
        let err = |dt: f64| {
            let r = path(&m, &pol, s0, 10.0, dt, 0);
            (r.k.last().unwrap() - (0.1f64 * 10.0).exp()).abs()
        };
        let (e1, e2) = (err(0.01), err(0.005));
        assert!(e1 < 0.01);
        assert_relative_eq!(e1 / e2, 2.0, epsilon = 0.05);
        // zero consumption is rejected when utility is unbounded below
        let bad = model(|_| {});
        assert!(simulate_path(&bad, &pol, s0, 1.0, 0.1, &SimOpts::default(), &mut child(0, 0)).is_err());
    }

    #[test]
    fn pollution_decays_exponentially() {
        let m = model(|p| {
            p.a = 0.0;
            p.epsilon = 0.5;
        });
        let pol = Policy::Constant { c: 0.0, theta: 0.0 };
        let r = path(&m, &pol, State::new(1.0, 2.0).unwrap(), 50.0, 1.0 / 64.0, 0);
        for (t, p) in r.times.iter().zip(&r.p) {
            assert_relative_eq!(*p, 2.0 * (-0.02 * t).exp(), max_relative = 1e-12);
        }
    }

    #[test]
    fn harmless_disasters_do_not_move_capital() {
        let harmless = model(|p| {
            p.lambda0 = 0.5;
            p.delta = 0.0;
        });
        let calm = model(|_| {});
        let pol = Policy::Constant { c: 0.05, theta: 0.0 };
        let s0 = State::new(1.0, 1.0).unwrap();
        let a = path(&harmless, &pol, s0, 20.0, 1.0 / 64.0, 3);
        let b = path(&calm, &pol, s0, 20.0, 1.0 / 64.0, 3);
        assert!(!a.jumps.is_empty());
        assert_eq!(a.k, b.k);
        assert_eq!(a.p, b.p);
        assert_eq!(a.discounted_utility, b.discounted_utility);
    }

    #[test]
    fn jumps_are_downward_and_states_positive() {
        let m = model(|p| {
            p.variant = Variant::Prm;
            p.phi = 0.3;
            p.sigma_p = 0.2;
            p.lambda0 = 0.3;
            p.lambda1 = 0.2;
            p.delta = 0.2;
            p.xi = 1.0;
            p.eta = 0.5;
        });
        let pol = Policy::Constant { c: 0.05, theta: 0.1 };
        let r = path(&m, &pol, State::new(2.0, 1.0).unwrap(), 40.0, 1.0 / 128.0, 9);
        assert!(r.jumps.len() > 3);
        assert!(r.p.iter().all(|&p| p > 0.0));
        assert!(r.k.iter().all(|&k| k > 0.0));
        for e in &r.jumps {
            assert!(e.survival > 0.0 && e.survival <= 1.0);
            assert!(e.mark > 0.0);
        }
        assert!(r.jumps.windows(2).all(|w| w[1].time > w[0].time));
    }

    #[test]
    fn unmarked_paths_carry_unit_marks() {
        let m = model(|p| {
            p.variant = Variant::Nhpp;
            p.lambda0 = 0.5;
            p.lambda1 = 0.1;
            p.delta = 0.1;
        });
        let r = path(&m, &Policy::Constant { c: 0.05, theta: 0.0 }, State::new(1.0, 1.0).unwrap(), 30.0, 0.01, 1);
        assert!(!r.jumps.is_empty());
        assert!(r.jumps.iter().all(|e| e.mark == 1.0));
    }

    #[test]
    fn discounted_utility_of_constant_flow() {
        let prm = ModelParams { beta: 1.0, ..fixtures::decoupled() };
        let n = 10_000;
        let dt = 0.01;
        let rec = PathRecord {
            times: (0..=n).map(|s| s as f64 * dt).collect(),
            k: vec![1.0; n + 1],
            p: vec![1.0; n + 1],
            controls: vec![Control { c: 1.0, theta: 0.0 }; n + 1],
            jumps: vec![],
            running_utility: vec![0.0; n + 1],
            discounted_utility: 0.0,
            terminated: false,
            clamps: 0,
        };
        let exact = -1.5 * (1.0 - (-0.05f64 * 100.0).exp()) / 0.05;
        assert_relative_eq!(exact, -29.798, epsilon = 1e-3);
        let got = discounted_utility(&rec, &prm).unwrap();
        // trapezoid error ~ dt^2 / 12 * rho^2 * |u0| / rho
        assert!((got - exact).abs() < 1e-5, "{got} vs {exact}");
    }

    #[test]
    fn kernel_integral_matches_recomputation() {
        let m = model(|p| {
            p.variant = Variant::Nhpp;
            p.lambda0 = 0.2;
            p.lambda1 = 0.1;
            p.delta = 0.2;
            p.phi = 0.3;
        });
        let pol = Policy::Candidate(CandidateValue::new(0.06, 10.0).unwrap());
        let r = path(&m, &pol, State::new(1.0, 1.0).unwrap(), 20.0, 1.0 / 64.0, 2);
        let again = discounted_utility(&r, &m.params).unwrap();
        assert_relative_eq!(r.discounted_utility, again, max_relative = 1e-12);
        assert_relative_eq!(*r.running_utility.last().unwrap(), again, max_relative = 1e-12);
    }

    #[test]
    fn doubling_horizon_stays_within_tail_bound() {
        let m = model(|_| {});
        let cv = CandidateValue::decoupled(&m.params).unwrap();
        let pol = Policy::Candidate(cv);
        let s0 = State::new(1.0, 1.0).unwrap();
        let a = estimate_value(&m, &pol, s0, 2, 40.0, 1.0 / 16.0, 0, &SimOpts::default()).unwrap();
        let b = estimate_value(&m, &pol, s0, 2, 80.0, 1.0 / 16.0, 0, &SimOpts::default()).unwrap();
        assert!((a.mean - b.mean).abs() <= a.tail_bound);
    }

    #[test]
    fn deterministic_regime_has_zero_error() {
        let m = model(|_| {});
        let cv = CandidateValue::decoupled(&m.params).unwrap();
        let pol = Policy::Candidate(cv);
        let s0 = State::new(1.2, 0.8).unwrap();
        let est = estimate_value(&m, &pol, s0, 37, 20.0, 1.0 / 32.0, 5, &SimOpts::default()).unwrap();
        let single = path(&m, &pol, s0, 20.0, 1.0 / 32.0, 99);
        assert_eq!(est.stderr, 0.0);
        assert_eq!(est.mean, single.discounted_utility);
    }

    #[test]
    fn candidate_policy_recovers_closed_form() {
        let m = model(|_| {});
        let cv = CandidateValue::decoupled(&m.params).unwrap();
        let s0 = State::new(1.0, 1.0).unwrap();
        let est = estimate_value(&m, &Policy::Candidate(cv), s0, 2, 200.0, 1.0 / 256.0, 0, &SimOpts::default()).unwrap();
        let v = cv.value(s0, &m.params);
        // deterministic path: only time-step bias and truncation remain
        assert!((est.mean - v).abs() <= 3.0 * est.stderr + est.tail_bound + 1e-3 * v.abs(), "{} vs {v}", est.mean);
    }

    #[test]
    fn estimates_do_not_depend_on_thread_count() {
        let m = model(|p| {
            p.variant = Variant::JumpDiffusion;
            p.sigma_p = 0.2;
            p.lambda0 = 0.2;
            p.lambda1 = 0.1;
            p.delta = 0.1;
            p.phi = 0.2;
        });
        let pol = Policy::Constant { c: 0.04, theta: 0.1 };
        let s0 = State::new(1.0, 1.0).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| estimate_value(&m, &pol, s0, 300, 10.0, 1.0 / 32.0, 17, &SimOpts::default()).unwrap())
        };
        let (a, b, c) = (run(1), run(3), run(8));
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(a.stderr > 0.0);
    }

    #[test]
    fn interleaved_lanes_match_single_paths() {
        let m = model(|p| {
            p.variant = Variant::JumpDiffusion;
            p.sigma_p = 0.2;
            p.lambda0 = 0.3;
            p.lambda1 = 0.2;
            p.delta = 0.2;
            p.phi = 0.2;
        });
        let pol = Policy::Constant { c: 0.001, theta: 0.1 };
        let h = Horizon::new(20.0, 1.0 / 64.0).unwrap();
        let opts = SimOpts::default();
        // the second setting sends every lane into the capital floor, each at its own step
        let floor = SimOpts { k_floor: 0.04, ..opts };
        let heavy = Policy::Constant { c: 0.06, theta: 0.0 };
        let cases = [(&pol, State::new(1.0, 1.0).unwrap(), opts, false), (&heavy, State::new(0.05, 1.0).unwrap(), floor, true)];
        for (pol, s0, opts, ends) in cases {
            for n in 1..=LANES {
                let mut rngs: Vec<PathRng> = (0..n).map(|i| child(5, i as u64)).collect();
                let mut obs = vec![NoObserver; n];
                let lanes = run_lanes(&m, pol, s0, h, &opts, &mut rngs, &mut obs).unwrap();
                for (i, got) in lanes.iter().enumerate() {
                    let one = run_path(&m, pol, s0, h, &opts, &mut child(5, i as u64), &mut NoObserver).unwrap();
                    assert_eq!(*got, one);
                    assert_eq!(got.terminated, ends);
                }
            }
        }
    }

    #[test]
    fn short_series_exponential_is_exact_to_rounding() {
        for i in -300..=300 {
            let x = i as f64 * 1e-4 + 3.3e-7;
            let (a, b) = (exp_small(x), x.exp());
            assert!((a - b).abs() <= 2.0 * f64::EPSILON * b, "{x}: {a} vs {b}");
        }
        assert_eq!(exp_small(0.5), 0.5f64.exp());
    }

    #[test]
    fn compensated_count_has_zero_mean() {
        let m = model(|p| {
            p.variant = Variant::JumpDiffusion;
            p.sigma_p = 0.3;
            p.lambda0 = 0.1;
            p.lambda1 = 0.3;
            p.delta = 0.1;
            p.phi = 0.5;
        });
        let pol = Policy::Constant { c: 0.05, theta: 0.0 };
        let s0 = State::new(1.0, 1.0).unwrap();
        let diffs: Vec<f64> = (0..1500)
            .map(|i| {
                let r = simulate_path(&m, &pol, s0, 20.0, 1.0 / 256.0, &SimOpts::default(), &mut child(77, i)).unwrap();
                r.jumps.len() as f64 - compensator_integral(&r.p, 1.0 / 256.0, &m)
            })
            .collect();
        let (mean, se) = mean_stderr(&diffs);
        assert!(mean.abs() <= 3.0 * se, "{mean} +- {se}");
    }

    #[test]
    fn capital_floor_terminates_paths() {
        let m = model(|_| {});
        let pol = Policy::Constant { c: 10.0, theta: 0.0 };
        let r = path(&m, &pol, State::new(1.0, 1.0).unwrap(), 5.0, 0.01, 0);
        assert!(r.terminated);
        let err = estimate_value(&m, &pol, State::new(1.0, 1.0).unwrap(), 10, 5.0, 0.01, 0, &SimOpts::default());
        assert!(matches!(err, Err(SimError::TooManyTerminated { .. })));
    }

    #[test]
    fn constant_policy_clamps_abatement() {
        let m = model(|p| p.phi = 0.3);
        let pol = Policy::Constant { c: 0.05, theta: 0.9 };
        let r = path(&m, &pol, State::new(1.0, 1.0).unwrap(), 1.0, 0.1, 0);
        assert_eq!(r.clamps, 11);
        assert!(r.controls.iter().all(|c| c.theta == 0.3));
    }

    #[test]
    fn step_rate_is_validated() {
        let m = model(|p| {
            p.variant = Variant::Nhpp;
            p.lambda0 = 0.5;
        });
        let pol = Policy::Constant { c: 0.05, theta: 0.0 };
        let e = simulate_path(&m, &pol, State::new(1.0, 1.0).unwrap(), 1.0, 0.5, &SimOpts::default(), &mut child(0, 0));
        assert!(matches!(e, Err(SimError::StepTooLong { .. })));
        assert!(simulate_path(&m, &pol, State::new(1.0, 1.0).unwrap(), 1.0, 0.3, &SimOpts::default(), &mut child(0, 0)).is_err());
    }

    #[test]
    fn pairwise_sum_is_accurate() {
        let xs: Vec<f64> = (0..100_000).map(|i| 0.1 + 1e-9 * i as f64).collect();
        let exact = 0.1 * 1e5 + 1e-9 * (99_999.0 * 100_000.0 / 2.0);
        assert_relative_eq!(pairwise_sum(&xs), exact, max_relative = 1e-14);
    }

    #[test]
    fn path_csv_layout() {
        let m = model(|p| {
            p.variant = Variant::Nhpp;
            p.lambda0 = 0.9;
            p.delta = 0.1;
        });
        let r = path(&m, &Policy::Constant { c: 0.05, theta: 0.0 }, State::new(1.0, 1.0).unwrap(), 10.0, 0.1, 4);
        let mut buf = Vec::new();
        r.write_csv(&mut buf, "x").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "t,K,P,C,theta,jump_flag,mark");
        assert_eq!(lines.len(), 2 + 101);
        let flagged = lines[2..].iter().filter(|l| l.split(',').nth(5) == Some("1")).count();
        assert!(flagged > 0 && flagged <= r.jumps.len());
    }
}
