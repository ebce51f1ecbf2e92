//! Monotone upwind discretization of the stationary HJB equation
//!
//! ```text
//! rho v = sup_{C, theta} { U(C, P) + v_K b_K + v_P b_P }
//!         + 1/2 sigma_P^2 P^2 v_PP
//!         + lambda(P) E_zeta[ v(omega(K, P, zeta) K, P) - v(K, P) ]
//! ```
//!
//! on a log-spaced grid. Drift terms use the one-sided difference on the
//! side the drift points to; the pointwise supremum is taken over that
//! upwinded Hamiltonian exactly. The jump term interpolates `v` linearly in
//! `ln K` along the row of the node; displaced points below `K_lo` are
//! extrapolated with the boundary slope.
//!
//! Edges use whichever one-sided difference exists. On the two `P` edges the
//! curvature in `ln P` is taken to vanish, which turns the diffusion term into
//! an extra drift `-sigma_P^2 P / 2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::banded::{BandError, BandMatrix};
use crate::field::{ConsumptionRegime, PolicyField, ValueField};
use crate::grid::{cell, Grid, GridError};
use crate::model::{
    consumption_utility, damage_exponent, intensity, pollution_disutility, Control, MarkModel, Model, ModelError,
    ModelParams,
};
use crate::quadrature::gamma_rule;

/// Number of generalized Gauss–Laguerre nodes for Gamma marks.
pub const GAMMA_NODES: usize = 32;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid scheme options: {0}")]
    Options(String),
    #[error("no convergence after {iterations} iterations (last relative update {last_update:e})")]
    NotConverged { iterations: usize, last_update: f64, history: Vec<f64> },
    #[error("iteration diverged: non-finite value at node ({i}, {j}) K = {k}, P = {p}")]
    Divergence { i: usize, j: usize, k: f64, p: f64 },
    #[error("linear solve failed: {0}")]
    Linear(#[from] BandError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    /// Policy iteration: exact policy evaluation by a banded solve.
    Howard,
    /// Damped explicit value iteration in pseudo-time.
    ValueIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Init {
    /// Power-separable guess with the decoupled coefficients.
    Candidate,
    /// Discounted utility of a fixed consumption rule.
    Utility,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeOpts {
    pub method: Method,
    /// Stop when the sup-norm update relative to the sup-norm of `v` is below this.
    pub tol: f64,
    pub max_iters: usize,
    /// For value iteration: run an exact policy evaluation every this many sweeps.
    pub howard_every: Option<usize>,
    /// Pseudo-time step as a fraction of the explicit stability limit.
    pub cfl_safety: f64,
    /// Lower consumption bound.
    pub c_min: f64,
    pub init: Init,
}

impl Default for SchemeOpts {
    fn default() -> Self {
        Self {
            method: Method::Howard,
            tol: 1e-8,
            max_iters: 200_000,
            howard_every: None,
            cfl_safety: 0.9,
            c_min: 1e-10,
            init: Init::Candidate,
        }
    }
}

impl SchemeOpts {
    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m: &str| Err(SolveError::Options(m.to_string()));
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return bad("tol must lie in (0, 1)");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return bad("cfl_safety must lie in (0, 1]");
        }
        if !(self.c_min > 0.0 && self.c_min.is_finite()) {
            return bad("c_min must be positive");
        }
        if self.howard_every == Some(0) {
            return bad("howard_every must be positive");
        }
        Ok(())
    }
}

/// One displaced evaluation of the jump term: `weight * (v at position) `
/// with the position given as a cell of the node's row and a weight inside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct JumpEntry {
    pub cell: u32,
    pub frac: f64,
    pub weight: f64,
}

/// Displacements and rates of every disaster size reachable from node `(i, j)`.
pub(crate) fn jump_entries(model: &Model, grid: &Grid, i: usize, j: usize, marks: &[(f64, f64)]) -> Vec<JumpEntry> {
    let prm = &model.params;
    let p = grid.p[j];
    let lam = intensity(p, prm);
    if lam == 0.0 {
        return Vec::new();
    }
    let d = damage_exponent(grid.k[i], p, prm);
    marks
        .iter()
        .map(|&(zeta, w)| {
            let pos = i as f64 - d * zeta / grid.hk;
            let (c, f) = cell(pos, grid.n_k());
            JumpEntry { cell: c as u32, frac: f, weight: lam * w }
        })
        .collect()
}

/// Mark sizes and measure weights used by the scheme on row `j`.
pub(crate) fn row_marks(marks: &MarkModel, p: f64) -> Vec<(f64, f64)> {
    match marks {
        MarkModel::None => vec![(1.0, 1.0)],
        MarkModel::Discrete { atoms, weights } => atoms.iter().copied().zip(weights.iter().copied()).collect(),
        MarkModel::Gamma => {
            let r = gamma_rule(p, GAMMA_NODES);
            r.nodes.into_iter().zip(r.weights).collect()
        }
    }
}

#[inline]
fn apply_jumps(entries: &[JumpEntry], row: &[f64], v_n: f64) -> f64 {
    let mut s = 0.0;
    for e in entries {
        let c = e.cell as usize;
        let vd = (1.0 - e.frac) * row[c] + e.frac * row[c + 1];
        s += e.weight * (vd - v_n);
    }
    s
}

/// One-sided differences at a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slopes {
    pub fk: f64,
    pub bk: f64,
    pub fp: f64,
    pub bp: f64,
}

#[inline]
fn up(b: f64, fwd: f64, bwd: f64) -> f64 {
    if b > 0.0 {
        b * fwd
    } else {
        b * bwd
    }
}

/// Maximizer of the upwinded Hamiltonian at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeOptimum {
    pub control: Control,
    pub regime: ConsumptionRegime,
    /// `U + up(b_K) + up(b_P)` at the optimum.
    pub hamiltonian: f64,
    pub drift_k: f64,
    /// Pollution drift including any edge correction.
    pub drift_p: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum Tag {
    Fwd,
    Bwd,
    Zero,
    Bound,
}

/// Exact maximization of
/// `U(C, P) + up(b_K; fk, bk) + up(b_P + extra_bp; fp, bp)`
/// over `C in [c_min, c_max]`, `theta in [0, bar_theta]`.
///
/// The objective is concave in `C` on each side of the zero-drift line and
/// piecewise affine in `theta` off it, so its maximum sits on a finite set of
/// candidates: box corners, the kinks `b_P = 0` and `b_K = 0`, interior
/// consumption optima on each side, and the interior optimum along the
/// zero-drift line. Ties resolve towards `bar_theta` and interior consumption.
pub fn maximize_upwind(
    k: f64,
    p: f64,
    s: Slopes,
    extra_bp: f64,
    prm: &ModelParams,
    c_min: f64,
    c_max: f64,
) -> NodeOptimum {
    let ak = prm.a * k;
    let bar = prm.bar_theta();
    let e = prm.epsilon;
    let sak = prm.sigma_ab * ak;
    let mut thetas = [0.0f64; 8];
    let mut nt = 0;
    let mut push = |t: f64| {
        if t.is_finite() {
            let t = t.clamp(0.0, bar);
            if !thetas[..nt].contains(&t) {
                thetas[nt] = t;
                nt += 1;
            }
        }
    };
    push(bar);
    push(0.0);
    if sak > 0.0 {
        push((prm.phi * ak - prm.alpha * p + extra_bp) / sak);
    }
    if ak > 0.0 {
        push(1.0 - c_min / ak);
        push(1.0 - c_max / ak);
        for d in [s.fp, s.bp] {
            if d < 0.0 && prm.sigma_ab > 0.0 {
                push(1.0 - (-prm.sigma_ab * d).powf(-1.0 / e) / ak);
            }
        }
    }
    let c_f = (s.fk > 0.0).then(|| s.fk.powf(-1.0 / e));
    let c_b = (s.bk > 0.0).then(|| s.bk.powf(-1.0 / e));
    let pol = pollution_disutility(p, prm);

    let mut best: Option<(f64, f64, f64, Tag, f64, f64)> = None;
    for &theta in &thetas[..nt] {
        let y = (1.0 - theta) * ak;
        let b_p = (prm.phi - prm.sigma_ab * theta) * ak - prm.alpha * p + extra_bp;
        let hp = up(b_p, s.fp, s.bp);
        let y_c = y.clamp(c_min, c_max);
        let mut cands = [(0.0, Tag::Bound); 5];
        let mut nc = 0;
        if let Some(c) = c_f {
            let lo_hi = y.max(c_min).min(c_max);
            let cc = c.max(c_min).min(lo_hi);
            cands[nc] = (cc, if cc == c { Tag::Fwd } else { Tag::Bound });
            nc += 1;
        }
        if let Some(c) = c_b {
            let lo = y.max(c_min).min(c_max);
            let cc = c.max(lo).min(c_max);
            cands[nc] = (cc, if cc == c { Tag::Bwd } else { Tag::Bound });
            nc += 1;
        }
        cands[nc] = (y_c, Tag::Zero);
        nc += 1;
        cands[nc] = (c_min, Tag::Bound);
        nc += 1;
        cands[nc] = (c_max, Tag::Bound);
        nc += 1;
        for &(c, tag) in &cands[..nc] {
            let b_k = y - c;
            let h = consumption_utility(c, prm) + up(b_k, s.fk, s.bk) + hp;
            if best.is_none_or(|b| h > b.0) {
                best = Some((h, c, theta, tag, b_k, b_p));
            }
        }
    }
    let (h, c, theta, tag, b_k, b_p) = best.expect("candidate set is never empty");
    let regime = if c == c_min || c == c_max {
        ConsumptionRegime::Bound
    } else if b_k == 0.0 || tag == Tag::Zero {
        ConsumptionRegime::ZeroDrift
    } else {
        match tag {
            Tag::Fwd => ConsumptionRegime::Forward,
            Tag::Bwd => ConsumptionRegime::Backward,
            _ => ConsumptionRegime::Bound,
        }
    };
    NodeOptimum { control: Control { c, theta }, regime, hamiltonian: h - pol, drift_k: b_k, drift_p: b_p }
}

/// Right-hand side of the scheme at one node, with its maximizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeRhs {
    pub rhs: f64,
    pub optimum: NodeOptimum,
    pub diffusion: f64,
    pub nonlocal: f64,
}

/// Everything about the discrete operator that does not depend on `v`.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub model: Model,
    pub grid: Grid,
    pub opts: SchemeOpts,
    pub c_max: f64,
    inv_dk: Vec<f64>,
    inv_dp: Vec<f64>,
    /// Diffusion weights towards `j - 1` and `j + 1` per row.
    diff: Vec<(f64, f64)>,
    /// Drift correction on the `P` edges.
    extra_bp: Vec<f64>,
    jump_start: Vec<usize>,
    jumps: Vec<JumpEntry>,
    /// Whether zero capital drift is attainable at `K_lo`.
    hold_k_lo: bool,
}

impl Discretization {
    pub fn new(model: &Model, grid: &Grid, opts: &SchemeOpts) -> Result<Self, SolveError> {
        model.validate()?;
        opts.validate()?;
        let prm = &model.params;
        let (nk, np) = (grid.n_k(), grid.n_p());
        let inv_dk: Vec<f64> = grid.k.windows(2).map(|w| 1.0 / (w[1] - w[0])).collect();
        let inv_dp: Vec<f64> = grid.p.windows(2).map(|w| 1.0 / (w[1] - w[0])).collect();
        let s2 = prm.sigma_p * prm.sigma_p;
        let mut diff = vec![(0.0, 0.0); np];
        let mut extra_bp = vec![0.0; np];
        if s2 > 0.0 {
            for j in 0..np {
                let p = grid.p[j];
                if j == 0 || j == np - 1 {
                    extra_bp[j] = -0.5 * s2 * p;
                } else {
                    let (hm, hp) = (grid.p[j] - grid.p[j - 1], grid.p[j + 1] - grid.p[j]);
                    let c = s2 * p * p / (hm + hp);
                    diff[j] = (c / hm, c / hp);
                }
            }
        }
        let mut jump_start = Vec::with_capacity(grid.len() + 1);
        let mut jumps = Vec::new();
        jump_start.push(0);
        for j in 0..np {
            let marks = row_marks(&model.marks, grid.p[j]);
            for i in 0..nk {
                jumps.extend(jump_entries(model, grid, i, j, &marks));
                jump_start.push(jumps.len());
            }
        }
        let lam_max = model.total_intensity(grid.p[np - 1]).max(model.total_intensity(grid.p[0]));
        let c_max = grid.spec.k_hi * (prm.a + (prm.rho + lam_max) / prm.epsilon);
        Ok(Self {
            model: model.clone(),
            grid: grid.clone(),
            opts: *opts,
            c_max,
            inv_dk,
            inv_dp,
            diff,
            extra_bp,
            jump_start,
            jumps,
            hold_k_lo: prm.a * grid.spec.k_lo > opts.c_min,
        })
    }

    #[inline]
    fn node_jumps(&self, n: usize) -> &[JumpEntry] {
        &self.jumps[self.jump_start[n]..self.jump_start[n + 1]]
    }

    #[inline]
    pub fn slopes(&self, v: &[f64], i: usize, j: usize) -> Slopes {
        let nk = self.grid.n_k();
        let np = self.grid.n_p();
        let n = i + nk * j;
        let fk = (i + 1 < nk).then(|| (v[n + 1] - v[n]) * self.inv_dk[i]);
        let bk = (i > 0).then(|| (v[n] - v[n - 1]) * self.inv_dk[i - 1]);
        let fp = (j + 1 < np).then(|| (v[n + nk] - v[n]) * self.inv_dp[j]);
        let bp = (j > 0).then(|| (v[n] - v[n - nk]) * self.inv_dp[j - 1]);
        Slopes { fk: fk.or(bk).unwrap(), bk: bk.or(fk).unwrap(), fp: fp.or(bp).unwrap(), bp: bp.or(fp).unwrap() }
    }

    /// Slopes seen by the scheme. Outward capital drift on the `K` edges is
    /// priced out (state constraint); outward pollution drift on the `P`
    /// edges is priced at zero (reflection), since it cannot always be
    /// steered inward. When output at `K_lo` cannot cover even `c_min` the
    /// lower `K` edge falls back to the inward one-sided slope.
    #[inline]
    fn scheme_slopes(&self, v: &[f64], i: usize, j: usize) -> Slopes {
        let mut s = self.slopes(v, i, j);
        if i == 0 && self.hold_k_lo {
            s.bk = f64::MAX;
        }
        if i + 1 == self.grid.n_k() {
            s.fk = -f64::MAX;
        }
        if j == 0 {
            s.bp = 0.0;
        }
        if j + 1 == self.grid.n_p() {
            s.fp = 0.0;
        }
        s
    }

    /// Jump term at node `(i, j)` for the grid values `v`.
    pub fn nonlocal_term(&self, v: &[f64], i: usize, j: usize) -> f64 {
        let nk = self.grid.n_k();
        let n = i + nk * j;
        apply_jumps(self.node_jumps(n), &v[nk * j..nk * (j + 1)], v[n])
    }

    #[inline]
    fn diffusion(&self, v: &[f64], i: usize, j: usize) -> f64 {
        let (am, ap) = self.diff[j];
        if am == 0.0 && ap == 0.0 {
            return 0.0;
        }
        let nk = self.grid.n_k();
        let n = i + nk * j;
        am * (v[n - nk] - v[n]) + ap * (v[n + nk] - v[n])
    }

    /// Bellman right-hand side and maximizing control at node `(i, j)`.
    pub fn hjb_rhs(&self, v: &[f64], i: usize, j: usize) -> NodeRhs {
        let s = self.scheme_slopes(v, i, j);
        let prm = &self.model.params;
        let optimum =
            maximize_upwind(self.grid.k[i], self.grid.p[j], s, self.extra_bp[j], prm, self.opts.c_min, self.c_max);
        let diffusion = self.diffusion(v, i, j);
        let nonlocal = self.nonlocal_term(v, i, j);
        NodeRhs { rhs: optimum.hamiltonian + diffusion + nonlocal, optimum, diffusion, nonlocal }
    }

    fn improve(&self, v: &[f64]) -> Vec<NodeRhs> {
        let nk = self.grid.n_k();
        let mut out: Vec<Option<NodeRhs>> = vec![None; v.len()];
        out.par_chunks_mut(nk).enumerate().for_each(|(j, row)| {
            for (i, slot) in row.iter_mut().enumerate() {
                *slot = Some(self.hjb_rhs(v, i, j));
            }
        });
        out.into_iter().map(|x| x.expect("filled")).collect()
    }

    /// Upwind direction for a drift `b` at index `i` of an axis with `n`
    /// nodes: `+1` forward, `-1` backward, `0` for no drift or drift leaving
    /// the domain.
    #[inline]
    fn direction(b: f64, i: usize, n: usize) -> i8 {
        if b > 0.0 && i + 1 < n {
            1
        } else if b < 0.0 && i > 0 {
            -1
        } else {
            0
        }
    }

    #[inline]
    fn direction_k(&self, b: f64, i: usize) -> i8 {
        if i == 0 && b < 0.0 && !self.hold_k_lo {
            1
        } else {
            Self::direction(b, i, self.grid.n_k())
        }
    }

    /// Sum of outgoing rates at a node under a given optimum; bounds the
    /// explicit pseudo-time step.
    fn outflow(&self, n: usize, opt: &NodeOptimum) -> f64 {
        let (i, j) = self.grid.coords(n);
        let np = self.grid.n_p();
        let dk = match self.direction_k(opt.drift_k, i) {
            1 => self.inv_dk[i],
            -1 => self.inv_dk[i - 1],
            _ => 0.0,
        };
        let dp = match Self::direction(opt.drift_p, j, np) {
            1 => self.inv_dp[j],
            -1 => self.inv_dp[j - 1],
            _ => 0.0,
        };
        let (am, ap) = self.diff[j];
        let jr: f64 = self.node_jumps(n).iter().map(|e| e.weight).sum();
        opt.drift_k.abs() * dk + opt.drift_p.abs() * dp + am + ap + jr
    }

    /// Exact evaluation of a fixed policy: solve `(rho - L) v = U`.
    fn evaluate(&self, policy: &[NodeRhs]) -> Result<Vec<f64>, SolveError> {
        let g = &self.grid;
        let (nk, np) = (g.n_k(), g.n_p());
        let n = g.len();
        let rho = self.model.params.rho;
        let mut a = BandMatrix::new(n, nk, nk);
        let mut rhs = vec![0.0; n];
        for j in 0..np {
            for i in 0..nk {
                let m = i + nk * j;
                let opt = &policy[m].optimum;
                rhs[m] = utility_of(opt, g.p[j], &self.model.params);
                a.add(m, m, rho)?;
                match self.direction_k(opt.drift_k, i) {
                    1 => {
                        let c = opt.drift_k * self.inv_dk[i];
                        a.add(m, m + 1, -c)?;
                        a.add(m, m, c)?;
                    }
                    -1 => {
                        let c = opt.drift_k * self.inv_dk[i - 1];
                        a.add(m, m, -c)?;
                        a.add(m, m - 1, c)?;
                    }
                    _ => {}
                }
                match Self::direction(opt.drift_p, j, np) {
                    1 => {
                        let c = opt.drift_p * self.inv_dp[j];
                        a.add(m, m + nk, -c)?;
                        a.add(m, m, c)?;
                    }
                    -1 => {
                        let c = opt.drift_p * self.inv_dp[j - 1];
                        a.add(m, m, -c)?;
                        a.add(m, m - nk, c)?;
                    }
                    _ => {}
                }
                let (am, ap) = self.diff[j];
                if am != 0.0 || ap != 0.0 {
                    a.add(m, m - nk, -am)?;
                    a.add(m, m + nk, -ap)?;
                    a.add(m, m, am + ap)?;
                }
                for e in self.node_jumps(m) {
                    let c = nk * j + e.cell as usize;
                    a.add(m, c, -e.weight * (1.0 - e.frac))?;
                    a.add(m, c + 1, -e.weight * e.frac)?;
                    a.add(m, m, e.weight)?;
                }
            }
        }
        Ok(a.solve(rhs)?)
    }

    fn initial_values(&self) -> Vec<f64> {
        let prm = &self.model.params;
        let g = &self.grid;
        let e = prm.epsilon;
        let mut v = Vec::with_capacity(g.len());
        match self.opts.init {
            Init::Candidate => {
                let psi = ((prm.rho - (1.0 - e) * prm.a) / e).max(0.5 * prm.rho / e);
                let x = prm.chi / (prm.rho + prm.alpha * (1.0 + prm.beta));
                let b = 1.0 + prm.beta;
                for j in 0..g.n_p() {
                    for i in 0..g.n_k() {
                        v.push(psi.powf(-e) * g.k[i].powf(1.0 - e) / (1.0 - e) - x * g.p[j].powf(b) / b);
                    }
                }
            }
            Init::Utility => {
                let share = 0.5 * (prm.a + prm.rho / e);
                for j in 0..g.n_p() {
                    for i in 0..g.n_k() {
                        let c = share * g.k[i];
                        v.push((consumption_utility(c, prm) - pollution_disutility(g.p[j], prm)) / prm.rho);
                    }
                }
            }
        }
        v
    }

    fn check_finite(&self, v: &[f64]) -> Result<(), SolveError> {
        if let Some(n) = v.iter().position(|x| !x.is_finite()) {
            let (i, j) = self.grid.coords(n);
            return Err(SolveError::Divergence { i, j, k: self.grid.k[i], p: self.grid.p[j] });
        }
        Ok(())
    }

    /// `max |rhs - rho v| / (1 + |rho v|)` over interior nodes.
    pub fn interior_residual(&self, v: &[f64], nodes: &[NodeRhs]) -> f64 {
        let rho = self.model.params.rho;
        let g = &self.grid;
        let mut worst = 0.0f64;
        for j in 1..g.n_p() - 1 {
            for i in 1..g.n_k() - 1 {
                let m = g.idx(i, j);
                let r = (nodes[m].rhs - rho * v[m]).abs() / (1.0 + (rho * v[m]).abs());
                worst = worst.max(r);
            }
        }
        worst
    }
}

#[inline]
fn utility_of(opt: &NodeOptimum, p: f64, prm: &ModelParams) -> f64 {
    consumption_utility(opt.control.c, prm) - pollution_disutility(p, prm)
}

fn relative_update(old: &[f64], new: &[f64]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (a, b) in old.iter().zip(new) {
        num = num.max((a - b).abs());
        den = den.max(b.abs());
    }
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Stability numbers of the explicit scheme at the converged policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CflNumbers {
    /// Largest stable explicit pseudo-time step.
    pub dtau_explicit: f64,
    /// `max |b_K| / dK` over nodes.
    pub drift_k: f64,
    /// `max |b_P| / dP` over nodes.
    pub drift_p: f64,
    /// `max sigma_P^2 P^2 / dP^2` over interior rows.
    pub diffusion: f64,
    /// Largest total jump rate.
    pub jump_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: Method,
    pub converged: bool,
    pub iterations: usize,
    pub final_update: f64,
    /// Relative sup-norm update per iteration.
    pub update_history: Vec<f64>,
    pub interior_residual: f64,
    pub cfl: CflNumbers,
    /// Nodes where no one-sided K slope is positive, so consumption sits on its bound.
    pub bound_fallback_nodes: usize,
    /// `K_hi` nodes where the unconstrained optimum would push capital out of the grid.
    pub outward_drift_k_hi: usize,
    /// `P_hi` nodes whose optimal pollution drift points out of the grid.
    pub outward_drift_p_hi: usize,
    pub c_max: f64,
    pub warnings: Vec<String>,
}

/// Converged value field, extracted policy and diagnostics.
#[derive(Debug, Clone)]
pub struct Solution {
    pub value: ValueField,
    pub policy: PolicyField,
    pub report: SolveReport,
}

/// Solve the stationary HJB equation of `model` on `grid`.
pub fn solve(model: &Model, grid: &Grid, opts: &SchemeOpts) -> Result<Solution, SolveError> {
    let disc = Discretization::new(model, grid, opts)?;
    disc.solve()
}

impl Discretization {
    pub fn solve(&self) -> Result<Solution, SolveError> {
        let mut v = self.initial_values();
        self.check_finite(&v)?;
        let mut history = Vec::new();
        let mut nodes = self.improve(&v);
        let rho = self.model.params.rho;
        let mut converged = false;
        for it in 0..self.opts.max_iters {
            let new = match self.opts.method {
                Method::Howard => self.evaluate(&nodes)?,
                Method::ValueIteration => {
                    if self.opts.howard_every.is_some_and(|k| (it + 1) % k == 0) {
                        self.evaluate(&nodes)?
                    } else {
                        let worst = (0..v.len()).map(|n| rho + self.outflow(n, &nodes[n].optimum)).fold(0.0, f64::max);
                        let dtau = self.opts.cfl_safety / worst;
                        v.iter().zip(&nodes).map(|(x, r)| x + dtau * (r.rhs - rho * x)).collect()
                    }
                }
            };
            self.check_finite(&new)?;
            let upd = relative_update(&v, &new);
            history.push(upd);
            v = new;
            nodes = self.improve(&v);
            if upd < self.opts.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(SolveError::NotConverged {
                iterations: history.len(),
                last_update: *history.last().unwrap_or(&f64::NAN),
                history,
            });
        }
        Ok(self.package(v, nodes, history))
    }

    fn package(&self, v: Vec<f64>, nodes: Vec<NodeRhs>, history: Vec<f64>) -> Solution {
        let g = &self.grid;
        let (nk, np) = (g.n_k(), g.n_p());
        let prm = &self.model.params;
        let mut v_k = Vec::with_capacity(v.len());
        let mut v_p = Vec::with_capacity(v.len());
        let mut fallback = 0;
        let mut cfl = CflNumbers { dtau_explicit: f64::INFINITY, drift_k: 0.0, drift_p: 0.0, diffusion: 0.0, jump_rate: 0.0 };
        let mut worst_out = 0.0f64;
        for j in 0..np {
            for i in 0..nk {
                let m = g.idx(i, j);
                let s = self.slopes(&v, i, j);
                let o = &nodes[m].optimum;
                v_k.push(match o.drift_k.partial_cmp(&0.0) {
                    Some(std::cmp::Ordering::Greater) => s.fk,
                    Some(std::cmp::Ordering::Less) => s.bk,
                    _ => 0.5 * (s.fk + s.bk),
                });
                v_p.push(match o.drift_p.partial_cmp(&0.0) {
                    Some(std::cmp::Ordering::Greater) => s.fp,
                    Some(std::cmp::Ordering::Less) => s.bp,
                    _ => 0.5 * (s.fp + s.bp),
                });
                if s.fk <= 0.0 && s.bk <= 0.0 {
                    fallback += 1;
                }
                let dk = if i + 1 < nk { self.inv_dk[i] } else { self.inv_dk[i - 1] };
                let dp = if j + 1 < np { self.inv_dp[j] } else { self.inv_dp[j - 1] };
                cfl.drift_k = cfl.drift_k.max(o.drift_k.abs() * dk);
                cfl.drift_p = cfl.drift_p.max(o.drift_p.abs() * dp);
                let (am, ap) = self.diff[j];
                cfl.diffusion = cfl.diffusion.max(am + ap);
                let jr: f64 = self.node_jumps(m).iter().map(|e| e.weight).sum();
                cfl.jump_rate = cfl.jump_rate.max(jr);
                worst_out = worst_out.max(prm.rho + self.outflow(m, o));
            }
        }
        cfl.dtau_explicit = 1.0 / worst_out;
        // on K_hi the drift is constrained; count rows where the constraint binds
        let out_k = (0..np)
            .filter(|&j| {
                let m = g.idx(nk - 1, j);
                let s = self.slopes(&v, nk - 1, j);
                let y = (1.0 - nodes[m].optimum.control.theta) * prm.a * g.k[nk - 1];
                s.bk > 0.0 && s.bk.powf(-1.0 / prm.epsilon) < y
            })
            .count();
        let out_p = (0..nk).filter(|&i| nodes[g.idx(i, np - 1)].optimum.drift_p > 0.0).count();
        let mut warnings = Vec::new();
        if out_k > 0 {
            warnings.push(format!("capital would grow out of the grid at {out_k} of {np} nodes on K_hi; held by the state constraint"));
        }
        if out_p > 0 {
            warnings.push(format!("optimal pollution drift points out of the grid at {out_p} of {nk} nodes on P_hi"));
        }
        if fallback > 0 {
            warnings.push(format!("{fallback} nodes have no positive K slope; consumption set to its bound"));
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        let interior_residual = self.interior_residual(&v, &nodes);
        let report = SolveReport {
            method: self.opts.method,
            converged: true,
            iterations: history.len(),
            final_update: *history.last().unwrap_or(&0.0),
            update_history: history,
            interior_residual,
            cfl,
            bound_fallback_nodes: fallback,
            outward_drift_k_hi: out_k,
            outward_drift_p_hi: out_p,
            c_max: self.c_max,
            warnings,
        };
        let policy = PolicyField {
            grid: g.clone(),
            consumption: nodes.iter().map(|r| r.optimum.control.c).collect(),
            theta: nodes.iter().map(|r| r.optimum.control.theta).collect(),
            regime: nodes.iter().map(|r| r.optimum.regime).collect(),
        };
        let value = ValueField::from_values(g.clone(), *prm, v).with_gradients(v_k, v_p);
        Solution { value, policy, report }
    }
}

/// Jump term of a value field at node `(i, j)`.
pub fn nonlocal_term(field: &ValueField, model: &Model, i: usize, j: usize) -> f64 {
    let g = &field.grid;
    let marks = row_marks(&model.marks, g.p[j]);
    let entries = jump_entries(model, g, i, j, &marks);
    let nk = g.n_k();
    apply_jumps(&entries, &field.values[nk * j..nk * (j + 1)], field.at(i, j))
}

/// Bellman right-hand side of a value field at node `(i, j)`.
pub fn hjb_rhs(field: &ValueField, model: &Model, i: usize, j: usize, opts: &SchemeOpts) -> Result<NodeRhs, SolveError> {
    let disc = Discretization::new(model, &field.grid, opts)?;
    Ok(disc.hjb_rhs(&field.values, i, j))
}
