//! Grid-sampled value functions and feedback policies.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::grid::{cell, Grid};
use crate::model::{ModelParams, State};

/// Value function sampled on a grid, with cached one-sided differences.
///
/// Derivatives are with respect to the levels `K` and `P`. On an edge the
/// missing one-sided difference is replaced by the available one.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: Grid,
    pub params: ModelParams,
    pub values: Vec<f64>,
    pub dk_fwd: Vec<f64>,
    pub dk_bwd: Vec<f64>,
    pub dp_fwd: Vec<f64>,
    pub dp_bwd: Vec<f64>,
    /// Selected gradient in K: upwind along the optimal drift for solved
    /// fields, three-point central otherwise.
    pub v_k: Vec<f64>,
    pub v_p: Vec<f64>,
    /// Second difference in P (central; edges copy their neighbour).
    pub v_pp: Vec<f64>,
}

/// Three-point first derivative on a non-uniform stencil.
#[inline]
fn central(vm: f64, v0: f64, vp: f64, hm: f64, hp: f64) -> f64 {
    (hm * hm * vp - hp * hp * vm + (hp * hp - hm * hm) * v0) / (hp * hm * (hp + hm))
}

#[inline]
fn second(vm: f64, v0: f64, vp: f64, hm: f64, hp: f64) -> f64 {
    2.0 * ((vp - v0) / hp - (v0 - vm) / hm) / (hp + hm)
}

impl ValueField {
    pub fn from_values(grid: Grid, params: ModelParams, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len());
        let n = grid.len();
        let (nk, np) = (grid.n_k(), grid.n_p());
        let mut f = Self {
            dk_fwd: vec![0.0; n],
            dk_bwd: vec![0.0; n],
            dp_fwd: vec![0.0; n],
            dp_bwd: vec![0.0; n],
            v_k: vec![0.0; n],
            v_p: vec![0.0; n],
            v_pp: vec![0.0; n],
            grid,
            params,
            values,
        };
        let g = &f.grid;
        let v = &f.values;
        for j in 0..np {
            for i in 0..nk {
                let m = g.idx(i, j);
                let fk = (i + 1 < nk).then(|| (v[m + 1] - v[m]) / (g.k[i + 1] - g.k[i]));
                let bk = (i > 0).then(|| (v[m] - v[m - 1]) / (g.k[i] - g.k[i - 1]));
                f.dk_fwd[m] = fk.or(bk).unwrap();
                f.dk_bwd[m] = bk.or(fk).unwrap();
                f.v_k[m] = match (i > 0, i + 1 < nk) {
                    (true, true) => central(v[m - 1], v[m], v[m + 1], g.k[i] - g.k[i - 1], g.k[i + 1] - g.k[i]),
                    _ => f.dk_fwd[m],
                };
                let fp = (j + 1 < np).then(|| (v[m + nk] - v[m]) / (g.p[j + 1] - g.p[j]));
                let bp = (j > 0).then(|| (v[m] - v[m - nk]) / (g.p[j] - g.p[j - 1]));
                f.dp_fwd[m] = fp.or(bp).unwrap();
                f.dp_bwd[m] = bp.or(fp).unwrap();
                f.v_p[m] = match (j > 0, j + 1 < np) {
                    (true, true) => central(v[m - nk], v[m], v[m + nk], g.p[j] - g.p[j - 1], g.p[j + 1] - g.p[j]),
                    _ => f.dp_fwd[m],
                };
            }
        }
        for j in 0..np {
            let jc = j.clamp(1, np - 2);
            let (hm, hp) = (g.p[jc] - g.p[jc - 1], g.p[jc + 1] - g.p[jc]);
            for i in 0..nk {
                let c = g.idx(i, jc);
                f.v_pp[g.idx(i, j)] = second(v[c - nk], v[c], v[c + nk], hm, hp);
            }
        }
        f
    }

    /// Sample `value` at every node.
    pub fn from_fn(grid: Grid, params: ModelParams, value: impl Fn(State) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.n_p() {
            for i in 0..grid.n_k() {
                values.push(value(State { k: grid.k[i], p: grid.p[j] }));
            }
        }
        Self::from_values(grid, params, values)
    }

    /// Replace the selected gradients (the solver stores its upwind choice).
    pub(crate) fn with_gradients(mut self, v_k: Vec<f64>, v_p: Vec<f64>) -> Self {
        assert_eq!(v_k.len(), self.values.len());
        assert_eq!(v_p.len(), self.values.len());
        self.v_k = v_k;
        self.v_p = v_p;
        self
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    /// Value at an arbitrary state: bilinear in `(ln K, ln P)` inside the
    /// grid, linear extrapolation in `ln K` below `K_lo`, constant beyond the
    /// other edges.
    pub fn interpolate(&self, k: f64, p: f64) -> f64 {
        self.interpolate_ln(k.ln(), p.ln())
    }

    pub fn interpolate_ln(&self, ln_k: f64, ln_p: f64) -> f64 {
        let g = &self.grid;
        let (nk, np) = (g.n_k(), g.n_p());
        let pk = g.k_position(ln_k).min((nk - 1) as f64);
        let pp = g.p_position(ln_p).clamp(0.0, (np - 1) as f64);
        let (ci, fi) = cell(pk, nk);
        let (cj, fj) = cell(pp, np);
        let m = g.idx(ci, cj);
        let v = &self.values;
        let lo = (1.0 - fi) * v[m] + fi * v[m + 1];
        let hi = (1.0 - fi) * v[m + nk] + fi * v[m + nk + 1];
        (1.0 - fj) * lo + fj * hi
    }

    /// Largest interior violations of `v_K >= 0` and `v_P <= 0` (zero if none).
    pub fn monotonicity_violation(&self) -> (f64, f64) {
        let g = &self.grid;
        let mut worst = (0.0f64, 0.0f64);
        for j in 1..g.n_p() - 1 {
            for i in 1..g.n_k() - 1 {
                let m = g.idx(i, j);
                worst.0 = worst.0.max(-self.v_k[m]);
                worst.1 = worst.1.max(self.v_p[m]);
            }
        }
        worst
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header_comment: &str) -> io::Result<()> {
        writeln!(w, "# {header_comment}")?;
        writeln!(w, "i,j,K,P,v,v_K,v_P,v_PP")?;
        let g = &self.grid;
        for j in 0..g.n_p() {
            for i in 0..g.n_k() {
                let m = g.idx(i, j);
                writeln!(
                    w,
                    "{i},{j},{},{},{},{},{},{}",
                    g.k[i], g.p[j], self.values[m], self.v_k[m], self.v_p[m], self.v_pp[m]
                )?;
            }
        }
        Ok(())
    }
}

/// Which branch of the consumption maximization was active at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConsumptionRegime {
    /// Interior optimum against the forward difference (capital grows).
    Forward,
    /// Interior optimum against the backward difference (capital shrinks).
    Backward,
    /// Consumption equals net output.
    ZeroDrift,
    /// Consumption pinned at an admissibility bound.
    Bound,
}

impl ConsumptionRegime {
    pub fn is_interior(self) -> bool {
        matches!(self, Self::Forward | Self::Backward)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Forward => "FORWARD",
            Self::Backward => "BACKWARD",
            Self::ZeroDrift => "ZERO_DRIFT",
            Self::Bound => "BOUND",
        }
    }
}

/// Maximizing controls at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    pub grid: Grid,
    pub consumption: Vec<f64>,
    pub theta: Vec<f64>,
    pub regime: Vec<ConsumptionRegime>,
}

impl PolicyField {
    /// Share of nodes whose abatement is strictly between 0 and `bar_theta`.
    pub fn interior_theta_share(&self, bar_theta: f64) -> f64 {
        let tol = 1e-12 * bar_theta.max(1e-300);
        let inside = self.theta.iter().filter(|&&t| t > tol && t < bar_theta - tol).count();
        inside as f64 / self.theta.len() as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header_comment: &str, values: &ValueField) -> io::Result<()> {
        writeln!(w, "# {header_comment}")?;
        writeln!(w, "i,j,K,P,v,C,theta,regime")?;
        let g = &self.grid;
        for j in 0..g.n_p() {
            for i in 0..g.n_k() {
                let m = g.idx(i, j);
                writeln!(
                    w,
                    "{i},{j},{},{},{},{},{},{}",
                    g.k[i],
                    g.p[j],
                    values.values[m],
                    self.consumption[m],
                    self.theta[m],
                    self.regime[m].name()
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures;
    use approx::assert_relative_eq;

    fn grid() -> Grid {
        Grid::new(0.5, 4.0, 33, 0.2, 3.0, 17).unwrap()
    }

    #[test]
    fn differences_of_linear_functions_are_exact() {
        let f = ValueField::from_fn(grid(), fixtures::decoupled(), |s| 2.0 * s.k - 3.0 * s.p + 1.0);
        for m in 0..f.values.len() {
            for d in [f.dk_fwd[m], f.dk_bwd[m], f.v_k[m]] {
                assert_relative_eq!(d, 2.0, epsilon = 1e-10);
            }
            for d in [f.dp_fwd[m], f.dp_bwd[m], f.v_p[m]] {
                assert_relative_eq!(d, -3.0, epsilon = 1e-10);
            }
            assert!(f.v_pp[m].abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_second_difference_is_exact() {
        let f = ValueField::from_fn(grid(), fixtures::decoupled(), |s| s.p * s.p + s.k * s.k);
        for m in 0..f.values.len() {
            assert_relative_eq!(f.v_pp[m], 2.0, epsilon = 1e-8);
            // three-point central is exact on quadratics
            let (i, _) = f.grid.coords(m);
            if i > 0 && i + 1 < f.grid.n_k() {
                assert_relative_eq!(f.v_k[m], 2.0 * f.grid.k[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn interpolation_reproduces_nodes_and_log_linear_functions() {
        let g = grid();
        let f = ValueField::from_fn(g.clone(), fixtures::decoupled(), |s| 3.0 * s.k.ln() - s.p.ln());
        assert_relative_eq!(f.interpolate(g.k[5], g.p[7]), f.at(5, 7), max_relative = 1e-14);
        assert_relative_eq!(f.interpolate(1.3, 0.77), 3.0 * 1.3f64.ln() - 0.77f64.ln(), epsilon = 1e-12);
        // linear extrapolation in ln K below the grid
        assert_relative_eq!(f.interpolate(0.1, 1.0), 3.0 * 0.1f64.ln(), epsilon = 1e-10);
        // constant beyond the top edges
        assert_relative_eq!(f.interpolate(40.0, 1.0), 3.0 * 4.0f64.ln(), epsilon = 1e-10);
        assert_relative_eq!(f.interpolate(1.0, 30.0), -(3.0f64.ln()), epsilon = 1e-10);
        assert_relative_eq!(f.interpolate(1.0, 0.01), -(0.2f64.ln()), epsilon = 1e-10);
    }

    #[test]
    fn tie_share_counts_interior_abatement() {
        let g = Grid::new(1.0, 2.0, 16, 1.0, 2.0, 16).unwrap();
        let n = g.len();
        let mut theta = vec![0.0; n];
        theta[0] = 0.15;
        theta[1] = 0.3;
        let pol = PolicyField { grid: g, consumption: vec![1.0; n], theta, regime: vec![ConsumptionRegime::Forward; n] };
        assert_relative_eq!(pol.interior_theta_share(0.3), 1.0 / n as f64);
    }
}
