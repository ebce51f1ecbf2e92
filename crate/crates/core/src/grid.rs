//! Log-spaced tensor grids on a truncated state space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
}

/// Bounds and resolution of a grid, as written in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "K_lo")]
    pub k_lo: f64,
    #[serde(rename = "K_hi")]
    pub k_hi: f64,
    #[serde(rename = "N_K")]
    pub n_k: usize,
    #[serde(rename = "P_lo")]
    pub p_lo: f64,
    #[serde(rename = "P_hi")]
    pub p_hi: f64,
    #[serde(rename = "N_P")]
    pub n_p: usize,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid, GridError> {
        Grid::new(self.k_lo, self.k_hi, self.n_k, self.p_lo, self.p_hi, self.n_p)
    }

    /// Same bounds, `factor` times the number of cells per axis.
    pub fn refined(&self, factor: usize) -> Self {
        Self { n_k: (self.n_k - 1) * factor + 1, n_p: (self.n_p - 1) * factor + 1, ..*self }
    }
}

/// Nodes `K_i = K_lo e^{i hk}`, `P_j = P_lo e^{j hp}`; node `(i, j)` is stored
/// at `i + n_k * j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub spec: GridSpec,
    pub k: Vec<f64>,
    pub p: Vec<f64>,
    pub ln_k: Vec<f64>,
    pub ln_p: Vec<f64>,
    /// Log spacing along K.
    pub hk: f64,
    /// Log spacing along P.
    pub hp: f64,
}

pub const MIN_NODES: usize = 16;

fn log_nodes(lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let (a, b) = (lo.ln(), hi.ln());
    let h = (b - a) / (n - 1) as f64;
    let ln: Vec<f64> = (0..n).map(|i| if i == n - 1 { b } else { a + h * i as f64 }).collect();
    let mut x: Vec<f64> = ln.iter().map(|v| v.exp()).collect();
    x[0] = lo;
    x[n - 1] = hi;
    (x, ln, h)
}

impl Grid {
    pub fn new(k_lo: f64, k_hi: f64, n_k: usize, p_lo: f64, p_hi: f64, n_p: usize) -> Result<Self, GridError> {
        let ok = |lo: f64, hi: f64| lo > 0.0 && hi > lo && hi.is_finite();
        if !ok(k_lo, k_hi) {
            return Err(GridError::Invalid(format!("K range [{k_lo}, {k_hi}]")));
        }
        if !ok(p_lo, p_hi) {
            return Err(GridError::Invalid(format!("P range [{p_lo}, {p_hi}]")));
        }
        if n_k < MIN_NODES || n_p < MIN_NODES {
            return Err(GridError::Invalid(format!("need at least {MIN_NODES} nodes per axis, got {n_k} x {n_p}")));
        }
        let (k, ln_k, hk) = log_nodes(k_lo, k_hi, n_k);
        let (p, ln_p, hp) = log_nodes(p_lo, p_hi, n_p);
        let spec = GridSpec { k_lo, k_hi, n_k, p_lo, p_hi, n_p };
        Ok(Self { spec, k, p, ln_k, ln_p, hk, hp })
    }

    #[inline]
    pub fn n_k(&self) -> usize {
        self.k.len()
    }

    #[inline]
    pub fn n_p(&self) -> usize {
        self.p.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.k.len() * self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether `(k, p)` lies in the closed grid rectangle.
    pub fn contains(&self, k: f64, p: f64) -> bool {
        (self.spec.k_lo..=self.spec.k_hi).contains(&k) && (self.spec.p_lo..=self.spec.p_hi).contains(&p)
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i + self.k.len() * j
    }

    #[inline]
    pub fn coords(&self, n: usize) -> (usize, usize) {
        (n % self.k.len(), n / self.k.len())
    }

    /// Fractional log-position of `k` on the K axis (0 at `K_lo`).
    #[inline]
    pub fn k_position(&self, ln_k: f64) -> f64 {
        (ln_k - self.ln_k[0]) / self.hk
    }

    #[inline]
    pub fn p_position(&self, ln_p: f64) -> f64 {
        (ln_p - self.ln_p[0]) / self.hp
    }

    /// Index range covering the central `share` of an axis with `n` nodes.
    pub fn central_range(n: usize, share: f64) -> std::ops::RangeInclusive<usize> {
        let margin = (1.0 - share) / 2.0 * (n - 1) as f64;
        let lo = margin.ceil() as usize;
        let hi = ((n - 1) as f64 - margin).floor() as usize;
        lo..=hi
    }

    /// Whether node `(i, j)` lies in the central `share` of both axes.
    pub fn in_core(&self, i: usize, j: usize, share: f64) -> bool {
        Self::central_range(self.n_k(), share).contains(&i) && Self::central_range(self.n_p(), share).contains(&j)
    }

    /// Nodes away from every edge.
    pub fn is_interior(&self, i: usize, j: usize) -> bool {
        i > 0 && j > 0 && i + 1 < self.n_k() && j + 1 < self.n_p()
    }
}

/// Split a fractional position into a cell index in `[0, n - 2]` and a
/// weight; weights fall outside `[0, 1]` when extrapolating.
#[inline]
pub(crate) fn cell(pos: f64, n: usize) -> (usize, f64) {
    let c = pos.floor();
    let c = if c < 0.0 { 0 } else { (c as usize).min(n - 2) };
    (c, pos - c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn nodes_are_log_spaced() {
        let g = Grid::new(0.1, 10.0, 21, 1.0, 4.0, 16).unwrap();
        assert_eq!(g.k[0], 0.1);
        assert_eq!(g.k[20], 10.0);
        assert_relative_eq!(g.k[10], 1.0, epsilon = 1e-12);
        assert!(g.k.windows(2).all(|w| w[1] > w[0]));
        let ratios: Vec<f64> = g.k.windows(2).map(|w| w[1] / w[0]).collect();
        assert!(ratios.iter().all(|r| (r - ratios[0]).abs() < 1e-12));
        assert_eq!(g.idx(3, 2), 3 + 21 * 2);
        assert_eq!(g.coords(g.idx(3, 2)), (3, 2));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(0.0, 1.0, 16, 1.0, 2.0, 16).is_err());
        assert!(Grid::new(1.0, 1.0, 16, 1.0, 2.0, 16).is_err());
        assert!(Grid::new(0.1, 1.0, 15, 1.0, 2.0, 16).is_err());
        assert!(Grid::new(0.1, 1.0, 16, 1.0, 2.0, 8).is_err());
    }

    #[test]
    fn central_ranges() {
        assert_eq!(Grid::central_range(11, 0.6), 2..=8);
        assert_eq!(Grid::central_range(128, 0.6), 26..=101);
        assert_eq!(Grid::central_range(5, 1.0), 0..=4);
    }

    #[test]
    fn refinement_halves_spacing() {
        let s = GridSpec { k_lo: 0.5, k_hi: 2.0, n_k: 17, p_lo: 0.5, p_hi: 2.0, n_p: 33 };
        let (a, b) = (s.build().unwrap(), s.refined(2).build().unwrap());
        assert_relative_eq!(a.hk, 2.0 * b.hk, epsilon = 1e-15);
        assert_relative_eq!(a.hp, 2.0 * b.hp, epsilon = 1e-15);
        for i in 0..17 {
            assert_relative_eq!(a.k[i], b.k[2 * i], epsilon = 1e-14);
        }
    }

    #[test]
    fn cells_clamp_and_extrapolate() {
        assert_eq!(cell(3.25, 10), (3, 0.25));
        assert_eq!(cell(-0.5, 10), (0, -0.5));
        assert_eq!(cell(9.0, 10), (8, 1.0));
    }
}
