//! Envelope identities: the HJB equation differentiated in `K` and in `P`
//! along the optimal feedback.
//!
//! For the unmarked, noise-free variants,
//!
//! ```text
//! rho v_K = b_K v_KK + (1-theta) A v_K + (phi - sigma_ab theta) A v_P + b_P v_PK
//!           + lambda (v_K(wK, P) (w + K w_K) - v_K)
//! rho v_P = U_P + b_K v_KP + b_P v_PP - alpha v_P + lambda' (v(wK, P) - v)
//!           + lambda (v_K(wK, P) K w_P + v_P(wK, P) - v_P)
//! ```
//!
//! with `w = exp(-delta P^xi K^eta)`, controls from the first-order
//! conditions and `lambda' = lambda1`. Residuals are `|LHS - RHS|`.

use thiserror::Error;

use crate::field::ValueField;
use crate::grid::{cell, Grid};
use crate::model::{
    damage_exponent, foc_abatement, foc_consumption, intensity, marginal_pollution_utility, Model, ModelError,
    ModelParams, State,
};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum EnvelopeError {
    #[error("envelope identities are only evaluated for HPP and NHPP, not {0}")]
    Variant(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Value and derivatives at one state.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub v_k: f64,
    pub v_p: f64,
    pub v_kk: f64,
    pub v_pp: f64,
    pub v_kp: f64,
}

/// Residual pair at one state. `here` carries the derivatives at `(K, P)`,
/// `shifted` the value and first derivatives at the post-disaster state
/// `(w K, P)` (its second derivatives are not used).
pub fn residuals_at(state: State, here: &Jet, shifted: &Jet, prm: &ModelParams) -> Result<(f64, f64), ModelError> {
    let State { k, p } = state;
    let c = foc_consumption(here.v_k, prm)?;
    let theta = foc_abatement(here.v_k, here.v_p, prm, 0.0);
    let ak = prm.a * k;
    let b_k = (1.0 - theta) * ak - c;
    let b_p = (prm.phi - prm.sigma_ab * theta) * ak - prm.alpha * p;
    let lam = intensity(p, prm);
    let d = damage_exponent(k, p, prm);
    let w = (-d).exp();
    // K w_K = -eta d w, K w_P = -xi d w K / P
    let k_wk = -prm.eta * d * w;
    let k_wp = -prm.xi * d * w * k / p;

    let rhs_k = b_k * here.v_kk
        + (1.0 - theta) * prm.a * here.v_k
        + (prm.phi - prm.sigma_ab * theta) * prm.a * here.v_p
        + b_p * here.v_kp
        + lam * (shifted.v_k * (w + k_wk) - here.v_k);
    let rhs_p = marginal_pollution_utility(p, prm)
        + b_k * here.v_kp
        + b_p * here.v_pp
        - prm.alpha * here.v_p
        + prm.lambda1 * (shifted.v - here.v)
        + lam * (shifted.v_k * k_wp + shifted.v_p - here.v_p);
    Ok(((prm.rho * here.v_k - rhs_k).abs(), (prm.rho * here.v_p - rhs_p).abs()))
}

fn check_variant(model: &Model) -> Result<(), EnvelopeError> {
    let v = model.params.variant;
    if v.is_diffusive() || v.is_marked() {
        return Err(EnvelopeError::Variant(v.name()));
    }
    model.validate()?;
    Ok(())
}

/// Residuals for a value function known in closed form.
pub fn exact_residuals_at(
    model: &Model,
    state: State,
    jet: impl Fn(State) -> Jet,
) -> Result<(f64, f64), EnvelopeError> {
    check_variant(model)?;
    let w = (-damage_exponent(state.k, state.p, &model.params)).exp();
    let here = jet(state);
    let shifted = jet(State { k: w * state.k, p: state.p });
    Ok(residuals_at(state, &here, &shifted, &model.params)?)
}

/// Per-node residual grids.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeResiduals {
    pub grid: Grid,
    pub r_k: Vec<f64>,
    pub r_p: Vec<f64>,
    /// Nodes whose whole stencil, including the displaced point, lies
    /// strictly inside the grid.
    pub interior: Vec<bool>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mid = xs.len() / 2;
    let (_, m, _) = xs.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if xs.len() % 2 == 1 {
        m
    } else {
        let lo = xs[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + m)
    }
}

impl EnvelopeResiduals {
    fn interior_values(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.interior).filter(|(_, &keep)| keep).map(|(x, _)| *x).collect()
    }

    pub fn median_k(&self) -> f64 {
        median(self.interior_values(&self.r_k))
    }

    pub fn median_p(&self) -> f64 {
        median(self.interior_values(&self.r_p))
    }

    pub fn max_k(&self) -> f64 {
        self.interior_values(&self.r_k).into_iter().fold(0.0, f64::max)
    }

    pub fn max_p(&self) -> f64 {
        self.interior_values(&self.r_p).into_iter().fold(0.0, f64::max)
    }

    pub fn interior_count(&self) -> usize {
        self.interior.iter().filter(|&&b| b).count()
    }
}

/// Central-difference jets at every node; edges use the nearest interior
/// stencil.
pub fn jets(field: &ValueField) -> Vec<Jet> {
    let g = &field.grid;
    let v = &field.values;
    let (nk, np) = (g.n_k(), g.n_p());
    let d1 = |x: &[f64], i: usize, vm: f64, v0: f64, vp: f64| {
        let (hm, hp) = (x[i] - x[i - 1], x[i + 1] - x[i]);
        (hm * hm * vp - hp * hp * vm + (hp * hp - hm * hm) * v0) / (hp * hm * (hp + hm))
    };
    let d2 = |x: &[f64], i: usize, vm: f64, v0: f64, vp: f64| {
        let (hm, hp) = (x[i] - x[i - 1], x[i + 1] - x[i]);
        2.0 * ((vp - v0) / hp - (v0 - vm) / hm) / (hp + hm)
    };
    let mut out = vec![Jet::default(); g.len()];
    let mut v_p = vec![0.0; g.len()];
    for j in 0..np {
        let jc = j.clamp(1, np - 2);
        for i in 0..nk {
            let c = g.idx(i, jc);
            v_p[g.idx(i, j)] = d1(&g.p, jc, v[c - nk], v[c], v[c + nk]);
        }
    }
    for j in 0..np {
        let jc = j.clamp(1, np - 2);
        for i in 0..nk {
            let ic = i.clamp(1, nk - 2);
            let m = g.idx(i, j);
            let ck = g.idx(ic, j);
            let cp = g.idx(i, jc);
            out[m] = Jet {
                v: v[m],
                v_k: d1(&g.k, ic, v[ck - 1], v[ck], v[ck + 1]),
                v_p: v_p[m],
                v_kk: d2(&g.k, ic, v[ck - 1], v[ck], v[ck + 1]),
                v_pp: d2(&g.p, jc, v[cp - nk], v[cp], v[cp + nk]),
                v_kp: d1(&g.k, ic, v_p[ck - 1], v_p[ck], v_p[ck + 1]),
            };
        }
    }
    out
}

/// Cubic Lagrange weights on nodes `-1, 0, 1, 2` at offset `f`.
fn cubic_weights(f: f64) -> [f64; 4] {
    [
        -f * (f - 1.0) * (f - 2.0) / 6.0,
        (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0,
        -(f + 1.0) * f * (f - 2.0) / 2.0,
        (f + 1.0) * f * (f - 1.0) / 6.0,
    ]
}

/// Envelope residuals of a grid field, with finite-difference derivatives
/// and cubic interpolation in `ln K` at the displaced point (linear next to
/// the edges). Linear interpolation would leave an `O(h^2)` error whose
/// constant depends on where the displaced point falls inside its cell,
/// which changes erratically under refinement.
pub fn envelope_residuals(field: &ValueField, model: &Model) -> Result<EnvelopeResiduals, EnvelopeError> {
    check_variant(model)?;
    let prm = &model.params;
    let g = &field.grid;
    let (nk, np) = (g.n_k(), g.n_p());
    let jets = jets(field);
    let mut r_k = vec![0.0; g.len()];
    let mut r_p = vec![0.0; g.len()];
    let mut interior = vec![false; g.len()];
    for j in 0..np {
        for i in 0..nk {
            let m = g.idx(i, j);
            let state = State { k: g.k[i], p: g.p[j] };
            let d = damage_exponent(state.k, state.p, prm);
            let pos = g.k_position(g.ln_k[i] - d);
            let (ci, f) = cell(pos, nk);
            let shifted = if ci >= 1 && ci + 2 < nk {
                let w = cubic_weights(f);
                let at = |q: usize| &jets[g.idx(ci - 1 + q, j)];
                let mix = |get: fn(&Jet) -> f64| (0..4).map(|q| w[q] * get(at(q))).sum::<f64>();
                Jet { v: mix(|x| x.v), v_k: mix(|x| x.v_k), v_p: mix(|x| x.v_p), ..Jet::default() }
            } else {
                let (a, b) = (&jets[g.idx(ci, j)], &jets[g.idx(ci + 1, j)]);
                let lerp = |x: f64, y: f64| (1.0 - f) * x + f * y;
                Jet { v: lerp(a.v, b.v), v_k: lerp(a.v_k, b.v_k), v_p: lerp(a.v_p, b.v_p), ..Jet::default() }
            };
            let (rk, rp) = residuals_at(state, &jets[m], &shifted, prm)?;
            r_k[m] = rk;
            r_p[m] = rp;
            interior[m] = g.is_interior(i, j) && pos >= 1.0;
        }
    }
    Ok(EnvelopeResiduals { grid: g.clone(), r_k, r_p, interior })
}

/// Closed-form fields that solve the HJB exactly, used to exercise the
/// residual evaluation away from the decoupled regime.
pub mod closed_form {
    use super::*;

    fn check(cond: bool, what: &str) -> Result<(), ModelError> {
        if cond {
            Ok(())
        } else {
            Err(ModelError::NotDecoupled(what.to_string()))
        }
    }

    /// `psi` solving `rho = eps psi + (1-eps) A + lambda (w^(1-eps) - 1)`.
    fn psi(lam: f64, w: f64, prm: &ModelParams) -> Result<f64, ModelError> {
        let e = prm.epsilon;
        let psi = (prm.rho - (1.0 - e) * prm.a - lam * (w.powf(1.0 - e) - 1.0)) / e;
        if psi > 0.0 {
            Ok(psi)
        } else {
            Err(ModelError::InvalidParameter { name: "rho", reason: format!("no finite value: psi = {psi}") })
        }
    }

    /// Constant hazard with constant damage (`xi = eta = 0`) and no
    /// emissions: the candidate form with a shifted `psi`.
    pub fn hpp(prm: &ModelParams) -> Result<impl Fn(State) -> Jet, ModelError> {
        prm.validate()?;
        check(prm.xi == 0.0 && prm.eta == 0.0, "damage must not depend on the state")?;
        check(prm.phi == 0.0 && prm.lambda1 == 0.0 && prm.sigma_p == 0.0, "need phi = lambda1 = sigma_P = 0")?;
        let w = (-prm.delta).exp();
        let psi = psi(prm.lambda0, w, prm)?;
        let x = prm.chi / (prm.rho + prm.alpha * (1.0 + prm.beta));
        let (e, b) = (prm.epsilon, prm.beta);
        Ok(move |s: State| {
            let a = psi.powf(-e);
            Jet {
                v: a * s.k.powf(1.0 - e) / (1.0 - e) - x * s.p.powf(1.0 + b) / (1.0 + b),
                v_k: a * s.k.powf(-e),
                v_p: -x * s.p.powf(b),
                v_kk: -e * a * s.k.powf(-e - 1.0),
                v_pp: -x * b * s.p.powf(b - 1.0),
                v_kp: 0.0,
            }
        })
    }

    /// Pollution-dependent hazard with frozen pollution (`alpha = phi = 0`)
    /// and constant damage: `psi` varies with `P` through `lambda(P)`, and
    /// the pollution part is `-(chi / rho) P^(1+beta)/(1+beta)`.
    pub fn nhpp(prm: &ModelParams) -> Result<impl Fn(State) -> Jet, ModelError> {
        prm.validate()?;
        check(prm.xi == 0.0 && prm.eta == 0.0, "damage must not depend on the state")?;
        check(prm.phi == 0.0 && prm.alpha == 0.0 && prm.sigma_p == 0.0, "need phi = alpha = sigma_P = 0")?;
        let w = (-prm.delta).exp();
        let prm = *prm;
        let (e, b) = (prm.epsilon, prm.beta);
        let g = w.powf(1.0 - e) - 1.0;
        // psi falls as the hazard rises; the jet is NaN where it reaches zero
        psi(prm.lambda0, w, &prm)?;
        Ok(move |s: State| {
            let lam = intensity(s.p, &prm);
            let ps = (prm.rho - (1.0 - e) * prm.a - lam * g) / e;
            let ps = if ps > 0.0 { ps } else { f64::NAN };
            let dps = -prm.lambda1 * g / e;
            // a(P) = psi^-e, a' = -e psi^(-e-1) psi', a'' = e (e+1) psi^(-e-2) psi'^2
            let a = ps.powf(-e);
            let a1 = -e * ps.powf(-e - 1.0) * dps;
            let a2 = e * (e + 1.0) * ps.powf(-e - 2.0) * dps * dps;
            let kk = s.k.powf(1.0 - e) / (1.0 - e);
            let q = prm.chi / prm.rho;
            Jet {
                v: a * kk - q * s.p.powf(1.0 + b) / (1.0 + b),
                v_k: a * s.k.powf(-e),
                v_p: a1 * kk - q * s.p.powf(b),
                v_kk: -e * a * s.k.powf(-e - 1.0),
                v_pp: a2 * kk - q * b * s.p.powf(b - 1.0),
                v_kp: a1 * s.k.powf(-e),
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fixtures, CandidateValue, MarkModel, Variant};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn candidate_jet(prm: ModelParams) -> impl Fn(State) -> Jet {
        let cv = CandidateValue::decoupled(&prm).unwrap();
        move |s| Jet {
            v: cv.value(s, &prm),
            v_k: cv.v_k(s, &prm),
            v_p: cv.v_p(s, &prm),
            v_kk: cv.v_kk(s, &prm),
            v_pp: cv.v_pp(s, &prm),
            v_kp: 0.0,
        }
    }

    fn hpp_params() -> ModelParams {
        ModelParams { lambda0: 0.2, delta: 0.3, ..fixtures::decoupled() }
    }

    fn nhpp_params() -> ModelParams {
        ModelParams { lambda0: 0.1, lambda1: 0.05, delta: 0.3, alpha: 0.0, variant: Variant::Nhpp, ..fixtures::decoupled() }
    }

    fn grid(n: usize) -> Grid {
        Grid::new(0.5, 4.0, n, 0.5, 4.0, n).unwrap()
    }

    fn median_ratio(prm: ModelParams, jet: &dyn Fn(State) -> Jet) -> (f64, f64) {
        let m = Model::unmarked(prm).unwrap();
        let r: Vec<EnvelopeResiduals> = [33, 65]
            .iter()
            .map(|&n| envelope_residuals(&ValueField::from_fn(grid(n), prm, |s| jet(s).v), &m).unwrap())
            .collect();
        (r[0].median_k() / r[1].median_k(), r[0].median_p() / r[1].median_p())
    }

    #[test]
    fn candidate_satisfies_identities_exactly() {
        let prm = fixtures::decoupled();
        let m = Model::unmarked(prm).unwrap();
        let jet = candidate_jet(prm);
        for (k, p) in [(0.3, 0.4), (1.0, 1.0), (7.0, 2.5)] {
            let s = State { k, p };
            let (rk, rp) = exact_residuals_at(&m, s, &jet).unwrap();
            assert!(rk <= 1e-13 * jet(s).v_k.abs().max(1.0), "{rk}");
            assert!(rp <= 1e-13 * jet(s).v_p.abs().max(1.0), "{rp}");
        }
    }

    #[test]
    fn closed_forms_satisfy_identities_exactly() {
        let m = Model::unmarked(hpp_params()).unwrap();
        let hpp = closed_form::hpp(&m.params).unwrap();
        let n = Model::unmarked(nhpp_params()).unwrap();
        let nhpp = closed_form::nhpp(&n.params).unwrap();
        for (k, p) in [(0.3, 0.4), (1.0, 1.0), (7.0, 2.5)] {
            let s = State { k, p };
            let (rk, rp) = exact_residuals_at(&m, s, &hpp).unwrap();
            assert!(rk < 1e-12 && rp < 1e-12, "hpp {rk} {rp}");
            let (rk, rp) = exact_residuals_at(&n, s, &nhpp).unwrap();
            assert!(rk < 1e-12 && rp < 1e-12, "nhpp {rk} {rp}");
        }
    }

    #[test]
    fn nhpp_closed_form_derivatives_match_differences() {
        let prm = nhpp_params();
        let f = closed_form::nhpp(&prm).unwrap();
        let s = State { k: 1.3, p: 1.7 };
        let h = 1e-5;
        let at = |k: f64, p: f64| f(State { k, p });
        let j = f(s);
        assert_relative_eq!(j.v_p, (at(s.k, s.p + h).v - at(s.k, s.p - h).v) / (2.0 * h), max_relative = 1e-7);
        assert_relative_eq!(j.v_pp, (at(s.k, s.p + h).v_p - at(s.k, s.p - h).v_p) / (2.0 * h), max_relative = 1e-7);
        assert_relative_eq!(j.v_kp, (at(s.k, s.p + h).v_k - at(s.k, s.p - h).v_k) / (2.0 * h), max_relative = 1e-7);
        assert_relative_eq!(j.v_kk, (at(s.k + h, s.p).v_k - at(s.k - h, s.p).v_k) / (2.0 * h), max_relative = 1e-7);
    }

    #[test]
    fn grid_residuals_of_candidate_are_small() {
        let prm = fixtures::decoupled();
        let jet = candidate_jet(prm);
        let m = Model::unmarked(prm).unwrap();
        let g = grid(65);
        let r = envelope_residuals(&ValueField::from_fn(g.clone(), prm, |s| jet(s).v), &m).unwrap();
        for n in (0..g.len()).filter(|&n| r.interior[n]) {
            let (i, j) = g.coords(n);
            let exact = jet(State { k: g.k[i], p: g.p[j] });
            assert!(r.r_k[n] < 1e-3 * prm.rho * exact.v_k, "{}", r.r_k[n]);
            assert!(r.r_p[n] < 1e-3 * prm.rho * exact.v_p.abs(), "{}", r.r_p[n]);
        }
        assert!(r.interior_count() > 60 * 60);
    }

    #[test]
    fn decoupled_medians_converge_at_second_order() {
        let prm = fixtures::decoupled();
        let jet = candidate_jet(prm);
        let (rk, rp) = median_ratio(prm, &jet);
        assert!((3.0..5.0).contains(&rk) && (3.0..5.0).contains(&rp), "{rk} {rp}");
    }

    #[test]
    fn hpp_medians_converge_at_second_order() {
        let prm = hpp_params();
        let f = closed_form::hpp(&prm).unwrap();
        let (rk, rp) = median_ratio(prm, &f);
        assert!((2.5..6.0).contains(&rk) && (2.5..6.0).contains(&rp), "{rk} {rp}");
    }

    #[test]
    fn nhpp_medians_converge_at_second_order() {
        let prm = nhpp_params();
        let f = closed_form::nhpp(&prm).unwrap();
        let (rk, rp) = median_ratio(prm, &f);
        assert!((2.5..6.0).contains(&rk) && (2.5..6.0).contains(&rp), "{rk} {rp}");
    }

    #[test]
    fn nhpp_without_slope_matches_hpp_node_for_node() {
        let h = ModelParams { lambda0: 0.2, delta: 0.3, xi: 1.0, eta: 0.5, phi: 0.2, ..fixtures::decoupled() };
        let n = ModelParams { variant: Variant::Nhpp, ..h };
        let g = grid(24);
        let f = ValueField::from_fn(g, h, |s| -1.0 / s.k - s.p * s.p);
        let a = envelope_residuals(&f, &Model::unmarked(h).unwrap()).unwrap();
        let b = envelope_residuals(&f, &Model::unmarked(n).unwrap()).unwrap();
        assert_eq!(a.r_k, b.r_k);
        assert_eq!(a.r_p, b.r_p);
    }

    #[test]
    fn diffusive_and_marked_variants_are_refused() {
        let g = grid(16);
        let f = ValueField::from_fn(g, fixtures::decoupled(), |s| -1.0 / s.k);
        let jd = Model::unmarked(ModelParams { sigma_p: 0.1, variant: Variant::JumpDiffusion, ..fixtures::decoupled() }).unwrap();
        assert!(matches!(envelope_residuals(&f, &jd), Err(EnvelopeError::Variant(_))));
        let prm = Model::new(
            ModelParams { lambda0: 0.1, variant: Variant::PrmNoDiffusion, ..fixtures::decoupled() },
            MarkModel::Gamma,
        )
        .unwrap();
        assert!(matches!(envelope_residuals(&f, &prm), Err(EnvelopeError::Variant(_))));
    }

    proptest! {
        #[test]
        fn candidate_is_exact_across_parameters(
            rho in 0.02f64..0.1, a in 0.0f64..0.2, eps in 1.2f64..4.0, chi in 0.0f64..3.0,
            beta in 0.0f64..2.0, alpha in 0.0f64..0.1, k in 0.1f64..10.0, p in 0.1f64..10.0,
        ) {
            let prm = ModelParams { rho, a, epsilon: eps, chi, beta, alpha, ..fixtures::decoupled() };
            prop_assume!(decoupled_coefficients_ok(&prm));
            let m = Model::unmarked(prm).unwrap();
            let jet = candidate_jet(prm);
            let s = State { k, p };
            let (rk, rp) = exact_residuals_at(&m, s, &jet).unwrap();
            let j = jet(s);
            prop_assert!(rk <= 1e-11 * j.v_k.abs().max(1.0));
            prop_assert!(rp <= 1e-11 * j.v_p.abs().max(1.0));
        }
    }

    fn decoupled_coefficients_ok(prm: &ModelParams) -> bool {
        crate::model::decoupled_coefficients(prm).is_ok()
    }
}
