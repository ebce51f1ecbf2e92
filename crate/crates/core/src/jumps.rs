//! Disaster arrivals and magnitudes.
//!
//! Arrivals with a pollution-dependent rate are generated by thinning: the
//! caller supplies a dominating rate for the step, candidates are drawn from
//! a homogeneous process at that rate and accepted with probability
//! `rate / majorant`.

use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MarkModel, Model};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum JumpError {
    #[error("intensity {rate} exceeds thinning majorant {majorant}")]
    MajorantViolation { rate: f64, majorant: f64 },
    #[error("mark law has no mass to sample from")]
    Normalization,
    #[error("invalid sampler argument: {0}")]
    InvalidArgument(String),
}

/// One disaster on a path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    /// Magnitude; exactly 1 for unmarked variants.
    pub mark: f64,
    /// Share of capital that survived the event.
    pub survival: f64,
}

/// Event times of a homogeneous Poisson process on `(0, horizon]`.
pub fn sample_hpp<R: Rng + ?Sized>(lambda: f64, horizon: f64, rng: &mut R) -> Result<Vec<f64>, JumpError> {
    if !(lambda >= 0.0 && lambda.is_finite()) || !(horizon > 0.0) {
        return Err(JumpError::InvalidArgument(format!("lambda = {lambda}, horizon = {horizon}")));
    }
    let mut times = Vec::new();
    if lambda == 0.0 {
        return Ok(times);
    }
    let mut t = 0.0;
    loop {
        let u: f64 = rng.sample(Open01);
        t += -u.ln() / lambda;
        if t > horizon {
            return Ok(times);
        }
        times.push(t);
    }
}

/// Accepted disaster times in `(t, t + dt]` for a model at pollution `p_current`.
///
/// `majorant_rate` must dominate the total disaster rate at `p_current`.
pub fn thin_step<R: Rng + ?Sized>(
    t: f64,
    p_current: f64,
    dt: f64,
    majorant_rate: f64,
    model: &Model,
    rng: &mut R,
) -> Result<Vec<f64>, JumpError> {
    let mut out = Vec::new();
    thin_step_rate(t, model.total_intensity(p_current), dt, majorant_rate, rng, &mut out)?;
    Ok(out)
}

/// Thinning with the current rate already evaluated; appends to `out`.
///
/// Candidate gaps are exponential; the common "no candidate in this step"
/// outcome is decided without a logarithm whenever `u < 1 - m dt`, which
/// implies `u < exp(-m dt)`.
#[inline]
pub fn thin_step_rate<R: Rng + ?Sized>(
    t: f64,
    rate: f64,
    dt: f64,
    majorant: f64,
    rng: &mut R,
    out: &mut Vec<f64>,
) -> Result<usize, JumpError> {
    if rate > majorant {
        return Err(JumpError::MajorantViolation { rate, majorant });
    }
    if majorant <= 0.0 {
        return Ok(0);
    }
    let mut s = 0.0;
    let mut accepted = 0;
    loop {
        let rem = dt - s;
        let v: f64 = rng.sample(Open01);
        if v < 1.0 - majorant * rem {
            return Ok(accepted);
        }
        let gap = -v.ln() / majorant;
        if gap > rem {
            return Ok(accepted);
        }
        s += gap;
        let keep = rate >= majorant || rng.random::<f64>() * majorant < rate;
        if keep {
            out.push(t + s);
            accepted += 1;
        }
    }
}

/// Thinning across consecutive steps with a single candidate clock.
///
/// The clock holds the integrated majorant left until the next candidate
/// (a unit exponential when fresh). By memorylessness this is the same law
/// as drawing each step afresh, but a step without candidates costs one
/// subtraction and no random numbers.
#[derive(Debug, Clone, Copy)]
pub struct ThinningClock {
    left: f64,
}

impl ThinningClock {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { left: unit_exp(rng) }
    }

    /// Same contract as [`thin_step_rate`].
    #[inline]
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        t: f64,
        rate: f64,
        dt: f64,
        majorant: f64,
        rng: &mut R,
        out: &mut Vec<f64>,
    ) -> Result<usize, JumpError> {
        if rate > majorant {
            return Err(JumpError::MajorantViolation { rate, majorant });
        }
        let budget = majorant * dt;
        if self.left > budget {
            self.left -= budget;
            return Ok(0);
        }
        self.fire(t, rate, majorant, budget, rng, out)
    }

    #[cold]
    fn fire<R: Rng + ?Sized>(
        &mut self,
        t: f64,
        rate: f64,
        majorant: f64,
        mut budget: f64,
        rng: &mut R,
        out: &mut Vec<f64>,
    ) -> Result<usize, JumpError> {
        let mut used = 0.0;
        let mut accepted = 0;
        while self.left <= budget {
            used += self.left;
            budget -= self.left;
            if rate >= majorant || rng.random::<f64>() * majorant < rate {
                out.push(t + used / majorant);
                accepted += 1;
            }
            self.left = unit_exp(rng);
        }
        self.left -= budget;
        Ok(accepted)
    }
}

#[inline]
fn unit_exp<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    -u.ln()
}

/// Draw a disaster magnitude at pollution `p`.
///
/// The disaster rate does not depend on the magnitude, so DISCRETE atoms are
/// picked with probability proportional to their weights; GAMMA draws
/// `Gamma(shape = p, scale = 1)`.
pub fn sample_mark<R: Rng + ?Sized>(p: f64, marks: &MarkModel, rng: &mut R) -> Result<f64, JumpError> {
    match marks {
        MarkModel::None => Ok(1.0),
        MarkModel::Discrete { atoms, weights } => {
            let total: f64 = weights.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                return Err(JumpError::Normalization);
            }
            if atoms.len() == 1 {
                return Ok(atoms[0]);
            }
            let mut u = rng.random::<f64>() * total;
            for (z, w) in atoms.iter().zip(weights) {
                if u < *w {
                    return Ok(*z);
                }
                u -= w;
            }
            Ok(*atoms.last().expect("validated non-empty"))
        }
        MarkModel::Gamma => {
            let g = Gamma::new(p, 1.0).map_err(|e| JumpError::InvalidArgument(format!("gamma shape {p}: {e}")))?;
            Ok(g.sample(rng))
        }
    }
}

/// Trapezoidal integral of the total disaster rate along `p_series`,
/// sampled every `dt`.
pub fn compensator_integral(p_series: &[f64], dt: f64, model: &Model) -> f64 {
    trapezoid(p_series.iter().map(|&p| model.total_intensity(p)), dt)
}

pub(crate) fn trapezoid(values: impl Iterator<Item = f64>, dt: f64) -> f64 {
    let mut sum = 0.0;
    let mut prev: Option<f64> = None;
    for v in values {
        if let Some(a) = prev {
            sum += 0.5 * (a + v);
        }
        prev = Some(v);
    }
    sum * dt
}
