//! Diagonal Gaussians and tanh-squashed Gaussians, both as plain values and
//! as differentiable tape expressions.
//!
//! Tape-level densities and divergences are reduced over the last
//! dimension only, giving one value per row (`[rows, 1]`), so a batch of
//! sequences keeps its per-sequence terms apart.

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Added to `softplus(raw)` in every learned standard deviation.
pub const STD_FLOOR: f64 = 1e-3;

/// Actions are clamped to `±(1 − TANH_EPS)` before inverting the squash.
pub const TANH_EPS: f64 = 1e-6;

pub const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Inverse of `softplus(x) + STD_FLOOR`, for building heads with a
/// prescribed standard deviation.
pub fn std_to_raw(std: f64) -> f64 {
    let y = std - STD_FLOOR;
    assert!(y > 0.0, "standard deviation must exceed the floor");
    // log(exp(y) - 1), stable for large y
    y + (-(-y).exp_m1()).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Array,
    std: Array,
}

impl DiagGaussian {
    pub fn new(mean: Array, std: Array) -> Result<Self> {
        if mean.shape() != std.shape() {
            return Err(Error::shape(
                "DiagGaussian::new",
                format!("mean {:?} vs std {:?}", mean.shape(), std.shape()),
            ));
        }
        if let Some(s) = std.data().iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!("standard deviation {s} is not positive")));
        }
        if !mean.is_finite() {
            return Err(Error::NonFinite("DiagGaussian mean".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: Array::zeros(&[1, dim]), std: Array::full(&[1, dim], 1.0) }
    }

    pub fn mean(&self) -> &Array {
        &self.mean
    }

    pub fn std(&self) -> &Array {
        &self.std
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn bind(&self, tape: &Tape) -> GaussianVar {
        GaussianVar { mean: tape.constant(self.mean.clone()), std: tape.constant(self.std.clone()) }
    }

    /// Joint log-density of `x`, summed over every element.
    pub fn log_prob(&self, x: &Array) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape("DiagGaussian::log_prob", "point dimension"));
        }
        let tape = Tape::new();
        let g = self.bind(&tape);
        let xv = tape.constant(x.clone().reshape(self.mean.shape())?);
        let lp = g.log_prob(&tape, xv)?;
        let v = tape.value(lp).sum();
        Ok(v)
    }

    pub fn rsample(&self, noise: &Array) -> Result<Array> {
        if noise.len() != self.dim() {
            return Err(Error::shape("rsample", "noise dimension"));
        }
        let data = self
            .mean
            .data()
            .iter()
            .zip(self.std.data())
            .zip(noise.data())
            .map(|((m, s), e)| m + s * e)
            .collect();
        Array::new(self.mean.shape().to_vec(), data)
    }
}

/// Closed-form `KL(q ‖ p)` summed over all dimensions.
pub fn kl_diag_gaussian(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.mean.shape() != p.mean.shape() {
        return Err(Error::shape(
            "kl_diag_gaussian",
            format!("{:?} vs {:?}", q.mean.shape(), p.mean.shape()),
        ));
    }
    let tape = Tape::new();
    let (qv, pv) = (q.bind(&tape), p.bind(&tape));
    let kl = kl_var(&tape, &qv, &pv)?;
    let v = tape.value(kl).sum();
    Ok(v)
}

/// A diagonal Gaussian whose parameters live on a tape, `[rows, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVar {
    pub mean: Var,
    pub std: Var,
}

impl GaussianVar {
    /// Split a head output `[rows, 2·dim]` into mean and
    /// `softplus(raw) + STD_FLOOR`.
    pub fn from_head(tape: &Tape, head: Var, dim: usize) -> Result<Self> {
        let cols = tape.value(head).cols();
        if cols != 2 * dim {
            return Err(Error::shape(
                "GaussianVar::from_head",
                format!("head has {cols} outputs, expected {}", 2 * dim),
            ));
        }
        let mean = tape.slice_cols(head, 0, dim);
        let std = tape.shift(tape.softplus(tape.slice_cols(head, dim, dim)), STD_FLOOR);
        Ok(Self { mean, std })
    }

    /// Unit standard deviation around `mean`.
    pub fn unit(tape: &Tape, mean: Var) -> Self {
        let shape = tape.shape(mean);
        Self { mean, std: tape.constant(Array::full(&shape, 1.0)) }
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.value(self.mean).cols()
    }

    pub fn detach(&self, tape: &Tape) -> Self {
        Self { mean: tape.detach(self.mean), std: tape.detach(self.std) }
    }

    /// `mean + std ⊙ noise`; `noise` should be a constant.
    pub fn rsample(&self, tape: &Tape, noise: Var) -> Result<Var> {
        if tape.shape(noise) != tape.shape(self.mean) {
            return Err(Error::shape(
                "rsample",
                format!("noise {:?} vs mean {:?}", tape.shape(noise), tape.shape(self.mean)),
            ));
        }
        Ok(tape.add(self.mean, tape.mul(self.std, noise)))
    }

    /// Per-row log-density, `[rows, 1]`.
    pub fn log_prob(&self, tape: &Tape, x: Var) -> Result<Var> {
        Ok(tape.sum_cols(self.log_prob_elementwise(tape, x)?))
    }

    /// Per-element log-density, same shape as `x`.
    pub fn log_prob_elementwise(&self, tape: &Tape, x: Var) -> Result<Var> {
        if tape.shape(x) != tape.shape(self.mean) {
            return Err(Error::shape(
                "GaussianVar::log_prob",
                format!("point {:?} vs mean {:?}", tape.shape(x), tape.shape(self.mean)),
            ));
        }
        let z = tape.div(tape.sub(x, self.mean), self.std);
        let quad = tape.add(tape.scale(tape.square(z), 0.5), tape.ln(self.std));
        Ok(tape.shift(tape.neg(quad), -0.5 * LOG_2PI))
    }

    pub fn to_value(&self, tape: &Tape) -> Result<DiagGaussian> {
        DiagGaussian::new(tape.value(self.mean).clone(), tape.value(self.std).clone())
    }
}

/// Per-row closed-form `KL(q ‖ p)`, `[rows, 1]`.
pub fn kl_var(tape: &Tape, q: &GaussianVar, p: &GaussianVar) -> Result<Var> {
    Ok(tape.sum_cols(kl_elementwise(tape, q, p)?))
}

/// Per-element closed-form KL terms.
pub fn kl_elementwise(tape: &Tape, q: &GaussianVar, p: &GaussianVar) -> Result<Var> {
    if tape.shape(q.mean) != tape.shape(p.mean) {
        return Err(Error::shape(
            "kl_diag_gaussian",
            format!("{:?} vs {:?}", tape.shape(q.mean), tape.shape(p.mean)),
        ));
    }
    // log σp − log σq + (σq² + (μq − μp)²) / (2σp²) − ½
    let log_ratio = tape.sub(tape.ln(p.std), tape.ln(q.std));
    let d = tape.sub(q.mean, p.mean);
    let num = tape.add(tape.square(q.std), tape.square(d));
    let frac = tape.div(num, tape.scale(tape.square(p.std), 2.0));
    Ok(tape.shift(tape.add(log_ratio, frac), -0.5))
}

const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// `tanh` clamped to the largest doubles inside `(−1, 1)`.
pub fn squash(tape: &Tape, u: Var) -> Var {
    tape.clamp(tape.tanh(u), -BELOW_ONE, BELOW_ONE)
}

/// `tanh(u)` with `u ~ N(mean, std)`.
#[derive(Clone, Copy, Debug)]
pub struct TanhGaussian {
    pub base: GaussianVar,
}

impl TanhGaussian {
    pub fn new(mean: Var, std: Var) -> Self {
        Self { base: GaussianVar { mean, std } }
    }

    pub fn from_head(tape: &Tape, head: Var, dim: usize) -> Result<Self> {
        Ok(Self { base: GaussianVar::from_head(tape, head, dim)? })
    }

    /// Pre-squash sample `mean + std ⊙ noise`.
    pub fn rsample_raw(&self, tape: &Tape, noise: Var) -> Result<Var> {
        self.base.rsample(tape, noise)
    }

    /// `tanh(mean + std ⊙ noise)`, kept strictly inside `(−1, 1)` where
    /// `tanh` rounds to ±1.
    pub fn sample(&self, tape: &Tape, noise: Var) -> Result<Var> {
        Ok(squash(tape, self.base.rsample(tape, noise)?))
    }

    /// `tanh(mean)`, the deterministic action.
    pub fn mode(&self, tape: &Tape) -> Var {
        squash(tape, self.base.mean)
    }

    /// Per-row log-density of actions in `(−1, 1)`. Entries with
    /// `|a| ≥ 1 − TANH_EPS` are clamped to that bound first.
    pub fn log_prob(&self, tape: &Tape, action: Var) -> Result<Var> {
        let a = tape.clamp(action, -1.0 + TANH_EPS, 1.0 - TANH_EPS);
        let u = tape.atanh(a);
        let base = self.base.log_prob(tape, u)?;
        // − Σ log(1 − a²)
        let one_minus = tape.shift(tape.neg(tape.square(a)), 1.0);
        let correction = tape.sum_cols(tape.ln(one_minus));
        Ok(tape.sub(base, correction))
    }

    /// Per-row log-density evaluated from the pre-squash value `u`, using
    /// `log(1 − tanh²u) = 2(log 2 − u − softplus(−2u))`.
    pub fn log_prob_raw(&self, tape: &Tape, u: Var) -> Result<Var> {
        let base = self.base.log_prob(tape, u)?;
        let sp = tape.softplus(tape.scale(u, -2.0));
        let log_det = tape.scale(tape.shift(tape.neg(tape.add(u, sp)), std::f64::consts::LN_2), 2.0);
        Ok(tape.sub(base, tape.sum_cols(log_det)))
    }
}

/// Per-row `KL(q ‖ p)` between two tanh-squashed Gaussians. The squash is a
/// bijection, so this equals the KL of the underlying Gaussians.
pub fn kl_tanh_gaussian(tape: &Tape, q: &TanhGaussian, p: &TanhGaussian) -> Result<Var> {
    kl_var(tape, &q.base, &p.base)
}
