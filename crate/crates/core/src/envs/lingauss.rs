use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seeds::LabRng;

/// Linear-Gaussian system
///
/// ```text
/// x_0 ~ N(m0, diag p0)
/// x_t = A x_{t−1} + B a_{t−1} + w_t,   w_t ~ N(0, diag q)
/// o_t = C x_t + v_t,                   v_t ~ N(0, diag r)
/// ```
///
/// Matrices are stored row-major as nested vectors so configs stay
/// readable JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinGaussSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub m0: Vec<f64>,
    pub p0: Vec<f64>,
    /// Gain of the goal-seeking expert, `a = clip(gain · B⁺ (g − A x))`.
    #[serde(default = "default_gain")]
    pub expert_gain: f64,
}

fn default_gain() -> f64 {
    0.5
}

pub(crate) fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

fn rotation(theta: f64, scale: f64) -> Vec<Vec<f64>> {
    let (s, c) = theta.sin_cos();
    vec![vec![scale * c, -scale * s], vec![scale * s, scale * c]]
}

fn eye(n: usize, v: f64) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { v } else { 0.0 }).collect()).collect()
}

fn normal(rng: &mut LabRng) -> f64 {
    rng.sample(StandardNormal)
}

impl LinGaussSpec {
    /// Two-dimensional damped rotation with unit observation noise; the
    /// evidence oracle system.
    pub fn oracle_2d() -> Self {
        Self {
            a: rotation(0.3, 0.95),
            b: eye(2, 0.5),
            c: eye(2, 1.0),
            q: vec![0.1, 0.1],
            r: vec![1.0, 1.0],
            m0: vec![0.0, 0.0],
            p0: vec![0.5, 0.5],
            expert_gain: 0.5,
        }
    }

    /// Noiseless system with square invertible `B` and `C` and a fixed
    /// initial state, so observed transitions determine the actions.
    pub fn noiseless_invertible() -> Self {
        Self {
            a: rotation(0.2, 0.9),
            b: vec![vec![0.5, 0.1], vec![-0.1, 0.4]],
            c: vec![vec![1.0, 0.2], vec![0.0, 0.8]],
            q: vec![0.0, 0.0],
            r: vec![0.0, 0.0],
            m0: vec![0.0, 0.0],
            p0: vec![0.0, 0.0],
            expert_gain: 0.5,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    pub fn action_dim(&self) -> usize {
        self.b.first().map_or(0, Vec::len)
    }

    pub fn obs_dim(&self) -> usize {
        self.c.len()
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.a)
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.b)
    }

    pub fn c_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.c)
    }

    /// Full check for a runnable environment: shapes, non-negative noise,
    /// and spectral radius of `A` at most 1.05.
    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        let rho = self.spectral_radius();
        if rho > 1.05 {
            return Err(invalid(format!("spectral radius of A is {rho:.4} > 1.05")));
        }
        Ok(())
    }

    /// Shapes and non-negative noise only; enough for evidence evaluation.
    pub fn validate_shapes(&self) -> Result<()> {
        let n = self.state_dim();
        let rect = |m: &[Vec<f64>], cols: usize| m.iter().all(|r| r.len() == cols);
        if n == 0 || !rect(&self.a, n) {
            return Err(invalid("A must be square and non-empty"));
        }
        if self.b.len() != n || self.action_dim() == 0 || !rect(&self.b, self.action_dim()) {
            return Err(invalid("B must have one row per state and at least one column"));
        }
        if self.obs_dim() == 0 || !rect(&self.c, n) {
            return Err(invalid("C must have one column per state"));
        }
        if self.q.len() != n || self.p0.len() != n || self.m0.len() != n || self.r.len() != self.obs_dim() {
            return Err(invalid("noise and initial-state vectors have the wrong length"));
        }
        if self.q.iter().chain(&self.r).chain(&self.p0).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid("noise variances must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a_matrix().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub(crate) fn initial_state(&self, rng: &mut LabRng) -> Vec<f64> {
        self.m0.iter().zip(&self.p0).map(|(m, p)| if *p > 0.0 { m + p.sqrt() * normal(rng) } else { *m }).collect()
    }

    /// Noise-free part of the transition, `A x + B a`.
    pub fn mean_transition(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        let xn = self.a_matrix() * DVector::from_column_slice(x) + self.b_matrix() * DVector::from_column_slice(a);
        xn.iter().copied().collect()
    }

    pub(crate) fn transition(&self, x: &[f64], a: &[f64], rng: &mut LabRng) -> Vec<f64> {
        let mut xn = self.mean_transition(x, a);
        for (v, q) in xn.iter_mut().zip(&self.q) {
            if *q > 0.0 {
                *v += q.sqrt() * normal(rng);
            }
        }
        xn
    }

    pub(crate) fn observe(&self, x: &[f64], rng: &mut LabRng) -> Vec<f64> {
        let o = self.c_matrix() * DVector::from_column_slice(x);
        o.iter()
            .zip(&self.r)
            .map(|(v, r)| if *r > 0.0 { v + r.sqrt() * normal(rng) } else { *v })
            .collect()
    }

    pub(crate) fn goal_controller(&self, x: &[f64], goal: &[f64]) -> Vec<f64> {
        let ax = self.a_matrix() * DVector::from_column_slice(x);
        let err = DVector::from_column_slice(goal) - ax;
        let pinv = self.b_matrix().pseudo_inverse(1e-12).expect("pseudo-inverse of B");
        let a = pinv * err * self.expert_gain;
        a.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
    }
}
