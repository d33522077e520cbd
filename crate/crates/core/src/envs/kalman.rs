use aime_diffcore::Array;
use nalgebra::{DMatrix, DVector};

use super::lingauss::LinGaussSpec;
use crate::error::{invalid, Error, Result};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Exact `log p(o_{1:T} | a_{0:T−1})` by the prediction-error decomposition.
///
/// `observations` is `[T, obs_dim]` holding `o_1..o_T`; `actions` is
/// `[T, action_dim]` holding `a_0..a_{T−1}`, where `a_{t−1}` drives the
/// step that produces `o_t`. The covariance update uses the Joseph form.
pub fn kalman_log_evidence(spec: &LinGaussSpec, observations: &Array, actions: &Array) -> Result<f64> {
    spec.validate_shapes()?;
    let (n, p) = (spec.state_dim(), spec.obs_dim());
    let steps = observations.rows();
    if observations.cols() != p || actions.cols() != spec.action_dim() || actions.rows() != steps {
        return Err(invalid(format!(
            "expected [T, {p}] observations and [T, {}] actions, got {:?} and {:?}",
            spec.action_dim(),
            observations.shape(),
            actions.shape()
        )));
    }
    let a = spec.a_matrix();
    let b = spec.b_matrix();
    let c = spec.c_matrix();
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&spec.q));
    let r = DMatrix::from_diagonal(&DVector::from_column_slice(&spec.r));
    let mut m = DVector::from_column_slice(&spec.m0);
    let mut cov = DMatrix::from_diagonal(&DVector::from_column_slice(&spec.p0));
    let eye = DMatrix::<f64>::identity(n, n);
    let mut total = 0.0;
    for t in 0..steps {
        m = &a * &m + &b * DVector::from_column_slice(actions.row_slice(t));
        cov = &a * &cov * a.transpose() + &q;
        let y = DVector::from_column_slice(observations.row_slice(t)) - &c * &m;
        let s = &c * &cov * c.transpose() + &r;
        let s = (&s + s.transpose()) * 0.5;
        let chol = s.clone().cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "innovation covariance at step {} is not positive definite (diagonal {:?})",
                t + 1,
                s.diagonal().as_slice()
            ))
        })?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let s_inv_y = chol.solve(&y);
        total -= 0.5 * (y.dot(&s_inv_y) + log_det + p as f64 * LOG_2PI);
        // K = P Cᵀ S⁻¹, computed as (S⁻¹ C P)ᵀ since S and P are symmetric.
        let gain = chol.solve(&(&c * &cov)).transpose();
        m += &gain * y;
        let ikc = &eye - &gain * &c;
        cov = &ikc * &cov * ikc.transpose() + &gain * &r * gain.transpose();
    }
    if !total.is_finite() {
        return Err(Error::Numerical("log-evidence is not finite".into()));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_scalar_matches_hand_computation() {
        // Zero dynamics: o_1 ~ N(0, q + r).
        let spec = LinGaussSpec {
            a: vec![vec![0.0]],
            b: vec![vec![0.0]],
            c: vec![vec![1.0]],
            q: vec![1.0],
            r: vec![1.0],
            m0: vec![0.0],
            p0: vec![1.0],
            expert_gain: 0.5,
        };
        let o = 0.7;
        let ll = kalman_log_evidence(&spec, &Array::row(&[o]), &Array::row(&[0.0])).unwrap();
        let var = 2.0;
        let expected = -0.5 * (o * o / var + var.ln() + LOG_2PI);
        assert!((ll - expected).abs() < 1e-14);
    }

    #[test]
    fn singular_observation_noise_is_diagnosed() {
        let spec = LinGaussSpec::noiseless_invertible();
        let err = kalman_log_evidence(&spec, &Array::zeros(&[2, 2]), &Array::zeros(&[2, 2])).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn rejects_misaligned_sequences() {
        let spec = LinGaussSpec::oracle_2d();
        assert!(kalman_log_evidence(&spec, &Array::zeros(&[3, 2]), &Array::zeros(&[2, 2])).is_err());
    }
}
