//! Registry of reverse-mode gradient checks against central differences,
//! run as one suite by the CLI and the acceptance harness.

use aime_diffcore::dist::{kl_var, GaussianVar, TanhGaussian};
use aime_diffcore::nn::{gru_step, mlp_forward, GruParams, MlpParams};
use aime_diffcore::params::named_arrays;
use aime_diffcore::{grad_check, Array, GradCheckReport, Module, Tape, Var, VarSet};
use serde::Serialize;

use crate::error::Result;
use crate::imitation::ActionHead;
use crate::seeds::rng;
use crate::worldmodel::{
    batch_mean, elbo_terms, filter_sequence, filter_with_actions, noise_stream, DecoderVariance, ElboOptions, EncoderKind,
    SsmConfig, SsmParams,
};

/// Tolerance for single differentiable blocks.
pub const BLOCK_TOL: f64 = 1e-6;
/// Tolerance for composite objectives.
pub const OBJECTIVE_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type Check = fn() -> Result<GradCheckReport>;

/// Every registered check with its tolerance.
pub fn registry() -> Vec<(&'static str, f64, Check)> {
    vec![
        ("diffcore.mlp", BLOCK_TOL, mlp_check),
        ("diffcore.gru", BLOCK_TOL, gru_check),
        ("diffcore.kl_diag_gaussian", BLOCK_TOL, kl_check),
        ("diffcore.tanh_gaussian", BLOCK_TOL, tanh_check),
        ("worldmodel.elbo_fixed_decoder", OBJECTIVE_TOL, elbo_fixed),
        ("worldmodel.elbo_learned_decoder_mlp_encoder", OBJECTIVE_TOL, elbo_learned),
        ("worldmodel.elbo_kl_scale", OBJECTIVE_TOL, elbo_scaled),
        ("imitation.policy_through_sampled_actions", OBJECTIVE_TOL, policy_check),
        ("baselines.policy_through_forward_model", OBJECTIVE_TOL, forward_policy_check),
    ]
}

/// Run every check in registration order. A check that errors counts as a
/// failure with infinite error.
pub fn gradcheck_suite() -> Vec<GradCheckRow> {
    registry()
        .into_iter()
        .map(|(name, tol, f)| {
            let err = f().map(|r| r.max_rel_error).unwrap_or(f64::INFINITY);
            GradCheckRow { name: name.to_string(), max_rel_error: err, tolerance: tol, passed: err <= tol }
        })
        .collect()
}

fn mlp_point(mlp: &MlpParams, mut point: Vec<Array>) -> Vec<Array> {
    for l in &mlp.layers {
        point.push(l.w.clone());
        point.push(l.b.clone());
    }
    point
}

fn mlp_check() -> Result<GradCheckReport> {
    let mut r = rng(6);
    let mlp = MlpParams::new(&[3, 5, 4, 2], &mut r);
    let point = mlp_point(&mlp, vec![Array::randn(&[2, 3], &mut r)]);
    Ok(grad_check(
        |t, v| {
            let mut vars = MlpParams::zeros(&[3, 5, 4, 2]).bind(t, false);
            vars.assign(&mut v[1..].iter().copied());
            let y = mlp_forward(t, &vars, v[0])?;
            Ok(t.sum(t.mul(y, y)))
        },
        &point,
        STEP,
    )?)
}

fn gru_check() -> Result<GradCheckReport> {
    let mut r = rng(8);
    let gru = GruParams::new(3, 4, &mut r);
    let point = vec![
        Array::randn(&[2, 3], &mut r),
        Array::randn(&[2, 4], &mut r),
        gru.w_ih.clone(),
        gru.w_hh.clone(),
        gru.b_ih.clone(),
        gru.b_hh.clone(),
    ];
    Ok(grad_check(
        |t, v| {
            let mut vars = GruParams::zeros(3, 4).bind(t, false);
            vars.assign(&mut v[2..].iter().copied());
            let h = gru_step(t, &vars, v[0], v[1])?;
            Ok(t.sum(t.sin(h)))
        },
        &point,
        STEP,
    )?)
}

fn kl_check() -> Result<GradCheckReport> {
    let mut r = rng(9);
    let point = vec![
        Array::randn(&[3, 4], &mut r),
        Array::uniform(&[3, 4], 0.3, 2.0, &mut r),
        Array::randn(&[3, 4], &mut r),
        Array::uniform(&[3, 4], 0.3, 2.0, &mut r),
    ];
    Ok(grad_check(
        |t, v| {
            let q = GaussianVar { mean: v[0], std: v[1] };
            let p = GaussianVar { mean: v[2], std: v[3] };
            Ok(t.sum(kl_var(t, &q, &p)?))
        },
        &point,
        STEP,
    )?)
}

fn tanh_check() -> Result<GradCheckReport> {
    let mut r = rng(10);
    let point = vec![
        Array::randn(&[2, 3], &mut r),
        Array::randn(&[2, 6], &mut r),
        Array::uniform(&[2, 3], -0.9, 0.9, &mut r),
    ];
    Ok(grad_check(
        |t, v| {
            let d = TanhGaussian::from_head(t, v[1], 3)?;
            let s = d.sample(t, t.constant(Array::full(&[2, 3], 0.4)))?;
            let lp = d.log_prob(t, v[2])?;
            Ok(t.add(t.sum(t.mul(s, v[0])), t.sum(lp)))
        },
        &point,
        STEP,
    )?)
}

fn small(encoder: EncoderKind, decoder: DecoderVariance) -> SsmConfig {
    SsmConfig {
        deter: 4,
        stoch: 3,
        hidden: 6,
        hidden_layers: 1,
        obs_dim: 2,
        action_dim: 2,
        encoder,
        feature_dim: 3,
        decoder_variance: decoder,
        ..SsmConfig::default()
    }
}

fn consts(t: &Tape, xs: &[Array]) -> Vec<Var> {
    xs.iter().map(|a| t.constant(a.clone())).collect()
}

fn to_diff(e: crate::Error) -> aime_diffcore::Error {
    aime_diffcore::Error::Invalid(e.to_string())
}

fn elbo_check(cfg: SsmConfig, opts: ElboOptions, seed: u64) -> Result<GradCheckReport> {
    let params = SsmParams::new(&cfg, &mut rng(seed))?;
    let mut r = rng(seed + 1);
    let obs: Vec<Array> = (0..4).map(|_| Array::randn(&[3, 2], &mut r)).collect();
    let act: Vec<Array> = (0..4).map(|_| Array::uniform(&[3, 2], -1.0, 1.0, &mut r)).collect();
    let noise = noise_stream(4, 3, cfg.stoch, &mut r);
    let point: Vec<Array> = named_arrays(&params).into_iter().map(|(_, a)| a).collect();
    Ok(grad_check(
        |t, v| {
            let mut vars = params.bind(t, false);
            vars.assign(&mut v.iter().copied());
            let o = consts(t, &obs);
            let beliefs = filter_sequence(t, &vars, &cfg, &o, &consts(t, &act), &consts(t, &noise)).map_err(to_diff)?;
            let rows = elbo_terms(t, &vars, &cfg, &beliefs, &o, &opts).map_err(to_diff)?;
            Ok(batch_mean(t, rows.total(t)))
        },
        &point,
        STEP,
    )?)
}

fn elbo_fixed() -> Result<GradCheckReport> {
    elbo_check(small(EncoderKind::Identity, DecoderVariance::Fixed), ElboOptions::plain(), 1)
}

fn elbo_learned() -> Result<GradCheckReport> {
    elbo_check(small(EncoderKind::Mlp, DecoderVariance::Learned), ElboOptions::plain(), 2)
}

fn elbo_scaled() -> Result<GradCheckReport> {
    elbo_check(small(EncoderKind::Identity, DecoderVariance::Fixed), ElboOptions { kl_scale: 2.0, ..ElboOptions::plain() }, 3)
}

fn perturbed(mut head: ActionHead, seed: u64) -> ActionHead {
    let mut r = rng(seed);
    for layer in &mut head.net.layers {
        layer.w = Array::randn(&[layer.w.rows(), layer.w.cols()], &mut r).map(|v| 0.5 * v);
        layer.b = Array::randn(&[1, layer.b.cols()], &mut r).map(|v| 0.5 * v);
    }
    head
}

fn policy_check() -> Result<GradCheckReport> {
    let cfg = SsmConfig { deter: 4, stoch: 3, hidden: 6, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
    let model = SsmParams::new(&cfg, &mut rng(40))?;
    let policy = perturbed(ActionHead::policy(&cfg, 5, 1, &mut rng(41)), 1041);
    let mut r = rng(42);
    let obs: Vec<Array> = (0..4).map(|_| Array::randn(&[3, 2], &mut r)).collect();
    let mut r = rng(43);
    let sn = noise_stream(4, 3, cfg.stoch, &mut r);
    let an = noise_stream(4, 3, 2, &mut r);
    let point: Vec<Array> = named_arrays(&policy).into_iter().map(|(_, a)| a).collect();
    Ok(grad_check(
        |t, v| {
            let mut pvars = policy.bind(t, false);
            pvars.assign(&mut v.iter().copied());
            let mvars = model.bind(t, false);
            let o = consts(t, &obs);
            let (_, beliefs) = filter_with_actions(t, &mvars, &cfg, &o, &consts(t, &sn), |k, prev, _| {
                Ok(policy.dist(t, &pvars, prev.features(t))?.sample(t, t.constant(an[k].clone()))?)
            })
            .map_err(to_diff)?;
            let rows = elbo_terms(t, &mvars, &cfg, &beliefs, &o, &ElboOptions::plain()).map_err(to_diff)?;
            Ok(batch_mean(t, rows.total(t)))
        },
        &point,
        STEP,
    )?)
}

fn forward_policy_check() -> Result<GradCheckReport> {
    let mut r = rng(50);
    let forward = MlpParams::new(&[6, 5, 4], &mut r);
    let policy = MlpParams::new(&[4, 5, 4], &mut r);
    let x = Array::randn(&[3, 4], &mut r);
    let y = Array::randn(&[3, 2], &mut r);
    let eps = Array::randn(&[3, 2], &mut r);
    let point = mlp_point(&policy, Vec::new());
    Ok(grad_check(
        |t, v| {
            let mut pvars = MlpParams::zeros(&[4, 5, 4]).bind(t, false);
            pvars.assign(&mut v.iter().copied());
            let fvars = forward.bind(t, false);
            let xs = t.constant(x.clone());
            let a = TanhGaussian::from_head(t, mlp_forward(t, &pvars, xs)?, 2)?.sample(t, t.constant(eps.clone()))?;
            let pred = mlp_forward(t, &fvars, t.concat_cols(&[xs, a]))?;
            Ok(t.sum(GaussianVar::from_head(t, pred, 2)?.log_prob(t, t.constant(y.clone()))?))
        },
        &point,
        STEP,
    )?)
}
