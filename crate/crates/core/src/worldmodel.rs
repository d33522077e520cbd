//! Recurrent latent state-space world model and its evidence lower bound.
//!
//! The latent state splits into a deterministic part `h_t`, carried by a
//! GRU, and a stochastic part `s_t`:
//!
//! ```text
//! h_t = gru([s_{t−1}, a_{t−1}], h_{t−1})
//! prior      p(s_t | h_t)          = N(head_p(h_t))
//! posterior  q(s_t | h_t, f(o_t))  = N(head_q([h_t, f(o_t)]))
//! decoder    p(o_t | h_t, s_t)     = N(dec([h_t, s_t]))
//! ```
//!
//! Inference parameters φ are the encoder `f` and the posterior head;
//! generative parameters θ are the GRU, the prior head and the decoder.
//! The KL term covers the stochastic part only and is evaluated in closed
//! form.

use std::path::Path;

use aime_diffcore::checkpoint;
use aime_diffcore::dist::{kl_var, std_to_raw, GaussianVar};
use aime_diffcore::nn::{gru_step, mlp_forward};
use aime_diffcore::params::{collect_grads, visit_child, visit_child_mut};
use aime_diffcore::{Adam, AdamConfig, Array, GruParams, GruVars, MlpParams, MlpVars, Module, Parameters, Tape, Var, VarSet};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datasets::{Chunk, EmbodimentDataset};
use crate::envs::LinGaussSpec;
use crate::error::{invalid, Error, Result};
use crate::seeds::{stream_rng, LabRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Identity,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariance {
    /// Unit variance.
    Fixed,
    /// Variance from a second decoder head.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsmConfig {
    /// Deterministic size H.
    pub deter: usize,
    /// Stochastic size Z.
    pub stoch: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub encoder: EncoderKind,
    /// Feature width of the MLP encoder; the identity encoder uses `obs_dim`.
    pub feature_dim: usize,
    pub decoder_variance: DecoderVariance,
    /// β of the β-NLL reweighting; 0 disables it.
    pub beta_nll: f64,
    pub free_nats: f64,
    /// KL balance α; 0.5 means plain KL.
    pub kl_balance: f64,
    pub kl_scale: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            deter: 64,
            stoch: 16,
            hidden: 64,
            hidden_layers: 2,
            obs_dim: 1,
            action_dim: 1,
            encoder: EncoderKind::Identity,
            feature_dim: 0,
            decoder_variance: DecoderVariance::Fixed,
            beta_nll: 0.0,
            free_nats: 0.0,
            kl_balance: 0.5,
            kl_scale: 1.0,
        }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deter == 0 || self.stoch == 0 || self.obs_dim == 0 || self.action_dim == 0 {
            return Err(invalid("deter, stoch, obs_dim and action_dim must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(invalid("hidden width must be at least 1"));
        }
        if self.encoder == EncoderKind::Mlp && self.feature_dim == 0 {
            return Err(invalid("the MLP encoder needs feature_dim >= 1"));
        }
        if !(0.0..=1.0).contains(&self.beta_nll) {
            return Err(invalid("beta_nll must lie in [0, 1]"));
        }
        if !(self.free_nats >= 0.0) {
            return Err(invalid("free nats must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.kl_balance) {
            return Err(invalid("KL balance must lie in [0, 1]"));
        }
        if !(self.kl_scale > 0.0) {
            return Err(invalid("KL scale must be positive"));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        match self.encoder {
            EncoderKind::Identity => self.obs_dim,
            EncoderKind::Mlp => self.feature_dim,
        }
    }

    /// Width of the policy input `[h, s]`.
    pub fn state_size(&self) -> usize {
        self.deter + self.stoch
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        s.push(output);
        s
    }

    fn decoder_out(&self) -> usize {
        match self.decoder_variance {
            DecoderVariance::Fixed => self.obs_dim,
            DecoderVariance::Learned => 2 * self.obs_dim,
        }
    }
}

/// The objective modifications of the phase-1 bound. Phase 2 uses
/// [`ElboOptions::plain`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboOptions {
    pub beta_nll: f64,
    pub free_nats: f64,
    pub kl_balance: f64,
    pub kl_scale: f64,
}

impl ElboOptions {
    pub fn plain() -> Self {
        Self { beta_nll: 0.0, free_nats: 0.0, kl_balance: 0.5, kl_scale: 1.0 }
    }

    pub fn from_config(cfg: &SsmConfig) -> Self {
        Self { beta_nll: cfg.beta_nll, free_nats: cfg.free_nats, kl_balance: cfg.kl_balance, kl_scale: cfg.kl_scale }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmParams {
    pub config: SsmConfig,
    pub encoder: Option<MlpParams>,
    pub posterior: MlpParams,
    pub gru: GruParams,
    pub prior: MlpParams,
    pub decoder: MlpParams,
}

#[derive(Clone, Debug)]
pub struct SsmVars {
    pub encoder: Option<MlpVars>,
    pub posterior: MlpVars,
    pub gru: GruVars,
    pub prior: MlpVars,
    pub decoder: MlpVars,
}

impl SsmParams {
    pub fn new(cfg: &SsmConfig, rng: &mut LabRng) -> Result<Self> {
        cfg.validate()?;
        let (h, z, f) = (cfg.deter, cfg.stoch, cfg.features());
        Ok(Self {
            config: cfg.clone(),
            encoder: (cfg.encoder == EncoderKind::Mlp).then(|| MlpParams::new(&cfg.sizes(cfg.obs_dim, f), rng)),
            posterior: MlpParams::new(&cfg.sizes(h + f, 2 * z), rng),
            gru: GruParams::new(z + cfg.action_dim, h, rng),
            prior: MlpParams::new(&cfg.sizes(h, 2 * z), rng),
            decoder: MlpParams::new(&cfg.sizes(h + z, cfg.decoder_out()), rng),
        })
    }

    pub fn zeros(cfg: &SsmConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, z, f) = (cfg.deter, cfg.stoch, cfg.features());
        Ok(Self {
            config: cfg.clone(),
            encoder: (cfg.encoder == EncoderKind::Mlp).then(|| MlpParams::zeros(&cfg.sizes(cfg.obs_dim, f))),
            posterior: MlpParams::zeros(&cfg.sizes(h + f, 2 * z)),
            gru: GruParams::zeros(z + cfg.action_dim, h),
            prior: MlpParams::zeros(&cfg.sizes(h, 2 * z)),
            decoder: MlpParams::zeros(&cfg.sizes(h + z, cfg.decoder_out())),
        })
    }

    /// Names of the inference parameters φ start with `phi.`, generative
    /// ones θ with `theta.`.
    pub fn is_inference_param(name: &str) -> bool {
        name.starts_with("phi.")
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let meta = serde_json::to_value(&self.config)?;
        checkpoint::save(path, self, config_hash, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let cfg: SsmConfig = serde_json::from_value(ck.meta.clone())?;
        let mut p = Self::zeros(&cfg)?;
        ck.restore_into(&mut p)?;
        Ok(p)
    }

    /// Parameters that realise a linear-Gaussian system exactly inside the
    /// model class, for oracle tests of inference.
    ///
    /// Requirements: identity encoder, fixed decoder variance, `Z` equal to
    /// the state size, square invertible `C`, and hidden width at least
    /// `H + obs_dim`. The GRU update gate is saturated shut so
    /// `h_t = tanh(ε(A s_{t−1} + B a_{t−1}))`; the prior head rescales by
    /// `1/ε`, the posterior mean is `C⁻¹ o_t` with standard deviation
    /// `posterior_std`, and the decoder mean is `C s_t`.
    pub fn linear_gaussian_exact(spec: &LinGaussSpec, cfg: &SsmConfig, prior_std: f64, posterior_std: f64) -> Result<Self> {
        const EPS: f64 = 1e-4;
        let (n, m, p) = (spec.state_dim(), spec.action_dim(), spec.obs_dim());
        let (h, z) = (cfg.deter, cfg.stoch);
        if cfg.encoder != EncoderKind::Identity || cfg.decoder_variance != DecoderVariance::Fixed {
            return Err(invalid("exact injection needs an identity encoder and a fixed decoder variance"));
        }
        if z != n || p != n || cfg.obs_dim != p || cfg.action_dim != m || h < n {
            return Err(invalid("exact injection needs Z = state = obs dims and H >= state dim"));
        }
        if cfg.hidden < h + p || cfg.hidden_layers == 0 {
            return Err(invalid("exact injection needs hidden width >= H + obs_dim"));
        }
        let c = spec.c_matrix();
        let c_inv: DMatrix<f64> = c.clone().try_inverse().ok_or_else(|| invalid("C is not invertible"))?;
        let (a, b) = (spec.a_matrix(), spec.b_matrix());
        let mut params = Self::zeros(cfg)?;

        let g = &mut params.gru;
        for j in 0..h {
            g.b_ih.set2(0, h + j, -30.0);
        }
        for i in 0..n {
            for j in 0..n {
                g.w_ih.set2(j, 2 * h + i, EPS * a[(i, j)]);
            }
            for k in 0..m {
                g.w_ih.set2(n + k, 2 * h + i, EPS * b[(i, k)]);
            }
        }

        let hidden = vec![cfg.hidden; cfg.hidden_layers];
        let mut pm = Array::zeros(&[h, 2 * z]);
        for i in 0..n {
            pm.set2(i, i, 1.0 / EPS);
        }
        let mut pb = vec![0.0; 2 * z];
        pb[z..].iter_mut().for_each(|v| *v = std_to_raw(prior_std));
        params.prior = MlpParams::affine(&hidden, &pm, &pb, 1.0)?;

        let mut qm = Array::zeros(&[h + p, 2 * z]);
        for i in 0..n {
            for j in 0..p {
                qm.set2(h + j, i, c_inv[(i, j)]);
            }
        }
        let mut qb = vec![0.0; 2 * z];
        qb[z..].iter_mut().for_each(|v| *v = std_to_raw(posterior_std));
        params.posterior = MlpParams::affine(&hidden, &qm, &qb, 10.0)?;

        let mut dm = Array::zeros(&[h + z, p]);
        for i in 0..p {
            for j in 0..n {
                dm.set2(h + j, i, c[(i, j)]);
            }
        }
        params.decoder = MlpParams::affine(&hidden, &dm, &vec![0.0; p], 10.0)?;
        Ok(params)
    }
}

impl Parameters for SsmParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        if let Some(e) = &self.encoder {
            visit_child("phi.encoder", e, f);
        }
        visit_child("phi.posterior", &self.posterior, f);
        visit_child("theta.gru", &self.gru, f);
        visit_child("theta.prior", &self.prior, f);
        visit_child("theta.decoder", &self.decoder, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        if let Some(e) = &mut self.encoder {
            visit_child_mut("phi.encoder", e, f);
        }
        visit_child_mut("phi.posterior", &mut self.posterior, f);
        visit_child_mut("theta.gru", &mut self.gru, f);
        visit_child_mut("theta.prior", &mut self.prior, f);
        visit_child_mut("theta.decoder", &mut self.decoder, f);
    }
}

impl VarSet for SsmVars {
    fn collect(&self, out: &mut Vec<Var>) {
        if let Some(e) = &self.encoder {
            e.collect(out);
        }
        self.posterior.collect(out);
        self.gru.collect(out);
        self.prior.collect(out);
        self.decoder.collect(out);
    }

    fn assign(&mut self, src: &mut dyn Iterator<Item = Var>) {
        if let Some(e) = &mut self.encoder {
            e.assign(src);
        }
        self.posterior.assign(src);
        self.gru.assign(src);
        self.prior.assign(src);
        self.decoder.assign(src);
    }
}

impl Module for SsmParams {
    type Vars = SsmVars;

    fn bind(&self, tape: &Tape, trainable: bool) -> SsmVars {
        SsmVars {
            encoder: self.encoder.as_ref().map(|e| e.bind(tape, trainable)),
            posterior: self.posterior.bind(tape, trainable),
            gru: self.gru.bind(tape, trainable),
            prior: self.prior.bind(tape, trainable),
            decoder: self.decoder.bind(tape, trainable),
        }
    }
}

/// Latent state on a tape: `h` is `[B, H]`, `s` is `[B, Z]`.
#[derive(Clone, Copy, Debug)]
pub struct Belief {
    pub h: Var,
    pub s: Var,
}

impl Belief {
    /// `h_0 = 0`, `s_0 = 0`.
    pub fn zero(tape: &Tape, cfg: &SsmConfig, batch: usize) -> Self {
        Self { h: tape.zeros(&[batch, cfg.deter]), s: tape.zeros(&[batch, cfg.stoch]) }
    }

    /// `[h, s]`, the input of policies and inverse models.
    pub fn features(&self, tape: &Tape) -> Var {
        tape.concat_cols(&[self.h, self.s])
    }
}

/// One filtering step: the new belief with both distributions over `s_t`.
#[derive(Clone, Copy, Debug)]
pub struct StepBelief {
    pub h: Var,
    pub s: Var,
    pub prior: GaussianVar,
    pub posterior: GaussianVar,
}

impl StepBelief {
    pub fn belief(&self) -> Belief {
        Belief { h: self.h, s: self.s }
    }
}

fn check_cols(tape: &Tape, v: Var, cols: usize, what: &str) -> Result<()> {
    let shape = tape.shape(v);
    if shape.len() != 2 || shape[1] != cols {
        return Err(invalid(format!("{what} has shape {shape:?}, expected [B, {cols}]")));
    }
    Ok(())
}

/// Observation features `f_φ(o)`.
pub fn encode(tape: &Tape, vars: &SsmVars, cfg: &SsmConfig, obs: Var) -> Result<Var> {
    check_cols(tape, obs, cfg.obs_dim, "observation")?;
    match &vars.encoder {
        None => Ok(obs),
        Some(e) => Ok(mlp_forward(tape, e, obs)?),
    }
}

/// `h_t` and the prior over `s_t` given the previous belief and action.
pub fn prior_step(tape: &Tape, vars: &SsmVars, cfg: &SsmConfig, prev: &Belief, action: Var) -> Result<(Var, GaussianVar)> {
    check_cols(tape, action, cfg.action_dim, "action")?;
    check_cols(tape, prev.s, cfg.stoch, "stochastic state")?;
    let input = tape.concat_cols(&[prev.s, action]);
    let h = gru_step(tape, &vars.gru, input, prev.h)?;
    let head = mlp_forward(tape, &vars.prior, h)?;
    Ok((h, GaussianVar::from_head(tape, head, cfg.stoch)?))
}

/// Filter one step: prior, posterior from the features of `o_t`, and a
/// reparameterised sample `s_t = mean + std ⊙ noise`.
pub fn posterior_step(
    tape: &Tape,
    vars: &SsmVars,
    cfg: &SsmConfig,
    prev: &Belief,
    action: Var,
    feature: Var,
    noise: Var,
) -> Result<StepBelief> {
    check_cols(tape, feature, cfg.features(), "feature")?;
    let (h, prior) = prior_step(tape, vars, cfg, prev, action)?;
    let head = mlp_forward(tape, &vars.posterior, tape.concat_cols(&[h, feature]))?;
    let posterior = GaussianVar::from_head(tape, head, cfg.stoch)?;
    let s = posterior.rsample(tape, noise)?;
    Ok(StepBelief { h, s, prior, posterior })
}

/// `p(o_t | h_t, s_t)`.
pub fn decode(tape: &Tape, vars: &SsmVars, cfg: &SsmConfig, h: Var, s: Var) -> Result<GaussianVar> {
    let out = mlp_forward(tape, &vars.decoder, tape.concat_cols(&[h, s]))?;
    match cfg.decoder_variance {
        DecoderVariance::Fixed => Ok(GaussianVar::unit(tape, out)),
        DecoderVariance::Learned => Ok(GaussianVar::from_head(tape, out, cfg.obs_dim)?),
    }
}

/// Posterior filtering from the zero belief, one step per observation.
pub fn filter_sequence(
    tape: &Tape,
    vars: &SsmVars,
    cfg: &SsmConfig,
    obs: &[Var],
    actions: &[Var],
    noise: &[Var],
) -> Result<Vec<StepBelief>> {
    if obs.len() != actions.len() || obs.len() != noise.len() {
        return Err(invalid(format!(
            "{} observations, {} actions and {} noise draws",
            obs.len(),
            actions.len(),
            noise.len()
        )));
    }
    let batch = obs.first().map_or(1, |o| tape.shape(*o)[0]);
    let mut prev = Belief::zero(tape, cfg, batch);
    let mut out = Vec::with_capacity(obs.len());
    for t in 0..obs.len() {
        let feat = encode(tape, vars, cfg, obs[t])?;
        let step = posterior_step(tape, vars, cfg, &prev, actions[t], feat, noise[t])?;
        prev = step.belief();
        out.push(step);
    }
    Ok(out)
}

/// Filtering where each action `a_{t−1}` is produced on the tape from the
/// previous belief and the features of `o_t`, for instance by a policy.
/// Returns the actions alongside the beliefs.
pub fn filter_with_actions<F>(
    tape: &Tape,
    vars: &SsmVars,
    cfg: &SsmConfig,
    obs: &[Var],
    noise: &[Var],
    mut act: F,
) -> Result<(Vec<Var>, Vec<StepBelief>)>
where
    F: FnMut(usize, &Belief, Var) -> Result<Var>,
{
    if obs.len() != noise.len() {
        return Err(invalid(format!("{} observations and {} noise draws", obs.len(), noise.len())));
    }
    let batch = obs.first().map_or(1, |o| tape.shape(*o)[0]);
    let mut prev = Belief::zero(tape, cfg, batch);
    let mut actions = Vec::with_capacity(obs.len());
    let mut beliefs = Vec::with_capacity(obs.len());
    for t in 0..obs.len() {
        let feat = encode(tape, vars, cfg, obs[t])?;
        let a = act(t, &prev, feat)?;
        let step = posterior_step(tape, vars, cfg, &prev, a, feat, noise[t])?;
        prev = step.belief();
        actions.push(a);
        beliefs.push(step);
    }
    Ok((actions, beliefs))
}

/// Per-sequence terms of the bound, each `[B, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct ElboRows {
    /// Σ_t log p(o_t | h_t, s_t).
    pub rec: Var,
    /// −Σ_t KL(q_t ‖ p_t), after any enabled modifications.
    pub kl: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveMask {
    Full,
    RecOnly,
    KlOnly,
}

impl ElboRows {
    pub fn total(&self, tape: &Tape) -> Var {
        tape.add(self.rec, self.kl)
    }

    pub fn masked(&self, tape: &Tape, mask: ObjectiveMask) -> Var {
        match mask {
            ObjectiveMask::Full => self.total(tape),
            ObjectiveMask::RecOnly => self.rec,
            ObjectiveMask::KlOnly => self.kl,
        }
    }
}

/// KL per row with optional balancing. With balance α the value is the
/// plain KL while the prior receives `2α` and the posterior `2(1 − α)` of
/// the plain gradient, so α = 0.5 is the unmodified term.
fn balanced_kl(tape: &Tape, q: &GaussianVar, p: &GaussianVar, alpha: f64) -> Result<Var> {
    if alpha == 0.5 {
        return Ok(kl_var(tape, q, p)?);
    }
    let (qs, ps) = (q.detach(tape), p.detach(tape));
    let to_prior = kl_var(tape, &qs, p)?;
    let to_post = kl_var(tape, q, &ps)?;
    let both = kl_var(tape, &qs, &ps)?;
    let mix = tape.add(tape.scale(to_prior, 2.0 * alpha), tape.scale(to_post, 2.0 * (1.0 - alpha)));
    Ok(tape.sub(mix, both))
}

/// Reconstruction and KL terms of the bound over filtered beliefs.
pub fn elbo_terms(
    tape: &Tape,
    vars: &SsmVars,
    cfg: &SsmConfig,
    beliefs: &[StepBelief],
    obs: &[Var],
    opts: &ElboOptions,
) -> Result<ElboRows> {
    if beliefs.len() != obs.len() || beliefs.is_empty() {
        return Err(invalid("beliefs and observations must be aligned and non-empty"));
    }
    let mut rec: Option<Var> = None;
    let mut kl: Option<Var> = None;
    for (t, (b, o)) in beliefs.iter().zip(obs).enumerate() {
        let dec = decode(tape, vars, cfg, b.h, b.s)?;
        let lp = dec.log_prob_elementwise(tape, *o)?;
        let (rec_t, weight) = if opts.beta_nll > 0.0 {
            // β-NLL: weight each dimension by stop-grad(σ²)^β, and the KL by
            // the mean weight of its row.
            let w = tape.value(dec.std).map(|s| s.powf(2.0 * opts.beta_nll));
            let row_mean = {
                let c = w.cols() as f64;
                let data: Vec<f64> = w.data().chunks(w.cols()).map(|r| r.iter().sum::<f64>() / c).collect();
                Array::new(vec![data.len(), 1], data)?
            };
            let wv = tape.constant(w);
            (tape.sum_cols(tape.mul(lp, wv)), Some(tape.constant(row_mean)))
        } else {
            (tape.sum_cols(lp), None)
        };
        let mut kl_t = balanced_kl(tape, &b.posterior, &b.prior, opts.kl_balance)?;
        if opts.free_nats > 0.0 {
            kl_t = tape.clamp(kl_t, opts.free_nats, f64::INFINITY);
        }
        if opts.kl_scale != 1.0 {
            kl_t = tape.scale(kl_t, opts.kl_scale);
        }
        if let Some(w) = weight {
            kl_t = tape.mul(kl_t, w);
        }
        if !tape.value(rec_t).is_finite() || !tape.value(kl_t).is_finite() {
            return Err(Error::NonFinite { what: "ELBO term".into(), step: t + 1 });
        }
        let neg_kl = tape.neg(kl_t);
        rec = Some(rec.map_or(rec_t, |r| tape.add(r, rec_t)));
        kl = Some(kl.map_or(neg_kl, |k| tape.add(k, neg_kl)));
    }
    Ok(ElboRows { rec: rec.expect("non-empty"), kl: kl.expect("non-empty") })
}

/// Mean over rows of a `[B, 1]` value, as a scalar var.
pub fn batch_mean(tape: &Tape, rows: Var) -> Var {
    let b = tape.shape(rows)[0] as f64;
    tape.scale(tape.sum(rows), 1.0 / b)
}

/// Standard-normal noise for `steps` steps of a `[batch, dim]` sample.
pub fn noise_stream(steps: usize, batch: usize, dim: usize, rng: &mut LabRng) -> Vec<Array> {
    (0..steps).map(|_| Array::randn(&[batch, dim], rng)).collect()
}

/// Batch-mean values of `(J, J_rec, J_KL)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboValue {
    pub j: f64,
    pub j_rec: f64,
    pub j_kl: f64,
}

/// Evaluate the bound on a chunk without tracking gradients.
pub fn elbo_on_chunk(params: &SsmParams, chunk: &Chunk, opts: &ElboOptions, noise: &[Array]) -> Result<ElboValue> {
    let actions = chunk.actions.as_ref().ok_or_else(|| invalid("the bound needs actions"))?;
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let obs: Vec<Var> = chunk.obs.iter().map(|o| tape.constant(o.clone())).collect();
    let act: Vec<Var> = actions.iter().map(|a| tape.constant(a.clone())).collect();
    let nz: Vec<Var> = noise.iter().map(|n| tape.constant(n.clone())).collect();
    let beliefs = filter_sequence(&tape, &vars, &params.config, &obs, &act, &nz)?;
    let rows = elbo_terms(&tape, &vars, &params.config, &beliefs, &obs, opts)?;
    let rec = tape.value(rows.rec).sum() / chunk.batch() as f64;
    let kl = tape.value(rows.kl).sum() / chunk.batch() as f64;
    Ok(ElboValue { j: rec + kl, j_rec: rec, j_kl: kl })
}

/// Per-sample bound values of one sequence under `samples` independent
/// noise draws, evaluated as one batch.
pub fn elbo_samples(params: &SsmParams, obs: &Array, actions: &Array, samples: usize, rng: &mut LabRng) -> Result<Vec<f64>> {
    let cfg = &params.config;
    if obs.rows() != actions.rows() {
        return Err(invalid("observations and actions differ in length"));
    }
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let o: Vec<Var> = (0..obs.rows()).map(|t| tape.constant(Array::row(obs.row_slice(t)).tile_rows(samples))).collect();
    let a: Vec<Var> =
        (0..obs.rows()).map(|t| tape.constant(Array::row(actions.row_slice(t)).tile_rows(samples))).collect();
    let nz: Vec<Var> = noise_stream(obs.rows(), samples, cfg.stoch, rng).into_iter().map(|n| tape.constant(n)).collect();
    let beliefs = filter_sequence(&tape, &vars, cfg, &o, &a, &nz)?;
    let rows = elbo_terms(&tape, &vars, cfg, &beliefs, &o, &ElboOptions::plain())?;
    let total = rows.total(&tape);
    let out = tape.value(total).data().to_vec();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub chunk_len: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, steps_per_epoch: 100, batch: 16, chunk_len: 30, lr: 1e-3, clip_norm: Some(100.0) }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, clip_norm: self.clip_norm, ..AdamConfig::default() }
    }
}

/// Epoch means of the training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub j: f64,
    pub j_rec: f64,
    pub j_kl: f64,
    pub grad_norm: f64,
}

/// One Adam ascent step on the batch-mean bound. Returns the step's values
/// and gradient norm.
pub fn world_model_step(
    params: &mut SsmParams,
    adam: &mut Adam,
    chunk: &Chunk,
    noise: &[Array],
    opts: &ElboOptions,
) -> Result<(ElboValue, f64)> {
    let actions = chunk.actions.as_ref().ok_or_else(|| invalid("world-model training needs actions"))?;
    let tape = Tape::new();
    let vars = params.bind(&tape, true);
    let obs: Vec<Var> = chunk.obs.iter().map(|o| tape.constant(o.clone())).collect();
    let act: Vec<Var> = actions.iter().map(|a| tape.constant(a.clone())).collect();
    let nz: Vec<Var> = noise.iter().map(|n| tape.constant(n.clone())).collect();
    let cfg = params.config.clone();
    let beliefs = filter_sequence(&tape, &vars, &cfg, &obs, &act, &nz)?;
    let rows = elbo_terms(&tape, &vars, &cfg, &beliefs, &obs, opts)?;
    let j = batch_mean(&tape, rows.total(&tape));
    let value = ElboValue {
        j: tape.item(j),
        j_rec: tape.item(batch_mean(&tape, rows.rec)),
        j_kl: tape.item(batch_mean(&tape, rows.kl)),
    };
    let loss = tape.neg(j);
    let grads = tape.backward(loss);
    let g = collect_grads(&grads, &vars, params);
    if g.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "world-model gradient".into(), step: adam.steps() as usize });
    }
    let norm = adam.step(params, &g);
    Ok((value, norm))
}

/// Phase 1: Adam ascent on the minibatch bound over sampled chunks. The
/// final parameters are returned; there is no early stopping.
pub fn train_world_model(
    ds: &EmbodimentDataset,
    cfg: &SsmConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(SsmParams, Vec<EpochLog>)> {
    let params = SsmParams::new(cfg, &mut stream_rng(seed, "init", 0))?;
    continue_training(params, ds, train, seed)
}

/// Phase-1 training from given parameters.
pub fn continue_training(
    params: SsmParams,
    ds: &EmbodimentDataset,
    train: &TrainConfig,
    seed: u64,
) -> Result<(SsmParams, Vec<EpochLog>)> {
    let mut trainer = WorldModelTrainer::new(params, train.clone(), seed);
    let mut log = Vec::with_capacity(train.epochs);
    for _ in 0..train.epochs {
        log.push(trainer.epoch(ds)?);
    }
    Ok((trainer.params, log))
}

/// Optimiser and sampling state of phase 1, advanced one epoch at a time so
/// callers can inspect intermediate checkpoints.
pub struct WorldModelTrainer {
    pub params: SsmParams,
    train: TrainConfig,
    opts: ElboOptions,
    adam: Adam,
    sampling: LabRng,
    noise: LabRng,
    epochs_done: usize,
}

impl WorldModelTrainer {
    pub fn new(params: SsmParams, train: TrainConfig, seed: u64) -> Self {
        Self {
            opts: ElboOptions::from_config(&params.config),
            adam: Adam::new(train.adam()),
            params,
            train,
            sampling: stream_rng(seed, "sampling", 0),
            noise: stream_rng(seed, "noise", 0),
            epochs_done: 0,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn epoch(&mut self, ds: &EmbodimentDataset) -> Result<EpochLog> {
        let cfg = &self.params.config;
        if ds.obs_dim() != cfg.obs_dim || ds.action_dim() != cfg.action_dim {
            return Err(invalid("dataset dimensions do not match the model"));
        }
        let stoch = cfg.stoch;
        let t = &self.train;
        let mut acc = EpochLog { epoch: self.epochs_done + 1, j: 0.0, j_rec: 0.0, j_kl: 0.0, grad_norm: 0.0 };
        for _ in 0..t.steps_per_epoch {
            let chunk = ds.sample_chunks(t.batch, t.chunk_len, &mut self.sampling)?;
            let noise = noise_stream(t.chunk_len, t.batch, stoch, &mut self.noise);
            let (v, norm) = world_model_step(&mut self.params, &mut self.adam, &chunk, &noise, &self.opts)?;
            acc.j += v.j;
            acc.j_rec += v.j_rec;
            acc.j_kl += v.j_kl;
            acc.grad_norm += norm;
        }
        let n = t.steps_per_epoch.max(1) as f64;
        acc.j /= n;
        acc.j_rec /= n;
        acc.j_kl /= n;
        acc.grad_norm /= n;
        if !acc.j.is_finite() {
            return Err(Error::NonFinite { what: "training objective".into(), step: acc.epoch });
        }
        self.epochs_done += 1;
        Ok(acc)
    }
}

/// Value-level filter for acting online: keeps `(h, s)` for one batch row
/// and advances it one observation at a time with the posterior mean.
#[derive(Clone, Debug)]
pub struct OnlineFilter {
    pub h: Array,
    pub s: Array,
}

impl OnlineFilter {
    pub fn new(cfg: &SsmConfig) -> Self {
        Self { h: Array::zeros(&[1, cfg.deter]), s: Array::zeros(&[1, cfg.stoch]) }
    }

    /// Advance with the action that was applied and the observation it
    /// produced. `noise = None` takes the posterior mean.
    pub fn update(&mut self, params: &SsmParams, action: &[f64], obs: &[f64], noise: Option<&Array>) -> Result<()> {
        let cfg = &params.config;
        let tape = Tape::new();
        let vars = params.bind(&tape, false);
        let prev = Belief { h: tape.constant(self.h.clone()), s: tape.constant(self.s.clone()) };
        let a = tape.constant(Array::row(action));
        let feat = encode(&tape, &vars, cfg, tape.constant(Array::row(obs)))?;
        let nz = tape.constant(noise.cloned().unwrap_or_else(|| Array::zeros(&[1, cfg.stoch])));
        let step = posterior_step(&tape, &vars, cfg, &prev, a, feat, nz)?;
        self.h = tape.value(step.h).clone();
        self.s = tape.value(step.s).clone();
        Ok(())
    }

    pub fn features(&self) -> Array {
        Array::concat_cols(&[&self.h, &self.s]).expect("h and s share one row")
    }
}
