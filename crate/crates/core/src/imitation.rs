//! Phase 2: infer the demonstrator's actions by maximising the evidence
//! bound of the frozen world model.
//!
//! Three action-inference models share the machinery here: an amortised
//! policy `π_ψ(a_{t−1} | h_{t−1}, s_{t−1})`, per-sequence planning over the
//! action variables directly, and the variant where an inverse model
//! `q(a_{t−1} | h_{t−1}, s_{t−1}, f(o_t))` proposes actions and guides the
//! policy through a KL term.

use std::path::Path;

use aime_diffcore::checkpoint;
use aime_diffcore::dist::{kl_tanh_gaussian, squash};
use aime_diffcore::nn::mlp_forward;
use aime_diffcore::params::{collect_grads, visit_child, visit_child_mut};
use aime_diffcore::{param_hash, Adam, AdamConfig, Array, MlpParams, MlpVars, Module, Parameters, TanhGaussian, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::control::{returns, Controller};
use crate::datasets::{Chunk, ChunkIndex, DemoDataset, EmbodimentDataset};
use crate::envs::{EnvSpec, Task};
use crate::error::{invalid, Error, Result};
use crate::seeds::{rng, stream_rng, LabRng};
use crate::worldmodel::{
    batch_mean, elbo_terms, encode, filter_sequence, filter_with_actions, noise_stream, Belief, ElboOptions,
    ObjectiveMask, OnlineFilter, SsmConfig, SsmParams, SsmVars,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Aime,
    AimeIdm,
    Plan,
}

impl Variant {
    pub fn id(&self) -> &'static str {
        match self {
            Variant::Aime => "aime",
            Variant::AimeIdm => "aime-idm",
            Variant::Plan => "plan",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Noise draws averaged in the planning objective.
    pub samples: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { iterations: 500, lr: 0.1, samples: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub chunk_len: usize,
    pub lr: f64,
}

impl Default for IdmConfig {
    fn default() -> Self {
        Self { epochs: 20, steps_per_epoch: 100, batch: 16, chunk_len: 30, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImitationConfig {
    pub variant: Variant,
    pub mask: ObjectiveMask,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub chunk_len: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub policy_hidden: usize,
    pub policy_layers: usize,
    pub idm: IdmConfig,
    pub plan: PlanConfig,
    /// Sample actions at evaluation instead of taking the mean.
    pub stochastic_eval: bool,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Aime,
            mask: ObjectiveMask::Full,
            epochs: 50,
            steps_per_epoch: 100,
            batch: 16,
            chunk_len: 30,
            lr: 1e-3,
            clip_norm: Some(100.0),
            policy_hidden: 64,
            policy_layers: 2,
            idm: IdmConfig::default(),
            plan: PlanConfig::default(),
            stochastic_eval: false,
        }
    }
}

impl ImitationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.chunk_len == 0 {
            return Err(invalid("batch and chunk length must be positive"));
        }
        if !(self.lr > 0.0) || !(self.plan.lr > 0.0) || !(self.idm.lr > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if self.plan.samples == 0 {
            return Err(invalid("planning needs at least one sample"));
        }
        Ok(())
    }

    fn adam(&self) -> Adam {
        Adam::new(AdamConfig { lr: self.lr, clip_norm: self.clip_norm, ..AdamConfig::default() })
    }
}

/// Tanh-Gaussian head over a feature vector, used for both the policy and
/// the inverse model. The output layer starts at zero so initial actions
/// are centred at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionHead {
    pub net: MlpParams,
    #[serde(skip)]
    prefix: &'static str,
}

pub type PolicyParams = ActionHead;
pub type IdmParams = ActionHead;

impl ActionHead {
    fn build(prefix: &'static str, input: usize, action_dim: usize, hidden: usize, layers: usize, rng: &mut LabRng) -> Self {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(hidden, layers));
        sizes.push(2 * action_dim);
        Self { net: MlpParams::new(&sizes, rng).with_zero_head(), prefix }
    }

    /// Policy over `[h, s]`.
    pub fn policy(cfg: &SsmConfig, hidden: usize, layers: usize, rng: &mut LabRng) -> Self {
        Self::build("psi", cfg.state_size(), cfg.action_dim, hidden, layers, rng)
    }

    /// Inverse model over `[h, s, f(o)]`.
    pub fn idm(cfg: &SsmConfig, hidden: usize, layers: usize, rng: &mut LabRng) -> Self {
        Self::build("phi.idm", cfg.state_size() + cfg.features(), cfg.action_dim, hidden, layers, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_size()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_size() / 2
    }

    pub fn dist(&self, tape: &Tape, vars: &MlpVars, input: Var) -> Result<TanhGaussian> {
        let head = mlp_forward(tape, vars, input)?;
        Ok(TanhGaussian::from_head(tape, head, self.action_dim())?)
    }

    /// `tanh(mean)` for one input row.
    pub fn mode_value(&self, input: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let d = self.dist(&tape, &vars, tape.constant(Array::row(input)))?;
        let a = d.mode(&tape);
        let out = tape.value(a).data().to_vec();
        Ok(out)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let sizes: Vec<usize> =
            std::iter::once(self.net.input_size()).chain(self.net.layers.iter().map(|l| l.output_size())).collect();
        let meta = serde_json::json!({ "sizes": sizes, "prefix": self.prefix });
        checkpoint::save(path, self, config_hash, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let sizes: Vec<usize> = serde_json::from_value(ck.meta["sizes"].clone())?;
        let prefix = match ck.meta["prefix"].as_str() {
            Some("phi.idm") => "phi.idm",
            _ => "psi",
        };
        if sizes.len() < 2 {
            return Err(invalid("action head checkpoint lists fewer than two layer sizes"));
        }
        let mut head = Self { net: MlpParams::zeros(&sizes), prefix };
        ck.restore_into(&mut head)?;
        Ok(head)
    }
}

impl Parameters for ActionHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        visit_child(self.prefix_or_default(), &self.net, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        let p = self.prefix_or_default();
        visit_child_mut(p, &mut self.net, f);
    }
}

impl ActionHead {
    fn prefix_or_default(&self) -> &'static str {
        if self.prefix.is_empty() {
            "psi"
        } else {
            self.prefix
        }
    }
}

impl Module for ActionHead {
    type Vars = MlpVars;

    fn bind(&self, tape: &Tape, trainable: bool) -> MlpVars {
        self.net.bind(tape, trainable)
    }
}

/// Per-epoch phase-2 log. `action_mse` compares inferred action means with
/// the hidden true actions when those are supplied for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImitationLog {
    pub epoch: usize,
    pub j: f64,
    pub j_rec: f64,
    pub j_kl: f64,
    pub idm_kl: Option<f64>,
    pub action_mse: Option<f64>,
}

fn constants(tape: &Tape, arrays: &[Array]) -> Vec<Var> {
    arrays.iter().map(|a| tape.constant(a.clone())).collect()
}

struct Phase2Values {
    j: f64,
    j_rec: f64,
    j_kl: f64,
    idm_kl: Option<f64>,
}

/// Builds the phase-2 objective on `tape` and returns the scalar to ascend.
#[allow(clippy::too_many_arguments)]
fn phase2_objective(
    tape: &Tape,
    model: &SsmParams,
    mvars: &SsmVars,
    policy: &ActionHead,
    pvars: &MlpVars,
    idm: Option<(&ActionHead, &MlpVars)>,
    obs: &[Var],
    state_noise: &[Var],
    action_noise: &[Var],
    mask: ObjectiveMask,
) -> Result<(Var, Phase2Values)> {
    let cfg = &model.config;
    let mut idm_kl: Option<Var> = None;
    let (_, beliefs) = filter_with_actions(tape, mvars, cfg, obs, state_noise, |t, prev, feat| {
        let pi = policy.dist(tape, pvars, prev.features(tape))?;
        match idm {
            None => Ok(pi.sample(tape, action_noise[t])?),
            Some((head, ivars)) => {
                let q = head.dist(tape, ivars, tape.concat_cols(&[prev.h, prev.s, feat]))?;
                let kl = kl_tanh_gaussian(tape, &q, &pi)?;
                idm_kl = Some(idm_kl.map_or(kl, |k| tape.add(k, kl)));
                Ok(q.sample(tape, action_noise[t])?)
            }
        }
    })?;
    let rows = elbo_terms(tape, mvars, cfg, &beliefs, obs, &ElboOptions::plain())?;
    let masked = rows.masked(tape, mask);
    let mut objective = batch_mean(tape, masked);
    let mut values = Phase2Values {
        j: tape.item(batch_mean(tape, rows.total(tape))),
        j_rec: tape.item(batch_mean(tape, rows.rec)),
        j_kl: tape.item(batch_mean(tape, rows.kl)),
        idm_kl: None,
    };
    if let Some(kl) = idm_kl {
        let m = batch_mean(tape, kl);
        values.idm_kl = Some(tape.item(m));
        objective = tape.sub(objective, m);
    }
    Ok((objective, values))
}

/// Mean squared error between the policy's action means and the true
/// actions, following the filter along the inferred actions.
pub fn action_mse(model: &SsmParams, policy: &ActionHead, truth: &EmbodimentDataset) -> Result<f64> {
    if truth.is_empty() {
        return Err(invalid("no trajectories to evaluate"));
    }
    let len = truth.lengths().into_iter().min().unwrap_or(0);
    let index: Vec<ChunkIndex> = (0..truth.len()).map(|traj| ChunkIndex { traj, offset: 0 }).collect();
    let chunk = truth.gather(&index, len);
    let true_actions = chunk.actions.as_ref().expect("embodiment chunks carry actions");
    let tape = Tape::new();
    let mvars = model.bind(&tape, false);
    let pvars = policy.bind(&tape, false);
    let obs = constants(&tape, &chunk.obs);
    let zeros: Vec<Var> = (0..len).map(|_| tape.zeros(&[chunk.batch(), model.config.stoch])).collect();
    let (actions, _) = filter_with_actions(&tape, &mvars, &model.config, &obs, &zeros, |_, prev, _| {
        Ok(policy.dist(&tape, &pvars, prev.features(&tape))?.mode(&tape))
    })?;
    let mut se = 0.0;
    let mut n = 0usize;
    for (a, truth) in actions.iter().zip(true_actions) {
        for (x, y) in tape.value(*a).data().iter().zip(truth.data()) {
            se += (x - y).powi(2);
            n += 1;
        }
    }
    Ok(se / n as f64)
}

fn check_frozen(model: &SsmParams, before: &str, what: &str) -> Result<()> {
    let after = param_hash(model);
    if after != before {
        return Err(Error::FrozenViolation(format!("{what}: world-model hash changed from {before} to {after}")));
    }
    Ok(())
}

/// Amortised phase 2: train a fresh policy on the demonstrations.
pub fn aime_phase2(
    model: &SsmParams,
    demos: &DemoDataset,
    cfg: &ImitationConfig,
    seed: u64,
    truth: Option<&EmbodimentDataset>,
) -> Result<(PolicyParams, Vec<ImitationLog>)> {
    run_phase2(model, None, demos, cfg, seed, truth)
}

/// Phase 2 with actions proposed by a trained inverse model, which guides
/// the policy through `−KL(q ‖ π)`.
pub fn aime_idm_phase2(
    model: &SsmParams,
    idm: &IdmParams,
    demos: &DemoDataset,
    cfg: &ImitationConfig,
    seed: u64,
    truth: Option<&EmbodimentDataset>,
) -> Result<(PolicyParams, Vec<ImitationLog>)> {
    run_phase2(model, Some(idm), demos, cfg, seed, truth)
}

fn run_phase2(
    model: &SsmParams,
    idm: Option<&IdmParams>,
    demos: &DemoDataset,
    cfg: &ImitationConfig,
    seed: u64,
    truth: Option<&EmbodimentDataset>,
) -> Result<(PolicyParams, Vec<ImitationLog>)> {
    cfg.validate()?;
    let mc = &model.config;
    if demos.obs_dim() != mc.obs_dim {
        return Err(invalid("demonstrations do not match the model's observation size"));
    }
    if let Some(i) = idm {
        if i.input_dim() != mc.state_size() + mc.features() || i.action_dim() != mc.action_dim {
            return Err(invalid("inverse model does not match the world model"));
        }
    }
    let before = param_hash(model);
    let idm_before = idm.map(|i| param_hash(i));
    let mut policy = ActionHead::policy(mc, cfg.policy_hidden, cfg.policy_layers, &mut stream_rng(seed, "init", 1));
    let mut adam = cfg.adam();
    let mut sampling = stream_rng(seed, "sampling", 1);
    let mut noise_rng = stream_rng(seed, "noise", 1);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = Phase2Values { j: 0.0, j_rec: 0.0, j_kl: 0.0, idm_kl: idm.map(|_| 0.0) };
        for _ in 0..cfg.steps_per_epoch {
            let chunk = demos.sample_chunks(cfg.batch, cfg.chunk_len, &mut sampling)?;
            let sn = noise_stream(cfg.chunk_len, cfg.batch, mc.stoch, &mut noise_rng);
            let an = noise_stream(cfg.chunk_len, cfg.batch, mc.action_dim, &mut noise_rng);
            let tape = Tape::new();
            let mvars = model.bind(&tape, false);
            let pvars = policy.bind(&tape, true);
            let ivars = idm.map(|i| (i, i.bind(&tape, false)));
            let (objective, v) = phase2_objective(
                &tape,
                model,
                &mvars,
                &policy,
                &pvars,
                ivars.as_ref().map(|(i, v)| (*i, v)),
                &constants(&tape, &chunk.obs),
                &constants(&tape, &sn),
                &constants(&tape, &an),
                cfg.mask,
            )?;
            let grads = tape.backward(tape.neg(objective));
            let g = collect_grads(&grads, &pvars, &policy);
            if g.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { what: "policy gradient".into(), step: adam.steps() as usize + 1 });
            }
            adam.step(&mut policy, &g);
            acc.j += v.j;
            acc.j_rec += v.j_rec;
            acc.j_kl += v.j_kl;
            if let (Some(a), Some(k)) = (acc.idm_kl.as_mut(), v.idm_kl) {
                *a += k;
            }
        }
        let n = cfg.steps_per_epoch.max(1) as f64;
        let entry = ImitationLog {
            epoch: epoch + 1,
            j: acc.j / n,
            j_rec: acc.j_rec / n,
            j_kl: acc.j_kl / n,
            idm_kl: acc.idm_kl.map(|k| k / n),
            action_mse: truth.map(|t| action_mse(model, &policy, t)).transpose()?,
        };
        if !entry.j.is_finite() {
            return Err(Error::NonFinite { what: "phase-2 objective".into(), step: epoch + 1 });
        }
        log.push(entry);
    }
    check_frozen(model, &before, "phase 2")?;
    if let (Some(i), Some(h)) = (idm, idm_before) {
        if param_hash(i) != h {
            return Err(Error::FrozenViolation("inverse model changed during phase 2".into()));
        }
    }
    Ok((policy, log))
}

/// Both sides of the cancellation identity on one sampled path, averaged
/// over rows: the joint state-action KL with the policy factor present in
/// posterior and prior, and the state-only KL.
pub fn joint_kl_check(model: &SsmParams, policy: &PolicyParams, obs: &[Array], seed: u64) -> Result<(f64, f64)> {
    let cfg = &model.config;
    if obs.is_empty() {
        return Err(invalid("empty chunk"));
    }
    let batch = obs[0].rows();
    let mut r = rng(seed);
    let sn = noise_stream(obs.len(), batch, cfg.stoch, &mut r);
    let an = noise_stream(obs.len(), batch, cfg.action_dim, &mut r);
    let tape = Tape::new();
    let mvars = model.bind(&tape, false);
    let pvars = policy.bind(&tape, false);
    let o = constants(&tape, obs);
    let mut policy_terms: Vec<(Var, Var)> = Vec::with_capacity(obs.len());
    let (_, beliefs) = filter_with_actions(&tape, &mvars, cfg, &o, &constants(&tape, &sn), |t, prev, _| {
        let post_factor = policy.dist(&tape, &pvars, prev.features(&tape))?;
        let prior_factor = policy.dist(&tape, &pvars, prev.features(&tape))?;
        let u = post_factor.rsample_raw(&tape, tape.constant(an[t].clone()))?;
        policy_terms.push((post_factor.log_prob_raw(&tape, u)?, prior_factor.log_prob_raw(&tape, u)?));
        Ok(squash(&tape, u))
    })?;
    let mut joint = 0.0;
    let mut state = 0.0;
    for (b, (lq, lp)) in beliefs.iter().zip(&policy_terms) {
        let kl = aime_diffcore::kl_var(&tape, &b.posterior, &b.prior)?;
        let joint_t = tape.add(tape.sub(*lq, *lp), kl);
        joint += tape.item(batch_mean(&tape, joint_t));
        state += tape.item(batch_mean(&tape, kl));
    }
    Ok((joint, state))
}

/// Result of per-sequence action planning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    /// `[T, action_dim]`, the actions `a_0..a_{T−1}`.
    pub actions: Array,
    pub j_init: f64,
    pub j_best: f64,
    pub best_iteration: usize,
}

struct ActionVars(Vec<Array>);

impl Parameters for ActionVars {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        for (t, a) in self.0.iter().enumerate() {
            f(&format!("u.{t}"), a);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        for (t, a) in self.0.iter_mut().enumerate() {
            f(&format!("u.{t}"), a);
        }
    }
}

/// Optimise the action sequence of one observation sequence directly.
///
/// Pre-squash variables start at zero and follow Adam ascent on the bound,
/// averaged over a fixed set of noise draws. The best sequence seen,
/// including the initialisation, is returned.
pub fn plan_actions(model: &SsmParams, obs: &Array, plan: &PlanConfig, seed: u64) -> Result<PlanResult> {
    let cfg = &model.config;
    if obs.cols() != cfg.obs_dim || obs.rows() == 0 {
        return Err(invalid(format!("planning needs [T, {}] observations, got {:?}", cfg.obs_dim, obs.shape())));
    }
    let (steps, n) = (obs.rows(), plan.samples.max(1));
    let obs_rows: Vec<Array> = (0..steps).map(|t| Array::row(obs.row_slice(t)).tile_rows(n)).collect();
    let noise = noise_stream(steps, n, cfg.stoch, &mut stream_rng(seed, "noise", 2));
    let mut vars = ActionVars((0..steps).map(|_| Array::zeros(&[1, cfg.action_dim])).collect());
    let mut adam = Adam::new(AdamConfig { lr: plan.lr, clip_norm: None, ..AdamConfig::default() });
    let ones = Array::full(&[n, 1], 1.0);

    let evaluate = |vars: &ActionVars, with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let mvars = model.bind(&tape, false);
        let us: Vec<Var> = vars.0.iter().map(|u| if with_grad { tape.param(u.clone()) } else { tape.constant(u.clone()) }).collect();
        let one = tape.constant(ones.clone());
        let acts: Vec<Var> = us.iter().map(|u| squash(&tape, tape.matmul(one, *u))).collect();
        let o = constants(&tape, &obs_rows);
        let beliefs = filter_sequence(&tape, &mvars, cfg, &o, &acts, &constants(&tape, &noise))?;
        let rows = elbo_terms(&tape, &mvars, cfg, &beliefs, &o, &ElboOptions::plain())?;
        let j = batch_mean(&tape, rows.total(&tape));
        let value = tape.item(j);
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(tape.neg(j));
        let g = us.iter().map(|u| grads.get_or_zeros(*u, cfg.action_dim)).collect();
        Ok((value, g))
    };

    let mut best = vars.0.clone();
    let mut j_best = f64::NEG_INFINITY;
    let mut j_init = f64::NAN;
    let mut best_iteration = 0;
    for it in 0..plan.iterations {
        let (j, g) = evaluate(&vars, true)?;
        if !j.is_finite() {
            return Err(Error::NonFinite { what: "planning objective".into(), step: it });
        }
        if it == 0 {
            j_init = j;
        }
        if j > j_best {
            j_best = j;
            best = vars.0.clone();
            best_iteration = it;
        }
        adam.step(&mut vars, &g);
    }
    let (j_last, _) = evaluate(&vars, false)?;
    if plan.iterations == 0 {
        j_init = j_last;
        j_best = j_last;
    } else if j_last.is_finite() && j_last > j_best {
        j_best = j_last;
        best = vars.0.clone();
        best_iteration = plan.iterations;
    }
    let mut actions = Array::zeros(&[steps, cfg.action_dim]);
    for (t, u) in best.iter().enumerate() {
        for (k, v) in u.data().iter().enumerate() {
            actions.set2(t, k, v.tanh().clamp(-1.0, 1.0));
        }
    }
    Ok(PlanResult { actions, j_init, j_best, best_iteration })
}

/// Label every demonstration by planning. Returns one `[T, action_dim]`
/// array per trajectory.
pub fn plan_labels(model: &SsmParams, demos: &DemoDataset, plan: &PlanConfig, seed: u64) -> Result<Vec<PlanResult>> {
    demos
        .trajectories()
        .iter()
        .enumerate()
        .map(|(i, d)| plan_actions(model, d.observations(), plan, crate::seeds::derive_seed(seed, "plan", i as u64)))
        .collect()
}

/// Per-epoch log of inverse-model training: mean `Σ_t log q(a_t | …)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmLog {
    pub epoch: usize,
    pub log_likelihood: f64,
}

fn idm_log_likelihood_on(tape: &Tape, model: &SsmParams, mvars: &SsmVars, idm: &IdmParams, ivars: &MlpVars, chunk: &Chunk, noise: &[Array]) -> Result<Var> {
    let cfg = &model.config;
    let actions = chunk.actions.as_ref().ok_or_else(|| invalid("inverse-model training needs actions"))?;
    let obs = constants(tape, &chunk.obs);
    let acts = constants(tape, actions);
    let beliefs = filter_sequence(tape, mvars, cfg, &obs, &acts, &constants(tape, noise))?;
    let mut total: Option<Var> = None;
    for t in 0..obs.len() {
        let prev = if t == 0 {
            Belief::zero(tape, cfg, chunk.batch())
        } else {
            Belief { h: tape.detach(beliefs[t - 1].h), s: tape.detach(beliefs[t - 1].s) }
        };
        let feat = tape.detach(encode(tape, mvars, cfg, obs[t])?);
        let q = idm.dist(tape, ivars, tape.concat_cols(&[prev.h, prev.s, feat]))?;
        let lp = q.log_prob(tape, acts[t])?;
        total = Some(total.map_or(lp, |x| tape.add(x, lp)));
    }
    Ok(batch_mean(tape, total.expect("non-empty chunk")))
}

/// Train the inverse model as an action decoder on filtered states of the
/// embodiment data. The world model only supplies detached inputs.
pub fn train_idm_head(
    model: &SsmParams,
    ds: &EmbodimentDataset,
    cfg: &ImitationConfig,
    seed: u64,
) -> Result<(IdmParams, Vec<IdmLog>)> {
    cfg.validate()?;
    let mc = &model.config;
    if ds.obs_dim() != mc.obs_dim || ds.action_dim() != mc.action_dim {
        return Err(invalid("dataset does not match the world model"));
    }
    let before = param_hash(model);
    let ic = &cfg.idm;
    let mut idm = ActionHead::idm(mc, cfg.policy_hidden, cfg.policy_layers, &mut stream_rng(seed, "init", 2));
    let mut adam = Adam::new(AdamConfig { lr: ic.lr, clip_norm: cfg.clip_norm, ..AdamConfig::default() });
    let mut sampling = stream_rng(seed, "sampling", 2);
    let mut noise_rng = stream_rng(seed, "noise", 3);
    let mut log = Vec::with_capacity(ic.epochs);
    for epoch in 0..ic.epochs {
        let mut acc = 0.0;
        for _ in 0..ic.steps_per_epoch {
            let chunk = ds.sample_chunks(ic.batch, ic.chunk_len, &mut sampling)?;
            let noise = noise_stream(ic.chunk_len, ic.batch, mc.stoch, &mut noise_rng);
            let tape = Tape::new();
            let mvars = model.bind(&tape, false);
            let ivars = idm.bind(&tape, true);
            let ll = idm_log_likelihood_on(&tape, model, &mvars, &idm, &ivars, &chunk, &noise)?;
            acc += tape.item(ll);
            let grads = tape.backward(tape.neg(ll));
            let g = collect_grads(&grads, &ivars, &idm);
            if g.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { what: "inverse-model gradient".into(), step: adam.steps() as usize + 1 });
            }
            adam.step(&mut idm, &g);
        }
        log.push(IdmLog { epoch: epoch + 1, log_likelihood: acc / ic.steps_per_epoch.max(1) as f64 });
    }
    check_frozen(model, &before, "inverse-model training")?;
    Ok((idm, log))
}

/// Mean per-sequence inverse-model log-likelihood over whole trajectories.
pub fn idm_log_likelihood(model: &SsmParams, idm: &IdmParams, ds: &EmbodimentDataset, seed: u64) -> Result<f64> {
    let len = ds.lengths().into_iter().min().ok_or_else(|| invalid("empty dataset"))?;
    let index: Vec<ChunkIndex> = (0..ds.len()).map(|traj| ChunkIndex { traj, offset: 0 }).collect();
    let chunk = ds.gather(&index, len);
    let noise = noise_stream(len, chunk.batch(), model.config.stoch, &mut rng(seed));
    let tape = Tape::new();
    let mvars = model.bind(&tape, false);
    let ivars = idm.bind(&tape, false);
    let ll = idm_log_likelihood_on(&tape, model, &mvars, idm, &ivars, &chunk, &noise)?;
    Ok(tape.item(ll))
}

/// Online agent: filters its own belief with the posterior mean, using the
/// action it emitted and the observation that followed, and acts with the
/// policy. The observation at reset is not used, matching training where
/// the first action comes from the zero belief.
pub struct LatentAgent<'a> {
    model: &'a SsmParams,
    policy: &'a PolicyParams,
    filter: OnlineFilter,
    prev: Option<Vec<f64>>,
    stochastic: bool,
    rng: LabRng,
}

impl<'a> LatentAgent<'a> {
    pub fn new(model: &'a SsmParams, policy: &'a PolicyParams, stochastic: bool) -> Self {
        Self { model, policy, filter: OnlineFilter::new(&model.config), prev: None, stochastic, rng: rng(0) }
    }
}

impl Controller for LatentAgent<'_> {
    fn reset(&mut self, seed: u64) {
        self.filter = OnlineFilter::new(&self.model.config);
        self.prev = None;
        self.rng = rng(seed);
    }

    fn act(&mut self, obs: &[f64], _state: &[f64]) -> Result<Vec<f64>> {
        if let Some(a) = &self.prev {
            self.filter.update(self.model, a, obs, None)?;
        }
        let feats = self.filter.features();
        let a = if self.stochastic {
            let tape = Tape::new();
            let vars = self.policy.bind(&tape, false);
            let d = self.policy.dist(&tape, &vars, tape.constant(feats))?;
            let noise = tape.constant(Array::randn(&[1, self.policy.action_dim()], &mut self.rng));
            let s = d.sample(&tape, noise)?;
            let out = tape.value(s).data().to_vec();
            out
        } else {
            self.policy.mode_value(feats.data())?
        };
        self.prev = Some(a.clone());
        Ok(a)
    }
}

/// Episode returns of the policy acting through the model's filter.
pub fn deploy_policy(
    model: &SsmParams,
    policy: &PolicyParams,
    spec: &EnvSpec,
    task: &Task,
    episodes: usize,
    seed: u64,
    stochastic: bool,
) -> Result<Vec<f64>> {
    if spec.obs_dim() != model.config.obs_dim || spec.action_dim() != model.config.action_dim {
        return Err(invalid("environment does not match the world model"));
    }
    let mut agent = LatentAgent::new(model, policy, stochastic);
    returns(spec, task, &mut agent, episodes, seed)
}

/// `100 · (mean − random) / (expert − random)`.
pub fn normalized_return(returns: &[f64], expert: f64, random: f64) -> Result<f64> {
    let denom = expert - random;
    if !(denom.abs() > 1e-12) || !denom.is_finite() {
        return Err(invalid(format!("expert ({expert}) and random ({random}) references coincide")));
    }
    if returns.is_empty() {
        return Err(invalid("no returns to normalise"));
    }
    Ok(100.0 * (crate::control::mean(returns) - random) / denom)
}

/// `100 · mean / expert`, the normalisation without a random anchor.
pub fn raw_ratio(returns: &[f64], expert: f64) -> Result<f64> {
    if !(expert.abs() > 1e-12) {
        return Err(invalid("expert reference is zero"));
    }
    Ok(100.0 * crate::control::mean(returns) / expert)
}
