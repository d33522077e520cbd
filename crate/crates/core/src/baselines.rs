//! Comparison methods over stacked raw observations: BCO(0), behavioural
//! cloning on true actions, and IIDM, which forms an implicit inverse model
//! from an observation-space forward model.
//!
//! Indexing follows the datasets: observation row `t` holds `o_{t+1}` and
//! action row `t` holds `a_t`. The action `a_t` is chosen from the `k`
//! observations up to `o_t`, which are rows `t−k..t−1`; rows before the
//! start are zero, so `a_0` sees an all-zero stack.

use std::collections::VecDeque;

use aime_diffcore::nn::mlp_forward;
use aime_diffcore::params::{collect_grads, visit_child, visit_child_mut};
use aime_diffcore::{param_hash, Adam, AdamConfig, Array, GaussianVar, MlpParams, MlpVars, Module, Parameters, TanhGaussian, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::control::Controller;
use crate::datasets::{DemoDataset, EmbodimentDataset};
use crate::error::{invalid, Error, Result};
use crate::seeds::{stream_rng, LabRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Frame-stack depth.
    pub stack: usize,
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub lr: f64,
    /// Share of trajectories held out for checkpoint selection.
    pub val_fraction: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { stack: 5, hidden: 64, layers: 2, epochs: 30, steps_per_epoch: 100, batch: 64, lr: 1e-3, val_fraction: 0.3 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stack == 0 || self.batch == 0 || self.hidden == 0 {
            return Err(invalid("stack depth, batch and hidden width must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(invalid("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat_n(self.hidden, self.layers));
        s.push(output);
        s
    }
}

/// The `k` observations before action row `t`, oldest first, zero-padded.
pub fn history_stack(obs: &Array, t: usize, k: usize) -> Vec<f64> {
    let d = obs.cols();
    let mut out = vec![0.0; k * d];
    for slot in 0..k {
        // slot k−1 holds row t−1
        let back = k - slot;
        if t >= back {
            out[slot * d..(slot + 1) * d].copy_from_slice(obs.row_slice(t - back));
        }
    }
    out
}

/// Number of training trajectories out of `n` under a validation share:
/// at least one trajectory is held out when there are two or more.
pub fn train_count(n: usize, val_fraction: f64) -> usize {
    if n < 2 || val_fraction == 0.0 {
        return n;
    }
    let train = ((1.0 - val_fraction) * n as f64).ceil() as usize;
    train.clamp(1, n - 1)
}

/// Supervised pairs as row-aligned matrices.
#[derive(Clone, Debug)]
struct Pairs {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl Pairs {
    fn new() -> Self {
        Self { inputs: Vec::new(), targets: Vec::new() }
    }

    fn push(&mut self, input: Vec<f64>, target: Vec<f64>) {
        self.inputs.push(input);
        self.targets.push(target);
    }

    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn batch(&self, idx: &[usize]) -> (Array, Array) {
        let x = Array::from_rows(&idx.iter().map(|&i| self.inputs[i].clone()).collect::<Vec<_>>()).expect("uniform rows");
        let y = Array::from_rows(&idx.iter().map(|&i| self.targets[i].clone()).collect::<Vec<_>>()).expect("uniform rows");
        (x, y)
    }

    fn all(&self) -> (Array, Array) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum HeadKind {
    Gaussian,
    TanhGaussian,
}

fn nll_rows(tape: &Tape, kind: HeadKind, out: Var, target: Var, dim: usize) -> Result<Var> {
    let lp = match kind {
        HeadKind::Gaussian => GaussianVar::from_head(tape, out, dim)?.log_prob(tape, target)?,
        HeadKind::TanhGaussian => TanhGaussian::from_head(tape, out, dim)?.log_prob(tape, target)?,
    };
    Ok(tape.neg(lp))
}

fn mean_rows(tape: &Tape, rows: Var) -> Var {
    let n = tape.shape(rows)[0] as f64;
    tape.scale(tape.sum(rows), 1.0 / n)
}

/// Per-epoch supervised log. Epoch 0 is the initialisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
}

struct Fit {
    net: MlpParams,
    log: Vec<FitLog>,
    best_epoch: usize,
}

fn eval_nll(net: &MlpParams, kind: HeadKind, pairs: &Pairs, dim: usize) -> Result<f64> {
    let (x, y) = pairs.all();
    let tape = Tape::new();
    let vars = net.bind(&tape, false);
    let out = mlp_forward(&tape, &vars, tape.constant(x))?;
    let nll = nll_rows(&tape, kind, out, tape.constant(y), dim)?;
    Ok(tape.item(mean_rows(&tape, nll)))
}

fn sample_indices(n: usize, batch: usize, rng: &mut LabRng) -> Vec<usize> {
    use rand::Rng;
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Maximum-likelihood fit of a distribution head. With validation pairs the
/// parameters with the lowest validation loss, the initialisation
/// included, are returned; otherwise the final ones.
fn fit(sizes: &[usize], kind: HeadKind, train: &Pairs, val: Option<&Pairs>, cfg: &BaselineConfig, seed: u64, stream: u64) -> Result<Fit> {
    if train.len() == 0 {
        return Err(invalid("no training pairs"));
    }
    let dim = sizes[sizes.len() - 1] / 2;
    let mut net = MlpParams::new(sizes, &mut stream_rng(seed, "init", stream)).with_zero_head();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut sampling = stream_rng(seed, "sampling", stream);
    let val = val.filter(|v| v.len() > 0);
    let mut log = vec![FitLog {
        epoch: 0,
        train_nll: eval_nll(&net, kind, train, dim)?,
        val_nll: val.map(|v| eval_nll(&net, kind, v, dim)).transpose()?,
    }];
    let mut best = (net.clone(), log[0].val_nll.unwrap_or(f64::INFINITY), 0);
    for epoch in 1..=cfg.epochs {
        let mut acc = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let (x, y) = train.batch(&sample_indices(train.len(), cfg.batch, &mut sampling));
            let tape = Tape::new();
            let vars = net.bind(&tape, true);
            let out = mlp_forward(&tape, &vars, tape.constant(x))?;
            let loss = mean_rows(&tape, nll_rows(&tape, kind, out, tape.constant(y), dim)?);
            acc += tape.item(loss);
            let grads = tape.backward(loss);
            let g = collect_grads(&grads, &vars, &net);
            if g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "baseline gradient".into(), step: adam.steps() as usize + 1 });
            }
            adam.step(&mut net, &g);
        }
        let entry = FitLog {
            epoch,
            train_nll: acc / cfg.steps_per_epoch.max(1) as f64,
            val_nll: val.map(|v| eval_nll(&net, kind, v, dim)).transpose()?,
        };
        if let Some(v) = entry.val_nll {
            if v < best.1 {
                best = (net.clone(), v, epoch);
            }
        }
        log.push(entry);
    }
    let (net, best_epoch) = if val.is_some() { (best.0, best.2) } else { (net, cfg.epochs) };
    Ok(Fit { net, log, best_epoch })
}

/// Policy over the last `k` observations with a tanh-Gaussian head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedObsPolicy {
    pub stack: usize,
    pub obs_dim: usize,
    pub net: MlpParams,
}

impl StackedObsPolicy {
    pub fn action_dim(&self) -> usize {
        self.net.output_size() / 2
    }

    /// `tanh(mean)` for one stacked input.
    pub fn mode_value(&self, stack: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let out = mlp_forward(&tape, &vars, tape.constant(Array::row(stack)))?;
        let d = TanhGaussian::from_head(&tape, out, self.action_dim())?;
        let a = d.mode(&tape);
        let v = tape.value(a).data().to_vec();
        Ok(v)
    }
}

impl Parameters for StackedObsPolicy {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        visit_child("policy", &self.net, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        visit_child_mut("policy", &mut self.net, f);
    }
}

impl Module for StackedObsPolicy {
    type Vars = MlpVars;

    fn bind(&self, tape: &Tape, trainable: bool) -> MlpVars {
        self.net.bind(tape, trainable)
    }
}

/// Explicit inverse model `a_t ← (stack up to o_t, o_{t+1})` with a
/// Gaussian head; its mean, clipped to the action bounds, labels actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplicitIdm {
    pub stack: usize,
    pub obs_dim: usize,
    pub net: MlpParams,
    pub best_epoch: usize,
}

impl ExplicitIdm {
    pub fn action_dim(&self) -> usize {
        self.net.output_size() / 2
    }

    /// Clipped mean action for every step of a trajectory.
    pub fn label(&self, obs: &Array) -> Result<Array> {
        let rows: Vec<Vec<f64>> = (0..obs.rows())
            .map(|t| {
                let mut x = history_stack(obs, t, self.stack);
                x.extend_from_slice(obs.row_slice(t));
                x
            })
            .collect();
        let x = Array::from_rows(&rows)?;
        let out = self.net.forward_value(&x)?;
        Ok(out.slice_cols(0, self.action_dim()).map(|a| a.clamp(-1.0, 1.0)))
    }
}

impl Parameters for ExplicitIdm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        visit_child("idm", &self.net, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        visit_child_mut("idm", &mut self.net, f);
    }
}

/// One-step forward model `p(o_{t+1} | stack up to o_t, a_t)` with a
/// learned standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardModel {
    pub stack: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub net: MlpParams,
}

impl Parameters for ForwardModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array)) {
        visit_child("forward", &self.net, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        visit_child_mut("forward", &mut self.net, f);
    }
}

fn idm_pairs(trajs: &[crate::datasets::Trajectory], k: usize) -> Pairs {
    let mut p = Pairs::new();
    for tr in trajs {
        for t in 0..tr.len() {
            let mut x = history_stack(tr.observations(), t, k);
            x.extend_from_slice(tr.observations().row_slice(t));
            p.push(x, tr.actions().row_slice(t).to_vec());
        }
    }
    p
}

fn policy_pairs<'a>(seqs: impl Iterator<Item = (&'a Array, &'a Array)>, k: usize) -> Pairs {
    let mut p = Pairs::new();
    for (obs, actions) in seqs {
        for t in 0..obs.rows() {
            p.push(history_stack(obs, t, k), actions.row_slice(t).to_vec());
        }
    }
    p
}

fn forward_pairs(trajs: &[crate::datasets::Trajectory], k: usize) -> Pairs {
    let mut p = Pairs::new();
    for tr in trajs {
        for t in 0..tr.len() {
            let mut x = history_stack(tr.observations(), t, k);
            x.extend_from_slice(tr.actions().row_slice(t));
            p.push(x, tr.observations().row_slice(t).to_vec());
        }
    }
    p
}

/// Fit the explicit inverse model on a 70/30 trajectory split and keep the
/// best validation checkpoint.
pub fn train_idm_explicit(ds: &EmbodimentDataset, cfg: &BaselineConfig, seed: u64) -> Result<(ExplicitIdm, Vec<FitLog>)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(invalid("inverse-model training needs trajectories"));
    }
    let n_train = train_count(ds.len(), cfg.val_fraction);
    let (train, val) = ds.trajectories().split_at(n_train);
    let (tp, vp) = (idm_pairs(train, cfg.stack), idm_pairs(val, cfg.stack));
    let sizes = cfg.sizes(cfg.stack * ds.obs_dim() + ds.obs_dim(), 2 * ds.action_dim());
    let f = fit(&sizes, HeadKind::Gaussian, &tp, Some(&vp), cfg, seed, 10)?;
    Ok((ExplicitIdm { stack: cfg.stack, obs_dim: ds.obs_dim(), net: f.net, best_epoch: f.best_epoch }, f.log))
}

/// Behavioural cloning on labelled observation sequences by tanh-Gaussian
/// likelihood, with the same trajectory split and checkpoint selection.
pub fn bc_from_labels(obs: &[&Array], labels: &[Array], cfg: &BaselineConfig, seed: u64) -> Result<(StackedObsPolicy, Vec<FitLog>)> {
    cfg.validate()?;
    if obs.is_empty() || obs.len() != labels.len() {
        return Err(invalid("need one label sequence per observation sequence"));
    }
    let obs_dim = obs[0].cols();
    let action_dim = labels[0].cols();
    for (o, l) in obs.iter().zip(labels) {
        if o.rows() != l.rows() || o.cols() != obs_dim || l.cols() != action_dim {
            return Err(invalid("labels are not aligned with observations"));
        }
    }
    let n_train = train_count(obs.len(), cfg.val_fraction);
    let tp = policy_pairs(obs[..n_train].iter().copied().zip(&labels[..n_train]), cfg.stack);
    let vp = policy_pairs(obs[n_train..].iter().copied().zip(&labels[n_train..]), cfg.stack);
    let sizes = cfg.sizes(cfg.stack * obs_dim, 2 * action_dim);
    let f = fit(&sizes, HeadKind::TanhGaussian, &tp, Some(&vp), cfg, seed, 11)?;
    Ok((StackedObsPolicy { stack: cfg.stack, obs_dim, net: f.net }, f.log))
}

/// Cloning with the true actions of the demonstrations.
pub fn bc_oracle(demos_with_actions: &EmbodimentDataset, cfg: &BaselineConfig, seed: u64) -> Result<(StackedObsPolicy, Vec<FitLog>)> {
    let obs: Vec<&Array> = demos_with_actions.trajectories().iter().map(|t| t.observations()).collect();
    let labels: Vec<Array> = demos_with_actions.trajectories().iter().map(|t| t.actions().clone()).collect();
    bc_from_labels(&obs, &labels, cfg, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcoLog {
    pub idm: Vec<FitLog>,
    pub idm_best_epoch: usize,
    pub bc: Vec<FitLog>,
}

/// BCO(0): label the demonstrations with an inverse model trained on the
/// embodiment data, then clone the labels.
pub fn bco(emb: &EmbodimentDataset, demos: &DemoDataset, cfg: &BaselineConfig, seed: u64) -> Result<(StackedObsPolicy, BcoLog)> {
    if demos.obs_dim() != emb.obs_dim() {
        return Err(invalid("demonstrations and embodiment data differ in observation size"));
    }
    let (idm, idm_log) = train_idm_explicit(emb, cfg, seed)?;
    let obs: Vec<&Array> = demos.trajectories().iter().map(|d| d.observations()).collect();
    let labels = obs.iter().map(|o| idm.label(o)).collect::<Result<Vec<_>>>()?;
    let (policy, bc_log) = bc_from_labels(&obs, &labels, cfg, seed)?;
    Ok((policy, BcoLog { idm: idm_log, idm_best_epoch: idm.best_epoch, bc: bc_log }))
}

/// Fit the observation-space forward model with checkpoint selection.
pub fn train_forward_model(emb: &EmbodimentDataset, cfg: &BaselineConfig, seed: u64) -> Result<(ForwardModel, Vec<FitLog>)> {
    cfg.validate()?;
    let n_train = train_count(emb.len(), cfg.val_fraction);
    let (train, val) = emb.trajectories().split_at(n_train);
    let (tp, vp) = (forward_pairs(train, cfg.stack), forward_pairs(val, cfg.stack));
    let sizes = cfg.sizes(cfg.stack * emb.obs_dim() + emb.action_dim(), 2 * emb.obs_dim());
    let f = fit(&sizes, HeadKind::Gaussian, &tp, Some(&vp), cfg, seed, 12)?;
    Ok((ForwardModel { stack: cfg.stack, obs_dim: emb.obs_dim(), action_dim: emb.action_dim(), net: f.net }, f.log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IidmLog {
    pub forward: Vec<FitLog>,
    /// Per-epoch mean next-observation log-likelihood under policy actions.
    pub policy: Vec<f64>,
}

/// Train a stacked-observation policy through a frozen forward model by
/// maximising the likelihood of each demonstrated next observation under
/// reparameterised policy actions.
pub fn train_policy_through_forward(
    forward: &ForwardModel,
    demos: &DemoDataset,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<(StackedObsPolicy, Vec<f64>)> {
    cfg.validate()?;
    if demos.obs_dim() != forward.obs_dim || cfg.stack != forward.stack {
        return Err(invalid("demonstrations do not match the forward model"));
    }
    let (k, od, ad) = (forward.stack, forward.obs_dim, forward.action_dim);
    let mut pairs = Pairs::new();
    for d in demos.trajectories() {
        for t in 0..d.len() {
            pairs.push(history_stack(d.observations(), t, k), d.observations().row_slice(t).to_vec());
        }
    }
    if pairs.len() == 0 {
        return Err(invalid("no demonstration steps"));
    }
    let before = param_hash(forward);
    let mut policy = StackedObsPolicy {
        stack: k,
        obs_dim: od,
        net: MlpParams::new(&cfg.sizes(k * od, 2 * ad), &mut stream_rng(seed, "init", 13)).with_zero_head(),
    };
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut sampling = stream_rng(seed, "sampling", 13);
    let mut noise = stream_rng(seed, "noise", 13);
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut acc = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let (x, y) = pairs.batch(&sample_indices(pairs.len(), cfg.batch, &mut sampling));
            let eps = Array::randn(&[cfg.batch, ad], &mut noise);
            let tape = Tape::new();
            let pvars = policy.bind(&tape, true);
            let fvars = forward.net.bind(&tape, false);
            let xs = tape.constant(x);
            let pi = TanhGaussian::from_head(&tape, mlp_forward(&tape, &pvars, xs)?, ad)?;
            let a = pi.sample(&tape, tape.constant(eps))?;
            let pred = mlp_forward(&tape, &fvars, tape.concat_cols(&[xs, a]))?;
            let lp = GaussianVar::from_head(&tape, pred, od)?.log_prob(&tape, tape.constant(y))?;
            let objective = mean_rows(&tape, lp);
            acc += tape.item(objective);
            let grads = tape.backward(tape.neg(objective));
            let g = collect_grads(&grads, &pvars, &policy);
            if g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "IIDM policy gradient".into(), step: adam.steps() as usize + 1 });
            }
            adam.step(&mut policy, &g);
        }
        log.push(acc / cfg.steps_per_epoch.max(1) as f64);
    }
    if param_hash(forward) != before {
        return Err(Error::FrozenViolation("forward model changed during policy training".into()));
    }
    Ok((policy, log))
}

/// IIDM: forward model on observations, then a policy trained through it.
pub fn iidm(emb: &EmbodimentDataset, demos: &DemoDataset, cfg: &BaselineConfig, seed: u64) -> Result<(StackedObsPolicy, IidmLog)> {
    let (forward, flog) = train_forward_model(emb, cfg, seed)?;
    let (policy, plog) = train_policy_through_forward(&forward, demos, cfg, seed)?;
    Ok((policy, IidmLog { forward: flog, policy: plog }))
}

/// Online controller for a stacked-observation policy. The observation at
/// reset is not used, so the first stack is all zeros as in training.
pub struct StackedAgent<'a> {
    policy: &'a StackedObsPolicy,
    history: VecDeque<Vec<f64>>,
    started: bool,
}

impl<'a> StackedAgent<'a> {
    pub fn new(policy: &'a StackedObsPolicy) -> Self {
        Self { policy, history: VecDeque::new(), started: false }
    }

    fn stack(&self) -> Vec<f64> {
        let (k, d) = (self.policy.stack, self.policy.obs_dim);
        let mut out = vec![0.0; k * d];
        let n = self.history.len();
        for (i, o) in self.history.iter().enumerate() {
            let slot = k - n + i;
            out[slot * d..(slot + 1) * d].copy_from_slice(o);
        }
        out
    }
}

impl Controller for StackedAgent<'_> {
    fn reset(&mut self, _seed: u64) {
        self.history.clear();
        self.started = false;
    }

    fn act(&mut self, obs: &[f64], _state: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.policy.obs_dim {
            return Err(invalid(format!("observation has {} entries, expected {}", obs.len(), self.policy.obs_dim)));
        }
        if self.started {
            self.history.push_back(obs.to_vec());
            if self.history.len() > self.policy.stack {
                self.history.pop_front();
            }
        }
        self.started = true;
        self.policy.mode_value(&self.stack())
    }
}
