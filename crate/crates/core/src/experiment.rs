//! Experiment plumbing: configuration and hashing, a cache of datasets and
//! trained world models shared between runs, the end-to-end pipeline and
//! the preset study designs (transfer matrix, demonstration sweep,
//! ablations).

use std::any::Any;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use aime_diffcore::param_hash;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, BaselineConfig, FitLog, StackedAgent, StackedObsPolicy};
use crate::control::{mean, returns, std_dev, Expert, ReplayLike, Uniform};
use crate::datasets::{collect, strip_actions, DemoDataset, EmbodimentDataset};
use crate::envs::{EnvSpec, ObsMode, Task};
use crate::error::{invalid, Error, Result};
use crate::imitation::{
    aime_idm_phase2, aime_phase2, deploy_policy, normalized_return, plan_labels, raw_ratio, train_idm_head,
    IdmConfig, IdmLog, IdmParams, ImitationConfig, ImitationLog, Variant,
};
use crate::seeds::derive_seed;
use crate::worldmodel::{train_world_model, DecoderVariance, EpochLog, ObjectiveMask, SsmConfig, SsmParams, TrainConfig};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Evidence maximisation through the world model; the imitation
    /// config selects the variant and objective mask.
    Aime,
    Bco,
    BcOracle,
    Iidm,
}

impl Method {
    pub fn id(&self) -> &'static str {
        match self {
            Method::Aime => "aime",
            Method::Bco => "bco",
            Method::BcOracle => "bc-oracle",
            Method::Iidm => "iidm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aime" => Ok(Method::Aime),
            "bco" => Ok(Method::Bco),
            "bc-oracle" => Ok(Method::BcOracle),
            "iidm" => Ok(Method::Iidm),
            other => Err(invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Everything that determines an experiment's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: EnvSpec,
    /// Tasks whose replay-like data are concatenated into the embodiment
    /// dataset; several tasks give a mix dataset.
    pub embodiment_tasks: Vec<Task>,
    /// Episodes collected per embodiment task.
    pub embodiment_episodes: usize,
    pub demo_task: Task,
    pub demo_count: usize,
    /// Action noise of the demonstrating expert.
    pub expert_noise: f64,
    /// Seed for data collection and evaluation episodes.
    pub data_seed: u64,
    pub eval_episodes: usize,
    /// Episodes used to measure the expert and random references.
    pub reference_episodes: usize,
    pub model: SsmConfig,
    pub phase1: TrainConfig,
    pub imitation: ImitationConfig,
    pub baseline: BaselineConfig,
    pub method: Method,
    /// Training seeds; each one is a full independent run.
    pub seeds: Vec<u64>,
}

// Point-mass episodes last 50 steps. Chunks span whole episodes so the
// filter is trained over the horizon it is deployed on.
impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "reach-east".into(),
            env: EnvSpec::point_mass(ObsMode::Lpomdp),
            embodiment_tasks: vec![Task::ReachEast],
            embodiment_episodes: 500,
            demo_task: Task::ReachEast,
            demo_count: 20,
            expert_noise: 0.0,
            data_seed: 0,
            eval_episodes: 20,
            reference_episodes: 50,
            model: SsmConfig { obs_dim: 2, action_dim: 2, decoder_variance: DecoderVariance::Learned, ..SsmConfig::default() },
            phase1: TrainConfig { chunk_len: 50, ..TrainConfig::default() },
            imitation: ImitationConfig {
                chunk_len: 50,
                idm: IdmConfig { chunk_len: 50, ..IdmConfig::default() },
                ..ImitationConfig::default()
            },
            baseline: BaselineConfig::default(),
            method: Method::Aime,
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    /// Copy the environment's sizes into the model config and check the
    /// whole configuration.
    pub fn resolved(mut self) -> Result<Self> {
        self.env.validate()?;
        self.model.obs_dim = self.env.obs_dim();
        self.model.action_dim = self.env.action_dim();
        self.model.validate()?;
        self.imitation.validate()?;
        self.baseline.validate()?;
        if self.embodiment_tasks.is_empty() {
            return Err(invalid("at least one embodiment task is required"));
        }
        for t in self.embodiment_tasks.iter().chain([&self.demo_task]) {
            t.check_compatible(&self.env)?;
        }
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.demo_count == 0 || self.eval_episodes == 0 || self.reference_episodes == 0 {
            return Err(invalid("demo, evaluation and reference counts must be positive"));
        }
        if self.embodiment_episodes == 0 && self.needs_embodiment() {
            return Err(invalid("this method needs embodiment episodes"));
        }
        if !(self.expert_noise >= 0.0) {
            return Err(invalid("expert noise must be non-negative"));
        }
        Ok(self)
    }

    fn needs_embodiment(&self) -> bool {
        self.method != Method::BcOracle
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Short name of the method and, for AIME, its variant and mask.
    pub fn label(&self) -> String {
        match (self.method, self.imitation.variant, self.imitation.mask) {
            (Method::Aime, Variant::Aime, ObjectiveMask::Full) => "aime".into(),
            (Method::Aime, Variant::Aime, ObjectiveMask::RecOnly) => "rec-only".into(),
            (Method::Aime, Variant::Aime, ObjectiveMask::KlOnly) => "kl-only".into(),
            (Method::Aime, v, ObjectiveMask::Full) => v.id().into(),
            (Method::Aime, v, m) => format!("{}-{}", v.id(), mask_id(m)),
            (m, _, _) => m.id().into(),
        }
    }

    /// Apply `key=value` overrides to scalar fields addressed by dotted
    /// paths, e.g. `phase1.epochs=5`. Values parse as JSON, falling back to
    /// a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| invalid(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| invalid(format!("unknown config key {key:?}")))?;
            }
            if slot.is_object() {
                return Err(invalid(format!("{key:?} is not a scalar field")));
            }
            *slot = value;
        }
        serde_json::from_value(v).map_err(|e| invalid(format!("override does not fit the schema: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }
}

fn mask_id(m: ObjectiveMask) -> &'static str {
    match m {
        ObjectiveMask::Full => "full",
        ObjectiveMask::RecOnly => "rec-only",
        ObjectiveMask::KlOnly => "kl-only",
    }
}

fn hash_json<T: Serialize + ?Sized>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("configs serialise");
    hex::encode(Sha256::digest(&bytes))
}

type Slot = Arc<Mutex<Option<Arc<dyn Any + Send + Sync>>>>;

/// Memo table for datasets, references and trained models, keyed by the
/// hash of everything that determines them. Safe to share across threads;
/// each entry is computed once.
#[derive(Default)]
pub struct Lab {
    slots: Mutex<HashMap<String, Slot>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub expert: f64,
    pub random: f64,
}

impl Lab {
    pub fn new() -> Self {
        Self::default()
    }

    fn memo<T: Any + Send + Sync>(&self, key: String, f: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
        let slot = self.slots.lock().expect("lab lock").entry(key).or_default().clone();
        let mut guard = slot.lock().expect("slot lock");
        if let Some(v) = guard.as_ref() {
            return Ok(v.clone().downcast::<T>().expect("one type per key"));
        }
        let v = Arc::new(f()?);
        *guard = Some(v.clone());
        Ok(v)
    }

    fn task_data(&self, env: &EnvSpec, task: &Task, episodes: usize, data_seed: u64) -> Result<Arc<EmbodimentDataset>> {
        let key = format!("emb:{}", hash_json(&(env, task, episodes, data_seed)));
        self.memo(key, || {
            let seed = derive_seed(data_seed, &format!("embodiment/{}", task.id()), 0);
            collect(env, task, &mut ReplayLike::new(env, task, episodes), episodes, seed, &format!("replay/{}", task.id()))
        })
    }

    /// Replay-like data of every embodiment task, concatenated in order.
    pub fn embodiment(&self, cfg: &ExperimentConfig) -> Result<Arc<EmbodimentDataset>> {
        let key = format!("mix:{}", hash_json(&(&cfg.env, &cfg.embodiment_tasks, cfg.embodiment_episodes, cfg.data_seed)));
        self.memo(key, || {
            let parts = cfg
                .embodiment_tasks
                .iter()
                .map(|t| self.task_data(&cfg.env, t, cfg.embodiment_episodes, cfg.data_seed))
                .collect::<Result<Vec<_>>>()?;
            EmbodimentDataset::concat(&parts.iter().map(|p| p.as_ref()).collect::<Vec<_>>())
        })
    }

    /// Expert demonstrations with their actions. Smaller counts are
    /// prefixes of larger ones.
    pub fn demonstrations(&self, cfg: &ExperimentConfig) -> Result<Arc<EmbodimentDataset>> {
        let key = format!("demo:{}", hash_json(&(&cfg.env, &cfg.demo_task, cfg.demo_count, cfg.expert_noise, cfg.data_seed)));
        self.memo(key, || {
            let seed = derive_seed(cfg.data_seed, &format!("demo/{}", cfg.demo_task.id()), 0);
            let mut expert = Expert::new(&cfg.env, &cfg.demo_task, cfg.expert_noise);
            collect(&cfg.env, &cfg.demo_task, &mut expert, cfg.demo_count, seed, "expert")
        })
    }

    pub fn references(&self, cfg: &ExperimentConfig) -> Result<Arc<References>> {
        let key = format!(
            "ref:{}",
            hash_json(&(&cfg.env, &cfg.demo_task, cfg.expert_noise, cfg.reference_episodes, cfg.data_seed))
        );
        self.memo(key, || {
            let seed = derive_seed(cfg.data_seed, "reference", 0);
            let mut expert = Expert::new(&cfg.env, &cfg.demo_task, cfg.expert_noise);
            let expert = mean(&returns(&cfg.env, &cfg.demo_task, &mut expert, cfg.reference_episodes, seed)?);
            let mut uniform = Uniform::new(cfg.env.action_dim());
            let random = mean(&returns(&cfg.env, &cfg.demo_task, &mut uniform, cfg.reference_episodes, seed)?);
            Ok(References { expert, random })
        })
    }

    fn world_model_key(cfg: &ExperimentConfig, seed: u64) -> String {
        hash_json(&(&cfg.env, &cfg.embodiment_tasks, cfg.embodiment_episodes, cfg.data_seed, &cfg.model, &cfg.phase1, seed))
    }

    pub fn world_model(&self, cfg: &ExperimentConfig, seed: u64) -> Result<Arc<(SsmParams, Vec<EpochLog>)>> {
        self.memo(format!("wm:{}", Self::world_model_key(cfg, seed)), || {
            let emb = self.embodiment(cfg)?;
            train_world_model(&emb, &cfg.model, &cfg.phase1, seed)
        })
    }

    pub fn idm_head(&self, cfg: &ExperimentConfig, seed: u64) -> Result<Arc<(IdmParams, Vec<IdmLog>)>> {
        let key = format!(
            "idm:{}",
            hash_json(&(
                Self::world_model_key(cfg, seed),
                &cfg.imitation.idm,
                cfg.imitation.policy_hidden,
                cfg.imitation.policy_layers,
                seed
            ))
        );
        self.memo(key, || {
            let wm = self.world_model(cfg, seed)?;
            let emb = self.embodiment(cfg)?;
            train_idm_head(&wm.0, &emb, &cfg.imitation, seed)
        })
    }
}

/// A table of per-epoch values. Missing entries are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Curve {
    fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<Option<f64>>) {
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.map(|x| format!("{x:?}")).unwrap_or_default()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn world_model_curve(log: &[EpochLog]) -> Curve {
    let mut c = Curve::new(&["epoch", "j", "j_rec", "j_kl", "grad_norm"]);
    for l in log {
        c.push(vec![Some(l.epoch as f64), Some(l.j), Some(l.j_rec), Some(l.j_kl), Some(l.grad_norm)]);
    }
    c
}

fn imitation_curve(log: &[ImitationLog]) -> Curve {
    let mut c = Curve::new(&["epoch", "j", "j_rec", "j_kl", "idm_kl", "action_mse"]);
    for l in log {
        c.push(vec![Some(l.epoch as f64), Some(l.j), Some(l.j_rec), Some(l.j_kl), l.idm_kl, l.action_mse]);
    }
    c
}

fn fit_curve(log: &[FitLog]) -> Curve {
    let mut c = Curve::new(&["epoch", "train_nll", "val_nll"]);
    for l in log {
        c.push(vec![Some(l.epoch as f64), Some(l.train_nll), l.val_nll]);
    }
    c
}

fn series_curve(name: &str, values: impl IntoIterator<Item = f64>) -> Curve {
    let mut c = Curve::new(&["epoch", name]);
    for (i, v) in values.into_iter().enumerate() {
        c.push(vec![Some((i + 1) as f64), Some(v)]);
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub normalized_return: f64,
    pub raw_ratio: f64,
    /// Mean squared error of inferred against hidden demonstration actions.
    pub action_mse: Option<f64>,
    pub world_model_hash: Option<String>,
    /// World-model hash unchanged by phase 2.
    pub frozen_ok: Option<bool>,
    pub curves: BTreeMap<String, Curve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Status {
    Complete,
    Failed { stage: String, seed: Option<u64>, code: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub name: String,
    pub version: String,
    pub config_hash: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub references: Option<References>,
    pub runs: Vec<SeedReport>,
    pub normalized_mean: Option<f64>,
    pub normalized_std: Option<f64>,
    pub status: Status,
}

impl PipelineReport {
    pub fn is_complete(&self) -> bool {
        self.status == Status::Complete
    }

    /// Write `summary.json` and one CSV per curve and seed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("summary.json"), self)?;
        for run in &self.runs {
            for (name, curve) in &run.curves {
                curve.write_csv(&dir.join(format!("{name}_seed{}.csv", run.seed)))?;
            }
        }
        Ok(())
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

struct StageError {
    stage: &'static str,
    err: Error,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|err| StageError { stage, err })
    }
}

fn stacked_returns(cfg: &ExperimentConfig, policy: &StackedObsPolicy) -> Result<Vec<f64>> {
    let mut agent = StackedAgent::new(policy);
    returns(&cfg.env, &cfg.demo_task, &mut agent, cfg.eval_episodes, eval_seed(cfg))
}

fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.data_seed, "eval", 0)
}

struct Trained {
    returns: Vec<f64>,
    action_mse: Option<f64>,
    world_model_hash: Option<String>,
    frozen_ok: Option<bool>,
    curves: BTreeMap<String, Curve>,
}

fn run_seed(cfg: &ExperimentConfig, lab: &Lab, seed: u64) -> std::result::Result<Trained, StageError> {
    let truth = lab.demonstrations(cfg).stage("collect")?;
    let demos: DemoDataset = strip_actions(&truth);
    let mut curves = BTreeMap::new();
    match cfg.method {
        Method::Aime => {
            let wm = lab.world_model(cfg, seed).stage("phase1")?;
            let model = &wm.0;
            curves.insert("world_model".into(), world_model_curve(&wm.1));
            let before = param_hash(model);
            let (returns, action_mse) = match cfg.imitation.variant {
                Variant::Aime | Variant::AimeIdm => {
                    let (policy, log) = if cfg.imitation.variant == Variant::Aime {
                        aime_phase2(model, &demos, &cfg.imitation, seed, Some(&truth)).stage("phase2")?
                    } else {
                        let idm = lab.idm_head(cfg, seed).stage("idm")?;
                        curves.insert("idm_head".into(), series_curve("log_likelihood", idm.1.iter().map(|l| l.log_likelihood)));
                        aime_idm_phase2(model, &idm.0, &demos, &cfg.imitation, seed, Some(&truth)).stage("phase2")?
                    };
                    curves.insert("imitation".into(), imitation_curve(&log));
                    let mse = log.last().and_then(|l| l.action_mse);
                    let r = deploy_policy(model, &policy, &cfg.env, &cfg.demo_task, cfg.eval_episodes, eval_seed(cfg), cfg.imitation.stochastic_eval)
                        .stage("evaluate")?;
                    (r, mse)
                }
                Variant::Plan => {
                    let plans = plan_labels(model, &demos, &cfg.imitation.plan, seed).stage("phase2")?;
                    let mut c = Curve::new(&["sequence", "j_init", "j_best", "best_iteration"]);
                    let (mut se, mut n) = (0.0, 0usize);
                    for (i, (p, t)) in plans.iter().zip(truth.trajectories()).enumerate() {
                        c.push(vec![Some(i as f64), Some(p.j_init), Some(p.j_best), Some(p.best_iteration as f64)]);
                        se += p.actions.data().iter().zip(t.actions().data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                        n += p.actions.len();
                    }
                    curves.insert("plan".into(), c);
                    let obs: Vec<_> = demos.trajectories().iter().map(|d| d.observations()).collect();
                    let labels: Vec<_> = plans.into_iter().map(|p| p.actions).collect();
                    let (policy, log) = baselines::bc_from_labels(&obs, &labels, &cfg.baseline, seed).stage("phase2")?;
                    curves.insert("bc".into(), fit_curve(&log));
                    (stacked_returns(cfg, &policy).stage("evaluate")?, Some(se / n.max(1) as f64))
                }
            };
            let after = param_hash(model);
            if after != before {
                return Err(StageError { stage: "phase2", err: Error::FrozenViolation("pipeline phase 2".into()) });
            }
            Ok(Trained { returns, action_mse, world_model_hash: Some(before), frozen_ok: Some(true), curves })
        }
        Method::Bco => {
            let emb = lab.embodiment(cfg).stage("collect")?;
            let (policy, log) = baselines::bco(&emb, &demos, &cfg.baseline, seed).stage("train")?;
            curves.insert("bco_idm".into(), fit_curve(&log.idm));
            curves.insert("bc".into(), fit_curve(&log.bc));
            let r = stacked_returns(cfg, &policy).stage("evaluate")?;
            Ok(Trained { returns: r, action_mse: None, world_model_hash: None, frozen_ok: None, curves })
        }
        Method::BcOracle => {
            let (policy, log) = baselines::bc_oracle(&truth, &cfg.baseline, seed).stage("train")?;
            curves.insert("bc".into(), fit_curve(&log));
            let r = stacked_returns(cfg, &policy).stage("evaluate")?;
            Ok(Trained { returns: r, action_mse: None, world_model_hash: None, frozen_ok: None, curves })
        }
        Method::Iidm => {
            let emb = lab.embodiment(cfg).stage("collect")?;
            let (policy, log) = baselines::iidm(&emb, &demos, &cfg.baseline, seed).stage("train")?;
            curves.insert("forward".into(), fit_curve(&log.forward));
            curves.insert("iidm_policy".into(), series_curve("log_likelihood", log.policy));
            let r = stacked_returns(cfg, &policy).stage("evaluate")?;
            Ok(Trained { returns: r, action_mse: None, world_model_hash: None, frozen_ok: None, curves })
        }
    }
}

/// Collect, train and evaluate one configuration for every seed. Invalid
/// configurations are errors; a failing stage yields a partial report
/// whose status names the stage.
pub fn run_pipeline(cfg: &ExperimentConfig, lab: &Lab) -> Result<PipelineReport> {
    let cfg = cfg.clone().resolved()?;
    let mut report = PipelineReport {
        name: cfg.name.clone(),
        version: ARTIFACT_VERSION.into(),
        config_hash: cfg.hash(),
        method: cfg.label(),
        seeds: cfg.seeds.clone(),
        references: None,
        runs: Vec::new(),
        normalized_mean: None,
        normalized_std: None,
        status: Status::Complete,
    };
    let fail = |report: &mut PipelineReport, stage: &str, seed: Option<u64>, err: Error| {
        report.status = Status::Failed { stage: stage.into(), seed, code: err.code().into(), message: err.to_string() };
    };
    let refs = match lab.references(&cfg) {
        Ok(r) => *r,
        Err(e) => {
            fail(&mut report, "references", None, e);
            return Ok(report);
        }
    };
    report.references = Some(refs);
    for &seed in &cfg.seeds {
        let trained = match run_seed(&cfg, lab, seed) {
            Ok(t) => t,
            Err(StageError { stage, err }) => {
                fail(&mut report, stage, Some(seed), err);
                return Ok(report);
            }
        };
        let scores = normalized_return(&trained.returns, refs.expert, refs.random)
            .and_then(|n| Ok((n, raw_ratio(&trained.returns, refs.expert)?)));
        let (normalized, ratio) = match scores {
            Ok(s) => s,
            Err(e) => {
                fail(&mut report, "evaluate", Some(seed), e);
                return Ok(report);
            }
        };
        report.runs.push(SeedReport {
            seed,
            mean_return: mean(&trained.returns),
            returns: trained.returns,
            normalized_return: normalized,
            raw_ratio: ratio,
            action_mse: trained.action_mse,
            world_model_hash: trained.world_model_hash,
            frozen_ok: trained.frozen_ok,
            curves: trained.curves,
        });
    }
    let scores: Vec<f64> = report.runs.iter().map(|r| r.normalized_return).collect();
    report.normalized_mean = Some(mean(&scores));
    report.normalized_std = Some(std_dev(&scores));
    Ok(report)
}

/// Run independent jobs on up to `jobs` threads; results keep input order.
pub fn run_parallel<T: Send>(jobs: usize, tasks: Vec<Box<dyn FnOnce() -> T + Send + '_>>) -> Vec<T> {
    let n = tasks.len();
    let workers = jobs.clamp(1, n.max(1));
    if workers == 1 {
        return tasks.into_iter().map(|t| t()).collect();
    }
    let queue: Vec<Mutex<Option<Box<dyn FnOnce() -> T + Send + '_>>>> = tasks.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let task = queue[i].lock().expect("queue").take().expect("each task runs once");
                *results[i].lock().expect("result") = Some(task());
            });
        }
    });
    results.into_iter().map(|r| r.into_inner().expect("result").expect("every task ran")).collect()
}

fn run_many(cfgs: &[ExperimentConfig], lab: &Lab, jobs: usize) -> Result<Vec<PipelineReport>> {
    let tasks: Vec<Box<dyn FnOnce() -> Result<PipelineReport> + Send + '_>> =
        cfgs.iter().map(|c| Box::new(move || run_pipeline(c, lab)) as Box<dyn FnOnce() -> _ + Send + '_>).collect();
    run_parallel(jobs, tasks).into_iter().collect()
}

/// Mean normalized score of a completed report.
fn score(r: &PipelineReport) -> Option<f64> {
    if r.is_complete() {
        r.normalized_mean
    } else {
        None
    }
}

fn mean_of(xs: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.into_iter().flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub version: String,
    pub config_hash: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Mean normalized return per cell; `None` for failed cells.
    pub cells: Vec<Vec<Option<f64>>>,
    pub row_means: Vec<Option<f64>>,
    pub col_means: Vec<Option<f64>>,
    pub cell_reports: Vec<Vec<PipelineReport>>,
}

impl MatrixReport {
    pub fn is_complete(&self) -> bool {
        self.cell_reports.iter().flatten().all(PipelineReport::is_complete)
    }
}

/// Label of an embodiment dataset: its tasks joined by `+`.
pub fn source_label(tasks: &[Task]) -> String {
    tasks.iter().map(Task::id).collect::<Vec<_>>().join("+")
}

/// Every (embodiment dataset, demonstration task) pair with row and column
/// averages of the cell scores.
pub fn run_transfer_matrix(base: &ExperimentConfig, rows: &[Vec<Task>], cols: &[Task], lab: &Lab, jobs: usize) -> Result<MatrixReport> {
    if rows.is_empty() || cols.is_empty() {
        return Err(invalid("the transfer matrix needs at least one row and one column"));
    }
    let mut cfgs = Vec::new();
    for r in rows {
        for c in cols {
            let mut cfg = base.clone();
            cfg.embodiment_tasks = r.clone();
            cfg.demo_task = c.clone();
            cfg.name = format!("{}/{}->{}", base.name, source_label(r), c.id());
            cfgs.push(cfg.resolved()?);
        }
    }
    let mut reports = run_many(&cfgs, lab, jobs)?.into_iter();
    let cell_reports: Vec<Vec<PipelineReport>> = rows.iter().map(|_| reports.by_ref().take(cols.len()).collect()).collect();
    let cells: Vec<Vec<Option<f64>>> = cell_reports.iter().map(|row| row.iter().map(score).collect()).collect();
    let row_means = cells.iter().map(|row| mean_of(row.iter().copied())).collect();
    let col_means = (0..cols.len()).map(|j| mean_of(cells.iter().map(|row| row[j]))).collect();
    Ok(MatrixReport {
        version: ARTIFACT_VERSION.into(),
        config_hash: base.hash(),
        method: base.label(),
        seeds: base.seeds.clone(),
        row_labels: rows.iter().map(|r| source_label(r)).collect(),
        col_labels: cols.iter().map(|c| c.id().to_string()).collect(),
        cells,
        row_means,
        col_means,
        cell_reports,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub count: usize,
    pub method: String,
    pub seed: u64,
    pub normalized_return: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub count: usize,
    pub method: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub status: Status,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub counts: Vec<usize>,
    pub methods: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn mean(&self, count: usize, method: &str) -> Option<f64> {
        self.cells.iter().find(|c| c.count == count && c.method == method).and_then(|c| c.mean)
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|c| c.status == Status::Complete)
    }
}

/// Normalized return per demonstration count, method and seed.
pub fn run_demo_sweep(base: &ExperimentConfig, counts: &[usize], methods: &[Method], lab: &Lab, jobs: usize) -> Result<SweepReport> {
    if counts.is_empty() || methods.is_empty() {
        return Err(invalid("the sweep needs counts and methods"));
    }
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("demonstration counts must be strictly ascending"));
    }
    let mut cfgs = Vec::new();
    for &count in counts {
        for &m in methods {
            let mut cfg = base.clone();
            cfg.demo_count = count;
            cfg.method = m;
            cfg.name = format!("{}/{}@{count}", base.name, m.id());
            cfgs.push(cfg.resolved()?);
        }
    }
    let reports = run_many(&cfgs, lab, jobs)?;
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for (cfg, rep) in cfgs.iter().zip(&reports) {
        for &seed in &cfg.seeds {
            let n = rep.runs.iter().find(|r| r.seed == seed).map(|r| r.normalized_return);
            rows.push(SweepRow { count: cfg.demo_count, method: rep.method.clone(), seed, normalized_return: n });
        }
        cells.push(SweepCell {
            count: cfg.demo_count,
            method: rep.method.clone(),
            mean: score(rep),
            std: rep.is_complete().then_some(rep.normalized_std).flatten(),
            status: rep.status.clone(),
        });
    }
    Ok(SweepReport {
        version: ARTIFACT_VERSION.into(),
        config_hash: base.hash(),
        seeds: base.seeds.clone(),
        counts: counts.to_vec(),
        methods: reports.iter().take(methods.len()).map(|r| r.method.clone()).collect(),
        rows,
        cells,
    })
}

/// The six compared variants, in report order.
pub fn ablation_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let with = |method: Method, variant: Variant, mask: ObjectiveMask| {
        let mut c = base.clone();
        c.method = method;
        c.imitation.variant = variant;
        c.imitation.mask = mask;
        c.name = format!("{}/{}", base.name, c.label());
        c
    };
    vec![
        with(Method::Aime, Variant::Aime, ObjectiveMask::Full),
        with(Method::Aime, Variant::Aime, ObjectiveMask::RecOnly),
        with(Method::Aime, Variant::Aime, ObjectiveMask::KlOnly),
        with(Method::Aime, Variant::AimeIdm, ObjectiveMask::Full),
        with(Method::Iidm, Variant::Aime, ObjectiveMask::Full),
        with(Method::Bco, Variant::Aime, ObjectiveMask::Full),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
    pub means: Vec<Option<f64>>,
    pub stds: Vec<Option<f64>>,
    pub reports: Vec<PipelineReport>,
}

impl AblationReport {
    pub fn mean(&self, variant: &str) -> Option<f64> {
        self.variants.iter().position(|v| v == variant).and_then(|i| self.means[i])
    }

    pub fn is_complete(&self) -> bool {
        self.reports.iter().all(PipelineReport::is_complete)
    }
}

/// AIME with each objective term alone, the inverse-model variant, IIDM
/// and BCO(0) on one transfer setting.
pub fn run_ablations(base: &ExperimentConfig, lab: &Lab, jobs: usize) -> Result<AblationReport> {
    let cfgs = ablation_configs(base).into_iter().map(|c| c.resolved()).collect::<Result<Vec<_>>>()?;
    let reports = run_many(&cfgs, lab, jobs)?;
    Ok(AblationReport {
        version: ARTIFACT_VERSION.into(),
        config_hash: base.hash(),
        seeds: base.seeds.clone(),
        variants: reports.iter().map(|r| r.method.clone()).collect(),
        means: reports.iter().map(score).collect(),
        stds: reports.iter().map(|r| r.is_complete().then_some(r.normalized_std).flatten()).collect(),
        reports,
    })
}

/// A small configuration for smoke runs and tests: tiny networks and a
/// handful of epochs.
pub fn smoke_config() -> ExperimentConfig {
    ExperimentConfig {
        name: "smoke".into(),
        embodiment_episodes: 20,
        demo_count: 3,
        eval_episodes: 5,
        reference_episodes: 10,
        model: SsmConfig {
            deter: 8,
            stoch: 4,
            hidden: 16,
            hidden_layers: 1,
            obs_dim: 2,
            action_dim: 2,
            decoder_variance: DecoderVariance::Learned,
            ..SsmConfig::default()
        },
        phase1: TrainConfig { epochs: 5, steps_per_epoch: 10, ..TrainConfig::default() },
        imitation: ImitationConfig { epochs: 5, steps_per_epoch: 10, policy_hidden: 16, policy_layers: 1, ..ImitationConfig::default() },
        baseline: BaselineConfig { hidden: 16, layers: 1, epochs: 5, steps_per_epoch: 10, batch: 16, ..BaselineConfig::default() },
        seeds: vec![0],
        ..ExperimentConfig::default()
    }
}

/// Desk-scale budget for the point-mass ordering study: a smaller model,
/// 100 replay episodes and shortened training in every stage.
pub fn ordering_config() -> ExperimentConfig {
    ExperimentConfig {
        name: "ordering".into(),
        embodiment_episodes: 100,
        model: SsmConfig {
            deter: 32,
            stoch: 8,
            hidden: 64,
            hidden_layers: 2,
            obs_dim: 2,
            action_dim: 2,
            decoder_variance: DecoderVariance::Learned,
            ..SsmConfig::default()
        },
        phase1: TrainConfig { epochs: 60, steps_per_epoch: 100, chunk_len: 50, ..TrainConfig::default() },
        imitation: ImitationConfig {
            epochs: 20,
            steps_per_epoch: 50,
            chunk_len: 50,
            idm: IdmConfig { epochs: 20, steps_per_epoch: 50, chunk_len: 50, ..IdmConfig::default() },
            ..ImitationConfig::default()
        },
        baseline: BaselineConfig { epochs: 20, steps_per_epoch: 50, ..BaselineConfig::default() },
        ..ExperimentConfig::default()
    }
}
