//! Embodiment and demonstration datasets, their on-disk format, and chunk
//! sampling for sequence training.
//!
//! Indexing: a trajectory of length `T` stores `o_1..o_T` and, for
//! embodiment data, `a_0..a_{T−1}`. Row `t` of the action array is the
//! action applied just before the observation in row `t`. The reset
//! observation `o_0` is not stored.
//!
//! Demonstration trajectories have no action field at all, so no accessor
//! can leak demonstrator actions to a learner.

use std::fs;
use std::path::Path;

use aime_diffcore::Array;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{episode_seed, run_episode, Controller};
use crate::envs::{EnvSpec, Task};
use crate::error::{invalid, Error, Result};
use crate::seeds::LabRng;

pub const FORMAT_VERSION: u32 = 1;

fn check_finite(a: &Array, what: &str) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{what} contains non-finite values")))
    }
}

/// An action-labelled trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    observations: Array,
    actions: Array,
    rewards: Option<Vec<f64>>,
    pub seed: u64,
    pub source: String,
}

impl Trajectory {
    pub fn new(observations: Array, actions: Array, rewards: Option<Vec<f64>>, seed: u64, source: &str) -> Result<Self> {
        if observations.shape().len() != 2 || actions.shape().len() != 2 {
            return Err(invalid("observations and actions must be [T, dim] arrays"));
        }
        if observations.rows() != actions.rows() {
            return Err(invalid(format!(
                "{} observations but {} actions",
                observations.rows(),
                actions.rows()
            )));
        }
        if rewards.as_ref().is_some_and(|r| r.len() != observations.rows() || r.iter().any(|v| !v.is_finite())) {
            return Err(invalid("rewards must be finite and one per observation"));
        }
        check_finite(&observations, "observations")?;
        check_finite(&actions, "actions")?;
        Ok(Self { observations, actions, rewards, seed, source: source.to_string() })
    }

    pub fn len(&self) -> usize {
        self.observations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observations(&self) -> &Array {
        &self.observations
    }

    pub fn actions(&self) -> &Array {
        &self.actions
    }

    pub fn rewards(&self) -> Option<&[f64]> {
        self.rewards.as_deref()
    }

    pub fn total_reward(&self) -> Option<f64> {
        self.rewards.as_ref().map(|r| r.iter().sum())
    }
}

/// An observation-only trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoTrajectory {
    observations: Array,
    rewards: Option<Vec<f64>>,
    pub seed: u64,
    pub source: String,
}

impl DemoTrajectory {
    pub fn new(observations: Array, rewards: Option<Vec<f64>>, seed: u64, source: &str) -> Result<Self> {
        if observations.shape().len() != 2 {
            return Err(invalid("observations must be a [T, dim] array"));
        }
        if rewards.as_ref().is_some_and(|r| r.len() != observations.rows() || r.iter().any(|v| !v.is_finite())) {
            return Err(invalid("rewards must be finite and one per observation"));
        }
        check_finite(&observations, "observations")?;
        Ok(Self { observations, rewards, seed, source: source.to_string() })
    }

    pub fn len(&self) -> usize {
        self.observations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observations(&self) -> &Array {
        &self.observations
    }

    pub fn rewards(&self) -> Option<&[f64]> {
        self.rewards.as_deref()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Embodiment,
    Demonstration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbodimentDataset {
    trajectories: Vec<Trajectory>,
    obs_dim: usize,
    action_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    trajectories: Vec<DemoTrajectory>,
    obs_dim: usize,
}

impl EmbodimentDataset {
    pub fn new(trajectories: Vec<Trajectory>, obs_dim: usize, action_dim: usize) -> Result<Self> {
        for (i, t) in trajectories.iter().enumerate() {
            if t.observations.cols() != obs_dim || t.actions.cols() != action_dim {
                return Err(invalid(format!("trajectory {i} has inconsistent dimensions")));
            }
        }
        Ok(Self { trajectories, obs_dim, action_dim })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Concatenate datasets that share dimensions, keeping every
    /// trajectory unchanged.
    pub fn concat(parts: &[&EmbodimentDataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("nothing to concatenate"))?;
        let mut trajectories = Vec::new();
        for p in parts {
            if p.obs_dim != first.obs_dim || p.action_dim != first.action_dim {
                return Err(invalid("datasets differ in dimensions"));
            }
            trajectories.extend(p.trajectories.iter().cloned());
        }
        Self::new(trajectories, first.obs_dim, first.action_dim)
    }

    /// The first `n` trajectories.
    pub fn take(&self, n: usize) -> Self {
        Self { trajectories: self.trajectories.iter().take(n).cloned().collect(), ..self.clone_empty() }
    }

    /// Split by trajectory into `(first, rest)` at `n`.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let a = Self { trajectories: self.trajectories[..n].to_vec(), ..self.clone_empty() };
        let b = Self { trajectories: self.trajectories[n..].to_vec(), ..self.clone_empty() };
        (a, b)
    }

    fn clone_empty(&self) -> Self {
        Self { trajectories: Vec::new(), obs_dim: self.obs_dim, action_dim: self.action_dim }
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.trajectories.iter().map(Trajectory::len).collect()
    }

    pub fn sample_chunks(&self, batch: usize, len: usize, rng: &mut LabRng) -> Result<Chunk> {
        let index = sample_chunk_index(&self.lengths(), batch, len, rng)?;
        Ok(self.gather(&index, len))
    }

    /// Build a chunk from explicit `(trajectory, offset)` pairs.
    pub fn gather(&self, index: &[ChunkIndex], len: usize) -> Chunk {
        let obs = gather_rows(index, len, self.obs_dim, |i| &self.trajectories[i].observations);
        let actions = gather_rows(index, len, self.action_dim, |i| &self.trajectories[i].actions);
        Chunk { index: index.to_vec(), obs, actions: Some(actions) }
    }

    /// Mean episode return over trajectories that carry rewards.
    pub fn mean_return(&self) -> Option<f64> {
        let r: Vec<f64> = self.trajectories.iter().filter_map(Trajectory::total_reward).collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }

    pub fn content_hash(&self) -> String {
        content_hash(Role::Embodiment, self.obs_dim, Some(self.action_dim), &self.views())
    }

    pub fn observation_hash(&self) -> String {
        observation_hash(self.obs_dim, &self.views())
    }

    fn views(&self) -> Vec<TrajView<'_>> {
        self.trajectories
            .iter()
            .map(|t| TrajView {
                observations: &t.observations,
                actions: Some(&t.actions),
                rewards: t.rewards.as_deref(),
                seed: t.seed,
                source: &t.source,
            })
            .collect()
    }
}

impl DemoDataset {
    pub fn new(trajectories: Vec<DemoTrajectory>, obs_dim: usize) -> Result<Self> {
        if let Some(i) = trajectories.iter().position(|t| t.observations.cols() != obs_dim) {
            return Err(invalid(format!("trajectory {i} has inconsistent dimensions")));
        }
        Ok(Self { trajectories, obs_dim })
    }

    pub fn trajectories(&self) -> &[DemoTrajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn take(&self, n: usize) -> Self {
        Self { trajectories: self.trajectories.iter().take(n).cloned().collect(), obs_dim: self.obs_dim }
    }

    pub fn concat(parts: &[&DemoDataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("nothing to concatenate"))?;
        let mut trajectories = Vec::new();
        for p in parts {
            if p.obs_dim != first.obs_dim {
                return Err(invalid("datasets differ in dimensions"));
            }
            trajectories.extend(p.trajectories.iter().cloned());
        }
        Self::new(trajectories, first.obs_dim)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.trajectories.iter().map(DemoTrajectory::len).collect()
    }

    pub fn sample_chunks(&self, batch: usize, len: usize, rng: &mut LabRng) -> Result<Chunk> {
        let index = sample_chunk_index(&self.lengths(), batch, len, rng)?;
        Ok(self.gather(&index, len))
    }

    pub fn gather(&self, index: &[ChunkIndex], len: usize) -> Chunk {
        let obs = gather_rows(index, len, self.obs_dim, |i| &self.trajectories[i].observations);
        Chunk { index: index.to_vec(), obs, actions: None }
    }

    pub fn content_hash(&self) -> String {
        content_hash(Role::Demonstration, self.obs_dim, None, &self.views())
    }

    pub fn observation_hash(&self) -> String {
        observation_hash(self.obs_dim, &self.views())
    }

    fn views(&self) -> Vec<TrajView<'_>> {
        self.trajectories
            .iter()
            .map(|t| TrajView {
                observations: &t.observations,
                actions: None,
                rewards: t.rewards.as_deref(),
                seed: t.seed,
                source: &t.source,
            })
            .collect()
    }
}

/// Drop the actions of every trajectory. Observations, rewards, seeds and
/// sources are kept exactly.
pub fn strip_actions(ds: &EmbodimentDataset) -> DemoDataset {
    let trajectories = ds
        .trajectories
        .iter()
        .map(|t| DemoTrajectory {
            observations: t.observations.clone(),
            rewards: t.rewards.clone(),
            seed: t.seed,
            source: t.source.clone(),
        })
        .collect();
    DemoDataset { trajectories, obs_dim: ds.obs_dim }
}

/// Collect `episodes` complete episodes with actions and rewards.
pub fn collect(
    spec: &EnvSpec,
    task: &Task,
    ctrl: &mut dyn Controller,
    episodes: usize,
    seed: u64,
    source: &str,
) -> Result<EmbodimentDataset> {
    spec.validate()?;
    task.check_compatible(spec)?;
    let mut trajectories = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let s = episode_seed(seed, i);
        let ep = run_episode(spec, task, ctrl, s).map_err(|e| invalid(format!("episode {i}: {e}")))?;
        let obs = Array::from_rows(&ep.observations)?;
        let act = Array::from_rows(&ep.actions)?;
        trajectories.push(Trajectory::new(obs, act, Some(ep.rewards), s, source)?);
    }
    EmbodimentDataset::new(trajectories, spec.obs_dim(), spec.action_dim())
}

/// A sampled chunk start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChunkIndex {
    pub traj: usize,
    pub offset: usize,
}

/// `B` aligned chunks of length `L`, laid out per time step: `obs[t]` is
/// `[B, obs_dim]`, and `actions[t]` (when present) is the action applied
/// just before `obs[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub index: Vec<ChunkIndex>,
    pub obs: Vec<Array>,
    pub actions: Option<Vec<Array>>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.index.len()
    }
}

/// Uniform draws over every valid `(trajectory, offset)` pair.
pub fn sample_chunk_index(lengths: &[usize], batch: usize, len: usize, rng: &mut LabRng) -> Result<Vec<ChunkIndex>> {
    if len == 0 {
        return Err(invalid("chunk length must be positive"));
    }
    if lengths.is_empty() {
        return Err(invalid("cannot sample chunks from an empty dataset"));
    }
    let shortest = *lengths.iter().min().expect("non-empty");
    if len > shortest {
        return Err(invalid(format!("chunk length {len} exceeds the shortest trajectory ({shortest})")));
    }
    let mut cum = Vec::with_capacity(lengths.len());
    let mut total = 0usize;
    for l in lengths {
        total += l - len + 1;
        cum.push(total);
    }
    Ok((0..batch)
        .map(|_| {
            let k = rng.random_range(0..total);
            let traj = cum.partition_point(|&c| c <= k);
            let before = if traj == 0 { 0 } else { cum[traj - 1] };
            ChunkIndex { traj, offset: k - before }
        })
        .collect())
}

fn gather_rows<'a>(index: &[ChunkIndex], len: usize, dim: usize, seq: impl Fn(usize) -> &'a Array) -> Vec<Array> {
    (0..len)
        .map(|t| {
            let mut data = Vec::with_capacity(index.len() * dim);
            for ix in index {
                data.extend_from_slice(seq(ix.traj).row_slice(ix.offset + t));
            }
            Array::new(vec![index.len(), dim], data).expect("gathered rows")
        })
        .collect()
}

struct TrajView<'a> {
    observations: &'a Array,
    actions: Option<&'a Array>,
    rewards: Option<&'a [f64]>,
    seed: u64,
    source: &'a str,
}

fn f64_bytes(xs: &[f64]) -> Vec<u8> {
    xs.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn content_hash(role: Role, obs_dim: usize, action_dim: Option<usize>, trajs: &[TrajView<'_>]) -> String {
    let mut h = Sha256::new();
    h.update(b"aime-dataset");
    h.update(FORMAT_VERSION.to_le_bytes());
    h.update([role as u8]);
    h.update((obs_dim as u64).to_le_bytes());
    h.update((action_dim.map_or(u64::MAX, |d| d as u64)).to_le_bytes());
    h.update((trajs.len() as u64).to_le_bytes());
    for t in trajs {
        h.update((t.observations.rows() as u64).to_le_bytes());
        h.update(t.seed.to_le_bytes());
        h.update((t.source.len() as u64).to_le_bytes());
        h.update(t.source.as_bytes());
        h.update(t.observations.to_le_bytes());
        match t.actions {
            Some(a) => {
                h.update([1]);
                h.update(a.to_le_bytes());
            }
            None => h.update([0]),
        }
        match t.rewards {
            Some(r) => {
                h.update([1]);
                h.update(f64_bytes(r));
            }
            None => h.update([0]),
        }
    }
    hex::encode(h.finalize())
}

fn observation_hash(obs_dim: usize, trajs: &[TrajView<'_>]) -> String {
    let mut h = Sha256::new();
    h.update((obs_dim as u64).to_le_bytes());
    h.update((trajs.len() as u64).to_le_bytes());
    for t in trajs {
        h.update((t.observations.rows() as u64).to_le_bytes());
        h.update(t.observations.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Either kind of dataset, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Embodiment(EmbodimentDataset),
    Demonstration(DemoDataset),
}

impl Dataset {
    pub fn role(&self) -> Role {
        match self {
            Dataset::Embodiment(_) => Role::Embodiment,
            Dataset::Demonstration(_) => Role::Demonstration,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Embodiment(d) => d.len(),
            Dataset::Demonstration(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn content_hash(&self) -> String {
        match self {
            Dataset::Embodiment(d) => d.content_hash(),
            Dataset::Demonstration(d) => d.content_hash(),
        }
    }

    pub fn observation_hash(&self) -> String {
        match self {
            Dataset::Embodiment(d) => d.observation_hash(),
            Dataset::Demonstration(d) => d.observation_hash(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrajEntry {
    len: usize,
    seed: u64,
    source: String,
    has_rewards: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub role: Role,
    pub obs_dim: usize,
    pub action_dim: Option<usize>,
    pub count: usize,
    trajectories: Vec<TrajEntry>,
    pub content_hash: String,
    pub observation_hash: String,
}

fn file_name(i: usize, field: &str) -> String {
    format!("{i:06}.{field}.f64")
}

/// Write `ds` into directory `dir` (created if missing).
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (obs_dim, action_dim, views) = match ds {
        Dataset::Embodiment(d) => (d.obs_dim, Some(d.action_dim), d.views()),
        Dataset::Demonstration(d) => (d.obs_dim, None, d.views()),
    };
    let mut entries = Vec::with_capacity(views.len());
    for (i, t) in views.iter().enumerate() {
        fs::write(dir.join(file_name(i, "obs")), t.observations.to_le_bytes())?;
        if let Some(a) = t.actions {
            fs::write(dir.join(file_name(i, "act")), a.to_le_bytes())?;
        }
        if let Some(r) = t.rewards {
            fs::write(dir.join(file_name(i, "rew")), f64_bytes(r))?;
        }
        entries.push(TrajEntry {
            len: t.observations.rows(),
            seed: t.seed,
            source: t.source.to_string(),
            has_rewards: t.rewards.is_some(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        role: ds.role(),
        obs_dim,
        action_dim,
        count: views.len(),
        trajectories: entries,
        content_hash: ds.content_hash(),
        observation_hash: ds.observation_hash(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Truncated(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let found = raw.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version { found, expected: FORMAT_VERSION });
    }
    Ok(serde_json::from_value(raw)?)
}

/// Read a dataset written by [`save`], verifying sizes and the content hash.
pub fn load(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    if m.trajectories.len() != m.count {
        return Err(Error::Truncated("manifest lists fewer trajectories than its count".into()));
    }
    let ds = match (m.role, m.action_dim) {
        (Role::Embodiment, Some(ad)) => {
            let mut trajs = Vec::with_capacity(m.count);
            for (i, e) in m.trajectories.iter().enumerate() {
                let obs = Array::new(vec![e.len, m.obs_dim], read_f64s(&dir.join(file_name(i, "obs")), e.len * m.obs_dim)?)?;
                let act = Array::new(vec![e.len, ad], read_f64s(&dir.join(file_name(i, "act")), e.len * ad)?)?;
                let rew = if e.has_rewards { Some(read_f64s(&dir.join(file_name(i, "rew")), e.len)?) } else { None };
                trajs.push(Trajectory { observations: obs, actions: act, rewards: rew, seed: e.seed, source: e.source.clone() });
            }
            Dataset::Embodiment(EmbodimentDataset { trajectories: trajs, obs_dim: m.obs_dim, action_dim: ad })
        }
        (Role::Demonstration, None) => {
            let mut trajs = Vec::with_capacity(m.count);
            for (i, e) in m.trajectories.iter().enumerate() {
                let obs = Array::new(vec![e.len, m.obs_dim], read_f64s(&dir.join(file_name(i, "obs")), e.len * m.obs_dim)?)?;
                let rew = if e.has_rewards { Some(read_f64s(&dir.join(file_name(i, "rew")), e.len)?) } else { None };
                trajs.push(DemoTrajectory { observations: obs, rewards: rew, seed: e.seed, source: e.source.clone() });
            }
            Dataset::Demonstration(DemoDataset { trajectories: trajs, obs_dim: m.obs_dim })
        }
        (role, _) => return Err(invalid(format!("{role:?} manifest has an inconsistent action dimension"))),
    };
    let found = ds.content_hash();
    if found != m.content_hash {
        return Err(Error::HashMismatch { expected: m.content_hash, found });
    }
    // Hash first so a corrupted payload reports as corruption, then re-run
    // the usual invariant checks.
    match ds {
        Dataset::Embodiment(d) => {
            let trajs = d
                .trajectories
                .into_iter()
                .map(|t| Trajectory::new(t.observations, t.actions, t.rewards, t.seed, &t.source))
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset::Embodiment(EmbodimentDataset::new(trajs, d.obs_dim, d.action_dim)?))
        }
        Dataset::Demonstration(d) => {
            let trajs = d
                .trajectories
                .into_iter()
                .map(|t| DemoTrajectory::new(t.observations, t.rewards, t.seed, &t.source))
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset::Demonstration(DemoDataset::new(trajs, d.obs_dim)?))
        }
    }
}
