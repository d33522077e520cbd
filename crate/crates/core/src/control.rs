//! Controllers that drive an environment: scripted experts, random
//! exploration, replay-like mixtures, and adapters for learned policies.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::envs::{EnvSpec, Task};
use crate::error::{invalid, Result};
use crate::seeds::{derive_seed, rng, LabRng};

pub trait Controller {
    /// Start an episode. `seed` drives any randomness inside the controller.
    fn reset(&mut self, seed: u64);

    /// Action for the current step. `state` is the true environment state;
    /// only scripted controllers read it.
    fn act(&mut self, obs: &[f64], state: &[f64]) -> Result<Vec<f64>>;
}

/// The task's scripted expert, optionally with Gaussian action noise.
pub struct Expert {
    spec: EnvSpec,
    task: Task,
    noise: f64,
    rng: LabRng,
}

impl Expert {
    pub fn new(spec: &EnvSpec, task: &Task, noise: f64) -> Self {
        Self { spec: spec.clone(), task: task.clone(), noise, rng: rng(0) }
    }
}

impl Controller for Expert {
    fn reset(&mut self, seed: u64) {
        self.rng = rng(seed);
    }

    fn act(&mut self, _obs: &[f64], state: &[f64]) -> Result<Vec<f64>> {
        let mut a = self.task.expert_action(&self.spec, state);
        if self.noise > 0.0 {
            for v in &mut a {
                let e: f64 = self.rng.sample(StandardNormal);
                *v = (*v + self.noise * e).clamp(-1.0, 1.0);
            }
        }
        Ok(a)
    }
}

/// Independent uniform actions in `[−1, 1]`.
pub struct Uniform {
    dim: usize,
    rng: LabRng,
}

impl Uniform {
    pub fn new(dim: usize) -> Self {
        Self { dim, rng: rng(0) }
    }
}

impl Controller for Uniform {
    fn reset(&mut self, seed: u64) {
        self.rng = rng(seed);
    }

    fn act(&mut self, _obs: &[f64], _state: &[f64]) -> Result<Vec<f64>> {
        Ok((0..self.dim).map(|_| self.rng.random_range(-1.0..=1.0)).collect())
    }
}

/// Always zero.
pub struct Zero(pub usize);

impl Controller for Zero {
    fn reset(&mut self, _seed: u64) {}

    fn act(&mut self, _obs: &[f64], _state: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.0])
    }
}

/// Mimics the replay buffer of an agent that improves while it collects:
/// episode `i` of `n` blends expert and uniform actions with expert weight
/// `i / (n − 1)`.
pub struct ReplayLike {
    expert: Expert,
    uniform: Uniform,
    episodes: usize,
    episode: usize,
}

impl ReplayLike {
    pub fn new(spec: &EnvSpec, task: &Task, episodes: usize) -> Self {
        Self {
            expert: Expert::new(spec, task, 0.0),
            uniform: Uniform::new(spec.action_dim()),
            episodes,
            episode: 0,
        }
    }

    fn weight(&self) -> f64 {
        if self.episodes <= 1 {
            1.0
        } else {
            (self.episode.saturating_sub(1) as f64 / (self.episodes - 1) as f64).min(1.0)
        }
    }
}

impl Controller for ReplayLike {
    fn reset(&mut self, seed: u64) {
        self.episode += 1;
        self.uniform.reset(seed);
    }

    fn act(&mut self, obs: &[f64], state: &[f64]) -> Result<Vec<f64>> {
        let w = self.weight();
        let e = self.expert.act(obs, state)?;
        let u = self.uniform.act(obs, state)?;
        Ok(e.iter().zip(&u).map(|(e, u)| (w * e + (1.0 - w) * u).clamp(-1.0, 1.0)).collect())
    }
}

/// One recorded episode.
#[derive(Clone, Debug)]
pub struct Episode {
    /// `o_1..o_T`, one row per step.
    pub observations: Vec<Vec<f64>>,
    /// `a_0..a_{T−1}` as applied (after clamping).
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub seed: u64,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Run one episode from the initial state drawn by `seed`.
pub fn run_episode(spec: &EnvSpec, task: &Task, ctrl: &mut dyn Controller, seed: u64) -> Result<Episode> {
    let (mut st, mut obs) = spec.reset(derive_seed(seed, "env", 0));
    ctrl.reset(derive_seed(seed, "controller", 0));
    let mut ep = Episode { observations: Vec::new(), actions: Vec::new(), rewards: Vec::new(), seed };
    for t in 0..spec.episode_len {
        let a = ctrl.act(&obs, &st.x)?;
        if a.len() != spec.action_dim() || a.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("controller emitted an invalid action {a:?} at step {t}")));
        }
        let info = spec.step(&mut st, task, &a)?;
        ep.actions.push(a.iter().map(|v| v.clamp(-1.0, 1.0)).collect());
        ep.observations.push(info.obs.clone());
        ep.rewards.push(info.reward);
        obs = info.obs;
    }
    Ok(ep)
}

/// Seed of episode `i` in a batch rooted at `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, "episode", i as u64)
}

/// Returns of `episodes` episodes.
pub fn returns(
    spec: &EnvSpec,
    task: &Task,
    ctrl: &mut dyn Controller,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..episodes)
        .map(|i| run_episode(spec, task, ctrl, episode_seed(seed, i)).map(|e| e.total_reward()))
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}
