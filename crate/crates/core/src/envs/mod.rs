//! Synthetic embodiments with known ground truth.
//!
//! An [`EnvSpec`] fixes the embodiment (dynamics, observation mode, episode
//! length, action repeat); a [`Task`] fixes the reward and the scripted
//! expert. Several tasks share one embodiment, so datasets collected under
//! different tasks describe identical dynamics.

mod kalman;
mod lingauss;
mod pointmass;

pub use kalman::kalman_log_evidence;
pub use lingauss::LinGaussSpec;
pub use pointmass::PointMassSpec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seeds::{rng, LabRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsMode {
    /// Full state.
    Mdp,
    /// Position block only.
    Lpomdp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Embodiment {
    PointMass(PointMassSpec),
    LinGauss(LinGaussSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub embodiment: Embodiment,
    pub obs_mode: ObsMode,
    pub episode_len: usize,
    pub action_repeat: usize,
}

/// Mutable episode state: the true system state plus the noise stream.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub x: Vec<f64>,
    pub t: usize,
    rng: LabRng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// The action had a component outside `[−1, 1]` and was clamped.
    pub clamped: bool,
}

impl EnvSpec {
    pub fn point_mass(obs_mode: ObsMode) -> Self {
        Self {
            embodiment: Embodiment::PointMass(PointMassSpec::default()),
            obs_mode,
            episode_len: 50,
            action_repeat: 1,
        }
    }

    pub fn lin_gauss(spec: LinGaussSpec) -> Self {
        Self { embodiment: Embodiment::LinGauss(spec), obs_mode: ObsMode::Mdp, episode_len: 30, action_repeat: 1 }
    }

    pub fn id(&self) -> &'static str {
        match self.embodiment {
            Embodiment::PointMass(_) => "point_mass",
            Embodiment::LinGauss(_) => "lin_gauss",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episode_len < 2 {
            return Err(invalid("episode length must be at least 2"));
        }
        if self.action_repeat < 1 {
            return Err(invalid("action repeat must be at least 1"));
        }
        match &self.embodiment {
            Embodiment::PointMass(p) => p.validate(),
            Embodiment::LinGauss(l) => {
                if self.obs_mode != ObsMode::Mdp {
                    return Err(invalid("the linear-Gaussian embodiment observes through C only (mode mdp)"));
                }
                l.validate()
            }
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.embodiment {
            Embodiment::PointMass(_) => 4,
            Embodiment::LinGauss(l) => l.state_dim(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match &self.embodiment {
            Embodiment::PointMass(_) => 2,
            Embodiment::LinGauss(l) => l.action_dim(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match (&self.embodiment, self.obs_mode) {
            (Embodiment::PointMass(_), ObsMode::Mdp) => 4,
            (Embodiment::PointMass(_), ObsMode::Lpomdp) => 2,
            (Embodiment::LinGauss(l), _) => l.obs_dim(),
        }
    }

    /// Draw the initial state from `seed` and return it with its observation.
    pub fn reset(&self, seed: u64) -> (EnvState, Vec<f64>) {
        let mut r = rng(seed);
        let x = match &self.embodiment {
            Embodiment::PointMass(p) => p.initial_state(&mut r),
            Embodiment::LinGauss(l) => l.initial_state(&mut r),
        };
        let mut st = EnvState { x, t: 0, rng: r };
        let obs = self.observe(&mut st);
        (st, obs)
    }

    /// Observation of the current state. Draws observation noise for the
    /// linear-Gaussian embodiment.
    pub fn observe(&self, st: &mut EnvState) -> Vec<f64> {
        match &self.embodiment {
            Embodiment::PointMass(_) => match self.obs_mode {
                ObsMode::Mdp => st.x.clone(),
                ObsMode::Lpomdp => st.x[..2].to_vec(),
            },
            Embodiment::LinGauss(l) => l.observe(&st.x, &mut st.rng),
        }
    }

    /// One environment step: the clamped action is applied `action_repeat`
    /// times and the task rewards the final state.
    pub fn step(&self, st: &mut EnvState, task: &Task, action: &[f64]) -> Result<StepInfo> {
        if action.len() != self.action_dim() {
            return Err(invalid(format!("action has {} entries, expected {}", action.len(), self.action_dim())));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(invalid("action is not finite"));
        }
        let clamped = action.iter().any(|a| a.abs() > 1.0);
        let a: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        for _ in 0..self.action_repeat {
            st.x = match &self.embodiment {
                Embodiment::PointMass(p) => p.transition(&st.x, &a),
                Embodiment::LinGauss(l) => l.transition(&st.x, &a, &mut st.rng),
            };
        }
        st.t += 1;
        let reward = task.reward(self, &st.x);
        let obs = self.observe(st);
        Ok(StepInfo { obs, reward, clamped })
    }
}

/// What the agent is asked to do on an embodiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    /// Point-mass: reach (0.8, 0).
    ReachEast,
    /// Point-mass: reach (0, 0.8).
    ReachNorth,
    /// Point-mass: circle the origin counter-clockwise at radius 0.5.
    Orbit,
    /// Linear-Gaussian: drive the state to `goal`.
    Goal { goal: Vec<f64> },
}

pub const REACH_SCALE: f64 = 0.3;
pub const ORBIT_RADIUS: f64 = 0.5;
pub const ORBIT_SPEED: f64 = 0.5;

impl Task {
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "reach_east" => Ok(Task::ReachEast),
            "reach_north" => Ok(Task::ReachNorth),
            "orbit" => Ok(Task::Orbit),
            other => Err(invalid(format!("unknown task {other:?}"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Task::ReachEast => "reach_east",
            Task::ReachNorth => "reach_north",
            Task::Orbit => "orbit",
            Task::Goal { .. } => "goal",
        }
    }

    fn reach_goal(&self) -> Option<[f64; 2]> {
        match self {
            Task::ReachEast => Some([0.8, 0.0]),
            Task::ReachNorth => Some([0.0, 0.8]),
            _ => None,
        }
    }

    /// Every per-step reward lies in this closed interval.
    pub fn reward_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    pub fn reward(&self, spec: &EnvSpec, x: &[f64]) -> f64 {
        match (self, &spec.embodiment) {
            (Task::Goal { goal }, Embodiment::LinGauss(_)) => {
                let d2: f64 = x.iter().zip(goal).map(|(a, b)| (a - b).powi(2)).sum();
                (-d2).exp()
            }
            (Task::Orbit, Embodiment::PointMass(_)) => {
                let (px, py, vx, vy) = (x[0], x[1], x[2], x[3]);
                let r = px.hypot(py);
                let vt = if r > 1e-9 { (px * vy - py * vx) / r } else { 0.0 };
                (vt / ORBIT_SPEED).clamp(0.0, 1.0) * (-(r - ORBIT_RADIUS).abs() / 0.2).exp()
            }
            (t, Embodiment::PointMass(_)) => {
                let g = t.reach_goal().expect("reach task");
                let d = (x[0] - g[0]).hypot(x[1] - g[1]);
                (-d / REACH_SCALE).exp()
            }
            _ => 0.0,
        }
    }

    /// Scripted expert: a deterministic bounded action from the true state.
    pub fn expert_action(&self, spec: &EnvSpec, x: &[f64]) -> Vec<f64> {
        match (self, &spec.embodiment) {
            (Task::Goal { goal }, Embodiment::LinGauss(l)) => l.goal_controller(x, goal),
            (Task::Orbit, Embodiment::PointMass(_)) => {
                let (px, py, vx, vy) = (x[0], x[1], x[2], x[3]);
                let r = px.hypot(py);
                let (ux, uy) = if r > 1e-9 { (px / r, py / r) } else { (1.0, 0.0) };
                let radial = 2.0 * (ORBIT_RADIUS - r);
                let (dx, dy) = (ORBIT_SPEED * -uy + radial * ux, ORBIT_SPEED * ux + radial * uy);
                vec![
                    (dx + 2.0 * (dx - vx)).clamp(-1.0, 1.0),
                    (dy + 2.0 * (dy - vy)).clamp(-1.0, 1.0),
                ]
            }
            (t, Embodiment::PointMass(p)) => {
                let g = t.reach_goal().expect("reach task");
                vec![
                    (p.kp * (g[0] - x[0]) - p.kd * x[2]).clamp(-1.0, 1.0),
                    (p.kp * (g[1] - x[1]) - p.kd * x[3]).clamp(-1.0, 1.0),
                ]
            }
            _ => vec![0.0; spec.action_dim()],
        }
    }

    pub fn check_compatible(&self, spec: &EnvSpec) -> Result<()> {
        match (self, &spec.embodiment) {
            (Task::Goal { goal }, Embodiment::LinGauss(l)) if goal.len() == l.state_dim() => Ok(()),
            (Task::Goal { .. }, Embodiment::LinGauss(_)) => Err(invalid("goal length must equal the state dimension")),
            (Task::Goal { .. }, _) => Err(invalid("goal tasks need the linear-Gaussian embodiment")),
            (_, Embodiment::PointMass(_)) => Ok(()),
            (t, _) => Err(invalid(format!("task {} needs the point-mass embodiment", t.id()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic_per_seed() {
        let spec = EnvSpec::point_mass(ObsMode::Mdp);
        let (a, oa) = spec.reset(7);
        let (b, ob) = spec.reset(7);
        assert_eq!(a.x, b.x);
        assert_eq!(oa, ob);
        let (c, _) = spec.reset(8);
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn lpomdp_observes_positions_only() {
        let spec = EnvSpec::point_mass(ObsMode::Lpomdp);
        let (st, obs) = spec.reset(3);
        assert_eq!(obs.len(), 2);
        assert_eq!(obs, st.x[..2].to_vec());
        assert_eq!(spec.obs_dim(), 2);
    }

    #[test]
    fn out_of_range_action_is_clamped_and_flagged() {
        let spec = EnvSpec::point_mass(ObsMode::Mdp);
        let (mut a, _) = spec.reset(1);
        let mut b = a.clone();
        let s1 = spec.step(&mut a, &Task::ReachEast, &[3.0, -2.0]).unwrap();
        let s2 = spec.step(&mut b, &Task::ReachEast, &[1.0, -1.0]).unwrap();
        assert!(s1.clamped && !s2.clamped);
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn expert_is_zero_at_goal_and_saturates_far_away() {
        let spec = EnvSpec::point_mass(ObsMode::Mdp);
        assert_eq!(Task::ReachEast.expert_action(&spec, &[0.8, 0.0, 0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(Task::ReachNorth.expert_action(&spec, &[0.0, 0.8, 0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(Task::ReachEast.expert_action(&spec, &[-1.0, 1.0, 0.0, 0.0]), vec![1.0, -1.0]);
    }

    #[test]
    fn action_repeat_applies_dynamics_repeatedly() {
        let mut spec = EnvSpec::point_mass(ObsMode::Mdp);
        let (mut a, _) = spec.reset(2);
        let mut b = a.clone();
        spec.step(&mut a, &Task::Orbit, &[0.5, 0.2]).unwrap();
        spec.step(&mut a, &Task::Orbit, &[0.5, 0.2]).unwrap();
        spec.action_repeat = 2;
        spec.step(&mut b, &Task::Orbit, &[0.5, 0.2]).unwrap();
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn validation_rejects_short_episodes_and_bad_modes() {
        let mut spec = EnvSpec::point_mass(ObsMode::Mdp);
        spec.episode_len = 1;
        assert!(spec.validate().is_err());
        let mut lg = EnvSpec::lin_gauss(LinGaussSpec::oracle_2d());
        assert!(lg.validate().is_ok());
        lg.obs_mode = ObsMode::Lpomdp;
        assert!(lg.validate().is_err());
        assert!(Task::Orbit.check_compatible(&EnvSpec::lin_gauss(LinGaussSpec::oracle_2d())).is_err());
    }
}
