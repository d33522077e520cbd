use aime_core::control::{Expert, Zero, returns};
use aime_core::datasets::{collect, strip_actions, EmbodimentDataset};
use aime_core::envs::{EnvSpec, LinGaussSpec, ObsMode, Task};
use aime_core::imitation::*;
use aime_core::seeds::rng;
use aime_core::worldmodel::{
    batch_mean, elbo_terms, filter_with_actions, noise_stream, ElboOptions, SsmConfig, SsmParams,
};
use aime_diffcore::params::named_arrays;
use aime_diffcore::{grad_check, param_hash, Array, Module, Var, VarSet};
use proptest::prelude::*;

const NOOP_REACH_EAST: f64 = 4.191813126675;

fn tiny_model(seed: u64) -> SsmParams {
    let cfg = SsmConfig { deter: 4, stoch: 3, hidden: 6, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
    SsmParams::new(&cfg, &mut rng(seed)).unwrap()
}

fn random_policy(model: &SsmParams, seed: u64) -> PolicyParams {
    let mut p = ActionHead::policy(&model.config, 5, 1, &mut rng(seed));
    let mut r = rng(seed + 1000);
    for layer in &mut p.net.layers {
        layer.w = Array::randn(&[layer.w.rows(), layer.w.cols()], &mut r).map(|v| 0.5 * v);
        layer.b = Array::randn(&[1, layer.b.cols()], &mut r).map(|v| 0.5 * v);
    }
    p
}

fn random_obs(len: usize, batch: usize, seed: u64) -> Vec<Array> {
    let mut r = rng(seed);
    (0..len).map(|_| Array::randn(&[batch, 2], &mut r)).collect()
}

#[test]
fn policy_term_cancels_for_chunk_lengths() {
    for (i, len) in [1usize, 5, 30].into_iter().enumerate() {
        let model = tiny_model(i as u64);
        let policy = random_policy(&model, 10 + i as u64);
        let (lhs, rhs) = joint_kl_check(&model, &policy, &random_obs(len, 3, 20 + i as u64), 7).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10, "len {len}: {lhs} vs {rhs}");
        assert!(rhs >= 0.0);
    }
}

#[test]
fn policy_term_cancels_for_a_deterministic_policy() {
    let model = tiny_model(3);
    let mut policy = random_policy(&model, 4);
    let head = policy.net.layers.last_mut().unwrap();
    for j in 2..4 {
        head.b.set2(0, j, -60.0);
        for i in 0..head.w.rows() {
            head.w.set2(i, j, 0.0);
        }
    }
    let (lhs, rhs) = joint_kl_check(&model, &policy, &random_obs(5, 2, 5), 9).unwrap();
    assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn cancellation_holds_on_random_instances(seed in 0u64..1_000_000, len in 1usize..8) {
        let model = tiny_model(seed);
        let policy = random_policy(&model, seed ^ 0xabc);
        let (lhs, rhs) = joint_kl_check(&model, &policy, &random_obs(len, 2, seed + 1), seed + 2).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10);
    }
}

fn to_diff(e: aime_core::Error) -> aime_diffcore::Error {
    aime_diffcore::Error::Invalid(e.to_string())
}

#[test]
fn policy_gradient_through_sampled_actions_matches_finite_differences() {
    let model = tiny_model(40);
    let policy = random_policy(&model, 41);
    let obs = random_obs(4, 3, 42);
    let mut r = rng(43);
    let sn = noise_stream(4, 3, model.config.stoch, &mut r);
    let an = noise_stream(4, 3, 2, &mut r);
    let point: Vec<Array> = named_arrays(&policy).into_iter().map(|(_, a)| a).collect();
    let report = grad_check(
        |t, v| {
            let mut pvars = policy.bind(t, false);
            pvars.assign(&mut v.iter().copied());
            let mvars = model.bind(t, false);
            let o: Vec<Var> = obs.iter().map(|a| t.constant(a.clone())).collect();
            let n: Vec<Var> = sn.iter().map(|a| t.constant(a.clone())).collect();
            let (_, beliefs) = filter_with_actions(t, &mvars, &model.config, &o, &n, |k, prev, _| {
                Ok(policy.dist(t, &pvars, prev.features(t))?.sample(t, t.constant(an[k].clone()))?)
            })
            .map_err(to_diff)?;
            let rows = elbo_terms(t, &mvars, &model.config, &beliefs, &o, &ElboOptions::plain()).map_err(to_diff)?;
            Ok(batch_mean(t, rows.total(t)))
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

fn small_demo_set(episodes: usize) -> (EmbodimentDataset, aime_core::datasets::DemoDataset) {
    let spec = EnvSpec::lin_gauss(LinGaussSpec::oracle_2d());
    let task = Task::Goal { goal: vec![0.5, -0.5] };
    let full = collect(&spec, &task, &mut Expert::new(&spec, &task, 0.1), episodes, 3, "expert").unwrap();
    let demos = strip_actions(&full);
    (full, demos)
}

fn quick_config() -> ImitationConfig {
    ImitationConfig { epochs: 2, steps_per_epoch: 5, batch: 2, chunk_len: 8, policy_hidden: 8, policy_layers: 1, ..ImitationConfig::default() }
}

#[test]
fn phase_two_keeps_the_world_model_frozen() {
    let model = tiny_model(50);
    let (full, demos) = small_demo_set(3);
    let before = param_hash(&model);
    let (policy, log) = aime_phase2(&model, &demos, &quick_config(), 1, Some(&full)).unwrap();
    assert_eq!(param_hash(&model), before);
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|l| l.action_mse.is_some() && l.idm_kl.is_none()));
    assert_eq!(policy.action_dim(), 2);
}

#[test]
fn zero_epochs_return_the_initial_policy() {
    let model = tiny_model(51);
    let (_, demos) = small_demo_set(2);
    let cfg = ImitationConfig { epochs: 0, ..quick_config() };
    let (policy, log) = aime_phase2(&model, &demos, &cfg, 4, None).unwrap();
    let fresh = ActionHead::policy(&model.config, 8, 1, &mut aime_core::seeds::stream_rng(4, "init", 1));
    assert_eq!(param_hash(&policy), param_hash(&fresh));
    assert!(log.is_empty());
}

#[test]
fn phase_two_is_deterministic() {
    let model = tiny_model(52);
    let (_, demos) = small_demo_set(3);
    let (a, la) = aime_phase2(&model, &demos, &quick_config(), 9, None).unwrap();
    let (b, lb) = aime_phase2(&model, &demos, &quick_config(), 9, None).unwrap();
    assert_eq!(param_hash(&a), param_hash(&b));
    assert_eq!(la, lb);
}

#[test]
fn identical_inverse_model_and_policy_have_no_guidance_term() {
    let model = tiny_model(53);
    let (_, demos) = small_demo_set(2);
    // Both heads start at zero, so both distributions are the same.
    let idm = ActionHead::idm(&model.config, 8, 1, &mut rng(1));
    let cfg = ImitationConfig { epochs: 1, steps_per_epoch: 1, ..quick_config() };
    let before = param_hash(&idm);
    let (_, log) = aime_idm_phase2(&model, &idm, &demos, &cfg, 2, None).unwrap();
    assert_eq!(log[0].idm_kl, Some(0.0));
    assert_eq!(param_hash(&idm), before);
}

#[test]
fn planning_never_loses_to_its_initialisation() {
    for seed in 0..4 {
        let model = tiny_model(60 + seed);
        let obs = Array::from_rows(&random_obs(6, 1, seed).iter().map(|a| a.data().to_vec()).collect::<Vec<_>>()).unwrap();
        let plan = PlanConfig { iterations: 30, lr: 0.1, samples: 2 };
        let r = plan_actions(&model, &obs, &plan, seed).unwrap();
        assert!(r.j_best >= r.j_init);
        assert!(r.actions.data().iter().all(|a| a.abs() <= 1.0));
    }
}

#[test]
fn flat_planning_objective_returns_the_initialisation() {
    let cfg = SsmConfig { deter: 2, stoch: 2, hidden: 4, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
    let model = SsmParams::zeros(&cfg).unwrap();
    let obs = Array::row(&[0.4, -0.1]);
    let r = plan_actions(&model, &obs, &PlanConfig { iterations: 20, ..PlanConfig::default() }, 1).unwrap();
    assert_eq!(r.actions, Array::zeros(&[1, 2]));
    assert_eq!(r.best_iteration, 0);
    assert_eq!(r.j_best, r.j_init);
}

fn exact_lingauss() -> (EnvSpec, SsmParams) {
    let lg = LinGaussSpec::noiseless_invertible();
    let cfg = SsmConfig { deter: 4, stoch: 2, hidden: 16, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
    let model = SsmParams::linear_gaussian_exact(&lg, &cfg, 0.05, 1.01e-3).unwrap();
    (EnvSpec::lin_gauss(lg), model)
}

#[test]
fn planning_recovers_true_actions_on_an_exact_linear_model() {
    let (spec, model) = exact_lingauss();
    let task = Task::Goal { goal: vec![0.6, -0.4] };
    let data = collect(&spec, &task, &mut Expert::new(&spec, &task, 0.05), 3, 11, "expert").unwrap();
    let before = param_hash(&model);
    let mut se = 0.0;
    let mut n = 0.0;
    for (i, traj) in data.trajectories().iter().enumerate() {
        let r = plan_actions(&model, traj.observations(), &PlanConfig::default(), i as u64).unwrap();
        for (a, b) in r.actions.data().iter().zip(traj.actions().data()) {
            se += (a - b).powi(2);
            n += 1.0;
        }
    }
    assert_eq!(param_hash(&model), before);
    let mse = se / n;
    assert!(mse <= 1e-3, "planning MSE {mse}");
}

#[test]
fn inverse_model_learns_a_constant_action() {
    let (spec, model) = exact_lingauss();
    let task = Task::Goal { goal: vec![0.0, 0.0] };
    struct Constant;
    impl aime_core::control::Controller for Constant {
        fn reset(&mut self, _: u64) {}
        fn act(&mut self, _: &[f64], _: &[f64]) -> aime_core::Result<Vec<f64>> {
            Ok(vec![0.3, -0.2])
        }
    }
    let data = collect(&spec, &task, &mut Constant, 4, 1, "constant").unwrap();
    let cfg = ImitationConfig {
        policy_hidden: 16,
        policy_layers: 1,
        idm: IdmConfig { epochs: 6, steps_per_epoch: 50, batch: 4, chunk_len: 10, lr: 3e-3 },
        ..ImitationConfig::default()
    };
    let before = param_hash(&model);
    let init = ActionHead::idm(&model.config, 16, 1, &mut aime_core::seeds::stream_rng(2, "init", 2));
    let ll_init = idm_log_likelihood(&model, &init, &data, 3).unwrap();
    let (idm, log) = train_idm_head(&model, &data, &cfg, 2).unwrap();
    assert_eq!(param_hash(&model), before);
    assert!(log.last().unwrap().log_likelihood > log[0].log_likelihood);
    assert!(idm_log_likelihood(&model, &idm, &data, 3).unwrap() > ll_init);
    let input = vec![0.1; idm.input_dim()];
    let a = idm.mode_value(&input).unwrap();
    assert!((a[0] - 0.3).abs() < 0.05 && (a[1] + 0.2).abs() < 0.05, "{a:?}");
}

#[test]
fn zero_policy_matches_the_no_op_reference() {
    let spec = EnvSpec::point_mass(ObsMode::Mdp);
    let cfg = SsmConfig { deter: 4, stoch: 2, hidden: 8, hidden_layers: 1, obs_dim: 4, action_dim: 2, ..SsmConfig::default() };
    let model = SsmParams::new(&cfg, &mut rng(1)).unwrap();
    let policy = ActionHead::policy(&cfg, 8, 1, &mut rng(2));
    let r = deploy_policy(&model, &policy, &spec, &Task::ReachEast, 50, 2024, false).unwrap();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    assert!((mean - NOOP_REACH_EAST).abs() < 1e-9, "{mean}");
    let noop = returns(&spec, &Task::ReachEast, &mut Zero(2), 50, 2024).unwrap();
    assert_eq!(r, noop);
    let again = deploy_policy(&model, &policy, &spec, &Task::ReachEast, 50, 2024, false).unwrap();
    assert_eq!(r, again);
}

#[test]
fn policy_checkpoint_round_trip() {
    let model = tiny_model(70);
    let policy = random_policy(&model, 71);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    policy.save(&path, "h").unwrap();
    let back = ActionHead::load(&path).unwrap();
    assert_eq!(param_hash(&policy), param_hash(&back));
    let input = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
    assert_eq!(policy.mode_value(&input).unwrap(), back.mode_value(&input).unwrap());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let model = tiny_model(80);
    let spec = EnvSpec::point_mass(ObsMode::Mdp);
    let policy = ActionHead::policy(&model.config, 4, 1, &mut rng(1));
    assert!(deploy_policy(&model, &policy, &spec, &Task::ReachEast, 1, 1, false).is_err());
    assert!(plan_actions(&model, &Array::zeros(&[3, 4]), &PlanConfig::default(), 1).is_err());
}
