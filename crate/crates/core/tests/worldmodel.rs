use aime_core::control::{episode_seed, Uniform};
use aime_core::datasets::{collect, EmbodimentDataset};
use aime_core::envs::{kalman_log_evidence, EnvSpec, LinGaussSpec, Task};
use aime_core::seeds::rng;
use aime_core::worldmodel::*;
use aime_diffcore::params::named_arrays;
use aime_diffcore::{grad_check, param_hash, Array, Module, Tape, Var, VarSet};

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

fn random_sequence(cfg: &SsmConfig, t: usize, b: usize, seed: u64) -> (Vec<Array>, Vec<Array>, Vec<Array>) {
    let mut r = rng(seed);
    let obs = (0..t).map(|_| Array::randn(&[b, cfg.obs_dim], &mut r)).collect();
    let act = (0..t).map(|_| Array::uniform(&[b, cfg.action_dim], -1.0, 1.0, &mut r)).collect();
    let noise = noise_stream(t, b, cfg.stoch, &mut r);
    (obs, act, noise)
}

fn elbo_value(params: &SsmParams, obs: &[Array], act: &[Array], noise: &[Array], opts: &ElboOptions, mask: ObjectiveMask) -> f64 {
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let o: Vec<Var> = obs.iter().map(|a| tape.constant(a.clone())).collect();
    let a: Vec<Var> = act.iter().map(|a| tape.constant(a.clone())).collect();
    let n: Vec<Var> = noise.iter().map(|a| tape.constant(a.clone())).collect();
    let beliefs = filter_sequence(&tape, &vars, &params.config, &o, &a, &n).unwrap();
    let rows = elbo_terms(&tape, &vars, &params.config, &beliefs, &o, opts).unwrap();
    tape.item(batch_mean(&tape, rows.masked(&tape, mask)))
}

fn check_elbo_gradient(cfg: &SsmConfig, opts: ElboOptions, seed: u64) {
    let params = SsmParams::new(cfg, &mut rng(seed)).unwrap();
    let (obs, act, noise) = random_sequence(cfg, 4, 3, seed + 1);
    let point: Vec<Array> = named_arrays(&params).into_iter().map(|(_, a)| a).collect();
    let report = grad_check(
        |t, v| {
            let mut vars = params.bind(t, false);
            vars.assign(&mut v.iter().copied());
            let o: Vec<Var> = obs.iter().map(|a| t.constant(a.clone())).collect();
            let a: Vec<Var> = act.iter().map(|a| t.constant(a.clone())).collect();
            let n: Vec<Var> = noise.iter().map(|a| t.constant(a.clone())).collect();
            let beliefs = filter_sequence(t, &vars, cfg, &o, &a, &n).map_err(to_diff)?;
            let rows = elbo_terms(t, &vars, cfg, &beliefs, &o, &opts).map_err(to_diff)?;
            Ok(batch_mean(t, rows.total(t)))
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

fn to_diff(e: aime_core::Error) -> aime_diffcore::Error {
    aime_diffcore::Error::Invalid(e.to_string())
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    check_elbo_gradient(&small(EncoderKind::Identity, DecoderVariance::Fixed), ElboOptions::plain(), 1);
}

#[test]
fn elbo_gradient_with_learned_variance_and_mlp_encoder() {
    let cfg = small(EncoderKind::Mlp, DecoderVariance::Learned);
    check_elbo_gradient(&cfg, ElboOptions::plain(), 2);
}

#[test]
fn scaled_objective_gradient_matches_finite_differences() {
    let cfg = small(EncoderKind::Identity, DecoderVariance::Learned);
    let opts = ElboOptions { kl_scale: 2.0, ..ElboOptions::plain() };
    check_elbo_gradient(&cfg, opts, 3);
}

fn prior_head_grads(params: &SsmParams, opts: &ElboOptions) -> Vec<f64> {
    let cfg = &params.config;
    let (obs, act, noise) = random_sequence(cfg, 4, 3, 21);
    let tape = Tape::new();
    let vars = params.bind(&tape, true);
    let o: Vec<Var> = obs.iter().map(|a| tape.constant(a.clone())).collect();
    let a: Vec<Var> = act.iter().map(|a| tape.constant(a.clone())).collect();
    let n: Vec<Var> = noise.iter().map(|a| tape.constant(a.clone())).collect();
    let beliefs = filter_sequence(&tape, &vars, cfg, &o, &a, &n).unwrap();
    let rows = elbo_terms(&tape, &vars, cfg, &beliefs, &o, opts).unwrap();
    let grads = tape.backward(batch_mean(&tape, rows.kl));
    let mut out = Vec::new();
    for layer in &vars.prior.layers {
        out.extend(grads.get_or_zeros(layer.w, tape.value(layer.w).len()));
    }
    out
}

#[test]
fn kl_balance_scales_the_prior_gradient() {
    let cfg = small(EncoderKind::Identity, DecoderVariance::Fixed);
    let params = SsmParams::new(&cfg, &mut rng(20)).unwrap();
    let plain = prior_head_grads(&params, &ElboOptions::plain());
    let alpha = 0.8;
    let balanced = prior_head_grads(&params, &ElboOptions { kl_balance: alpha, ..ElboOptions::plain() });
    assert!(plain.iter().any(|g| g.abs() > 1e-6));
    for (p, b) in plain.iter().zip(&balanced) {
        assert!((b - 2.0 * alpha * p).abs() < 1e-10 * p.abs().max(1.0));
    }
}

#[test]
fn full_objective_is_sum_of_masked_parts() {
    let cfg = small(EncoderKind::Mlp, DecoderVariance::Learned);
    let params = SsmParams::new(&cfg, &mut rng(5)).unwrap();
    let (obs, act, noise) = random_sequence(&cfg, 6, 4, 6);
    let opts = ElboOptions::plain();
    let full = elbo_value(&params, &obs, &act, &noise, &opts, ObjectiveMask::Full);
    let rec = elbo_value(&params, &obs, &act, &noise, &opts, ObjectiveMask::RecOnly);
    let kl = elbo_value(&params, &obs, &act, &noise, &opts, ObjectiveMask::KlOnly);
    assert!((full - rec - kl).abs() <= 1e-10 * full.abs().max(1.0));
    assert!(kl <= 0.0);
}

#[test]
fn kl_balance_preserves_the_value() {
    let cfg = small(EncoderKind::Identity, DecoderVariance::Fixed);
    let params = SsmParams::new(&cfg, &mut rng(7)).unwrap();
    let (obs, act, noise) = random_sequence(&cfg, 5, 2, 8);
    let plain = elbo_value(&params, &obs, &act, &noise, &ElboOptions::plain(), ObjectiveMask::KlOnly);
    let balanced = ElboOptions { kl_balance: 0.8, ..ElboOptions::plain() };
    let b = elbo_value(&params, &obs, &act, &noise, &balanced, ObjectiveMask::KlOnly);
    assert!((plain - b).abs() < 1e-10);
}

#[test]
fn free_nats_floor_each_step() {
    let cfg = small(EncoderKind::Identity, DecoderVariance::Fixed);
    let params = SsmParams::new(&cfg, &mut rng(9)).unwrap();
    let (obs, act, noise) = random_sequence(&cfg, 5, 2, 10);
    let free = ElboOptions { free_nats: 1e6, ..ElboOptions::plain() };
    let kl = elbo_value(&params, &obs, &act, &noise, &free, ObjectiveMask::KlOnly);
    assert!((kl + 5.0 * 1e6).abs() < 1e-6);
    let plain = elbo_value(&params, &obs, &act, &noise, &ElboOptions::plain(), ObjectiveMask::KlOnly);
    let tiny = ElboOptions { free_nats: 1e-12, ..ElboOptions::plain() };
    let kl_tiny = elbo_value(&params, &obs, &act, &noise, &tiny, ObjectiveMask::KlOnly);
    assert!((plain - kl_tiny).abs() < 1e-9);
}

#[test]
fn zero_beta_nll_is_plain_reconstruction() {
    let cfg = small(EncoderKind::Identity, DecoderVariance::Learned);
    let params = SsmParams::new(&cfg, &mut rng(11)).unwrap();
    let (obs, act, noise) = random_sequence(&cfg, 4, 3, 12);
    let a = elbo_value(&params, &obs, &act, &noise, &ElboOptions::plain(), ObjectiveMask::Full);
    let opts = ElboOptions { beta_nll: 0.0, ..ElboOptions::from_config(&cfg) };
    let b = elbo_value(&params, &obs, &act, &noise, &opts, ObjectiveMask::Full);
    assert_eq!(a, b);
}

#[test]
fn parameter_names_split_inference_and_generative() {
    let cfg = small(EncoderKind::Mlp, DecoderVariance::Learned);
    let params = SsmParams::new(&cfg, &mut rng(1)).unwrap();
    let names: Vec<String> = named_arrays(&params).into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().all(|n| n.starts_with("phi.") || n.starts_with("theta.")));
    assert!(names.iter().any(|n| n.starts_with("phi.encoder")));
    assert!(names.iter().any(|n| n.starts_with("theta.gru")));
    assert!(names.iter().filter(|n| SsmParams::is_inference_param(n)).count() > 0);
}

#[test]
fn checkpoint_round_trip_preserves_hash() {
    let cfg = small(EncoderKind::Mlp, DecoderVariance::Learned);
    let params = SsmParams::new(&cfg, &mut rng(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    params.save(&path, "cfg").unwrap();
    let back = SsmParams::load(&path).unwrap();
    assert_eq!(param_hash(&params), param_hash(&back));
    assert_eq!(back.config, cfg);
}

#[test]
fn exact_injection_reproduces_linear_dynamics() {
    let spec = LinGaussSpec::noiseless_invertible();
    let cfg = SsmConfig { deter: 4, stoch: 2, hidden: 16, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
    let params = SsmParams::linear_gaussian_exact(&spec, &cfg, 0.05, 1.01e-3).unwrap();
    let a = spec.a_matrix();
    let b = spec.b_matrix();
    let c = spec.c_matrix();
    let mut r = rng(3);
    let x = [0.3, -0.2];
    let s_prev = Array::row(&x);
    let act = Array::uniform(&[1, 2], -1.0, 1.0, &mut r);
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let prev = Belief { h: tape.zeros(&[1, 4]), s: tape.constant(s_prev) };
    let (h, prior) = prior_step(&tape, &vars, &cfg, &prev, tape.constant(act.clone())).unwrap();
    let next: Vec<f64> = (0..2)
        .map(|i| (0..2).map(|j| a[(i, j)] * x[j] + b[(i, j)] * act.data()[j]).sum())
        .collect();
    let mean = tape.value(prior.mean).clone();
    for i in 0..2 {
        assert!((mean.data()[i] - next[i]).abs() < 1e-6, "{:?} vs {next:?}", mean.data());
    }
    let obs: Vec<f64> = (0..2).map(|i| (0..2).map(|j| c[(i, j)] * next[j]).sum()).collect();
    let step = posterior_step(&tape, &vars, &cfg, &prev, tape.constant(act), tape.constant(Array::row(&obs)), tape.zeros(&[1, 2])).unwrap();
    let post = tape.value(step.posterior.mean).clone();
    for i in 0..2 {
        assert!((post.data()[i] - next[i]).abs() < 1e-9);
    }
    let dec = decode(&tape, &vars, &cfg, h, step.s).unwrap();
    assert!(tape.value(dec.mean).max_abs_diff(&Array::row(&obs)) < 1e-9);
}

fn lingauss_data(episodes: usize, seed: u64) -> EmbodimentDataset {
    let spec = EnvSpec::lin_gauss(LinGaussSpec::oracle_2d());
    let task = Task::Goal { goal: vec![0.5, -0.5] };
    // Actions must not depend on the hidden state, or the data carry
    // information the exact evidence does not condition on.
    let mut ctrl = Uniform::new(2);
    collect(&spec, &task, &mut ctrl, episodes, seed, "uniform").unwrap()
}

#[test]
fn short_training_improves_the_bound_and_respects_the_evidence() {
    let spec = LinGaussSpec::oracle_2d();
    let data = lingauss_data(40, 1);
    let cfg = SsmConfig { deter: 16, stoch: 2, hidden: 32, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
    let train = TrainConfig { epochs: 4, steps_per_epoch: 40, batch: 8, chunk_len: 30, lr: 3e-3, clip_norm: Some(100.0) };
    let (params, log) = train_world_model(&data, &cfg, &train, 3).unwrap();
    assert!(log.last().unwrap().j > log[0].j, "{log:?}");
    let held = lingauss_data(3, 99);
    let mut r = rng(episode_seed(5, 0));
    for traj in held.trajectories() {
        let samples = elbo_samples(&params, traj.observations(), traj.actions(), 256, &mut r).unwrap();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let evidence = kalman_log_evidence(&spec, traj.observations(), traj.actions()).unwrap();
        assert!(mean < evidence, "ELBO {mean} above evidence {evidence}");
    }
}

#[test]
fn training_is_deterministic() {
    let data = lingauss_data(5, 2);
    let cfg = SsmConfig { deter: 4, stoch: 2, hidden: 8, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
    let train = TrainConfig { epochs: 2, steps_per_epoch: 3, batch: 2, chunk_len: 10, ..TrainConfig::default() };
    let (a, la) = train_world_model(&data, &cfg, &train, 8).unwrap();
    let (b, lb) = train_world_model(&data, &cfg, &train, 8).unwrap();
    assert_eq!(param_hash(&a), param_hash(&b));
    assert_eq!(la, lb);
}

#[test]
fn online_filter_matches_tape_filter() {
    let cfg = small(EncoderKind::Mlp, DecoderVariance::Learned);
    let params = SsmParams::new(&cfg, &mut rng(12)).unwrap();
    let (obs, act, _) = random_sequence(&cfg, 5, 1, 13);
    let zeros: Vec<Array> = (0..5).map(|_| Array::zeros(&[1, cfg.stoch])).collect();
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let o: Vec<Var> = obs.iter().map(|a| tape.constant(a.clone())).collect();
    let a: Vec<Var> = act.iter().map(|a| tape.constant(a.clone())).collect();
    let n: Vec<Var> = zeros.iter().map(|a| tape.constant(a.clone())).collect();
    let beliefs = filter_sequence(&tape, &vars, &cfg, &o, &a, &n).unwrap();
    let mut f = OnlineFilter::new(&cfg);
    for t in 0..5 {
        f.update(&params, act[t].data(), obs[t].data(), None).unwrap();
    }
    assert_eq!(f.h, *tape.value(beliefs[4].h));
    assert_eq!(f.s, *tape.value(beliefs[4].s));
}

#[test]
fn zero_epochs_return_the_initialisation() {
    let data = lingauss_data(3, 4);
    let cfg = SsmConfig { deter: 4, stoch: 2, hidden: 8, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
    let train = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let (p, log) = train_world_model(&data, &cfg, &train, 5).unwrap();
    let init = SsmParams::new(&cfg, &mut aime_core::seeds::stream_rng(5, "init", 0)).unwrap();
    assert_eq!(param_hash(&p), param_hash(&init));
    assert!(log.is_empty());
}

#[test]
fn zero_parameters_give_a_standard_prior() {
    let cfg = small(EncoderKind::Identity, DecoderVariance::Fixed);
    let params = SsmParams::zeros(&cfg).unwrap();
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let prev = Belief::zero(&tape, &cfg, 2);
    let (_, prior) = prior_step(&tape, &vars, &cfg, &prev, tape.constant(Array::full(&[2, 2], 0.3))).unwrap();
    assert!(tape.value(prior.mean).data().iter().all(|&m| m == 0.0));
    let expected = 2f64.ln() + aime_diffcore::STD_FLOOR;
    assert!(tape.value(prior.std).data().iter().all(|&s| (s - expected).abs() < 1e-15));
}

#[test]
fn posterior_equal_to_prior_has_no_kl() {
    let cfg = small(EncoderKind::Identity, DecoderVariance::Fixed);
    let mut params = SsmParams::new(&cfg, &mut rng(30)).unwrap();
    // Copy the prior head into the posterior head, ignoring the feature rows.
    let mut post = params.prior.clone();
    let first = &params.prior.layers[0];
    let mut w = Array::zeros(&[cfg.deter + cfg.features(), first.w.cols()]);
    for i in 0..cfg.deter {
        for j in 0..first.w.cols() {
            w.set2(i, j, first.w.get2(i, j));
        }
    }
    post.layers[0].w = w;
    params.posterior = post;
    let (obs, act, noise) = random_sequence(&cfg, 5, 3, 31);
    let kl = elbo_value(&params, &obs, &act, &noise, &ElboOptions::plain(), ObjectiveMask::KlOnly);
    assert!(kl.abs() < 1e-12, "{kl}");
    let full = elbo_value(&params, &obs, &act, &noise, &ElboOptions::plain(), ObjectiveMask::Full);
    let rec = elbo_value(&params, &obs, &act, &noise, &ElboOptions::plain(), ObjectiveMask::RecOnly);
    assert!((full - rec).abs() < 1e-12);
}

#[test]
fn beliefs_depend_on_action_order() {
    let cfg = small(EncoderKind::Identity, DecoderVariance::Fixed);
    let params = SsmParams::new(&cfg, &mut rng(32)).unwrap();
    let (obs, mut act, noise) = random_sequence(&cfg, 4, 1, 33);
    let last_h = |act: &[Array]| {
        let tape = Tape::new();
        let vars = params.bind(&tape, false);
        let o: Vec<Var> = obs.iter().map(|a| tape.constant(a.clone())).collect();
        let a: Vec<Var> = act.iter().map(|a| tape.constant(a.clone())).collect();
        let n: Vec<Var> = noise.iter().map(|a| tape.constant(a.clone())).collect();
        let b = filter_sequence(&tape, &vars, &cfg, &o, &a, &n).unwrap();
        let h = tape.value(b[3].h).clone();
        h
    };
    let before = last_h(&act);
    act.swap(0, 2);
    assert!(last_h(&act).max_abs_diff(&before) > 1e-6);
}

#[test]
fn single_step_filter_is_one_posterior_step() {
    let cfg = small(EncoderKind::Mlp, DecoderVariance::Fixed);
    let params = SsmParams::new(&cfg, &mut rng(34)).unwrap();
    let (obs, act, noise) = random_sequence(&cfg, 1, 2, 35);
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let (o, a, n) = (tape.constant(obs[0].clone()), tape.constant(act[0].clone()), tape.constant(noise[0].clone()));
    let b = filter_sequence(&tape, &vars, &cfg, &[o], &[a], &[n]).unwrap();
    let feat = encode(&tape, &vars, &cfg, o).unwrap();
    let step = posterior_step(&tape, &vars, &cfg, &Belief::zero(&tape, &cfg, 2), a, feat, n).unwrap();
    assert_eq!(*tape.value(b[0].s), *tape.value(step.s));
}

#[test]
fn identity_encoder_passes_observations_through() {
    let cfg = small(EncoderKind::Identity, DecoderVariance::Fixed);
    let params = SsmParams::zeros(&cfg).unwrap();
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let o = tape.param(Array::row(&[0.5, -2.0]));
    let z = encode(&tape, &vars, &cfg, o).unwrap();
    assert_eq!(*tape.value(z), Array::row(&[0.5, -2.0]));
    let g = tape.backward(tape.sum(z));
    assert_eq!(g.get(o).unwrap(), &[1.0, 1.0]);
}

#[test]
fn mismatched_sequence_lengths_are_rejected() {
    let cfg = small(EncoderKind::Identity, DecoderVariance::Fixed);
    let params = SsmParams::zeros(&cfg).unwrap();
    let (obs, act, noise) = random_sequence(&cfg, 3, 1, 36);
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let o: Vec<Var> = obs.iter().map(|a| tape.constant(a.clone())).collect();
    let a: Vec<Var> = act[..2].iter().map(|a| tape.constant(a.clone())).collect();
    let n: Vec<Var> = noise.iter().map(|a| tape.constant(a.clone())).collect();
    assert!(filter_sequence(&tape, &vars, &cfg, &o, &a, &n).is_err());
}

#[test]
fn evidence_gap_shrinks_across_checkpoints() {
    let spec = LinGaussSpec::oracle_2d();
    let data = lingauss_data(40, 6);
    let held = lingauss_data(4, 60);
    let cfg = SsmConfig { deter: 16, stoch: 2, hidden: 32, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
    let train = TrainConfig { epochs: 10, steps_per_epoch: 40, batch: 8, chunk_len: 30, lr: 5e-4, clip_norm: Some(100.0) };
    let evidence: Vec<f64> = held
        .trajectories()
        .iter()
        .map(|t| kalman_log_evidence(&spec, t.observations(), t.actions()).unwrap())
        .collect();
    let mut trainer = WorldModelTrainer::new(SsmParams::new(&cfg, &mut rng(7)).unwrap(), train, 100);
    let mut gaps = Vec::new();
    for _ in 0..10 {
        trainer.epoch(&data).unwrap();
        let params = &trainer.params;
        let mut r = rng(77);
        let mut gap = 0.0;
        for (traj, ev) in held.trajectories().iter().zip(&evidence) {
            let s = elbo_samples(params, traj.observations(), traj.actions(), 64, &mut r).unwrap();
            gap += ev - s.iter().sum::<f64>() / s.len() as f64;
        }
        gaps.push(gap / evidence.len() as f64);
    }
    let violations = gaps.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(violations <= 1, "gaps {gaps:?}");
}
