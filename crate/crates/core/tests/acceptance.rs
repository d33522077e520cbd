//! Acceptance harness: one pass/fail line per criterion. Contract criteria
//! fail the run. The ordering study is a statistical finding: its line is
//! reported as measured but does not change the exit status.

use std::time::Instant;

use aime_core::control::{Expert, Uniform};
use aime_core::datasets::{collect, load, read_manifest, save, strip_actions, Dataset, EmbodimentDataset};
use aime_core::envs::{kalman_log_evidence, EnvSpec, LinGaussSpec, ObsMode, Task};
use aime_core::experiment::{
    ordering_config, run_ablations, ExperimentConfig, run_demo_sweep, run_pipeline, smoke_config, Lab, Method, PipelineReport,
};
use aime_core::gradcheck::gradcheck_suite;
use aime_core::imitation::{
    aime_idm_phase2, aime_phase2, joint_kl_check, plan_actions, plan_labels, train_idm_head, ActionHead,
    ImitationConfig, PlanConfig, Variant,
};
use aime_core::seeds::{derive_seed, rng};
use aime_core::worldmodel::{elbo_samples, train_world_model, SsmConfig, SsmParams, TrainConfig};
use aime_diffcore::{param_hash, Array};

struct Line {
    id: usize,
    gating: bool,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn evidence_bound() -> Line {
    const SAMPLES: usize = 512;
    let start = Instant::now();
    let spec = LinGaussSpec::oracle_2d();
    let env = EnvSpec::lin_gauss(spec.clone());
    let task = Task::Goal { goal: vec![0.5, -0.5] };
    // Uniform actions keep the data independent of the hidden state.
    let train = collect(&env, &task, &mut Uniform::new(2), 200, 1, "uniform").unwrap();
    let held = collect(&env, &task, &mut Uniform::new(2), 50, 2, "uniform").unwrap();
    let cfg = SsmConfig { deter: 16, stoch: 2, hidden: 32, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
    let budget = TrainConfig { epochs: 30, steps_per_epoch: 100, batch: 16, chunk_len: 30, lr: 1e-3, clip_norm: Some(100.0) };
    let (params, _) = train_world_model(&train, &cfg, &budget, 0).unwrap();
    let mut r = rng(derive_seed(0, "acceptance/elbo", 0));
    let (mut violations, mut gaps, mut evidences) = (0, Vec::new(), Vec::new());
    for traj in held.trajectories() {
        let s = elbo_samples(&params, traj.observations(), traj.actions(), SAMPLES, &mut r).unwrap();
        let m = mean(&s);
        let se = (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (SAMPLES - 1) as f64).sqrt() / (SAMPLES as f64).sqrt();
        let ev = kalman_log_evidence(&spec, traj.observations(), traj.actions()).unwrap();
        if m > ev + 3.0 * se {
            violations += 1;
        }
        gaps.push(ev - m);
        evidences.push(ev);
    }
    let rel_gap = mean(&gaps) / mean(&evidences).abs();
    let elapsed = secs(start);
    Line {
        id: 1,
        gating: true,
        name: "evidence bound",
        passed: violations == 0 && elapsed <= 600.0,
        detail: format!(
            "violations {violations}/50, mean gap {:.3} nats = {:.1}% of |evidence| (soft target 15%: {}), {elapsed:.0}s",
            mean(&gaps),
            100.0 * rel_gap,
            if rel_gap <= 0.15 { "met" } else { "missed" }
        ),
    }
}

fn cancellation() -> Line {
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let seed = derive_seed(1, "acceptance/cancel", i);
        let len = 1 + (i as usize % 12);
        let batch = 1 + (i as usize % 3);
        let cfg = SsmConfig { deter: 4, stoch: 3, hidden: 6, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
        let model = SsmParams::new(&cfg, &mut rng(seed)).unwrap();
        let mut policy = ActionHead::policy(&cfg, 5, 1, &mut rng(seed + 1));
        let mut r = rng(seed + 2);
        for layer in &mut policy.net.layers {
            layer.w = Array::randn(&[layer.w.rows(), layer.w.cols()], &mut r).map(|v| 0.5 * v);
            layer.b = Array::randn(&[1, layer.b.cols()], &mut r).map(|v| 0.5 * v);
        }
        let obs: Vec<Array> = (0..len).map(|_| Array::randn(&[batch, 2], &mut r)).collect();
        let (joint, state) = joint_kl_check(&model, &policy, &obs, seed + 3).unwrap();
        worst = worst.max((joint - state).abs());
    }
    Line { id: 2, gating: true, name: "cancellation identity", passed: worst <= 1e-10, detail: format!("max |difference| {worst:.2e} over 100 instances") }
}

fn gradients() -> Line {
    let start = Instant::now();
    let rows = gradcheck_suite();
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = rows.iter().map(|r| r.max_rel_error / r.tolerance).fold(0.0, f64::max);
    let elapsed = secs(start);
    Line {
        id: 3,
        gating: true,
        name: "gradient suite",
        passed: failed.is_empty() && elapsed <= 120.0,
        detail: format!("{} checks, failed {failed:?}, worst error/tolerance {worst:.2e}, {elapsed:.1}s", rows.len()),
    }
}

fn action_recovery() -> Line {
    let start = Instant::now();
    let lg = LinGaussSpec::noiseless_invertible();
    let cfg = SsmConfig { deter: 4, stoch: 2, hidden: 16, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
    let model = SsmParams::linear_gaussian_exact(&lg, &cfg, 0.05, 1.01e-3).unwrap();
    let env = EnvSpec::lin_gauss(lg);
    let task = Task::Goal { goal: vec![0.6, -0.4] };
    let full = collect(&env, &task, &mut Expert::new(&env, &task, 0.05), 20, 11, "expert").unwrap();
    let demos = strip_actions(&full);
    let (mut se, mut n) = (0.0, 0.0);
    for (i, traj) in full.trajectories().iter().take(3).enumerate() {
        let r = plan_actions(&model, traj.observations(), &PlanConfig::default(), i as u64).unwrap();
        for (a, b) in r.actions.data().iter().zip(traj.actions().data()) {
            se += (a - b).powi(2);
            n += 1.0;
        }
    }
    let plan_mse = se / n;
    let icfg = ImitationConfig { epochs: 20, steps_per_epoch: 50, lr: 3e-3, policy_hidden: 32, policy_layers: 2, ..ImitationConfig::default() };
    let (_, log) = aime_phase2(&model, &demos, &icfg, 0, Some(&full)).unwrap();
    let amortized = log.last().and_then(|l| l.action_mse).unwrap_or(f64::INFINITY);
    let elapsed = secs(start);
    Line {
        id: 4,
        gating: true,
        name: "action recovery",
        passed: plan_mse <= 1e-3 && amortized <= 1e-2 && elapsed <= 600.0,
        detail: format!("planning MSE {plan_mse:.2e} (≤1e-3), amortized MSE {amortized:.2e} (≤1e-2), {elapsed:.0}s"),
    }
}

fn orderings() -> (Line, Vec<PipelineReport>) {
    let start = Instant::now();
    let lab = Lab::new();
    let base = ordering_config();
    let counts = [2, 5, 10, 20, 50];
    let sweep = run_demo_sweep(&base, &counts, &[Method::Aime, Method::Bco], &lab, 1).unwrap();
    let ablation_base = ExperimentConfig { demo_count: 5, ..base.clone() };
    let ablations = run_ablations(&ablation_base, &lab, 1).unwrap();
    let get = |c: usize, m: &str| sweep.mean(c, m).unwrap_or(f64::NAN);
    let aime: Vec<f64> = counts.iter().map(|&c| get(c, "aime")).collect();
    let bco: Vec<f64> = counts.iter().map(|&c| get(c, "bco")).collect();
    let a = (0..2).all(|i| aime[i] > 0.0 && aime[i] >= bco[i]);
    let violations = aime.windows(2).filter(|w| !(w[1] >= w[0])).count();
    let b = violations <= 1;
    let ab = |v: &str| ablations.mean(v).unwrap_or(f64::NAN);
    let c = ab("aime") >= ab("rec-only") && ab("aime") >= ab("kl-only");
    let d = ab("iidm") < ab("aime");
    let elapsed = secs(start);
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join("/");
    let detail = format!(
        "(a) {} aime {} vs bco {} at 2/5/10/20/50; (b) {} {violations} drop(s); (c) {} full {:.1} rec-only {:.1} kl-only {:.1}; \
         (d) {} iidm {:.1}; aime-idm {:.1}, bco {:.1}; {:.0}s",
        ok(a),
        fmt(&aime),
        fmt(&bco),
        ok(b),
        ok(c),
        ab("aime"),
        ab("rec-only"),
        ab("kl-only"),
        ok(d),
        ab("iidm"),
        ab("aime-idm"),
        ab("bco"),
        elapsed
    );
    let complete = sweep.is_complete() && ablations.is_complete();
    let mut reports = ablations.reports.clone();
    reports.retain(|r| r.runs.iter().any(|s| s.frozen_ok.is_some()));
    (Line { id: 5, gating: false, name: "imitation orderings", passed: complete && a && b && c && d && elapsed <= 7200.0, detail }, reports)
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn frozen(pipeline_reports: &[PipelineReport]) -> Line {
    let env = EnvSpec::point_mass(ObsMode::Lpomdp);
    let task = Task::ReachEast;
    let emb = collect(&env, &task, &mut Uniform::new(2), 10, 3, "uniform").unwrap();
    let full = collect(&env, &task, &mut Expert::new(&env, &task, 0.0), 2, 4, "expert").unwrap();
    let demos = strip_actions(&full);
    let cfg = SsmConfig { deter: 8, stoch: 4, hidden: 16, hidden_layers: 1, obs_dim: 2, action_dim: 2, ..SsmConfig::default() };
    let (model, _) = train_world_model(&emb, &cfg, &TrainConfig { epochs: 2, steps_per_epoch: 5, ..TrainConfig::default() }, 0).unwrap();
    let icfg = ImitationConfig { epochs: 2, steps_per_epoch: 5, policy_hidden: 16, policy_layers: 1, ..ImitationConfig::default() };
    let before = param_hash(&model);
    let mut checks = Vec::new();
    aime_phase2(&model, &demos, &icfg, 1, None).unwrap();
    checks.push(("aime", param_hash(&model) == before));
    let (idm, _) = train_idm_head(&model, &emb, &icfg, 2).unwrap();
    aime_idm_phase2(&model, &idm, &demos, &icfg, 3, None).unwrap();
    checks.push(("aime-idm", param_hash(&model) == before));
    plan_labels(&model, &demos, &PlanConfig { iterations: 10, ..PlanConfig::default() }, 4).unwrap();
    checks.push(("plan", param_hash(&model) == before));
    let mut plan_cfg = smoke_config();
    plan_cfg.imitation.variant = Variant::Plan;
    plan_cfg.imitation.plan.iterations = 10;
    let report = run_pipeline(&plan_cfg, &Lab::new()).unwrap();
    let pipelines: Vec<bool> = pipeline_reports.iter().chain([&report]).flat_map(|r| r.runs.iter().filter_map(|s| s.frozen_ok)).collect();
    let passed = checks.iter().all(|c| c.1) && pipelines.iter().all(|&b| b) && !pipelines.is_empty();
    Line {
        id: 6,
        gating: true,
        name: "frozen model",
        passed,
        detail: format!(
            "direct {:?}; {} pipeline runs, {} unchanged",
            checks,
            pipelines.len(),
            pipelines.iter().filter(|&&b| b).count()
        ),
    }
}

fn reproducibility() -> Line {
    let dir = tempfile::tempdir().unwrap();
    let mut same = Vec::new();
    for method in [Method::Aime, Method::Bco, Method::Iidm] {
        let mut cfg = smoke_config();
        cfg.method = method;
        let a = dir.path().join(format!("{}-a", method.id()));
        let b = dir.path().join(format!("{}-b", method.id()));
        run_pipeline(&cfg, &Lab::new()).unwrap().write(&a).unwrap();
        run_pipeline(&cfg, &Lab::new()).unwrap().write(&b).unwrap();
        let x = std::fs::read(a.join("summary.json")).unwrap();
        let y = std::fs::read(b.join("summary.json")).unwrap();
        same.push((method.id(), x == y));
    }
    Line { id: 7, gating: true, name: "reproducibility", passed: same.iter().all(|s| s.1), detail: format!("byte-identical summary.json: {same:?}") }
}

fn integrity() -> Line {
    let env = EnvSpec::point_mass(ObsMode::Lpomdp);
    let ds: EmbodimentDataset = collect(&env, &Task::ReachEast, &mut Uniform::new(2), 100, 9, "uniform").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (emb_dir, demo_dir) = (dir.path().join("emb"), dir.path().join("demo"));
    save(&Dataset::Embodiment(ds.clone()), &emb_dir).unwrap();
    let round_trip = match load(&emb_dir).unwrap() {
        Dataset::Embodiment(back) => back.trajectories().iter().zip(ds.trajectories()).all(|(a, b)| {
            a.observations().to_le_bytes() == b.observations().to_le_bytes() && a.actions().to_le_bytes() == b.actions().to_le_bytes()
        }) && back.len() == ds.len(),
        Dataset::Demonstration(_) => false,
    };
    let demo = strip_actions(&ds);
    let stripped = demo
        .trajectories()
        .iter()
        .zip(ds.trajectories())
        .all(|(d, t)| d.observations().to_le_bytes() == t.observations().to_le_bytes());
    save(&Dataset::Demonstration(demo.clone()), &demo_dir).unwrap();
    let no_actions = read_manifest(&demo_dir).unwrap().action_dim.is_none()
        && std::fs::read_dir(&demo_dir).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().contains(".act."))
        && load(&demo_dir).unwrap() == Dataset::Demonstration(demo);
    Line {
        id: 8,
        gating: true,
        name: "dataset integrity",
        passed: round_trip && stripped && no_actions,
        detail: format!("round trip {round_trip}, action-free demos {no_actions}, stripped observations exact {stripped}"),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and friends probe test binaries; answer quietly.
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let report = |l: &Line| println!("[{}] {} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.id, l.name, l.detail);
    let mut lines = Vec::new();
    for f in [evidence_bound, cancellation, gradients, action_recovery] {
        lines.push(f());
        report(lines.last().unwrap());
    }
    let (l, reports) = orderings();
    report(&l);
    lines.push(l);
    for l in [frozen(&reports), reproducibility(), integrity()] {
        report(&l);
        lines.push(l);
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    println!("acceptance: {}/{} criteria passed, failed {failed:?}", lines.len() - failed.len(), lines.len());
    if lines.iter().any(|l| l.gating && !l.passed) {
        std::process::exit(1);
    }
}
