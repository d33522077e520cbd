use std::time::Instant;

use aime_core::envs::Task;
use aime_core::experiment::*;
use aime_core::imitation::Variant;
use aime_core::worldmodel::ObjectiveMask;

#[test]
fn config_round_trips_through_json_and_hashes_stably() {
    let cfg = ExperimentConfig::default();
    let text = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let mut other = cfg.clone();
    other.phase1.epochs += 1;
    assert_ne!(other.hash(), cfg.hash());
}

#[test]
fn partial_json_fills_defaults_and_unknown_keys_are_rejected() {
    let cfg: ExperimentConfig = serde_json::from_str(r#"{"demo_count": 7, "phase1": {"epochs": 3}}"#).unwrap();
    assert_eq!(cfg.demo_count, 7);
    assert_eq!(cfg.phase1.epochs, 3);
    assert_eq!(cfg.phase1.steps_per_epoch, ExperimentConfig::default().phase1.steps_per_epoch);
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"demo_cuont": 7}"#).is_err());
}

#[test]
fn overrides_set_nested_scalars() {
    let cfg = ExperimentConfig::default()
        .with_overrides(&["phase1.epochs=7".into(), "method=bco".into(), "imitation.mask=kl-only".into()])
        .unwrap();
    assert_eq!(cfg.phase1.epochs, 7);
    assert_eq!(cfg.method, Method::Bco);
    assert_eq!(cfg.imitation.mask, ObjectiveMask::KlOnly);
    assert!(ExperimentConfig::default().with_overrides(&["phase1.epoch=7".into()]).is_err());
    assert!(ExperimentConfig::default().with_overrides(&["phase1=7".into()]).is_err());
    assert!(ExperimentConfig::default().with_overrides(&["demo_count=many".into()]).is_err());
}

#[test]
fn invalid_configs_fail_before_running() {
    let lab = Lab::new();
    let mut cfg = smoke_config();
    cfg.seeds.clear();
    assert!(run_pipeline(&cfg, &lab).is_err());
    let mut cfg = smoke_config();
    cfg.demo_task = Task::Goal { goal: vec![0.0, 0.0] };
    assert!(run_pipeline(&cfg, &lab).is_err());
}

#[test]
fn smoke_pipeline_is_fast_complete_and_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let first = run_pipeline(&smoke_config(), &Lab::new()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert!(first.is_complete(), "{:?}", first.status);
    first.write(&dir.path().join("a")).unwrap();
    let second = run_pipeline(&smoke_config(), &Lab::new()).unwrap();
    second.write(&dir.path().join("b")).unwrap();
    let a = std::fs::read(dir.path().join("a/summary.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/summary.json")).unwrap();
    assert_eq!(a, b);

    let run = &first.runs[0];
    assert!(run.normalized_return.is_finite());
    assert_eq!(run.frozen_ok, Some(true));
    for curve in ["world_model", "imitation"] {
        let c = &run.curves[curve];
        assert!(["j", "j_rec", "j_kl"].iter().all(|k| c.columns.iter().any(|col| col == k)));
        assert!(!c.rows.is_empty());
    }
    let csv = std::fs::read_to_string(dir.path().join("a/world_model_seed0.csv")).unwrap();
    assert!(csv.starts_with("epoch,j,j_rec,j_kl,grad_norm\n"));
    let json: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(json["config_hash"], smoke_config().resolved().unwrap().hash());
    assert_eq!(json["version"], ARTIFACT_VERSION);
    assert_eq!(json["seeds"], serde_json::json!([0]));
}

#[test]
fn stage_failure_yields_a_partial_report() {
    let mut cfg = smoke_config();
    cfg.imitation.chunk_len = 10_000;
    let report = run_pipeline(&cfg, &Lab::new()).unwrap();
    match &report.status {
        Status::Failed { stage, seed, .. } => {
            assert_eq!(stage, "phase2");
            assert_eq!(*seed, Some(0));
        }
        Status::Complete => panic!("expected a failure"),
    }
    assert!(report.references.is_some());
    assert!(report.runs.is_empty());
}

#[test]
fn single_cell_matrix_matches_the_pipeline() {
    let lab = Lab::new();
    let cfg = smoke_config();
    let m = run_transfer_matrix(&cfg, &[vec![Task::ReachEast]], &[Task::ReachEast], &lab, 1).unwrap();
    let p = run_pipeline(&cfg, &Lab::new()).unwrap();
    assert_eq!(m.cells, vec![vec![p.normalized_mean]]);
    assert_eq!(m.row_means, vec![p.normalized_mean]);
    assert_eq!(m.col_means, vec![p.normalized_mean]);
}

#[test]
fn matrix_averages_are_arithmetic_means_and_jobs_do_not_change_results() {
    let mut cfg = smoke_config();
    cfg.method = Method::BcOracle;
    let rows = vec![vec![Task::ReachEast], vec![Task::ReachNorth], vec![Task::ReachEast, Task::ReachNorth]];
    let cols = vec![Task::ReachEast, Task::ReachNorth];
    let m = run_transfer_matrix(&cfg, &rows, &cols, &Lab::new(), 1).unwrap();
    assert_eq!(m.row_labels[2], "reach_east+reach_north");
    for (i, row) in m.cells.iter().enumerate() {
        let expect = row.iter().map(|c| c.unwrap()).sum::<f64>() / row.len() as f64;
        assert!((m.row_means[i].unwrap() - expect).abs() < 1e-12);
    }
    for j in 0..cols.len() {
        let expect = m.cells.iter().map(|r| r[j].unwrap()).sum::<f64>() / rows.len() as f64;
        assert!((m.col_means[j].unwrap() - expect).abs() < 1e-12);
    }
    let parallel = run_transfer_matrix(&cfg, &rows, &cols, &Lab::new(), 3).unwrap();
    assert_eq!(serde_json::to_string(&parallel).unwrap(), serde_json::to_string(&m).unwrap());
}

#[test]
fn sweep_has_one_row_per_count_method_and_seed() {
    let mut cfg = smoke_config();
    cfg.seeds = vec![0, 1];
    let s = run_demo_sweep(&cfg, &[1, 2], &[Method::BcOracle, Method::Bco], &Lab::new(), 2).unwrap();
    assert_eq!(s.rows.len(), 2 * 2 * 2);
    assert_eq!(s.cells.len(), 4);
    assert_eq!(s.methods, vec!["bc-oracle", "bco"]);
    assert!(s.mean(2, "bco").is_some());
    assert!(run_demo_sweep(&cfg, &[2, 1], &[Method::Bco], &Lab::new(), 1).is_err());
}

#[test]
fn singleton_sweep_degenerates_to_one_pipeline_per_method() {
    let cfg = smoke_config();
    let s = run_demo_sweep(&cfg, &[cfg.demo_count], &[Method::BcOracle], &Lab::new(), 1).unwrap();
    let mut single = cfg.clone();
    single.method = Method::BcOracle;
    let p = run_pipeline(&single, &Lab::new()).unwrap();
    assert_eq!(s.mean(cfg.demo_count, "bc-oracle"), p.normalized_mean);
}

#[test]
fn ablation_schema_lists_all_six_variants() {
    let cfgs = ablation_configs(&smoke_config());
    let labels: Vec<String> = cfgs.iter().map(|c| c.label()).collect();
    assert_eq!(labels, ["aime", "rec-only", "kl-only", "aime-idm", "iidm", "bco"]);
    assert_eq!(cfgs[3].imitation.variant, Variant::AimeIdm);
}

#[test]
fn ablations_run_end_to_end_on_the_smoke_config() {
    let r = run_ablations(&smoke_config(), &Lab::new(), 1).unwrap();
    assert!(r.is_complete());
    assert_eq!(r.variants.len(), 6);
    assert!(r.means.iter().all(|m| m.is_some()));
    for rep in &r.reports {
        if let Some(ok) = rep.runs[0].frozen_ok {
            assert!(ok);
        }
    }
}

#[test]
fn plan_variant_reports_action_error_and_keeps_the_model_frozen() {
    let mut cfg = smoke_config();
    cfg.imitation.variant = Variant::Plan;
    cfg.imitation.plan.iterations = 20;
    let r = run_pipeline(&cfg, &Lab::new()).unwrap();
    assert!(r.is_complete(), "{:?}", r.status);
    assert_eq!(r.method, "plan");
    assert!(r.runs[0].action_mse.is_some());
    assert_eq!(r.runs[0].frozen_ok, Some(true));
}
