use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aime_core::datasets::{self, strip_actions, Dataset};
use aime_core::envs::Task;
use aime_core::experiment::{
    run_ablations, run_demo_sweep, run_pipeline, run_transfer_matrix, source_label, write_json, ExperimentConfig, Lab,
    Method, PipelineReport,
};
use aime_core::gradcheck::gradcheck_suite;
use aime_core::imitation::{aime_phase2, plan_labels};
use aime_core::worldmodel::SsmParams;
use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

/// Action inference by maximising evidence: experiment runner.
#[derive(Parser, Debug)]
#[command(name = "aime", version)]
struct Cli {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config field, e.g. `--set phase1.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output root.
    #[arg(long, env = "AIME_OUTPUT_ROOT", default_value = "runs", global = true)]
    out: PathBuf,

    /// Maximum number of cells run in parallel.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Role {
    Embodiment,
    Demo,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect and save the embodiment and demonstration datasets.
    Collect {
        #[arg(long, value_enum, default_value = "both")]
        role: Role,
    },
    /// Phase 1: train the world model and save a checkpoint per seed.
    TrainModel,
    /// Phase 2: train a policy against a saved world model.
    Imitate {
        /// Checkpoint to use; defaults to the one written by `train-model`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Infer demonstration actions by per-sequence planning.
    Plan {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run a comparison method end to end.
    Baseline {
        #[arg(long, value_parser = ["bco", "bc-oracle", "iidm"])]
        method: String,
    },
    /// Run the configured method end to end and write the report.
    Evaluate,
    /// Transfer matrix over embodiment datasets and demonstration tasks.
    Matrix {
        /// Rows separated by `;`, tasks of a mix dataset joined by `+`.
        #[arg(long, default_value = "reach_east;reach_north;orbit;reach_east+reach_north+orbit")]
        rows: String,
        /// Columns separated by `,`.
        #[arg(long, default_value = "reach_east,reach_north,orbit")]
        cols: String,
    },
    /// Demonstration-count sweep.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "2,5,10,20,50")]
        counts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "aime,bco,bc-oracle")]
        methods: Vec<String>,
    },
    /// Objective and component ablations on the configured setting.
    Ablate,
    /// Run every registered gradient check.
    Gradcheck,
    /// Print the summaries found under a directory.
    Report {
        #[arg(default_value = ".")]
        dir: PathBuf,
    },
}

enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<aime_core::Error> for Failure {
    fn from(e: aime_core::Error) -> Self {
        Failure::Stage(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Stage(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Stage(e)
    }
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(config_error)?,
        None => ExperimentConfig::default(),
    };
    base.with_overrides(&cli.overrides).and_then(|c| c.resolved()).map_err(config_error)
}

fn run_dir(cli: &Cli, cfg: &ExperimentConfig, kind: &str) -> PathBuf {
    let name: String = cfg.name.chars().map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    cli.out.join(format!("{name}-{}", &cfg.hash()[..12])).join(kind)
}

fn model_path(cli: &Cli, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    run_dir(cli, cfg, "models").join(format!("world_model_seed{seed}.ckpt"))
}

fn finish(report: &PipelineReport, dir: &Path) -> Result<(), Failure> {
    report.write(dir)?;
    println!("{} [{}]: normalized {:?} -> {}", report.method, &report.config_hash[..12], report.normalized_mean, dir.display());
    if report.is_complete() {
        Ok(())
    } else {
        Err(Failure::Stage(anyhow!("pipeline stopped early: {:?}", report.status)))
    }
}

fn parse_tasks(list: &str, sep: char) -> Result<Vec<Task>, Failure> {
    list.split(sep).filter(|s| !s.is_empty()).map(|s| Task::parse(s.trim()).map_err(config_error)).collect()
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Gradcheck = cli.command {
        let rows = gradcheck_suite();
        for r in &rows {
            println!("{:<48} {:>12.3e} <= {:.0e} {}", r.name, r.max_rel_error, r.tolerance, if r.passed { "ok" } else { "FAIL" });
        }
        return if rows.iter().all(|r| r.passed) { Ok(()) } else { Err(Failure::Stage(anyhow!("gradient checks failed"))) };
    }
    if let Command::Report { dir } = &cli.command {
        return report(dir);
    }
    let cfg = load_config(&cli)?;
    let lab = Lab::new();
    match &cli.command {
        Command::Collect { role } => {
            let dir = run_dir(&cli, &cfg, "data");
            if matches!(role, Role::Embodiment | Role::Both) {
                let emb = lab.embodiment(&cfg)?;
                datasets::save(&Dataset::Embodiment((*emb).clone()), &dir.join("embodiment"))?;
                println!("embodiment: {} trajectories", emb.len());
            }
            if matches!(role, Role::Demo | Role::Both) {
                let demos = strip_actions(lab.demonstrations(&cfg)?.as_ref());
                datasets::save(&Dataset::Demonstration(demos.clone()), &dir.join("demonstrations"))?;
                println!("demonstrations: {} trajectories", demos.len());
            }
            println!("{}", dir.display());
        }
        Command::TrainModel => {
            for &seed in &cfg.seeds {
                let wm = lab.world_model(&cfg, seed)?;
                let path = model_path(&cli, &cfg, seed);
                std::fs::create_dir_all(path.parent().expect("model dir"))?;
                wm.0.save(&path, &cfg.hash())?;
                write_json(&path.with_extension("log.json"), &wm.1)?;
                let last = wm.1.last();
                println!("seed {seed}: J {:?} -> {}", last.map(|l| l.j), path.display());
            }
        }
        Command::Imitate { model } => {
            let truth = lab.demonstrations(&cfg)?;
            let demos = strip_actions(&truth);
            for &seed in &cfg.seeds {
                let path = model.clone().unwrap_or_else(|| model_path(&cli, &cfg, seed));
                let wm = SsmParams::load(&path).with_context(|| format!("loading {}; run train-model first", path.display()))?;
                let (policy, log) = aime_phase2(&wm, &demos, &cfg.imitation, seed, Some(&truth))?;
                let out = run_dir(&cli, &cfg, "policies").join(format!("policy_seed{seed}.ckpt"));
                std::fs::create_dir_all(out.parent().expect("policy dir"))?;
                policy.save(&out, &cfg.hash())?;
                write_json(&out.with_extension("log.json"), &log)?;
                println!("seed {seed}: J {:?} action MSE {:?} -> {}", log.last().map(|l| l.j), log.last().and_then(|l| l.action_mse), out.display());
            }
        }
        Command::Plan { model } => {
            let truth = lab.demonstrations(&cfg)?;
            let demos = strip_actions(&truth);
            for &seed in &cfg.seeds {
                let path = model.clone().unwrap_or_else(|| model_path(&cli, &cfg, seed));
                let wm = SsmParams::load(&path).with_context(|| format!("loading {}; run train-model first", path.display()))?;
                let plans = plan_labels(&wm, &demos, &cfg.imitation.plan, seed)?;
                let (mut se, mut n) = (0.0, 0usize);
                for (p, t) in plans.iter().zip(truth.trajectories()) {
                    se += p.actions.data().iter().zip(t.actions().data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    n += p.actions.len();
                }
                let out = run_dir(&cli, &cfg, "plans").join(format!("plans_seed{seed}.json"));
                std::fs::create_dir_all(out.parent().expect("plan dir"))?;
                write_json(&out, &plans)?;
                println!("seed {seed}: action MSE {:.6} -> {}", se / n.max(1) as f64, out.display());
            }
        }
        Command::Baseline { method } => {
            let mut c = cfg.clone();
            c.method = Method::parse(method).map_err(config_error)?;
            let report = run_pipeline(&c, &lab).map_err(config_error)?;
            finish(&report, &run_dir(&cli, &c, &report.method))?;
        }
        Command::Evaluate => {
            let report = run_pipeline(&cfg, &lab).map_err(config_error)?;
            finish(&report, &run_dir(&cli, &cfg, &report.method))?;
        }
        Command::Matrix { rows, cols } => {
            let rows: Vec<Vec<Task>> = rows.split(';').map(|r| parse_tasks(r, '+')).collect::<Result<_, _>>()?;
            let cols = parse_tasks(cols, ',')?;
            let m = run_transfer_matrix(&cfg, &rows, &cols, &lab, cli.jobs).map_err(config_error)?;
            let dir = run_dir(&cli, &cfg, "matrix");
            std::fs::create_dir_all(&dir)?;
            write_json(&dir.join("summary.json"), &m)?;
            print!("{:<28}", "");
            for c in &m.col_labels {
                print!("{c:>14}");
            }
            println!("{:>14}", "mean");
            for (i, r) in rows.iter().enumerate() {
                print!("{:<28}", source_label(r));
                for v in m.cells[i].iter().chain([&m.row_means[i]]) {
                    print!("{:>14}", fmt(*v));
                }
                println!();
            }
            print!("{:<28}", "mean");
            for v in &m.col_means {
                print!("{:>14}", fmt(*v));
            }
            println!();
            if !m.is_complete() {
                return Err(Failure::Stage(anyhow!("some cells failed")));
            }
        }
        Command::Sweep { counts, methods } => {
            let methods = methods.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>, _>>().map_err(config_error)?;
            let s = run_demo_sweep(&cfg, counts, &methods, &lab, cli.jobs).map_err(config_error)?;
            let dir = run_dir(&cli, &cfg, "sweep");
            std::fs::create_dir_all(&dir)?;
            write_json(&dir.join("summary.json"), &s)?;
            for c in &s.cells {
                println!("{:>4} {:<10} {:>10} ± {}", c.count, c.method, fmt(c.mean), fmt(c.std));
            }
            if !s.is_complete() {
                return Err(Failure::Stage(anyhow!("some sweep cells failed")));
            }
        }
        Command::Ablate => {
            let a = run_ablations(&cfg, &lab, cli.jobs).map_err(config_error)?;
            let dir = run_dir(&cli, &cfg, "ablations");
            std::fs::create_dir_all(&dir)?;
            write_json(&dir.join("summary.json"), &a)?;
            for (i, v) in a.variants.iter().enumerate() {
                println!("{v:<10} {:>10} ± {}", fmt(a.means[i]), fmt(a.stds[i]));
            }
            if !a.is_complete() {
                return Err(Failure::Stage(anyhow!("some variants failed")));
            }
        }
        Command::Gradcheck | Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into())
}

fn report(dir: &Path) -> Result<(), Failure> {
    let mut found = Vec::new();
    collect_summaries(dir, &mut found)?;
    found.sort();
    if found.is_empty() {
        return Err(Failure::Stage(anyhow!("no summary.json under {}", dir.display())));
    }
    for path in found {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path)?).context("parsing summary")?;
        let label = v.get("method").and_then(|m| m.as_str()).unwrap_or("study");
        let score = v.get("normalized_mean").and_then(|m| m.as_f64());
        let state = v.pointer("/status/state").and_then(|s| s.as_str()).unwrap_or("-");
        println!("{:<60} {label:<10} {:>8} {state}", path.display(), fmt(score));
    }
    Ok(())
}

fn collect_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_summaries(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "summary.json") {
            out.push(p);
        }
    }
    Ok(())
}
