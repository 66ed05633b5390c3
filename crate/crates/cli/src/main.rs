use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use shortcutlab_cli::runner::{self, ExperimentOutcome};
use shortcutlab_cli::{preset, read_config, run_study, CellSpec, ConfigDocument, ExperimentConfig, Method, Study};
use shortcutlab_core::eval::BiasSweep;
use shortcutlab_core::trainer::run_dir;
use shortcutlab_core::verify::{gradcheck_suite, GRADCHECK_TOLERANCE};

#[derive(Parser)]
#[command(name = "shortcutlab", version, about = "Factor-representation experiments against shortcut learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and export datasets.
    Generate {
        #[command(flatten)]
        source: ConfigArgs,
        /// Also write this many target training images as PPM files.
        #[arg(long, default_value_t = 0)]
        dump_ppm: usize,
    },
    /// Train the configured cell/seed matrix on generated datasets.
    Train {
        #[command(flatten)]
        source: ConfigArgs,
        #[command(flatten)]
        cells: CellArgs,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate an experiment directory or a single run directory.
    Eval {
        dir: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Run a named study end to end: generate, train, evaluate, summarize.
    Preset {
        /// Preset name; omit when passing --config.
        name: Option<String>,
        /// Study or experiment document, e.g. an emitted study.json.
        #[arg(long, conflicts_with = "name")]
        config: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[command(flatten)]
        cells: CellArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        dump_ppm: usize,
    },
    /// Finite-difference check of every architecture's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CellArgs {
    /// Replace the configured cells with this method.
    #[arg(long)]
    method: Option<Method>,
    /// Source-loss weight for every cell.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Bias added to unseen-pair scores.
    #[arg(long, allow_hyphen_values = true)]
    bias: Option<f64>,
    /// Open-world bias sweep, `lo:hi:steps`.
    #[arg(long, allow_hyphen_values = true)]
    bias_sweep: Option<BiasSweep>,
    /// Probe z_a and z_o for attribute and object labels.
    #[arg(long)]
    crosspred: bool,
    /// Write each run's association as a PPM heatmap.
    #[arg(long)]
    assoc_heatmap: bool,
}

impl CellArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(m) = self.method {
            cfg.model.cells = vec![CellSpec::new(m)];
        }
        if let Some(l) = self.lambda {
            cfg.loss.lambda = l;
            for c in &mut cfg.model.cells {
                c.lambda = None;
            }
        }
    }
}

impl EvalArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(b) = self.bias {
            cfg.eval.bias = b;
        }
        if self.bias_sweep.is_some() {
            cfg.eval.bias_sweep = self.bias_sweep;
        }
        cfg.eval.crosspred |= self.crosspred;
        cfg.eval.assoc_heatmap |= self.assoc_heatmap;
    }
}

/// Experiments named by `--preset` or `--config`, placed below `--output-dir`.
fn experiments(args: &ConfigArgs) -> anyhow::Result<Vec<ExperimentConfig>> {
    let doc = match (&args.preset, &args.config) {
        (Some(name), _) => ConfigDocument::Study(preset(name)?),
        (None, Some(path)) => read_config(path)?,
        (None, None) => bail!("pass --preset NAME or --config FILE"),
    };
    let list = match doc {
        ConfigDocument::Study(mut study) => {
            if let Some(dir) = &args.output_dir {
                study.relocate(dir);
            }
            study.experiments.into_iter().map(|e| e.config).collect()
        }
        ConfigDocument::Experiment(mut cfg) => {
            if let Some(dir) = &args.output_dir {
                cfg.output_dir = dir.clone();
            }
            vec![*cfg]
        }
    };
    list.into_iter().map(|c| c.resolve().map_err(Into::into)).collect()
}

fn print_summary(out: &ExperimentOutcome) {
    for s in &out.summaries {
        let a = &s.aggregate;
        println!(
            "{:<24} seeds={} seen={:6.2}±{:<5.2} unseen={:6.2}±{:<5.2} hm={:6.2}±{:.2}",
            s.cell, a.seeds, a.seen.mean, a.seen.std, a.unseen.mean, a.unseen.std, a.hm.mean, a.hm.std
        );
    }
    for f in &out.failures {
        eprintln!("failed: {} seed {}: {}", f.cell, f.seed, f.error);
    }
}

fn generate(args: &ConfigArgs, dump_ppm: usize) -> anyhow::Result<bool> {
    for cfg in experiments(args)? {
        let data = runner::generate(&cfg, dump_ppm)?;
        for (role, manifest) in data.source.iter().map(|(_, m)| ("source", m)).chain([("target", &data.target.1)]) {
            println!(
                "{} {role}: digest {} train {} val {} test {} seen pairs {}",
                cfg.output_dir.display(),
                manifest.digest,
                manifest.counts.train,
                manifest.counts.val,
                manifest.counts.test,
                manifest.seen_pairs.len()
            );
        }
    }
    Ok(true)
}

fn train(args: &ConfigArgs, cells: &CellArgs, jobs: Option<usize>) -> anyhow::Result<bool> {
    let mut ok = true;
    for mut cfg in experiments(args)? {
        cells.apply(&mut cfg);
        let cfg = cfg.resolve()?;
        let data = runner::load_data(&cfg)?;
        let failures = runner::train(&cfg, &data, jobs.unwrap_or(cfg.train.jobs))?;
        for c in &cfg.model.cells {
            for &seed in &cfg.train.seeds {
                match failures.iter().find(|f| f.cell == c.label() && f.seed == seed) {
                    Some(f) => eprintln!("failed: {} seed {seed}: {}", f.cell, f.error),
                    None => println!("trained {}", run_dir(&cfg.output_dir, &c.label(), seed).display()),
                }
            }
        }
        ok &= failures.is_empty();
    }
    Ok(ok)
}

/// The experiment directory holding `dir`, which is either an experiment or a run.
fn experiment_root(dir: &Path) -> anyhow::Result<(PathBuf, Option<(String, u64)>)> {
    if dir.join("config.json").is_file() {
        return Ok((dir.to_path_buf(), None));
    }
    let seed: u64 = dir
        .file_name()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .with_context(|| format!("{} is neither an experiment nor a run directory", dir.display()))?;
    let cell_dir = dir.parent().context("run directory has no cell")?;
    let cell = cell_dir.file_name().and_then(|s| s.to_str()).context("bad cell directory")?.to_string();
    let root = cell_dir.parent().and_then(Path::parent).context("run directory outside an experiment")?;
    if !root.join("config.json").is_file() {
        bail!("no config.json above {}", dir.display());
    }
    Ok((root.to_path_buf(), Some((cell, seed))))
}

fn eval(dir: &Path, flags: &EvalArgs) -> anyhow::Result<bool> {
    let (root, run) = experiment_root(dir)?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(root.join("config.json"))?)?;
    cfg.output_dir = root;
    flags.apply(&mut cfg);
    let data = runner::load_data(&cfg)?;
    match run {
        Some((cell, seed)) => {
            let r = runner::evaluate_checkpoint(dir, &data, &cfg.eval, &cell, seed)?;
            println!("{cell} seed {seed}: seen={:.2} unseen={:.2} hm={:.2}", r.seen_acc, r.unseen_acc, r.hm_acc);
            if let Some(curve) = &r.bias_curve {
                println!(
                    "bias sweep over {} points: max seen={:.2} unseen={:.2} hm={:.2}",
                    curve.points.len(),
                    curve.max_seen,
                    curve.max_unseen,
                    curve.max_hm
                );
            }
            Ok(true)
        }
        None => {
            let out = runner::evaluate(&cfg, &data, Vec::new())?;
            print_summary(&out);
            Ok(out.complete())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_preset(
    name: Option<&str>,
    config: Option<&Path>,
    output_dir: Option<&Path>,
    cells: &CellArgs,
    flags: &EvalArgs,
    jobs: Option<usize>,
    dump_ppm: usize,
) -> anyhow::Result<bool> {
    let mut study = match (name, config) {
        (Some(name), _) => preset(name)?,
        (None, Some(path)) => match read_config(path)? {
            ConfigDocument::Study(s) => s,
            ConfigDocument::Experiment(cfg) => Study {
                name: "experiment".into(),
                summary: shortcutlab_cli::SummaryKind::Table,
                output_dir: cfg.output_dir.clone(),
                experiments: vec![shortcutlab_cli::presets::StudyExperiment {
                    label: "experiment".into(),
                    config: *cfg,
                }],
            },
        },
        (None, None) => bail!("pass a preset name or --config FILE; presets: {}", shortcutlab_cli::PRESETS.join(", ")),
    };
    if let Some(dir) = output_dir {
        study.relocate(dir);
    }
    for e in &mut study.experiments {
        cells.apply(&mut e.config);
        flags.apply(&mut e.config);
    }
    let jobs = jobs.unwrap_or_else(|| study.experiments.first().map_or(1, |e| e.config.train.jobs));
    let outcome = run_study(study, jobs, dump_ppm)?;
    for (label, out) in &outcome.experiments {
        println!("== {label} ({})", out.dir.display());
        print_summary(out);
    }
    println!("summary: {}", outcome.study.output_dir.join("summary.csv").display());
    Ok(outcome.complete())
}

fn gradcheck(seed: u64) -> anyhow::Result<bool> {
    let cases = gradcheck_suite(seed)?;
    for c in &cases {
        println!(
            "{} {:<24} checked={:<5} max_rel_err={:.2e} worst={} stop_grad_exact={}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name(),
            c.checked,
            c.max_relative_error,
            c.worst_tensor,
            c.stop_grad_exact
        );
    }
    println!("tolerance {GRADCHECK_TOLERANCE:e}");
    Ok(cases.iter().all(|c| c.passed()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { source, dump_ppm } => generate(source, *dump_ppm),
        Command::Train { source, cells, jobs } => train(source, cells, *jobs),
        Command::Eval { dir, eval: flags } => eval(dir, flags),
        Command::Preset { name, config, output_dir, cells, eval: flags, jobs, dump_ppm } => {
            run_preset(name.as_deref(), config.as_deref(), output_dir.as_deref(), cells, flags, *jobs, *dump_ppm)
        }
        Command::Gradcheck { seed } => gradcheck(*seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
