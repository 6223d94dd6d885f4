//! The `run`, `grid`, and `eval-only` commands: train a model from a config,
//! evaluate it on the test split, and write everything into a run directory.
//!
//! A run directory is named `<run_id>-<config hash>/` and contains the
//! resolved `config.toml`, `metrics.jsonl`, `checkpoints/`, `eval.json`, and
//! attention overlay plots. Existing directories are only reused when
//! resuming; `--force` deletes and starts over.

use anyhow::Context;
use clap::Parser;
use slotkit::config::ExperimentConfig;
use slotkit::scenegen::{load_dataset, Dataset};
use slotkit::trainer::{self, TrainSetup};
use slotkit::SlotError;
use std::fs;
use std::path::{Path, PathBuf};

use slotkit::evals::{self, EvalSummary};

#[derive(Parser)]
pub struct Args {
    /// Path to an experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted config overrides, e.g. --set train.epochs=3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset directory produced by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Root directory for run outputs (or set SLOTKIT_RUN_ROOT).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resume from the run directory's last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Delete an existing run directory and start fresh.
    #[arg(long)]
    pub force: bool,
}

#[derive(Parser)]
pub struct GridArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Axis to vary: KEY=V1,V2,... (repeatable; grid is the cross product).
    #[arg(long = "vary", value_name = "KEY=V1,V2,...")]
    pub vary: Vec<String>,
    /// Seeds to run each variant with.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Parser)]
pub struct EvalOnlyArgs {
    /// Existing run directory containing config.toml and checkpoints/.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file to evaluate (default: checkpoints/best.bin, falling
    /// back to checkpoints/last.bin).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

pub fn exec(args: Args) -> anyhow::Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let root = crate::run_root(args.out)?;
    let dataset = load_dataset(&args.data)?;
    let summary = run_one(&cfg, &dataset, &root, args.resume, args.force)?;
    print_summary(&summary);
    Ok(())
}

pub fn exec_grid(args: GridArgs) -> anyhow::Result<()> {
    let base = load_config(&args.config, &args.overrides)?;
    let root = crate::run_root(args.out)?;
    let dataset = load_dataset(&args.data)?;

    let axes: Vec<(String, Vec<String>)> = args
        .vary
        .iter()
        .map(|spec| {
            let (key, vals) = spec.split_once('=').ok_or_else(|| {
                SlotError::Config(format!("--vary expects KEY=V1,V2,... got '{spec}'"))
            })?;
            Ok((
                key.to_string(),
                vals.split(',').map(str::to_string).collect(),
            ))
        })
        .collect::<Result<_, SlotError>>()?;

    let mut variants: Vec<Vec<String>> = vec![Vec::new()];
    for (key, vals) in &axes {
        variants = variants
            .iter()
            .flat_map(|v| {
                vals.iter().map(move |val| {
                    let mut next = v.clone();
                    next.push(format!("{key}={val}"));
                    next
                })
            })
            .collect();
    }

    let total = variants.len() * args.seeds.len();
    let mut done = 0usize;
    for variant in &variants {
        for &seed in &args.seeds {
            let mut overrides = variant.clone();
            overrides.push(format!("seed={seed}"));
            overrides.push(format!("run_id={}", variant_run_id(&base.run_id, variant)));
            let cfg = base.with_overrides(&overrides)?;
            done += 1;
            println!(
                "[{done}/{total}] {} seed={seed} {}",
                cfg.run_id,
                variant.join(" ")
            );
            let summary = run_one(&cfg, &dataset, &root, false, args.force)?;
            print_summary(&summary);
        }
    }
    Ok(())
}

/// Distinct run id per grid variant so `report` groups seeds, not variants:
/// base id plus `<last key segment>-<value>` for each varied axis, reduced
/// to the characters run ids allow.
fn variant_run_id(base: &str, variant: &[String]) -> String {
    let mut id = base.to_string();
    for v in variant {
        let (key, val) = v.split_once('=').unwrap_or((v, ""));
        let leaf = key.rsplit('.').next().unwrap_or(key);
        id.push('-');
        for c in leaf.chars().chain("-".chars()).chain(val.chars()) {
            id.push(if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' });
        }
    }
    id
}

pub fn exec_eval_only(args: EvalOnlyArgs) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&args.run.join("config.toml"))?;
    let dataset = load_dataset(&args.data)?;
    let ckpt_path = match args.checkpoint {
        Some(p) => p,
        None => {
            let best = args.run.join("checkpoints").join("best.bin");
            if best.exists() {
                best
            } else {
                args.run.join("checkpoints").join("last.bin")
            }
        }
    };
    let ckpt = slotkit::checkpoint::load(&ckpt_path)
        .with_context(|| format!("loading {}", ckpt_path.display()))?;
    let summary = evals::evaluate(&cfg, &ckpt.params, &dataset)?;
    write_eval(&args.run, &summary)?;
    crate::plots::attention_overlays(&cfg, &ckpt.params, &dataset, &args.run)?;
    print_summary(&summary);
    Ok(())
}

fn load_config(path: &Path, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Train + evaluate a single config into `<root>/<run_id>-<hash>/`.
pub fn run_one(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    root: &Path,
    resume: bool,
    force: bool,
) -> anyhow::Result<EvalSummary> {
    cfg.validate()?;
    let dir = root.join(format!("{}-{}", cfg.run_id, cfg.hash()));
    if dir.exists() {
        if force {
            fs::remove_dir_all(&dir)?;
        } else if !resume {
            return Err(SlotError::Config(format!(
                "run directory {} already exists (use --resume or --force)",
                dir.display()
            ))
            .into());
        }
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string())?;

    let resume_from = dir.join("checkpoints").join("last.bin");
    let resume_path = (resume && resume_from.exists()).then_some(resume_from);
    let setup = TrainSetup {
        model: &cfg.model,
        loss: &cfg.loss,
        train: &cfg.train,
        augment: &cfg.augment,
        image_size: cfg.image_size,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    let outcome = trainer::train(&setup, dataset, &dir, resume_path.as_deref())?;
    println!(
        "trained {} steps, final loss {:.4}",
        outcome.steps, outcome.final_train_loss
    );

    let summary = evals::evaluate(cfg, &outcome.params, dataset)?;
    write_eval(&dir, &summary)?;
    crate::plots::attention_overlays(cfg, &outcome.params, dataset, &dir)?;
    Ok(summary)
}

fn write_eval(dir: &Path, summary: &EvalSummary) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(summary)?;
    fs::write(dir.join("eval.json"), json)?;
    Ok(())
}

fn print_summary(s: &EvalSummary) {
    match s.iou {
        Some(iou) => println!("eval: iou={iou:.4} ap={:.4}", s.ap),
        None => println!("eval: ap={:.4} (no object pathway)", s.ap),
    }
}
