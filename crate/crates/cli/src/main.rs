use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use kgreport_core::harness::{
    build_model, evaluate, generate_dataset, load_graph, run_ablation, run_grad_suite, train, Checkpoint, Dataset,
    EvalOptions, Split, TrainConfig,
};

#[derive(Parser)]
#[command(name = "kgreport", version, about = "Knowledge-graph guided report generation on synthetic chest images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file; unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("override {kv:?} is not key=value");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(self.out_dir.join(name))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write its checkpoint and loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset to train on; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate reports with beam search and score them.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out-dir>/checkpoint.kgn`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<out-dir>/dataset.jsonl`, regenerated from the checkpoint config if missing.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Score each reference against itself instead of generating.
        #[arg(long)]
        bypass: bool,
        /// Evaluate only the first N samples of the split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train and evaluate the six ablation rows for each seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; the config seed alone when absent.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Finite-difference gradient checks of every op and the composed model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

const DATASET: &str = "dataset.jsonl";
const CHECKPOINT: &str = "checkpoint.kgn";

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => bail!("unknown split {s:?} (train, val or test)"),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn dataset_for(cfg: &TrainConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => Dataset::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(generate_dataset(cfg, &load_graph(cfg)?)?),
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let data = generate_dataset(&cfg, &load_graph(&cfg)?)?;
    write(&common.out(DATASET)?, &data.to_jsonl()?)?;
    write(&common.out("config.txt")?, &cfg.to_text())?;
    for split in Split::ALL {
        eprintln!("{:>5}: {} samples", split.as_str(), data.split(split).len());
    }
    Ok(())
}

fn run_train(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = common.config()?;
    let default_data = common.out_dir.join(DATASET);
    let path = data.or_else(|| default_data.exists().then_some(default_data.as_path()));
    let dataset = dataset_for(&cfg, path)?;
    let mut model = build_model(&cfg)?;
    eprintln!("{} parameters", model.params.num_scalars());
    let start = Instant::now();
    let curve = train(&mut model, &dataset, &cfg, |e| {
        let val = e.val_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        eprintln!("epoch {:>3}  train {:.4}  val {val}  {:.1}s", e.epoch, e.train_loss, start.elapsed().as_secs_f64());
    })?;
    eprintln!(
        "initial train loss {:.4}, final {:.4}",
        curve.initial_train_loss,
        curve.final_train_loss().unwrap_or(f64::NAN)
    );
    let ck = Checkpoint::from_model(&model, &cfg);
    let path = common.out(CHECKPOINT)?;
    ck.save(&path)?;
    eprintln!("wrote {}", path.display());
    write(&common.out("loss_curve.json")?, &curve.to_json()?)?;
    Ok(())
}

fn run_evaluate(
    common: &Common,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    split: &str,
    opts: EvalOptions,
) -> Result<()> {
    let split = parse_split(split)?;
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| common.out_dir.join(CHECKPOINT));
    let ck = Checkpoint::read(&ck_path).with_context(|| format!("reading {}", ck_path.display()))?;
    let (cfg, model) = ck.restore()?;
    if common.seed.is_some_and(|s| s != cfg.seed) {
        eprintln!("note: --seed ignored, the checkpoint was trained with seed {}", cfg.seed);
    }
    let default_data = common.out_dir.join(DATASET);
    let path = data.or_else(|| default_data.exists().then_some(default_data.as_path()));
    let dataset = dataset_for(&cfg, path)?;
    let start = Instant::now();
    let ev = evaluate(&model, &dataset, split, &cfg, opts)?;
    eprintln!("{} samples in {:.1}s", ev.generations.len(), start.elapsed().as_secs_f64());
    for (k, v) in &ev.metrics.corpus {
        println!("{k:<20}{v:.4}");
    }
    write(&common.out("generations.jsonl")?, &ev.generations_jsonl()?)?;
    write(&common.out("metrics.json")?, &ev.metrics.to_json()?)?;
    Ok(())
}

fn run_ablate(common: &Common, seeds: &[u64]) -> Result<()> {
    let cfg = common.config()?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let start = Instant::now();
    let table = run_ablation(&cfg, &seeds)?;
    eprintln!("ablation over seeds {seeds:?} in {:.1}s", start.elapsed().as_secs_f64());
    print!("{}", table.render());
    for r in &table.rows {
        for s in r.per_seed.iter().filter(|s| s.error.is_some()) {
            eprintln!("row ({}) seed {}: {}", r.row.label, s.seed, s.error.as_deref().unwrap_or_default());
        }
    }
    let d = &table.directional;
    println!("full vs baseline ClinicalF1: {} ({})", if d.passed { "ok" } else { "FLAGGED" }, d.diagnostic);
    write(&common.out("ablation.json")?, &table.to_json()?)?;
    write(&common.out("ablation.txt")?, &table.render())
}

fn run_gradcheck(common: &Common) -> Result<bool> {
    let cfg = common.config()?;
    let start = Instant::now();
    let cases = run_grad_suite(cfg.seed)?;
    for c in &cases {
        println!("{:<28}{:>12.3e}  {}", c.name, c.max_relative_error, if c.passed { "ok" } else { "FAIL" });
    }
    eprintln!("{} cases in {:.1}s", cases.len(), start.elapsed().as_secs_f64());
    let doc = serde_json::json!({ "schema_version": 1, "seed": cfg.seed, "cases": cases });
    write(&common.out("gradcheck.json")?, &serde_json::to_string_pretty(&doc)?)?;
    Ok(cases.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { common } => gen_data(common).map(|_| true),
        Command::Train { common, data } => run_train(common, data.as_deref()).map(|_| true),
        Command::Evaluate {
            common,
            checkpoint,
            data,
            split,
            bypass,
            limit,
        } => {
            let opts = EvalOptions {
                bypass_generation: *bypass,
                limit: *limit,
            };
            run_evaluate(common, checkpoint.as_deref(), data.as_deref(), split, opts).map(|_| true)
        }
        Command::Ablate { common, seeds } => run_ablate(common, seeds).map(|_| true),
        Command::Gradcheck { common } => run_gradcheck(common),
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
