use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ct_core::data::{generate_dataset, load_dataset, save_dataset, Sample, Split, MANIFEST};
use ct_core::harness::{
    class_name, compare, evaluate, run_experiment, ContrastiveMode, ExperimentConfig, RunOptions,
};
use ct_core::model::{load_checkpoint, Model};
use ct_core::{checks, Error};
use serde_json::json;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "ct",
    version,
    about = "Patch-level contrastive learning for segmentation transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Train one contrastive mode over the configured seeds.
    Train(Run),
    /// Score a checkpoint (or a fresh initialisation) on the test split.
    Eval {
        #[command(flatten)]
        run: Run,
        /// Parameters to load; without it the model is evaluated at initialisation.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train off, infonce and cl on identical seeds and tabulate them.
    Compare(Run),
    /// Gradient, sampling and mining self-checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config file; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed: the scene seed for gen-data, the single training seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override, e.g. `--set optimizer.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Run {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = ["off", "infonce", "cl"])]
    contrastive_mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

/// Failure with its exit code: 1 for validation errors, 2 at runtime.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_validation() { 1 } else { 2 },
            msg: e.to_string(),
        }
    }
}

fn runtime(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

fn base_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    Ok(cfg.with_overrides(&common.overrides)?)
}

fn run_config(run: &Run) -> Result<ExperimentConfig, Failure> {
    let mut cfg = base_config(&run.common)?;
    if let Some(seed) = run.common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(mode) = &run.contrastive_mode {
        cfg.contrastive_mode = mode.parse::<ContrastiveMode>()?;
    }
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = run.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Prints the effective config and stores it next to the outputs.
fn announce(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(), Failure> {
    let text = cfg.to_json();
    println!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join("config.json");
        fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn load_split(dir: &Path, split: Split, cfg: &ExperimentConfig) -> Result<Vec<Sample>, Failure> {
    if !dir.join(MANIFEST).exists() {
        return Err(runtime(format!(
            "{}: no {MANIFEST}; create the dataset with `ct gen-data` first",
            dir.display()
        )));
    }
    let samples = load_dataset(dir, split)?;
    let side = cfg.model.image_side;
    if let Some(s) = samples
        .iter()
        .find(|s| s.image.height != side || s.image.width != side)
    {
        return Err(runtime(format!(
            "`{}` is {}x{} but model.image_side is {side}",
            s.id, s.image.height, s.image.width
        )));
    }
    Ok(samples)
}

/// Seeds run one at a time unless `CT_THREADS` allows more.
fn threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("CT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map_or(1, |cap| cap.clamp(1, available))
}

fn options(out: Option<&Path>) -> RunOptions {
    RunOptions {
        out: out.map(Path::to_path_buf),
        threads: threads(),
    }
}

fn gen_data(common: &Common) -> Result<(), Failure> {
    let mut cfg = base_config(common)?;
    if let Some(seed) = common.seed {
        cfg.data.scene.seed = seed;
    }
    cfg.data.scene.validate()?;
    let out = common.out.as_deref().ok_or(Failure {
        code: 1,
        msg: "gen-data needs --out".into(),
    })?;
    announce(&cfg, None)?;
    let (train, test) = generate_dataset(&cfg.data)?;
    save_dataset(out, &train, &test)?;
    eprintln!(
        "wrote {} train and {} test samples to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn train(run: &Run) -> Result<(), Failure> {
    let cfg = run_config(run)?;
    let out = run.common.out.as_deref();
    announce(&cfg, out)?;
    let train = load_split(&run.data, Split::Train, &cfg)?;
    let test = load_split(&run.data, Split::Test, &cfg)?;
    let metrics = run_experiment(&cfg, &train, &test, &options(out))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&metrics.summary).expect("summary serializes")
    );
    Ok(())
}

fn eval(run: &Run, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let cfg = run_config(run)?;
    let out = run.common.out.as_deref();
    announce(&cfg, out)?;
    let test = load_split(&run.data, Split::Test, &cfg)?;
    let (model, mut params) = Model::new(cfg.model.clone(), cfg.seeds[0])?;
    if let Some(path) = checkpoint {
        load_checkpoint(&mut params, path)?;
    }
    let e = evaluate(&model, &params, &test, cfg.batch_size)?;
    let k = cfg.model.num_classes;
    let names: Vec<String> = (0..k).map(|c| class_name(c, k)).collect();
    let iou: serde_json::Map<String, serde_json::Value> = names
        .iter()
        .zip(&e.iou)
        .map(|(n, v)| (n.clone(), json!(v)))
        .collect();
    let report = json!({
        "checkpoint": checkpoint.map(|p| p.display().to_string()),
        "samples": test.len(),
        "miou": e.miou,
        "iou": iou,
        "undefined": e.undefined.iter().map(|&c| names[c].clone()).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(dir) = out {
        let path = dir.join("eval.json");
        fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn compare_cmd(run: &Run) -> Result<(), Failure> {
    let cfg = run_config(run)?;
    let out = run.common.out.as_deref();
    announce(&cfg, out)?;
    let train = load_split(&run.data, Split::Train, &cfg)?;
    let test = load_split(&run.data, Split::Test, &cfg)?;
    let report = compare(&cfg, &train, &test, &options(out))?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn check(seed: u64) -> Result<(), Failure> {
    let report = checks::run_all(seed);
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|o| o.name.as_str()).collect();
        Err(runtime(format!("failed: {}", names.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData(common) => gen_data(common),
        Command::Train(run) => train(run),
        Command::Eval { run, checkpoint } => eval(run, checkpoint.as_deref()),
        Command::Compare(run) => compare_cmd(run),
        Command::Check { seed } => check(*seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
