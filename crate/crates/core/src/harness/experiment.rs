use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{ContrastiveMode, ExperimentConfig};
use super::eval::{evaluate, Evaluation};
use super::train::{stream, StepLog, Trainer, DATA_STREAM};
use crate::data::{Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::save_checkpoint;

/// Column name for class `c`.
pub fn class_name(c: usize, k: usize) -> String {
    if k == CLASS_NAMES.len() {
        CLASS_NAMES[c].to_string()
    } else {
        format!("class{c}")
    }
}

/// One epoch of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Step-averaged losses; the per-term map is left empty.
    pub losses: LossBreakdown,
    pub miou: f64,
    pub iou: Vec<Option<f64>>,
    pub steps: usize,
    /// Largest clipped contrastive value of any step.
    pub max_contrastive_clipped: f64,
    pub max_grad_norm_pre: f32,
    pub max_grad_norm_post: f32,
    /// Steps in which gradient clipping fired.
    pub clip_events: usize,
    /// Positive candidates gathered per class over the epoch.
    pub positives_by_class: Vec<usize>,
    /// Negative candidates containing each class over the epoch.
    pub negatives_containing: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_iou: Vec<Option<f64>>,
    pub final_miou: f64,
    /// Best per-epoch validation mIoU.
    pub max_miou: f64,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// `std = sqrt(Σ(x - mean)² / N)`; `None` for an empty slice.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: ContrastiveMode,
    pub mixer: String,
    pub seeds: Vec<u64>,
    pub final_miou: Stat,
    pub max_miou: Stat,
    pub class_names: Vec<String>,
    /// Final-epoch IoU per class over the seeds where it is defined.
    pub class_iou: Vec<Option<Stat>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub summary: RunSummary,
    pub seeds: Vec<SeedResult>,
}

/// Where and how a run executes.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Artifact directory; nothing is written when absent.
    pub out: Option<PathBuf>,
    /// Seeds trained concurrently (1 = sequential).
    pub threads: usize,
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!(
        "{}-{}",
        cfg.contrastive_mode.as_str(),
        cfg.model.mixer.as_str()
    )
}

fn csv_header(k: usize) -> String {
    let mut h =
        "run_id,seed,epoch,seg_ce,seg_dice,contrastive_raw,contrastive_clipped,miou".to_string();
    for c in 0..k {
        write!(h, ",{}_iou", class_name(c, k)).unwrap();
    }
    h
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

fn csv_row(run: &str, seed: u64, r: &EpochRecord) -> String {
    let l = &r.losses;
    let mut row = format!(
        "{run},{seed},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
        r.epoch, l.seg_ce, l.seg_dice, l.contrastive_raw, l.contrastive_clipped, r.miou
    );
    for &v in &r.iou {
        write!(row, ",{}", fmt_opt(v)).unwrap();
    }
    row
}

/// Append-only line sink; a no-op without a path.
struct Sink(Option<(PathBuf, File)>);

impl Sink {
    fn create(path: Option<PathBuf>, header: &str) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Sink(None));
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut sink = Sink(Some((path, file)));
        sink.line(header)?;
        Ok(sink)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        if let Some((path, file)) = &mut self.0 {
            writeln!(file, "{text}").map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Default)]
struct EpochAcc {
    sum: LossBreakdown,
    steps: usize,
    max_clipped: f64,
    max_pre: f32,
    max_post: f32,
    clip_events: usize,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

impl EpochAcc {
    fn new(k: usize) -> Self {
        Self {
            max_clipped: f64::NEG_INFINITY,
            positives: vec![0; k],
            negatives: vec![0; k],
            ..Self::default()
        }
    }

    fn push(&mut self, log: &StepLog, grad_clip: f32) {
        let b = &log.breakdown;
        self.sum.seg_ce += b.seg_ce;
        self.sum.seg_dice += b.seg_dice;
        self.sum.contrastive_raw += b.contrastive_raw;
        self.sum.contrastive_clipped += b.contrastive_clipped;
        self.sum.total += b.total;
        self.steps += 1;
        self.max_clipped = self.max_clipped.max(b.contrastive_clipped);
        self.max_pre = self.max_pre.max(log.grad_norm_pre);
        self.max_post = self.max_post.max(log.grad_norm_post);
        self.clip_events += usize::from(log.clipped(grad_clip));
        for set in &log.sets {
            if (set.class as usize) < self.positives.len() {
                self.positives[set.class as usize] += set.positives;
            }
            for (acc, &n) in self.negatives.iter_mut().zip(&set.negatives_containing) {
                *acc += n;
            }
        }
    }

    fn finish(self, epoch: usize, eval: Evaluation) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        let s = self.sum;
        EpochRecord {
            epoch,
            losses: LossBreakdown {
                seg_ce: s.seg_ce / n,
                seg_dice: s.seg_dice / n,
                contrastive_raw: s.contrastive_raw / n,
                contrastive_clipped: s.contrastive_clipped / n,
                total: s.total / n,
                terms: Default::default(),
            },
            miou: eval.miou,
            iou: eval.iou,
            steps: self.steps,
            max_contrastive_clipped: self.max_clipped,
            max_grad_norm_pre: self.max_pre,
            max_grad_norm_post: self.max_post,
            clip_events: self.clip_events,
            positives_by_class: self.positives,
            negatives_containing: self.negatives,
        }
    }
}

/// Trains and evaluates a single seed, streaming its CSV rows into `dir`.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &[Sample],
    test: &[Sample],
    dir: Option<&Path>,
) -> Result<SeedResult> {
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let k = cfg.model.num_classes;
    let run = run_id(cfg);
    let mut trainer = Trainer::new(cfg, seed)?;
    let mut order_rng = stream(seed, DATA_STREAM);
    let mut metrics = Sink::create(dir.map(|d| d.join("metrics.csv")), &csv_header(k))?;
    let mut steps = Sink::create(
        dir.map(|d| d.join("steps.csv")),
        "epoch,step,seg_ce,seg_dice,contrastive_raw,contrastive_clipped,grad_norm_pre,grad_norm_post",
    )?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut acc = EpochAcc::new(k);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let log = trainer.train_step(&batch)?;
            step += 1;
            let b = &log.breakdown;
            steps.line(&format!(
                "{epoch},{step},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                b.seg_ce,
                b.seg_dice,
                b.contrastive_raw,
                b.contrastive_clipped,
                log.grad_norm_pre,
                log.grad_norm_post
            ))?;
            acc.push(&log, cfg.grad_clip);
        }
        let eval = evaluate(&trainer.model, &trainer.params, test, cfg.batch_size)?;
        let record = acc.finish(epoch, eval);
        metrics.line(&csv_row(&run, seed, &record))?;
        epochs.push(record);
    }
    if let Some(d) = dir {
        save_checkpoint(&trainer.params, &d.join("model.ckpt"))?;
    }
    let (final_iou, final_miou) = match epochs.last() {
        Some(r) => (r.iou.clone(), r.miou),
        None => {
            let e = evaluate(&trainer.model, &trainer.params, test, cfg.batch_size)?;
            (e.iou, e.miou)
        }
    };
    let max_miou = epochs.iter().map(|r| r.miou).fold(final_miou, f64::max);
    Ok(SeedResult {
        seed,
        epochs,
        final_iou,
        final_miou,
        max_miou,
    })
}

/// Aggregates finished seeds.
pub fn summarize(cfg: &ExperimentConfig, seeds: &[SeedResult]) -> RunSummary {
    let k = cfg.model.num_classes;
    let finals: Vec<f64> = seeds.iter().map(|s| s.final_miou).collect();
    let maxes: Vec<f64> = seeds.iter().map(|s| s.max_miou).collect();
    let nan = Stat {
        mean: f64::NAN,
        std: f64::NAN,
    };
    RunSummary {
        run_id: run_id(cfg),
        mode: cfg.contrastive_mode,
        mixer: cfg.model.mixer.as_str().to_string(),
        seeds: seeds.iter().map(|s| s.seed).collect(),
        final_miou: Stat::of(&finals).unwrap_or(nan),
        max_miou: Stat::of(&maxes).unwrap_or(nan),
        class_names: (0..k).map(|c| class_name(c, k)).collect(),
        class_iou: (0..k)
            .map(|c| {
                let xs: Vec<f64> = seeds
                    .iter()
                    .filter_map(|s| s.final_iou.get(c).copied().flatten())
                    .collect();
                Stat::of(&xs)
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    complete: bool,
    error: Option<String>,
    config: &'a ExperimentConfig,
    summary: &'a RunSummary,
    seeds: &'a [SeedResult],
}

fn persist(
    cfg: &ExperimentConfig,
    dir: &Path,
    done: &[SeedResult],
    error: Option<&Error>,
) -> Result<RunSummary> {
    let summary = summarize(cfg, done);
    let mut combined = csv_header(cfg.model.num_classes);
    combined.push('\n');
    for s in done {
        for r in &s.epochs {
            combined.push_str(&csv_row(&summary.run_id, s.seed, r));
            combined.push('\n');
        }
    }
    write_file(&dir.join("metrics.csv"), &combined)?;
    let file = SummaryFile {
        complete: error.is_none(),
        error: error.map(|e| e.to_string()),
        config: cfg,
        summary: &summary,
        seeds: done,
    };
    let text = serde_json::to_string_pretty(&file).expect("summary serializes");
    write_file(&dir.join("summary.json"), &text)?;
    Ok(summary)
}

fn seed_dir(out: Option<&Path>, seed: u64) -> Option<PathBuf> {
    out.map(|d| d.join(format!("seed_{seed}")))
}

/// Trains every configured seed from scratch and aggregates the results.
///
/// With an output directory, each seed streams `seed_<n>/metrics.csv` and
/// `seed_<n>/steps.csv` and saves `seed_<n>/model.ckpt`; the combined
/// `metrics.csv` and `summary.json` are written at the end, or with the
/// seeds finished so far when one fails.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    train: &[Sample],
    test: &[Sample],
    opts: &RunOptions,
) -> Result<RunMetrics> {
    cfg.validate()?;
    let out = opts.out.as_deref();
    let threads = opts.threads.max(1);
    let mut results: Vec<Option<Result<SeedResult>>> = Vec::new();
    for group in cfg.seeds.chunks(threads) {
        if group.len() == 1 {
            results.push(Some(run_seed(
                cfg,
                group[0],
                train,
                test,
                seed_dir(out, group[0]).as_deref(),
            )));
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = group
                    .iter()
                    .map(|&seed| {
                        scope.spawn(move || {
                            run_seed(cfg, seed, train, test, seed_dir(out, seed).as_deref())
                        })
                    })
                    .collect();
                for h in handles {
                    results.push(Some(h.join().unwrap_or_else(|_| {
                        Err(Error::op("run_experiment", "seed worker panicked"))
                    })));
                }
            });
        }
        if results.iter().flatten().any(|r| r.is_err()) {
            break;
        }
    }
    let mut done = Vec::new();
    let mut failure = None;
    for r in results.into_iter().flatten() {
        match r {
            Ok(s) => done.push(s),
            Err(e) if failure.is_none() => failure = Some(e),
            Err(_) => {}
        }
    }
    if let Some(dir) = out {
        persist(cfg, dir, &done, failure.as_ref())?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunMetrics {
        summary: summarize(cfg, &done),
        seeds: done,
    })
}

/// One mode's row in a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub summary: RunSummary,
    /// Mean final mIoU minus the `off` baseline's.
    pub delta_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub runs: Vec<RunMetrics>,
}

impl CompareReport {
    pub fn row(&self, mode: ContrastiveMode) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.summary.mode == mode)
    }

    /// Comma-separated table, one row per mode.
    pub fn to_csv(&self) -> String {
        let names = self
            .rows
            .first()
            .map(|r| r.summary.class_names.clone())
            .unwrap_or_default();
        let mut s =
            "mixer,mode,seeds,miou_mean,miou_std,max_miou_mean,max_miou_std,delta_miou".to_string();
        for n in &names {
            write!(s, ",{n}_iou_mean,{n}_iou_std").unwrap();
        }
        s.push('\n');
        for row in &self.rows {
            let m = &row.summary;
            let seeds: Vec<String> = m.seeds.iter().map(u64::to_string).collect();
            write!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:+.6}",
                m.mixer,
                m.mode.as_str(),
                seeds.join(" "),
                m.final_miou.mean,
                m.final_miou.std,
                m.max_miou.mean,
                m.max_miou.std,
                row.delta_miou
            )
            .unwrap();
            for st in &m.class_iou {
                write!(
                    s,
                    ",{},{}",
                    fmt_opt(st.map(|x| x.mean)),
                    fmt_opt(st.map(|x| x.std))
                )
                .unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Markdown table: class IoU columns, then mIoU with σ in parentheses.
    pub fn to_markdown(&self) -> String {
        let names = self
            .rows
            .first()
            .map(|r| r.summary.class_names.clone())
            .unwrap_or_default();
        let mut s = String::from("| Model | Contrastive |");
        for n in &names {
            write!(s, " {n} |").unwrap();
        }
        s.push_str(" mIoU (σ) | max mIoU (σ) | Δ mIoU |\n|---|---|");
        s.push_str(&"---|".repeat(names.len() + 3));
        s.push('\n');
        for row in &self.rows {
            let m = &row.summary;
            write!(s, "| {} | {} |", m.mixer, m.mode.as_str()).unwrap();
            for st in &m.class_iou {
                match st {
                    Some(x) => write!(s, " {:.4} |", x.mean).unwrap(),
                    None => s.push_str(" n/a |"),
                }
            }
            writeln!(
                s,
                " {:.4} ({:.4}) | {:.4} ({:.4}) | {:+.4} |",
                m.final_miou.mean,
                m.final_miou.std,
                m.max_miou.mean,
                m.max_miou.std,
                row.delta_miou
            )
            .unwrap();
        }
        s
    }
}

/// Runs `off`, `infonce` and `cl` on identical seeds and data.
///
/// Each mode's artifacts go to `<out>/<mode>/`; the tables go to
/// `<out>/compare.csv` and `<out>/compare.md`.
pub fn compare(
    cfg: &ExperimentConfig,
    train: &[Sample],
    test: &[Sample],
    opts: &RunOptions,
) -> Result<CompareReport> {
    let mut runs = Vec::new();
    for mode in ContrastiveMode::ALL {
        let mode_cfg = ExperimentConfig {
            contrastive_mode: mode,
            ..cfg.clone()
        };
        let mode_opts = RunOptions {
            out: opts.out.as_ref().map(|d| d.join(mode.as_str())),
            threads: opts.threads,
        };
        runs.push(run_experiment(&mode_cfg, train, test, &mode_opts)?);
    }
    let base = runs[0].summary.final_miou.mean;
    let rows = runs
        .iter()
        .map(|r| CompareRow {
            summary: r.summary.clone(),
            delta_miou: r.summary.final_miou.mean - base,
        })
        .collect();
    let report = CompareReport { rows, runs };
    if let Some(dir) = &opts.out {
        write_file(&dir.join("compare.csv"), &report.to_csv())?;
        write_file(&dir.join("compare.md"), &report.to_markdown())?;
    }
    Ok(report)
}
