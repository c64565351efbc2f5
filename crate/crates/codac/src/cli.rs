//! Command-line driver. Every subcommand works inside one output
//! directory: data in `data/`, checkpoints `cde.ckpt`, `dmcf.ckpt`,
//! `finetune.ckpt`, and CSV artifacts next to them.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use codac_core::ablation::AblationVariant;
use codac_core::config::{FineTuneMode, TrainConfig};
use codac_core::metrics::{aggregate, MetricsReport, SeedMetrics};
use codac_core::pipeline::{self, Checkpoint, PretrainPool, Stage};

use crate::checkpoint_io;
use crate::config_text::load_config;
use crate::dataset_io::{self, DataDir};
use crate::error::{CliError, Result};
use crate::report;

#[derive(Parser, Debug)]
#[command(name = "codac", version, about = "Anomaly-guided contrastive pre-training for time-series diagnosis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Configuration file (`key = value` lines)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Working directory for data, checkpoints and reports
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic cohort and healthy reference set into DIR/data
    GenData {
        #[command(flatten)]
        common: Common,
        /// Fraction of training segments that keep their labels
        #[arg(long, value_name = "FLOAT")]
        labels_frac: Option<f64>,
    },
    /// Stage 1: fit the reconstruction model on healthy data
    TrainCde {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: contrastive pre-training with the frozen reconstruction model
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 3: supervised fine-tuning on the labeled training segments
    Finetune {
        #[command(flatten)]
        common: Common,
        /// pft trains only the classifier; fft trains the encoder as well
        #[arg(long, value_name = "pft|fft")]
        mode: Option<FineTuneMode>,
    },
    /// Test-set metrics, predictions and ROC points of the fine-tuned model
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Per-timestep anomaly scores of the test segments
    Score {
        #[command(flatten)]
        common: Common,
    },
    /// Run ablation variants end to end over several seeds
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant ids, or `all`
        #[arg(long, value_name = "LIST|all", default_value = "all")]
        variants: String,
        /// Number of consecutive seeds starting at --seed (default: the configured seeds)
        #[arg(long, value_name = "INT")]
        seeds: Option<usize>,
        /// Fraction of training segments that keep their labels
        #[arg(long, value_name = "FLOAT")]
        labels_frac: Option<f64>,
        /// Fine-tuning mode
        #[arg(long, value_name = "pft|fft")]
        mode: Option<FineTuneMode>,
    },
    /// Render DIR/summary.csv as a text table
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn base_config(common: &Common) -> Result<TrainConfig> {
    match &common.config {
        Some(p) => load_config(p),
        None => Ok(TrainConfig::default()),
    }
}

fn default_seed(common: &Common, cfg: &TrainConfig) -> u64 {
    common.seed.unwrap_or(cfg.seeds[0])
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn ckpt_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("{}.ckpt", stage.name()))
}

/// Loads the checkpoint of `stage`; `--config` replaces the stored
/// configuration when its parameter layout agrees.
fn load_stage(common: &Common, stage: Stage) -> Result<Checkpoint> {
    let path = ckpt_path(&common.out, stage);
    let mut ck = checkpoint_io::load(&path)?;
    if ck.stage != stage {
        return Err(CliError::format(format!("{}: expected a `{}` checkpoint, found `{}`", path.display(), stage.name(), ck.stage.name())));
    }
    if let Some(p) = &common.config {
        let cfg = load_config(p)?;
        if Checkpoint::expected_layout(&cfg, stage)? != Checkpoint::expected_layout(&ck.config, stage)? {
            return Err(CliError::format(format!("{}: parameter layout disagrees with {}", path.display(), p.display())));
        }
        ck.config = cfg;
    }
    Ok(ck)
}

fn read_data(out: &Path, cfg: &TrainConfig) -> Result<DataDir> {
    let dir = data_dir(out);
    if !dir.join("meta.txt").exists() {
        return Err(CliError::format(format!("{}: no dataset (run `codac gen-data --out {}` first)", dir.display(), out.display())));
    }
    dataset_io::read_data_dir(&dir, cfg.label_fraction)
}

fn gen_data(common: &Common, labels_frac: Option<f64>) -> Result<()> {
    let mut cfg = base_config(common)?;
    if let Some(f) = labels_frac {
        cfg.label_fraction = f;
    }
    cfg.validate()?;
    let seed = default_seed(common, &cfg);
    let data = pipeline::prepare_data(&cfg, seed)?;
    dataset_io::write_data_dir(&data_dir(&common.out), &DataDir { split: data.split, healthy: data.healthy })?;
    eprintln!("wrote dataset for seed {seed} to {}", data_dir(&common.out).display());
    Ok(())
}

fn train_cde(common: &Common) -> Result<()> {
    let cfg = base_config(common)?;
    let seed = default_seed(common, &cfg);
    let data = read_data(&common.out, &cfg)?;
    let (ck, curve) = pipeline::stage1(&cfg, &data.healthy, seed)?;
    checkpoint_io::save(&ck, &ckpt_path(&common.out, Stage::Cde))?;
    report::write_curve(&common.out.join("cde_loss.csv"), &curve)?;
    eprintln!("stage 1 done: {} epochs, final loss {:.6}", curve.len(), curve.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn pretrain(common: &Common) -> Result<()> {
    let ck1 = load_stage(common, Stage::Cde)?;
    let seed = common.seed.unwrap_or(ck1.seed);
    let data = read_data(&common.out, &ck1.config)?;
    let pool = PretrainPool::new(&data.healthy, &data.split.train);
    let (ck2, curve) = pipeline::stage2(&ck1, &pool, seed)?;
    checkpoint_io::save(&ck2, &ckpt_path(&common.out, Stage::Pretrain))?;
    report::write_curve(&common.out.join("dmcf_loss.csv"), &curve)?;
    eprintln!("stage 2 done: {} epochs", curve.len());
    Ok(())
}

fn finetune(common: &Common, mode: Option<FineTuneMode>) -> Result<()> {
    let ck2 = load_stage(common, Stage::Pretrain)?;
    let seed = common.seed.unwrap_or(ck2.seed);
    let mode = mode.unwrap_or(ck2.config.mode);
    let data = read_data(&common.out, &ck2.config)?;
    let before = ck2.encoder.checksum();
    let (ck3, log) = pipeline::stage3(&ck2, mode, &data.split.labeled_train(), &data.split.val, seed)?;
    checkpoint_io::save(&ck3, &ckpt_path(&common.out, Stage::Finetune))?;
    let mut csv = String::from("epoch,train_loss,val_loss,val_auroc\n");
    for e in 0..log.train_loss.len() {
        let va = log.val_auroc[e].map_or(String::new(), |v| v.to_string());
        csv.push_str(&format!("{e},{},{},{va}\n", log.train_loss[e], log.val_loss[e]));
    }
    write_text(&common.out.join("finetune_log.csv"), &csv)?;
    let best_auroc = log.val_auroc.get(log.best_epoch).copied().flatten();
    let text = format!(
        "mode = {}\nseed = {seed}\nlabeled = {}\nbest_epoch = {}\nbest_val_auroc = {}\nencoder_checksum_before = {before:016x}\nencoder_checksum_after = {:016x}\n",
        mode.name(),
        data.split.labeled_train().len(),
        log.best_epoch,
        best_auroc.map_or("n/a".into(), |v| v.to_string()),
        ck3.encoder.checksum(),
    );
    write_text(&common.out.join("finetune_report.txt"), &text)?;
    eprintln!("stage 3 done ({}), best epoch {}", mode.name(), log.best_epoch);
    Ok(())
}

fn evaluate(common: &Common) -> Result<()> {
    let ck = load_stage(common, Stage::Finetune)?;
    let data = read_data(&common.out, &ck.config)?;
    let mut ev = pipeline::evaluate(&ck, &data.split.test)?;
    if let Some(seed) = common.seed {
        ev.metrics.seed = seed;
    }
    let rep = aggregate(ck.config.variant.id(), vec![ev.metrics.clone()])?;
    write_text(&common.out.join("metrics.csv"), &report::experiment_csv(&rep))?;
    let mut preds = String::from("patient_id,label,prob\n");
    for (seg, p) in data.split.test.iter().zip(&ev.prob) {
        preds.push_str(&format!("{},{},{p}\n", seg.patient_id, seg.label.code()));
    }
    write_text(&common.out.join("predictions.csv"), &preds)?;
    write_text(&common.out.join("roc.csv"), &report::roc_csv(&ev.y, &ev.prob))?;
    let m = &ev.metrics;
    println!("acc={:.4} prec={:.4} rec={:.4} f1={:.4} auroc={:.4} auprc={:.4} rep_sep={:.2}", m.acc, m.prec, m.rec, m.f1, m.auroc, m.auprc, m.rep_sep);
    Ok(())
}

fn score(common: &Common) -> Result<()> {
    let ck = load_stage(common, Stage::Cde)?;
    let model = ck
        .cde_model()
        .ok_or_else(|| CliError::Usage(format!("variant `{}` has no reconstruction model to score with", ck.config.variant)))?;
    let data = read_data(&common.out, &ck.config)?;
    let dir = common.out.join("scores");
    std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let mut index = String::from("file,patient_id,label\n");
    for (i, seg) in data.split.test.iter().enumerate() {
        let sc = model.score(&seg.x, ck.config.beta)?;
        let name = format!("seg_{i:04}.csv");
        write_text(&dir.join(&name), &report::score_csv(&sc.e, &sc.a, &sc.s, &seg.anomaly_mask))?;
        index.push_str(&format!("{name},{},{}\n", seg.patient_id, seg.label.code()));
    }
    write_text(&dir.join("index.csv"), &index)?;
    eprintln!("scored {} segments into {}", data.split.test.len(), dir.display());
    Ok(())
}

pub fn parse_variants(list: &str) -> Result<Vec<AblationVariant>> {
    if list == "all" {
        return Ok(AblationVariant::ALL.to_vec());
    }
    let mut out = Vec::new();
    for id in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v: AblationVariant = id.parse().map_err(|e: codac_core::Error| CliError::Usage(e.to_string()))?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("--variants needs at least one variant".into()));
    }
    Ok(out)
}

pub fn threads_from_env() -> Result<usize> {
    match std::env::var("CODAC_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("CODAC_THREADS must be a positive integer, got `{s}`"))),
        },
    }
}

/// Runs every `(variant, seed)` job on `threads` workers and groups the
/// results by variant in the given order.
pub fn run_ablation_grid(cfg: &TrainConfig, variants: &[AblationVariant], seeds: &[u64], threads: usize) -> Result<Vec<MetricsReport>> {
    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let results: Mutex<Vec<Option<Result<SeedMetrics>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(jobs.len()).max(1) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(v, seed)) = jobs.get(j) else {
                    break;
                };
                let run_cfg = TrainConfig { variant: variants[v], ..cfg.clone() };
                let res = pipeline::run_seed(&run_cfg, seed).map(|r| r.metrics).map_err(CliError::from);
                results.lock().expect("result lock")[j] = Some(res);
            });
        }
    });
    let mut results = results.into_inner().expect("result lock");
    let mut reports = Vec::with_capacity(variants.len());
    for (variant, chunk) in variants.iter().zip(results.chunks_mut(seeds.len().max(1))) {
        let per_seed = chunk.iter_mut().map(|r| r.take().expect("every job ran")).collect::<Result<Vec<_>>>()?;
        reports.push(aggregate(variant.id(), per_seed)?);
    }
    Ok(reports)
}

fn ablate(common: &Common, variants: &str, n_seeds: Option<usize>, labels_frac: Option<f64>, mode: Option<FineTuneMode>) -> Result<()> {
    let mut cfg = base_config(common)?;
    if let Some(f) = labels_frac {
        cfg.label_fraction = f;
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    let variants = parse_variants(variants)?;
    let seeds: Vec<u64> = match n_seeds {
        Some(0) => return Err(CliError::Usage("--seeds must be at least 1".into())),
        Some(n) => {
            let base = common.seed.unwrap_or(0);
            (base..base + n as u64).collect()
        }
        None => match common.seed {
            Some(s) => vec![s],
            None => cfg.seeds.clone(),
        },
    };
    let threads = threads_from_env()?;
    std::fs::create_dir_all(&common.out).map_err(CliError::io(&common.out))?;
    let reports = run_ablation_grid(&cfg, &variants, &seeds, threads)?;
    report::write_summary(&common.out, &reports)?;
    print!("{}", report::text_table(&reports));
    Ok(())
}

fn render_report(common: &Common) -> Result<()> {
    let path = common.out.join("summary.csv");
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let reports = report::parse_summary(&text)?;
    let table = report::text_table(&reports);
    write_text(&common.out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, labels_frac } => gen_data(&common, labels_frac),
        Command::TrainCde { common } => train_cde(&common),
        Command::Pretrain { common } => pretrain(&common),
        Command::Finetune { common, mode } => finetune(&common, mode),
        Command::Evaluate { common } => evaluate(&common),
        Command::Score { common } => score(&common),
        Command::Ablate { common, variants, seeds, labels_frac, mode } => ablate(&common, &variants, seeds, labels_frac, mode),
        Command::Report { common } => render_report(&common),
    }
}
