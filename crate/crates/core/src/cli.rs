//! Command-line entry point.
//!
//! ```text
//! timedart pretrain --config run.cfg [--out DIR]
//! timedart finetune --config run.cfg --checkpoint pretrain.tdrt [--random-init] [--out DIR]
//! timedart evaluate --config run.cfg --checkpoint finetuned.tdrt [--out DIR]
//! timedart ablate   --config run.cfg [--out DIR]
//! timedart synth    --config run.cfg [--out DIR]
//! ```
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! usage, 3 training diverged, 4 incompatible or unreadable checkpoint.
//! `TIMEDART_SEED` overrides the `seed` key. Every command writes
//! `manifest.txt` next to its outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{RunConfig, TaskKind};
use crate::data::{
    load_labeled_csv, make_labeled_windows, make_windows, split_series, CsvOptions, MultivariateSeries, Window,
};
use crate::error::{Error, Result};
use crate::finetune::{
    evaluate_model, finetune, predict_forecast, write_prediction_dump, DownstreamModel, FinetuneOutcome, Task, TaskData,
};
use crate::metrics::{write_metric_log, MetricRow};
use crate::pretrain::{apply_ablation, pretrain_corpus, pretrain_loop, write_loss_log, PretrainConfig, PretrainOutcome};
use crate::synth::{generate, write_synth_csv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

pub const SEED_ENV: &str = "TIMEDART_SEED";

#[derive(Parser, Debug)]
#[command(name = "timedart", version, about = "Diffusion-augmented autoregressive pre-training for time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads; computation is single threaded and deterministic.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pre-train embedding, encoder and denoiser; writes a checkpoint and loss log.
    Pretrain(CommonArgs),
    /// Fine-tune a pre-trained checkpoint on the downstream task.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint on the test split.
    Evaluate(CheckpointArgs),
    /// Pre-train and fine-tune the four ablation settings.
    Ablate(CommonArgs),
    /// Write a synthetic corpus as CSV.
    Synth(CommonArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub inner: CheckpointArgs,
    /// Ignore the checkpoint weights and start from a random initialization
    /// of the same shape.
    #[arg(long)]
    pub random_init: bool,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::IncompatibleCheckpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let (common, name) = match &cli.command {
        Command::Pretrain(c) => (c, "pretrain"),
        Command::Finetune(f) => (&f.inner.common, "finetune"),
        Command::Evaluate(c) => (&c.common, "evaluate"),
        Command::Ablate(c) => (c, "ablate"),
        Command::Synth(c) => (c, "synth"),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    if let Ok(v) = std::env::var(SEED_ENV) {
        let seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}: `{v}` is not an unsigned integer")))?;
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    match name {
        "synth" => cfg.validate_synth()?,
        _ => cfg.validate_data_run()?,
    }
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_manifest(&out, name, &cfg, cli.threads)?;
    match &cli.command {
        Command::Pretrain(_) => cmd_pretrain(&cfg, &out).map(|_| ()),
        Command::Finetune(f) => cmd_finetune(&cfg, &f.inner.checkpoint, f.random_init, &out).map(|_| ()),
        Command::Evaluate(c) => cmd_evaluate(&cfg, &c.checkpoint, &out).map(|_| ()),
        Command::Ablate(_) => cmd_ablate(&cfg, &out).map(|_| ()),
        Command::Synth(_) => cmd_synth(&cfg, &out),
    }
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, threads: usize) -> Result<()> {
    let text = format!(
        "command={command}\nversion={}\nseed={}\nthreads={threads}\n{}",
        version_string(),
        cfg.seed(),
        cfg.echo()
    );
    let path = dir.join("manifest.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Series and per-step labels named by the config.
pub fn load_series(cfg: &RunConfig) -> Result<(MultivariateSeries, Option<Vec<usize>>)> {
    let path = cfg
        .data_path
        .as_ref()
        .ok_or_else(|| Error::Config("missing required key `data_path`".into()))?;
    let opts = CsvOptions {
        columns: cfg.columns.clone(),
        has_header: true,
        label_column: cfg.label_column.clone(),
    };
    load_labeled_csv(path, &opts)
}

/// Pre-training corpus (training split only) and downstream windows.
pub fn prepare(cfg: &RunConfig) -> Result<(Vec<Vec<f64>>, TaskData)> {
    let (series, labels) = load_series(cfg)?;
    let horizon = match cfg.task {
        TaskKind::Forecast => cfg.horizon,
        TaskKind::Classify => 0,
    };
    let splits = split_series(&series, &cfg.split, cfg.lookback + horizon)?;
    let corpus = pretrain_corpus(&[&splits.train], cfg.lookback, cfg.stride)?;
    let parts = [&splits.train, &splits.val, &splits.test];
    let windows: Vec<Vec<Window>> = match (cfg.task, labels) {
        (TaskKind::Forecast, _) => parts
            .iter()
            .map(|s| make_windows(s, cfg.lookback, cfg.horizon, cfg.stride))
            .collect::<Result<_>>()?,
        (TaskKind::Classify, Some(labels)) => parts
            .iter()
            .zip(splits.starts)
            .map(|(s, start)| make_labeled_windows(s, &labels[start..start + s.len()], cfg.lookback))
            .collect::<Result<_>>()?,
        (TaskKind::Classify, None) => return Err(Error::Config("classification needs `label_column`".into())),
    };
    let [train, val, test]: [Vec<Window>; 3] = windows.try_into().expect("three splits");
    Ok((corpus, TaskData { train, val, test }))
}

fn pretrain_and_log(cfg: &PretrainConfig, corpus: &[Vec<f64>], loss_log: &Path, out: &Path) -> Result<PretrainOutcome> {
    let setup = apply_ablation(cfg);
    match pretrain_loop(corpus, cfg) {
        Ok(o) => {
            write_loss_log(loss_log, &setup, &o.losses)?;
            Ok(o)
        }
        Err(Error::Diverged { epoch, last_good }) => {
            save_checkpoint(&last_good, out.join("last_good.tdrt"))?;
            Err(Error::Diverged { epoch, last_good })
        }
        Err(e) => Err(e),
    }
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainOutcome> {
    let (corpus, _) = prepare(cfg)?;
    let loss_log = match &cfg.loss_log {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => out.join(p),
        None => out.join("loss.csv"),
    };
    let outcome = pretrain_and_log(&cfg.pretrain, &corpus, &loss_log, out)?;
    save_checkpoint(&outcome.checkpoint, out.join("pretrain.tdrt"))?;
    Ok(outcome)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Format(m) => Error::IncompatibleCheckpoint(format!("{}: {m}", path.display())),
        Error::Io { source, .. } => Error::IncompatibleCheckpoint(format!("{}: {source}", path.display())),
        other => other,
    })
}

/// Model settings given in the run config must agree with the checkpoint.
fn check_compatible(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    let shape_keys = ["patch_len", "model_dim", "heads", "ff_dim", "encoder_layers", "norm_layout"];
    for (k, v) in &cfg.explicit {
        if !shape_keys.contains(&k.as_str()) {
            continue;
        }
        match ckpt.config_value(k) {
            Some(c) if c == v => {}
            Some(c) => {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "`{k}` is {v} in the config but {c} in the checkpoint"
                )))
            }
            None => return Err(Error::IncompatibleCheckpoint(format!("checkpoint lacks `{k}`"))),
        }
    }
    Ok(())
}

fn downstream_from(cfg: &RunConfig, ckpt: &Checkpoint, task: Task) -> Result<DownstreamModel> {
    let (l, keep, seed) = (cfg.lookback, cfg.keep_causal_mask, cfg.finetune.seed);
    if cfg.sos_input {
        DownstreamModel::from_pretrained_with_sos(ckpt, l, task, keep, seed)
    } else {
        DownstreamModel::from_pretrained(ckpt, l, task, keep, seed)
    }
}

pub fn cmd_finetune(cfg: &RunConfig, checkpoint: &Path, random_init: bool, out: &Path) -> Result<FinetuneOutcome> {
    let ckpt = read_checkpoint(checkpoint)?;
    check_compatible(cfg, &ckpt)?;
    let (_, data) = prepare(cfg)?;
    let task = cfg.task()?;
    let seed = cfg.finetune.seed;
    let model = if random_init {
        let shape = PretrainConfig::from_kv(&ckpt.config)
            .map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?
            .model;
        if cfg.sos_input {
            DownstreamModel::new_with_sos(&shape, cfg.lookback, task, cfg.keep_causal_mask, seed)
        } else {
            DownstreamModel::new(&shape, cfg.lookback, task, cfg.keep_causal_mask, seed)
        }
    } else {
        downstream_from(cfg, &ckpt, task)
    }
    .map_err(|e| match e {
        Error::InvalidArgument(m) | Error::Format(m) => Error::IncompatibleCheckpoint(m),
        other => other,
    })?;
    let outcome = finetune(model, &data, &cfg.finetune)?;
    save_checkpoint(&outcome.model.checkpoint(cfg.finetune.epochs), out.join("finetuned.tdrt"))?;
    write_metric_log(out.join("metrics.csv"), &outcome.metrics)?;
    Ok(outcome)
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<MetricRow>> {
    let ckpt = read_checkpoint(checkpoint)?;
    let model = DownstreamModel::from_checkpoint(&ckpt)?;
    if model.lookback != cfg.lookback {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint lookback {} but config lookback {}",
            model.lookback, cfg.lookback
        )));
    }
    let (_, data) = prepare(cfg)?;
    if data.test.is_empty() {
        return Err(Error::invalid("test split holds no windows"));
    }
    let rows = evaluate_model(&model, &data.test, "test", ckpt.epoch, cfg.per_horizon)?;
    write_metric_log(out.join("metrics.csv"), &rows)?;
    if cfg.prediction_dump && cfg.task == TaskKind::Forecast {
        let (p, y) = predict_forecast(&model, &data.test)?;
        write_prediction_dump(out.join("predictions.csv"), &p, &y)?;
    }
    Ok(rows)
}

pub const ABLATIONS: [(&str, bool, bool); 4] = [
    ("full", false, false),
    ("no_ar", true, false),
    ("no_diff", false, true),
    ("no_ar_diff", true, true),
];

/// Test metrics of each ablation setting, also written to `ablation.csv`
/// as `setting,metric,value`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<(String, Vec<MetricRow>)>> {
    let (corpus, data) = prepare(cfg)?;
    let mut results = Vec::new();
    let mut summary = csv::Writer::from_path(out.join("ablation.csv"))?;
    summary.write_record(["setting", "metric", "value"])?;
    for (name, no_ar, no_diff) in ABLATIONS {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let pcfg = PretrainConfig {
            no_ar,
            no_diff,
            ..cfg.pretrain.clone()
        };
        let pre = pretrain_and_log(&pcfg, &corpus, &dir.join("loss.csv"), &dir)?;
        save_checkpoint(&pre.checkpoint, dir.join("pretrain.tdrt"))?;
        let model = downstream_from(cfg, &pre.checkpoint, cfg.task()?)?;
        let ft = finetune(model, &data, &cfg.finetune)?;
        write_metric_log(dir.join("metrics.csv"), &ft.metrics)?;
        let test: Vec<MetricRow> = ft.metrics.iter().filter(|r| r.split == "test").cloned().collect();
        for r in &test {
            summary.write_record([name, r.metric.as_str(), &r.value.to_string()])?;
        }
        results.push((name.to_string(), test));
    }
    let path = out.join("ablation.csv");
    summary.flush().map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let generated = generate(&cfg.synth).map_err(|e| Error::Config(e.to_string()))?;
    write_synth_csv(out.join("synth.csv"), &generated)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::IncompatibleCheckpoint("x".into())), 4);
        assert_eq!(exit_code(&Error::NonFiniteLoss), 1);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["timedart", "pretrain"]), 2);
        assert_eq!(run(["timedart", "frobnicate"]), 2);
        assert_eq!(run(["timedart", "pretrain", "--config", "/nonexistent.cfg"]), 2);
    }
}
