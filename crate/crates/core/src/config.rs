//! Flat `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Unknown keys are rejected. Lists are comma separated.

use std::path::{Path, PathBuf};

use crate::data::{SplitBounds, SplitSpec};
use crate::diffusion::{ScheduleKind, StepMode};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, FinetuneMode, Task};
use crate::nn::{ModelConfig, NormLayout};
use crate::pretrain::PretrainConfig;
use crate::synth::{Sinusoid, SynthKind, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Forecast,
    Classify,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_path: Option<PathBuf>,
    pub columns: Option<Vec<String>>,
    pub label_column: Option<String>,
    pub task: TaskKind,
    pub lookback: usize,
    pub horizon: usize,
    pub classes: Option<usize>,
    pub stride: usize,
    pub split: SplitSpec,

    pub pretrain: PretrainConfig,
    pub loss_log: Option<PathBuf>,

    pub finetune: FinetuneConfig,
    pub keep_causal_mask: bool,
    pub sos_input: bool,
    pub per_horizon: bool,
    pub prediction_dump: bool,

    pub synth: SynthSpec,
    pub output_dir: PathBuf,
    /// Keys set explicitly, in file order, for the manifest.
    pub explicit: Vec<(String, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_path: None,
            columns: None,
            label_column: None,
            task: TaskKind::Forecast,
            lookback: 336,
            horizon: 96,
            classes: None,
            stride: 1,
            split: SplitSpec::default(),
            pretrain: PretrainConfig::default(),
            loss_log: None,
            finetune: FinetuneConfig::default(),
            keep_causal_mask: true,
            sos_input: false,
            per_horizon: false,
            prediction_dump: false,
            synth: SynthSpec::sinusoid_mix(1000, 1, 0.1, 0),
            output_dir: PathBuf::from("."),
            explicit: Vec::new(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text)?;
        // relative data paths are taken from the config file's directory
        if let (Some(dir), Some(data)) = (path.parent(), cfg.data_path.as_mut()) {
            if data.is_relative() {
                *data = dir.join(&*data);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut split_fracs = [None::<f64>; 3];
        let mut split_ends = [None::<usize>; 3];
        let mut synth_kind = String::from("sinusoid_mix");
        let mut synth_ar = vec![0.6, 0.3];
        let mut synth_freqs: Option<Vec<f64>> = None;
        let mut synth_amps: Option<Vec<f64>> = None;
        let mut synth_classes = 3usize;
        let mut synth_window = 64usize;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if cfg.explicit.iter().any(|(e, _)| e == k) {
                return Err(Error::Config(format!("`{k}` set twice")));
            }
            cfg.explicit.push((k.to_string(), v.to_string()));
            let p = &mut cfg.pretrain;
            let m = &mut p.model;
            match k {
                "data_path" => cfg.data_path = Some(PathBuf::from(v)),
                "columns" => cfg.columns = Some(v.split(',').map(|s| s.trim().to_string()).collect()),
                "label_column" => cfg.label_column = Some(v.to_string()),
                "task" => {
                    cfg.task = match v {
                        "forecast" => TaskKind::Forecast,
                        "classify" => TaskKind::Classify,
                        _ => return Err(Error::Config(format!("`task`: unknown task `{v}`"))),
                    }
                }
                "lookback" => cfg.lookback = parse_num(k, v)?,
                "horizon" => cfg.horizon = parse_num(k, v)?,
                "classes" => cfg.classes = Some(parse_num(k, v)?),
                "stride" => cfg.stride = parse_num(k, v)?,
                "split_train" => split_fracs[0] = Some(parse_num(k, v)?),
                "split_val" => split_fracs[1] = Some(parse_num(k, v)?),
                "split_test" => split_fracs[2] = Some(parse_num(k, v)?),
                "split_train_end" => split_ends[0] = Some(parse_num(k, v)?),
                "split_val_end" => split_ends[1] = Some(parse_num(k, v)?),
                "split_test_end" => split_ends[2] = Some(parse_num(k, v)?),
                "split_context" => cfg.split.context = parse_num(k, v)?,

                "patch_len" => m.patch_len = parse_num(k, v)?,
                "model_dim" => m.model_dim = parse_num(k, v)?,
                "heads" => m.heads = parse_num(k, v)?,
                "ff_dim" => m.ff_dim = parse_num(k, v)?,
                "encoder_layers" => m.encoder_layers = parse_num(k, v)?,
                "decoder_layers" => m.decoder_layers = parse_num(k, v)?,
                "norm_layout" => m.layout = v.parse::<NormLayout>().map_err(|e| Error::Config(format!("`{k}`: {e}")))?,
                "total_steps" => p.total_steps = parse_num(k, v)?,
                "scheduler" => p.scheduler = v.parse::<ScheduleKind>().map_err(|e| Error::Config(format!("`{k}`: {e}")))?,
                "step_mode" => {
                    p.step_mode = match v {
                        "independent" => StepMode::Independent,
                        "same" => StepMode::Same,
                        _ => return Err(Error::Config(format!("`step_mode`: unknown mode `{v}`"))),
                    }
                }
                "mask_ratio" => p.mask_ratio = parse_num(k, v)?,
                "no_ar" => p.no_ar = parse_bool(k, v)?,
                "no_diff" => p.no_diff = parse_bool(k, v)?,
                "epochs" => p.epochs = parse_num(k, v)?,
                "batch_size" => {
                    p.batch_size = parse_num(k, v)?;
                    cfg.finetune.batch_size = p.batch_size;
                }
                "learning_rate" => p.learning_rate = parse_num(k, v)?,
                "grad_clip" => {
                    let clip = if v == "none" { None } else { Some(parse_num(k, v)?) };
                    p.grad_clip = clip;
                    cfg.finetune.grad_clip = clip;
                }
                "loss_log" => cfg.loss_log = Some(PathBuf::from(v)),

                "mode" => cfg.finetune.mode = v.parse::<FinetuneMode>().map_err(|e| Error::Config(format!("`{k}`: {e}")))?,
                "portion" => cfg.finetune.portion = parse_num(k, v)?,
                "finetune_epochs" => cfg.finetune.epochs = parse_num(k, v)?,
                "finetune_learning_rate" => cfg.finetune.learning_rate = parse_num(k, v)?,
                "keep_causal_mask" => cfg.keep_causal_mask = parse_bool(k, v)?,
                "sos_input" => cfg.sos_input = parse_bool(k, v)?,
                "per_horizon" => cfg.per_horizon = parse_bool(k, v)?,
                "prediction_dump" => cfg.prediction_dump = parse_bool(k, v)?,

                "seed" => {
                    let s = parse_num(k, v)?;
                    cfg.set_seed(s);
                }
                "output_dir" => cfg.output_dir = PathBuf::from(v),

                "synth_kind" => synth_kind = v.to_string(),
                "synth_length" => cfg.synth.length = parse_num(k, v)?,
                "synth_channels" => cfg.synth.channels = parse_num(k, v)?,
                "synth_noise_std" => cfg.synth.noise_std = parse_num(k, v)?,
                "synth_ar_coefficients" => synth_ar = parse_list(k, v)?,
                "synth_frequencies" => synth_freqs = Some(parse_list(k, v)?),
                "synth_amplitudes" => synth_amps = Some(parse_list(k, v)?),
                "synth_classes" => synth_classes = parse_num(k, v)?,
                "synth_window" => synth_window = parse_num(k, v)?,
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }

        match (split_fracs.iter().any(Option::is_some), split_ends.iter().any(Option::is_some)) {
            (true, true) => {
                return Err(Error::Config(
                    "give split fractions or split end indices, not both".into(),
                ))
            }
            (true, false) => {
                let d = SplitSpec::default();
                let SplitBounds::Fractions { train, val, test } = d.bounds else { unreachable!() };
                cfg.split.bounds = SplitBounds::Fractions {
                    train: split_fracs[0].unwrap_or(train),
                    val: split_fracs[1].unwrap_or(val),
                    test: split_fracs[2].unwrap_or(test),
                };
            }
            (false, true) => {
                let [Some(train_end), Some(val_end), Some(test_end)] = split_ends else {
                    return Err(Error::Config(
                        "split_train_end, split_val_end and split_test_end go together".into(),
                    ));
                };
                cfg.split.bounds = SplitBounds::Indices {
                    train_end,
                    val_end,
                    test_end,
                };
            }
            (false, false) => {}
        }

        cfg.synth.kind = match synth_kind.as_str() {
            "sinusoid_mix" => {
                let SynthKind::SinusoidMix { components, channel_phase } = SynthSpec::sinusoid_mix(1, 1, 0.0, 0).kind else {
                    unreachable!()
                };
                let components = match (synth_freqs, synth_amps) {
                    (None, None) => components,
                    (Some(f), a) => {
                        let a = a.unwrap_or_else(|| vec![1.0; f.len()]);
                        if a.len() != f.len() {
                            return Err(Error::Config("synth_frequencies and synth_amplitudes differ in length".into()));
                        }
                        f.iter()
                            .zip(&a)
                            .map(|(&frequency, &amplitude)| Sinusoid {
                                frequency,
                                amplitude,
                                phase: 0.0,
                            })
                            .collect()
                    }
                    (None, Some(_)) => return Err(Error::Config("synth_amplitudes needs synth_frequencies".into())),
                };
                SynthKind::SinusoidMix { components, channel_phase }
            }
            "ar_process" => SynthKind::ArProcess { coefficients: synth_ar },
            "class_shapes" => SynthKind::ClassShapes {
                classes: synth_classes,
                window: synth_window,
            },
            other => return Err(Error::Config(format!("`synth_kind`: unknown kind `{other}`"))),
        };
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.pretrain.seed
    }

    /// One seed drives pre-training, fine-tuning and synthesis.
    pub fn set_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.synth.seed = seed;
    }

    pub fn task(&self) -> Result<Task> {
        match self.task {
            TaskKind::Forecast => Ok(Task::Forecast { horizon: self.horizon }),
            TaskKind::Classify => Ok(Task::Classify {
                classes: self
                    .classes
                    .ok_or_else(|| Error::Config("classification needs `classes`".into()))?,
            }),
        }
    }

    pub fn model(&self) -> &ModelConfig {
        &self.pretrain.model
    }

    /// Checks settings needed by any training or evaluation command,
    /// including that the data file exists.
    pub fn validate_data_run(&self) -> Result<()> {
        let path = self
            .data_path
            .as_ref()
            .ok_or_else(|| Error::Config("missing required key `data_path`".into()))?;
        if !path.is_file() {
            return Err(Error::Config(format!("`data_path`: {} does not exist", path.display())));
        }
        if self.task == TaskKind::Classify && self.label_column.is_none() {
            return Err(Error::Config("classification needs `label_column`".into()));
        }
        let as_config = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.pretrain.validate().map_err(as_config)?;
        self.finetune.validate().map_err(as_config)?;
        self.task()?;
        if self.lookback == 0 || !self.lookback.is_multiple_of(self.pretrain.model.patch_len) {
            return Err(Error::Config(format!(
                "`lookback` {} must be a positive multiple of `patch_len` {}",
                self.lookback, self.pretrain.model.patch_len
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("`stride` must be at least 1".into()));
        }
        if self.task == TaskKind::Forecast && self.horizon == 0 {
            return Err(Error::Config("`horizon` must be at least 1".into()));
        }
        Ok(())
    }

    pub fn validate_synth(&self) -> Result<()> {
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Effective settings as `key=value` lines for the run manifest.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.explicit {
            if k != "seed" {
                out.push_str(&format!("config.{k}={v}\n"));
            }
        }
        out
    }
}
