//! Downstream transfer: forecasting and classification heads on top of the
//! pre-trained embedding and encoder.
//!
//! Forecasting is channel independent. Each channel of a lookback window is
//! normalized on its own, cut into `N` patches, embedded, given positions
//! (no SOS shift) and encoded; the `N × D` encoder output is flattened and
//! mapped to `H` values by one affine map, then denormalized with the
//! lookback statistics.
//!
//! Classification embeds and encodes every channel the same way and takes
//! a coordinate-wise maximum jointly over channels and positions before an
//! affine map to class logits.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::autograd::{gradient, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{denormalize, instance_normalize, NormStats, Window};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_classify, evaluate_forecast, per_horizon, MetricRow};
use crate::mask::Mask;
use crate::nn::{Affine, Backbone, ModelConfig};
use crate::optim::Adam;
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::patch::positional_table;
use crate::pretrain::PretrainConfig;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Forecast { horizon: usize },
    Classify { classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    Full,
    /// Only the head is trained.
    LinearProbe,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FinetuneMode::Full),
            "linear_probe" => Ok(FinetuneMode::LinearProbe),
            other => Err(Error::invalid(format!("unknown fine-tuning mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Fraction of training windows used, taken as a chronological prefix.
    pub portion: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::Full,
            portion: 1.0,
            epochs: 10,
            learning_rate: 1e-4,
            batch_size: 16,
            grad_clip: Some(5.0),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.portion > 0.0 && self.portion <= 1.0) {
            return Err(Error::invalid(format!("portion {} outside (0, 1]", self.portion)));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::invalid("epochs and batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// `⌈portion · total⌉`, with a small guard against representation error
/// (`0.05 · 1000` must give 50, not 51).
pub fn few_shot_count(portion: f64, total: usize) -> usize {
    let x = portion * total as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Flatten head `[N·D → H]`.
#[derive(Clone, Copy, Debug)]
pub struct ForecastHead {
    pub affine: Affine,
    pub horizon: usize,
}

/// Max-pool head `[D → K]`.
#[derive(Clone, Copy, Debug)]
pub struct ClassifyHead {
    pub affine: Affine,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum Head {
    Forecast(ForecastHead),
    Classify(ClassifyHead),
}

impl Head {
    pub fn affine(&self) -> Affine {
        match self {
            Head::Forecast(h) => h.affine,
            Head::Classify(h) => h.affine,
        }
    }

    pub fn task(&self) -> Task {
        match *self {
            Head::Forecast(h) => Task::Forecast { horizon: h.horizon },
            Head::Classify(h) => Task::Classify { classes: h.classes },
        }
    }
}

/// Embedding, encoder and a task head.
#[derive(Clone, Debug)]
pub struct DownstreamModel {
    pub model: ModelConfig,
    pub lookback: usize,
    /// Keep the causal encoder mask downstream (otherwise no mask).
    pub keep_causal_mask: bool,
    /// Prepend the learned SOS embedding, giving `N + 1` encoder positions.
    pub sos_input: bool,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: Head,
}

impl DownstreamModel {
    /// Randomly initialized model; the backbone draws from the same init
    /// stream, in the same order, as a pre-training model with this seed.
    pub fn new(model: &ModelConfig, lookback: usize, task: Task, keep_causal_mask: bool, seed: u64) -> Result<Self> {
        Self::build(model, lookback, task, keep_causal_mask, false, seed)
    }

    /// As [`DownstreamModel::new`], with the SOS embedding prepended to the
    /// encoder input.
    pub fn new_with_sos(model: &ModelConfig, lookback: usize, task: Task, keep_causal_mask: bool, seed: u64) -> Result<Self> {
        Self::build(model, lookback, task, keep_causal_mask, true, seed)
    }

    fn build(
        model: &ModelConfig,
        lookback: usize,
        task: Task,
        keep_causal_mask: bool,
        sos_input: bool,
        seed: u64,
    ) -> Result<Self> {
        model.validate()?;
        if lookback == 0 || !lookback.is_multiple_of(model.patch_len) {
            return Err(Error::invalid(format!(
                "lookback {lookback} is not a positive multiple of patch length {}",
                model.patch_len
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = stream(seed, Stream::Init);
        let backbone = Backbone::register(model, &mut store, &mut rng)?;
        let d = model.model_dim;
        let (din, dout) = match task {
            Task::Forecast { horizon } => {
                if horizon == 0 {
                    return Err(Error::invalid("forecast horizon must be positive"));
                }
                ((lookback / model.patch_len + usize::from(sos_input)) * d, horizon)
            }
            Task::Classify { classes } => {
                if classes < 2 {
                    return Err(Error::invalid("classification needs at least two classes"));
                }
                (d, classes)
            }
        };
        let affine = Affine {
            weight: store.register("head.weight", uniform_init(&[din, dout], din, &mut rng))?,
            bias: store.register("head.bias", uniform_init(&[dout], din, &mut rng))?,
        };
        let head = match task {
            Task::Forecast { horizon } => Head::Forecast(ForecastHead { affine, horizon }),
            Task::Classify { classes } => Head::Classify(ClassifyHead { affine, classes }),
        };
        Ok(DownstreamModel {
            model: model.clone(),
            lookback,
            keep_causal_mask,
            sos_input,
            store,
            backbone,
            head,
        })
    }

    /// Copies embedding and encoder weights out of a pre-training checkpoint.
    pub fn from_pretrained(
        ckpt: &Checkpoint,
        lookback: usize,
        task: Task,
        keep_causal_mask: bool,
        seed: u64,
    ) -> Result<Self> {
        let model = PretrainConfig::from_kv(&ckpt.config)?.model;
        let mut m = DownstreamModel::new(&model, lookback, task, keep_causal_mask, seed)?;
        m.load_backbone(&ckpt.params)?;
        Ok(m)
    }

    pub fn from_pretrained_with_sos(
        ckpt: &Checkpoint,
        lookback: usize,
        task: Task,
        keep_causal_mask: bool,
        seed: u64,
    ) -> Result<Self> {
        let model = PretrainConfig::from_kv(&ckpt.config)?.model;
        let mut m = DownstreamModel::new_with_sos(&model, lookback, task, keep_causal_mask, seed)?;
        m.load_backbone(&ckpt.params)?;
        Ok(m)
    }

    pub fn load_backbone(&mut self, source: &ParamStore) -> Result<()> {
        for id in self.backbone_ids() {
            let name = self.store.name(id).to_string();
            let value = source
                .by_name(&name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing parameter `{name}`")))?;
            if value.shape() != self.store.get(id).shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    self.store.get(id).shape()
                )));
            }
            self.store.set(id, value.clone())?;
        }
        Ok(())
    }

    /// Embedding, SOS and encoder parameters.
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let head = self.head.affine().ids();
        self.store.ids().filter(|id| !head.contains(id)).collect()
    }

    pub fn task(&self) -> Task {
        self.head.task()
    }

    pub fn num_patches(&self) -> usize {
        self.lookback / self.model.patch_len
    }

    /// Encoder positions: the patches, plus one with `sos_input`.
    pub fn positions(&self) -> usize {
        self.num_patches() + usize::from(self.sos_input)
    }

    fn encoder_mask(&self) -> Mask {
        let n = self.positions();
        if self.keep_causal_mask {
            Mask::causal(n)
        } else {
            Mask::full(n)
        }
    }

    /// Encoder output `[B × N × D]` for normalized patches `[B × N × P]`.
    fn encode(&self, tape: &mut Tape, patches: &Tensor) -> Result<Var> {
        let n = self.positions();
        let pe = positional_table(n, self.model.model_dim)?;
        let emb = if self.sos_input {
            // A trailing zero patch keeps all N patches through the shift.
            let (b, np, p) = (patches.shape()[0], patches.shape()[1], patches.shape()[2]);
            let mut padded = Tensor::zeros(&[b, np + 1, p]);
            for bi in 0..b {
                for j in 0..np {
                    padded.row_mut(bi * (np + 1) + j).copy_from_slice(patches.row(bi * np + j));
                }
            }
            let x = tape.constant(padded);
            let emb = self.backbone.embed(tape, &self.store, x)?;
            let sos = tape.param(&self.store, self.backbone.sos);
            tape.sos_shift(emb, sos)?
        } else {
            let x = tape.constant(patches.clone());
            self.backbone.embed(tape, &self.store, x)?
        };
        let z = tape.add_const(emb, pe.table())?;
        self.backbone.encode(tape, &self.store, z, &self.encoder_mask())
    }

    /// Normalized forecasts `[B × H]` for normalized lookbacks `[B × L]`.
    pub fn forecast_tape(&self, tape: &mut Tape, lookbacks: &Tensor) -> Result<Var> {
        let Head::Forecast(head) = self.head else {
            return Err(Error::invalid("model has a classification head"));
        };
        let patches = self.to_patches(lookbacks)?;
        let b = patches.shape()[0];
        let enc = self.encode(tape, &patches)?;
        let flat = tape.reshape(enc, &[b, self.positions() * self.model.model_dim])?;
        head.affine.apply(tape, &self.store, flat)
    }

    /// Logits `[B × K]` for normalized windows `[B × C × L]`.
    pub fn classify_tape(&self, tape: &mut Tape, windows: &Tensor) -> Result<Var> {
        let Head::Classify(head) = self.head else {
            return Err(Error::invalid("model has a forecasting head"));
        };
        if windows.rank() != 3 {
            return Err(Error::shape(format!("expected [B × C × L], got {:?}", windows.shape())));
        }
        let (b, c) = (windows.shape()[0], windows.shape()[1]);
        let flat = windows.clone().reshape(&[b * c, windows.shape()[2]])?;
        let patches = self.to_patches(&flat)?;
        let enc = self.encode(tape, &patches)?;
        let joint = tape.reshape(enc, &[b, c * self.positions(), self.model.model_dim])?;
        let pooled = tape.max_pool(joint)?;
        head.affine.apply(tape, &self.store, pooled)
    }

    fn to_patches(&self, rows: &Tensor) -> Result<Tensor> {
        if rows.rank() != 2 || rows.shape()[1] != self.lookback {
            return Err(Error::shape(format!(
                "expected [B × {}] lookbacks, got {:?}",
                self.lookback,
                rows.shape()
            )));
        }
        rows.clone()
            .reshape(&[rows.shape()[0], self.num_patches(), self.model.patch_len])
    }

    pub fn checkpoint(&self, epoch: usize) -> Checkpoint {
        let mut config = PretrainConfig {
            model: self.model.clone(),
            ..Default::default()
        }
        .to_kv();
        config.retain(|(k, _)| MODEL_KEYS.contains(&k.as_str()));
        config.push(("lookback".into(), self.lookback.to_string()));
        config.push(("keep_causal_mask".into(), self.keep_causal_mask.to_string()));
        config.push(("sos_input".into(), self.sos_input.to_string()));
        match self.task() {
            Task::Forecast { horizon } => {
                config.push(("task".into(), "forecast".into()));
                config.push(("horizon".into(), horizon.to_string()));
            }
            Task::Classify { classes } => {
                config.push(("task".into(), "classify".into()));
                config.push(("classes".into(), classes.to_string()));
            }
        }
        Checkpoint {
            params: self.store.clone(),
            config,
            epoch,
            rng: Vec::new(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ckpt.config_value(k)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("checkpoint lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::IncompatibleCheckpoint(format!("bad `{k}` in checkpoint")))
        };
        let task = match get("task")? {
            "forecast" => Task::Forecast { horizon: num("horizon")? },
            "classify" => Task::Classify { classes: num("classes")? },
            other => return Err(Error::IncompatibleCheckpoint(format!("unknown task `{other}`"))),
        };
        let model = PretrainConfig::from_kv(&ckpt.config)?.model;
        let keep = get("keep_causal_mask")? == "true";
        let sos = ckpt.config_value("sos_input") == Some("true");
        let mut m = DownstreamModel::build(&model, num("lookback")?, task, keep, sos, 0)?;
        if ckpt.params.len() != m.store.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                ckpt.params.len(),
                m.store.len()
            )));
        }
        let ids: Vec<ParamId> = m.store.ids().collect();
        for id in ids {
            let name = m.store.name(id).to_string();
            let v = ckpt
                .params
                .by_name(&name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing parameter `{name}`")))?;
            m.store
                .set(id, v.clone())
                .map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        }
        Ok(m)
    }
}

const MODEL_KEYS: &[&str] = &[
    "patch_len",
    "model_dim",
    "heads",
    "ff_dim",
    "encoder_layers",
    "decoder_layers",
    "norm_layout",
];

/// Forecast `[C × H]` for one raw lookback `[C × L]`.
pub fn forecast_forward(model: &DownstreamModel, lookback: &Tensor) -> Result<Tensor> {
    let (norm, stats) = instance_normalize(lookback);
    let mut tape = Tape::new();
    let out = model.forecast_tape(&mut tape, &norm)?;
    denormalize(tape.value(out), &stats)
}

/// Logits `[K]` for one raw window `[C × L]`.
pub fn classify_forward(model: &DownstreamModel, window: &Tensor) -> Result<Tensor> {
    let (norm, _) = instance_normalize(window);
    let shape = norm.shape().to_vec();
    let batch = norm.reshape(&[1, shape[0], shape[1]])?;
    let mut tape = Tape::new();
    let out = model.classify_tape(&mut tape, &batch)?;
    let k = tape.value(out).len();
    tape.value(out).clone().reshape(&[k])
}

const EVAL_BATCH: usize = 256;

/// Denormalized forecasts `[W × C × H]` and targets of the same shape.
pub fn predict_forecast(model: &DownstreamModel, windows: &[Window]) -> Result<(Tensor, Tensor)> {
    let Task::Forecast { horizon } = model.task() else {
        return Err(Error::invalid("model has a classification head"));
    };
    if windows.is_empty() {
        return Err(Error::invalid("no windows to evaluate"));
    }
    let c = windows[0].channels();
    let mut preds = Vec::with_capacity(windows.len() * c * horizon);
    let mut targets = Vec::with_capacity(windows.len() * c * horizon);
    for chunk in windows.chunks(EVAL_BATCH) {
        let mut rows = Vec::with_capacity(chunk.len() * c * model.lookback);
        let mut stats: Vec<NormStats> = Vec::with_capacity(chunk.len());
        for w in chunk {
            let target = w
                .horizon
                .as_ref()
                .ok_or_else(|| Error::invalid("forecast window without a horizon"))?;
            if w.channels() != c || target.shape() != [c, horizon] {
                return Err(Error::shape("windows disagree on channels or horizon"));
            }
            let (n, s) = instance_normalize(&w.lookback);
            rows.extend_from_slice(n.data());
            stats.push(s);
            targets.extend_from_slice(target.data());
        }
        let input = Tensor::from_vec(&[chunk.len() * c, model.lookback], rows)?;
        let mut tape = Tape::new();
        let out = model.forecast_tape(&mut tape, &input)?;
        let out = tape.value(out);
        for (k, s) in stats.iter().enumerate() {
            let block = Tensor::from_vec(&[c, horizon], out.data()[k * c * horizon..(k + 1) * c * horizon].to_vec())?;
            preds.extend(denormalize(&block, s)?.into_data());
        }
    }
    Ok((
        Tensor::from_vec(&[windows.len(), c, horizon], preds)?,
        Tensor::from_vec(&[windows.len(), c, horizon], targets)?,
    ))
}

/// Logits `[W × K]` and labels.
pub fn predict_classify(model: &DownstreamModel, windows: &[Window]) -> Result<(Tensor, Vec<usize>)> {
    let Task::Classify { classes } = model.task() else {
        return Err(Error::invalid("model has a forecasting head"));
    };
    if windows.is_empty() {
        return Err(Error::invalid("no windows to evaluate"));
    }
    let mut logits = Vec::with_capacity(windows.len() * classes);
    let mut labels = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_BATCH) {
        let (input, y) = classify_batch(chunk.iter(), model.lookback)?;
        let mut tape = Tape::new();
        let out = model.classify_tape(&mut tape, &input)?;
        logits.extend_from_slice(tape.value(out).data());
        labels.extend(y);
    }
    Ok((Tensor::from_vec(&[windows.len(), classes], logits)?, labels))
}


fn classify_batch<'a>(windows: impl ExactSizeIterator<Item = &'a Window>, lookback: usize) -> Result<(Tensor, Vec<usize>)> {
    let b = windows.len();
    let mut rows = Vec::new();
    let mut labels = Vec::with_capacity(b);
    let mut channels = None;
    for w in windows {
        let label = w.label.ok_or_else(|| Error::invalid("classification window without a label"))?;
        if *channels.get_or_insert(w.channels()) != w.channels() || w.lookback_len() != lookback {
            return Err(Error::shape("windows disagree on channels or length"));
        }
        rows.extend(instance_normalize(&w.lookback).0.into_data());
        labels.push(label);
    }
    Ok((Tensor::from_vec(&[b, channels.unwrap_or(0), lookback], rows)?, labels))
}

/// Forecast `(lookback, horizon)` pairs per channel, both normalized with
/// the lookback statistics.
fn forecast_instances(windows: &[Window]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = Vec::new();
    for w in windows {
        let h = w
            .horizon
            .as_ref()
            .ok_or_else(|| Error::invalid("forecast window without a horizon"))?;
        let (n, s) = instance_normalize(&w.lookback);
        for c in 0..w.channels() {
            let hn = h.row(c).iter().map(|x| (x - s.mean[c]) / s.std[c]).collect();
            out.push((n.row(c).to_vec(), hn));
        }
    }
    Ok(out)
}

/// Training, validation and test windows of a downstream task.
#[derive(Clone, Debug, Default)]
pub struct TaskData {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: DownstreamModel,
    /// Windows actually trained on.
    pub train_count: usize,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub metrics: Vec<MetricRow>,
}

impl FinetuneOutcome {
    /// Value of `metric` on `split` at the last epoch that logged it.
    pub fn metric(&self, split: &str, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
    }
}

/// Metric rows for `windows`: averaged metrics, plus one row per forecast
/// step (`mse@h`, `mae@h`, 1-based) when `per_step` is set.
pub fn evaluate_model(
    model: &DownstreamModel,
    windows: &[Window],
    split: &str,
    epoch: usize,
    per_step: bool,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    match model.task() {
        Task::Forecast { .. } => {
            let (p, y) = predict_forecast(model, windows)?;
            let m = evaluate_forecast(&p, &y)?;
            rows.push(MetricRow::new(epoch, split, "mse", m.mse));
            rows.push(MetricRow::new(epoch, split, "mae", m.mae));
            if per_step {
                for (h, m) in per_horizon(&p, &y)?.iter().enumerate() {
                    rows.push(MetricRow::new(epoch, split, format!("mse@{}", h + 1), m.mse));
                    rows.push(MetricRow::new(epoch, split, format!("mae@{}", h + 1), m.mae));
                }
            }
        }
        Task::Classify { .. } => {
            let (logits, labels) = predict_classify(model, windows)?;
            let m = evaluate_classify(&logits, &labels)?;
            rows.push(MetricRow::new(epoch, split, "accuracy", m.accuracy));
            rows.push(MetricRow::new(epoch, split, "macro_f1", m.macro_f1));
        }
    }
    Ok(rows)
}

/// Fine-tunes `model` on the first `⌈portion · |train|⌉` training windows.
/// Logs the train count (epoch 0), per-epoch train loss and validation
/// metrics, and final test metrics.
pub fn finetune(mut model: DownstreamModel, data: &TaskData, config: &FinetuneConfig) -> Result<FinetuneOutcome> {
    config.validate()?;
    let train_count = few_shot_count(config.portion, data.train.len());
    if train_count == 0 {
        return Err(Error::invalid("few-shot training subset is empty"));
    }
    let train = &data.train[..train_count];
    let mut metrics = vec![MetricRow::new(0, "train", "train_count", train_count as f64)];
    let head_ids = model.head.affine().ids();
    let trainable = |id: ParamId| config.mode == FinetuneMode::Full || head_ids.contains(&id);
    let mut opt = Adam::new(config.learning_rate).with_clip(config.grad_clip);
    let mut shuffle = stream(config.seed, Stream::Shuffle);
    let mut losses = Vec::with_capacity(config.epochs);

    let forecast = forecast_instances_if(&model, train)?;
    let samples = match model.task() {
        Task::Forecast { .. } => forecast.len(),
        Task::Classify { .. } => train.len(),
    };
    let mut order: Vec<usize> = (0..samples).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (loss, grads) = match model.task() {
                Task::Forecast { horizon } => {
                    let mut x = Vec::with_capacity(chunk.len() * model.lookback);
                    let mut y = Vec::with_capacity(chunk.len() * horizon);
                    for &i in chunk {
                        x.extend_from_slice(&forecast[i].0);
                        y.extend_from_slice(&forecast[i].1);
                    }
                    let x = Tensor::from_vec(&[chunk.len(), model.lookback], x)?;
                    let y = Tensor::from_vec(&[chunk.len(), horizon], y)?;
                    gradient(&model.store, |tape| {
                        let out = model.forecast_tape(tape, &x)?;
                        tape.mse(out, &y)
                    })?
                }
                Task::Classify { .. } => {
                    let (x, y) = classify_batch(chunk.iter().map(|&i| &train[i]), model.lookback)?;
                    gradient(&model.store, |tape| {
                        let out = model.classify_tape(tape, &x)?;
                        tape.cross_entropy(out, &y)
                    })?
                }
            };
            total += loss * chunk.len() as f64;
            opt.step(&mut model.store, &grads, trainable);
        }
        let mean = total / samples as f64;
        losses.push(mean);
        metrics.push(MetricRow::new(epoch, "train", "loss", mean));
        if !data.val.is_empty() {
            metrics.extend(evaluate_model(&model, &data.val, "val", epoch, false)?);
        }
    }
    if !data.test.is_empty() {
        metrics.extend(evaluate_model(&model, &data.test, "test", config.epochs, false)?);
    }
    Ok(FinetuneOutcome {
        model,
        train_count,
        losses,
        metrics,
    })
}

fn forecast_instances_if(model: &DownstreamModel, train: &[Window]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    match model.task() {
        Task::Forecast { .. } => forecast_instances(train),
        Task::Classify { .. } => Ok(Vec::new()),
    }
}

/// Writes `window_id,channel,step,prediction,target` rows for `[W × C × H]`
/// predictions; steps are 1-based.
pub fn write_prediction_dump(path: impl AsRef<Path>, predictions: &Tensor, targets: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if predictions.rank() != 3 || predictions.shape() != targets.shape() {
        return Err(Error::shape("prediction dump expects matching [W × C × H] tensors"));
    }
    let (w, c, h) = (predictions.shape()[0], predictions.shape()[1], predictions.shape()[2]);
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["window_id", "channel", "step", "prediction", "target"])?;
    for wi in 0..w {
        for ci in 0..c {
            for hi in 0..h {
                out.write_record([
                    wi.to_string(),
                    ci.to_string(),
                    (hi + 1).to_string(),
                    predictions.at3(wi, ci, hi).to_string(),
                    targets.at3(wi, ci, hi).to_string(),
                ])?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, MultivariateSeries};
    use crate::nn::NormLayout;

    fn cfg(p: usize, d: usize) -> ModelConfig {
        ModelConfig {
            patch_len: p,
            model_dim: d,
            heads: 2,
            ff_dim: 2 * d,
            encoder_layers: 1,
            decoder_layers: 1,
            layout: NormLayout::Post,
        }
    }

    fn series(c: usize, t: usize) -> MultivariateSeries {
        let chans: Vec<Vec<f64>> = (0..c)
            .map(|ch| (0..t).map(|i| ((i as f64) * 0.3 + ch as f64).sin() * (ch + 1) as f64 + ch as f64).collect())
            .collect();
        MultivariateSeries::from_channels(&chans).unwrap()
    }

    #[test]
    fn few_shot_arithmetic() {
        assert_eq!(few_shot_count(0.05, 1000), 50);
        assert_eq!(few_shot_count(0.1, 1000), 100);
        assert_eq!(few_shot_count(0.05, 1001), 51);
        assert_eq!(few_shot_count(1.0, 37), 37);
        assert_eq!(few_shot_count(0.01, 5), 1);
    }

    #[test]
    fn head_shapes() {
        let m = DownstreamModel::new(&cfg(2, 16), 336, Task::Forecast { horizon: 96 }, true, 0).unwrap();
        assert_eq!(m.store.get(m.head.affine().weight).shape(), &[2688, 96]);
        let lb = series(1, 336).values().clone();
        assert_eq!(forecast_forward(&m, &lb).unwrap().shape(), &[1, 96]);
        assert!(DownstreamModel::new(&cfg(4, 8), 30, Task::Forecast { horizon: 4 }, true, 0).is_err());
        assert!(DownstreamModel::new(&cfg(4, 8), 32, Task::Classify { classes: 1 }, true, 0).is_err());
    }

    #[test]
    fn null_head_predicts_lookback_mean() {
        let mut m = DownstreamModel::new(&cfg(4, 8), 16, Task::Forecast { horizon: 5 }, true, 1).unwrap();
        let a = m.head.affine();
        let ws = m.store.get(a.weight).shape().to_vec();
        m.store.set(a.weight, Tensor::zeros(&ws)).unwrap();
        m.store.set(a.bias, Tensor::zeros(&[5])).unwrap();
        let lb = series(3, 16).values().clone();
        let out = forecast_forward(&m, &lb).unwrap();
        for c in 0..3 {
            let mean = lb.row(c).iter().sum::<f64>() / 16.0;
            for &v in out.row(c) {
                assert!((v - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forecast_head_matches_loop_oracle() {
        let m = DownstreamModel::new(&cfg(4, 8), 16, Task::Forecast { horizon: 3 }, true, 2).unwrap();
        let lb = series(1, 16).values().clone();
        let (norm, stats) = instance_normalize(&lb);
        let mut tape = Tape::new();
        let patches = norm.clone().reshape(&[1, 4, 4]).unwrap();
        let enc = m.encode(&mut tape, &patches).unwrap();
        let z = tape.value(enc).data().to_vec();
        let w = m.store.get(m.head.affine().weight);
        let b = m.store.get(m.head.affine().bias);
        let out = forecast_forward(&m, &lb).unwrap();
        for h in 0..3 {
            let mut acc = b.data()[h];
            for (i, zi) in z.iter().enumerate() {
                acc += zi * w.data()[i * 3 + h];
            }
            let want = acc * stats.std[0] + stats.mean[0];
            assert!((out.data()[h] - want).abs() <= 1e-6 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn classify_pool_and_bias_shift() {
        let mut m = DownstreamModel::new(&cfg(4, 8), 16, Task::Classify { classes: 3 }, false, 3).unwrap();
        let win = series(2, 16).values().clone();
        let (norm, _) = instance_normalize(&win);
        let mut tape = Tape::new();
        let patches = norm.clone().reshape(&[2, 4, 4]).unwrap();
        let enc = m.encode(&mut tape, &patches).unwrap();
        let z = tape.value(enc);
        let mut pooled = [f64::NEG_INFINITY; 8];
        for r in 0..8 {
            for (k, p) in pooled.iter_mut().enumerate() {
                *p = p.max(z.data()[r * 8 + k]);
            }
        }
        let w = m.store.get(m.head.affine().weight).clone();
        let b = m.store.get(m.head.affine().bias).clone();
        let logits = classify_forward(&m, &win).unwrap();
        for c in 0..3 {
            let want: f64 = b.data()[c] + (0..8).map(|k| pooled[k] * w.data()[k * 3 + c]).sum::<f64>();
            assert!((logits.data()[c] - want).abs() < 1e-9);
        }
        let shifted = b.map(|x| x + 0.75);
        m.store.set(m.head.affine().bias, shifted).unwrap();
        let again = classify_forward(&m, &win).unwrap();
        for c in 0..3 {
            assert!((again.data()[c] - logits.data()[c] - 0.75).abs() < 1e-6);
        }
    }

    fn forecast_data() -> TaskData {
        let s = series(2, 120);
        let w = make_windows(&s, 16, 4, 2).unwrap();
        let (train, rest) = w.split_at(40);
        TaskData {
            train: train.to_vec(),
            val: rest[..5].to_vec(),
            test: rest[5..].to_vec(),
        }
    }

    #[test]
    fn linear_probe_freezes_backbone() {
        let m = DownstreamModel::new(&cfg(4, 8), 16, Task::Forecast { horizon: 4 }, true, 4).unwrap();
        let before = m.clone();
        let config = FinetuneConfig {
            mode: FinetuneMode::LinearProbe,
            epochs: 2,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let out = finetune(m, &forecast_data(), &config).unwrap();
        for id in before.backbone_ids() {
            let (a, b) = (before.store.get(id), out.model.store.get(id));
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_ne!(before.store.get(before.head.affine().weight), out.model.store.get(before.head.affine().weight));
        assert!(out.metric("test", "mse").unwrap().is_finite());
    }

    #[test]
    fn few_shot_prefix_logged() {
        let m = DownstreamModel::new(&cfg(4, 8), 16, Task::Forecast { horizon: 4 }, true, 4).unwrap();
        let config = FinetuneConfig {
            portion: 0.05,
            epochs: 1,
            ..Default::default()
        };
        let out = finetune(m, &forecast_data(), &config).unwrap();
        assert_eq!(out.train_count, 2);
        assert_eq!(out.metric("train", "train_count"), Some(2.0));
    }

    #[test]
    fn full_finetune_is_deterministic_and_learns() {
        let data = forecast_data();
        let run = || {
            let m = DownstreamModel::new(&cfg(4, 8), 16, Task::Forecast { horizon: 4 }, true, 5).unwrap();
            let config = FinetuneConfig {
                epochs: 8,
                learning_rate: 3e-3,
                ..Default::default()
            };
            finetune(m, &data, &config).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.losses, b.losses);
        assert!(a.losses.last().unwrap() < &a.losses[0]);
    }

    #[test]
    fn sos_input_adds_a_leading_position() {
        let plain = DownstreamModel::new(&cfg(4, 8), 16, Task::Forecast { horizon: 4 }, true, 2).unwrap();
        let mut m = DownstreamModel::new_with_sos(&cfg(4, 8), 16, Task::Forecast { horizon: 4 }, true, 2).unwrap();
        assert_eq!((plain.positions(), m.positions()), (4, 5));
        assert_eq!(m.store.by_name("head.weight").unwrap().shape(), &[40, 4]);
        for id in plain.backbone_ids() {
            assert_eq!(plain.store.get(id), m.store.by_name(plain.store.name(id)).unwrap());
        }

        // With a causal mask the first output row sees only the SOS slot,
        // so it cannot depend on the lookback.
        let sos = m.backbone.sos;
        m.store.set(sos, Tensor::full(&[8], 0.3)).unwrap();
        let rows = |x: f64| {
            let (norm, _) = instance_normalize(&Tensor::from_vec(&[1, 16], (0..16).map(|i| (i as f64 * x).sin()).collect()).unwrap());
            let patches = norm.reshape(&[1, 4, 4]).unwrap();
            let mut tape = Tape::new();
            let enc = m.encode(&mut tape, &patches).unwrap();
            tape.value(enc).clone()
        };
        let (a, b) = (rows(0.3), rows(0.7));
        assert_eq!(a.shape(), &[1, 5, 8]);
        assert_eq!(&a.data()[..8], &b.data()[..8]);
        assert_ne!(&a.data()[8..16], &b.data()[8..16]);

        let back = DownstreamModel::from_checkpoint(&Checkpoint::from_bytes(&m.checkpoint(1).to_bytes()).unwrap()).unwrap();
        assert!(back.sos_input);
        assert_eq!(back.store, m.store);
    }

    #[test]
    fn checkpoint_round_trip_and_incompatibility() {
        let m = DownstreamModel::new(&cfg(4, 8), 16, Task::Classify { classes: 3 }, false, 6).unwrap();
        let ck = Checkpoint::from_bytes(&m.checkpoint(3).to_bytes()).unwrap();
        let back = DownstreamModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.task(), m.task());
        assert!(!back.keep_causal_mask);

        let pre = crate::pretrain::PretrainModel::new(PretrainConfig {
            model: cfg(4, 16),
            ..Default::default()
        })
        .unwrap();
        let err = DownstreamModel::from_pretrained(&pre.checkpoint(0, None), 16, Task::Forecast { horizon: 2 }, true, 0);
        assert!(err.is_ok());
        let mut m8 = DownstreamModel::new(&cfg(4, 8), 16, Task::Forecast { horizon: 2 }, true, 0).unwrap();
        assert!(matches!(m8.load_backbone(&pre.store), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn classification_trains() {
        let mut windows = Vec::new();
        for k in 0..24 {
            let label = k % 2;
            let vals: Vec<f64> = (0..16)
                .map(|i| if label == 0 { (i as f64 * 0.8).sin() } else { (i as f64 / 4.0).floor() % 2.0 })
                .collect();
            windows.push(Window {
                lookback: Tensor::from_vec(&[1, 16], vals).unwrap(),
                horizon: None,
                label: Some(label),
                start: k * 16,
            });
        }
        let data = TaskData {
            train: windows[..16].to_vec(),
            val: Vec::new(),
            test: windows[16..].to_vec(),
        };
        let m = DownstreamModel::new(&cfg(4, 8), 16, Task::Classify { classes: 2 }, true, 7).unwrap();
        let config = FinetuneConfig {
            epochs: 30,
            learning_rate: 1e-2,
            batch_size: 4,
            ..Default::default()
        };
        let out = finetune(m, &data, &config).unwrap();
        assert_eq!(out.metric("test", "accuracy"), Some(1.0));
    }
}
