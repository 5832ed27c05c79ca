//! The pre-training step and loop.
//!
//! One step, for a batch of normalized univariate windows:
//!
//! 1. cut each window into `N` patches and embed them;
//! 2. shift the embeddings right behind the SOS vector, add positions and
//!    run the causally masked encoder;
//! 3. corrupt every patch at its own diffusion step, embed the noisy
//!    patches with the same embedding and add positions;
//! 4. denoise with the decoder, where noisy query `j` attends only to
//!    encoder position `j` (which has seen clean patches `< j`);
//! 5. project back to patch space and take the mean squared error against
//!    the clean patches.
//!
//! Without the diffusion branch the encoder output at position `j` is
//! projected directly (plain next-patch regression).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{gradient, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{channelize, instance_normalize, make_windows, MultivariateSeries};
use crate::diffusion::{
    build_schedule, noise_patches, sample_steps, standard_normal, NoiseSchedule, ScheduleKind, StepMode,
    DEFAULT_TOTAL_STEPS,
};
use crate::error::{Error, Result};
use crate::mask::{build_mask, Mask, MaskKind};
use crate::nn::{decoder_forward, project, Backbone, Denoiser, ModelConfig, NormLayout};
use crate::optim::Adam;
use crate::params::{Gradients, ParamStore};
use crate::patch::positional_table;
use crate::rng::{stream, Stream, TrainRngs};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub total_steps: usize,
    pub scheduler: ScheduleKind,
    pub step_mode: StepMode,
    /// Decoder mask ratio: 1 is self-only, 0 is causal.
    pub mask_ratio: f64,
    pub no_ar: bool,
    pub no_diff: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig::default(),
            total_steps: DEFAULT_TOTAL_STEPS,
            scheduler: ScheduleKind::Cosine,
            step_mode: StepMode::Independent,
            mask_ratio: 1.0,
            no_ar: false,
            no_diff: false,
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-4,
            grad_clip: Some(5.0),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.total_steps < 1 {
            return Err(Error::invalid("total diffusion steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid(format!("mask ratio {} outside [0, 1]", self.mask_ratio)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let mut kv = vec![
            ("patch_len", m.patch_len.to_string()),
            ("model_dim", m.model_dim.to_string()),
            ("heads", m.heads.to_string()),
            ("ff_dim", m.ff_dim.to_string()),
            ("encoder_layers", m.encoder_layers.to_string()),
            ("decoder_layers", m.decoder_layers.to_string()),
            ("norm_layout", m.layout.name().to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("scheduler", self.scheduler.name().to_string()),
            (
                "step_mode",
                match self.step_mode {
                    StepMode::Independent => "independent",
                    StepMode::Same => "same",
                }
                .to_string(),
            ),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("no_ar", self.no_ar.to_string()),
            ("no_diff", self.no_diff.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            (
                "grad_clip",
                self.grad_clip.map_or_else(|| "none".to_string(), |c| c.to_string()),
            ),
            ("seed", self.seed.to_string()),
        ];
        kv.drain(..).map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let mut cfg = PretrainConfig::default();
        for (k, v) in kv {
            let bad = || Error::Format(format!("bad value `{v}` for `{k}`"));
            macro_rules! num {
                () => {
                    v.parse().map_err(|_| bad())?
                };
            }
            match k.as_str() {
                "patch_len" => cfg.model.patch_len = num!(),
                "model_dim" => cfg.model.model_dim = num!(),
                "heads" => cfg.model.heads = num!(),
                "ff_dim" => cfg.model.ff_dim = num!(),
                "encoder_layers" => cfg.model.encoder_layers = num!(),
                "decoder_layers" => cfg.model.decoder_layers = num!(),
                "norm_layout" => cfg.model.layout = v.parse::<NormLayout>().map_err(|_| bad())?,
                "total_steps" => cfg.total_steps = num!(),
                "scheduler" => cfg.scheduler = v.parse().map_err(|_| bad())?,
                "step_mode" => {
                    cfg.step_mode = match v.as_str() {
                        "independent" => StepMode::Independent,
                        "same" => StepMode::Same,
                        _ => return Err(bad()),
                    }
                }
                "mask_ratio" => cfg.mask_ratio = num!(),
                "no_ar" => cfg.no_ar = num!(),
                "no_diff" => cfg.no_diff = num!(),
                "epochs" => cfg.epochs = num!(),
                "batch_size" => cfg.batch_size = num!(),
                "learning_rate" => cfg.learning_rate = num!(),
                "grad_clip" => cfg.grad_clip = if v == "none" { None } else { Some(num!()) },
                "seed" => cfg.seed = num!(),
                _ => {}
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Denoise independently noised patches conditioned on the encoder.
    Diffusion,
    /// Regress patch `j` from encoder position `j` directly.
    Mse,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Diffusion => "diffusion",
            Objective::Mse => "mse",
        }
    }
}

/// Masks and loss actually used once ablation flags are applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveSetup {
    pub encoder_mask: MaskKind,
    /// `None` when the decoder is bypassed.
    pub decoder_mask: Option<MaskKind>,
    pub objective: Objective,
}

impl EffectiveSetup {
    pub fn describe(&self) -> String {
        format!(
            "encoder_mask={} decoder_mask={} objective={}",
            self.encoder_mask.name(),
            self.decoder_mask.map_or_else(|| "-".to_string(), |m| m.name()),
            self.objective.name()
        )
    }
}

pub fn decoder_mask_for_ratio(ratio: f64) -> MaskKind {
    if ratio >= 1.0 {
        MaskKind::SelfOnly
    } else if ratio <= 0.0 {
        MaskKind::Causal
    } else {
        MaskKind::PartialCausal(ratio)
    }
}

pub fn apply_ablation(config: &PretrainConfig) -> EffectiveSetup {
    let encoder_mask = if config.no_ar { MaskKind::None } else { MaskKind::Causal };
    let (decoder_mask, objective) = match (config.no_diff, config.no_ar) {
        (true, _) => (None, Objective::Mse),
        (false, true) => (Some(MaskKind::None), Objective::Diffusion),
        (false, false) => (Some(decoder_mask_for_ratio(config.mask_ratio)), Objective::Diffusion),
    };
    EffectiveSetup {
        encoder_mask,
        decoder_mask,
        objective,
    }
}

/// Diffusion steps (one per patch, `[B·N]`) and noise `[B × N × P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    pub eps: Tensor,
}

/// Embedding, encoder, decoder and projector together with their parameters.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub config: PretrainConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl PretrainModel {
    pub fn new(config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(config.seed, Stream::Init);
        let backbone = Backbone::register(&config.model, &mut store, &mut rng)?;
        let denoiser = Denoiser::register(&config.model, &mut store, &mut rng)?;
        let schedule = build_schedule(config.scheduler, config.total_steps)?;
        Ok(PretrainModel {
            config,
            store,
            backbone,
            denoiser,
            schedule,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = PretrainConfig::from_kv(&ckpt.config)?;
        let mut model = PretrainModel::new(config)?;
        if ckpt.params.len() != model.store.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let value = ckpt
                .params
                .by_name(&name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing parameter `{name}`")))?;
            model
                .store
                .set(id, value.clone())
                .map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn checkpoint(&self, epoch: usize, rngs: Option<&TrainRngs>) -> Checkpoint {
        Checkpoint {
            params: self.store.clone(),
            config: self.config.to_kv(),
            epoch,
            rng: rngs
                .map(|r| r.positions().iter().map(|(n, p)| (n.to_string(), *p)).collect())
                .unwrap_or_default(),
        }
    }

    pub fn setup(&self) -> EffectiveSetup {
        apply_ablation(&self.config)
    }

    /// Samples steps and noise for a `[B × N × P]` batch.
    pub fn draw_noise(
        &self,
        batch: usize,
        num_patches: usize,
        steps_rng: &mut impl Rng,
        noise_rng: &mut impl Rng,
    ) -> Result<NoiseDraw> {
        let mut steps = Vec::with_capacity(batch * num_patches);
        for _ in 0..batch {
            let a = sample_steps(num_patches, self.config.step_mode, self.config.total_steps, steps_rng)?;
            steps.extend(a.steps);
        }
        let eps = standard_normal(&[batch, num_patches, self.config.model.patch_len], noise_rng);
        Ok(NoiseDraw { steps, eps })
    }

    /// Records the pre-training loss for `patches: [B × N × P]` on `tape`.
    /// `noise` and `decoder_mask` are ignored by the plain-regression
    /// objective.
    pub fn loss(
        &self,
        tape: &mut Tape,
        patches: &Tensor,
        noise: Option<&NoiseDraw>,
        decoder_mask: Option<&Mask>,
    ) -> Result<Var> {
        let out = self.reconstruct(tape, patches, noise, decoder_mask)?;
        tape.mse(out, patches)
    }

    /// Reconstructed patches `[B × N × P]`.
    pub fn reconstruct(
        &self,
        tape: &mut Tape,
        patches: &Tensor,
        noise: Option<&NoiseDraw>,
        decoder_mask: Option<&Mask>,
    ) -> Result<Var> {
        if patches.rank() != 3 || patches.shape()[2] != self.config.model.patch_len {
            return Err(Error::shape(format!(
                "expected [B × N × {}] patches, got {:?}",
                self.config.model.patch_len,
                patches.shape()
            )));
        }
        let setup = self.setup();
        let n = patches.shape()[1];
        let pe = positional_table(n, self.config.model.model_dim)?;
        let store = &self.store;

        let x = tape.constant(patches.clone());
        let emb = self.backbone.embed(tape, store, x)?;
        let sos = tape.param(store, self.backbone.sos);
        let shifted = tape.sos_shift(emb, sos)?;
        let z_in = tape.add_const(shifted, pe.table())?;
        let enc_mask = build_mask(setup.encoder_mask, n, &mut stream(0, Stream::Mask))?;
        let enc = self.backbone.encode(tape, store, z_in, &enc_mask)?;

        match setup.objective {
            Objective::Mse => project(tape, store, &self.denoiser.projector, enc),
            Objective::Diffusion => {
                let noise = noise.ok_or_else(|| Error::invalid("diffusion objective needs a noise draw"))?;
                let default_mask;
                let dec_mask = match decoder_mask {
                    Some(m) => m,
                    None => {
                        let kind = setup.decoder_mask.expect("diffusion objective has a decoder mask");
                        if kind.is_random() {
                            return Err(Error::invalid("partial-causal decoder mask must be supplied"));
                        }
                        default_mask = build_mask(kind, n, &mut stream(0, Stream::Mask))?;
                        &default_mask
                    }
                };
                let noisy = noise_patches(patches, &noise.steps, &self.schedule, &noise.eps)?;
                let nv = tape.constant(noisy);
                let nemb = self.backbone.embed(tape, store, nv)?;
                let nz = tape.add_const(nemb, pe.table())?;
                let z_out = decoder_forward(tape, store, &self.denoiser, nz, enc, dec_mask)?;
                project(tape, store, &self.denoiser.projector, z_out)
            }
        }
    }
}

/// Packs equal-length univariate windows into `[B × N × P]` patches.
pub fn batch_patches(windows: &[&[f64]], patch_len: usize) -> Result<Tensor> {
    let l = windows.first().map_or(0, |w| w.len());
    if l == 0 || patch_len == 0 || !l.is_multiple_of(patch_len) {
        return Err(Error::invalid(format!(
            "window length {l} is not a positive multiple of patch length {patch_len}"
        )));
    }
    if windows.iter().any(|w| w.len() != l) {
        return Err(Error::shape("windows in a batch must share one length"));
    }
    let data: Vec<f64> = windows.iter().flat_map(|w| w.iter().copied()).collect();
    Tensor::from_vec(&[windows.len(), l / patch_len, patch_len], data)
}

/// Loss and gradients of one step on a batch of normalized windows.
pub fn pretrain_step(model: &PretrainModel, batch: &[&[f64]], rngs: &mut TrainRngs) -> Result<(f64, Gradients)> {
    let patches = batch_patches(batch, model.config.model.patch_len)?;
    let (b, n) = (patches.shape()[0], patches.shape()[1]);
    let setup = model.setup();
    let (noise, mask) = match setup.objective {
        Objective::Diffusion => {
            let draw = model.draw_noise(b, n, &mut rngs.steps, &mut rngs.noise)?;
            let kind = setup.decoder_mask.expect("diffusion objective has a decoder mask");
            (Some(draw), Some(build_mask(kind, n, &mut rngs.mask)?))
        }
        Objective::Mse => (None, None),
    };
    gradient(&model.store, |tape| {
        model.loss(tape, &patches, noise.as_ref(), mask.as_ref())
    })
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: PretrainModel,
    pub checkpoint: Checkpoint,
    /// Mean training loss of each epoch.
    pub losses: Vec<f64>,
}

/// Trains on normalized univariate windows for `config.epochs` epochs.
pub fn pretrain_loop(dataset: &[Vec<f64>], config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("pre-training corpus is empty"));
    }
    let mut model = PretrainModel::new(config.clone())?;
    let mut rngs = TrainRngs::new(config.seed);
    let mut opt = Adam::new(config.learning_rate).with_clip(config.grad_clip);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rngs.shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| dataset[i].as_slice()).collect();
            let step = pretrain_step(&model, &batch, &mut rngs);
            let (loss, grads) = match step {
                Ok(ok) => ok,
                Err(Error::NonFiniteLoss | Error::NonFiniteGradient(_) | Error::NonFiniteActivation { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        last_good: Box::new(model.checkpoint(epoch - 1, Some(&rngs))),
                    })
                }
                Err(e) => return Err(e),
            };
            total += loss * batch.len() as f64;
            opt.step(&mut model.store, &grads, |_| true);
        }
        losses.push(total / dataset.len() as f64);
    }
    let checkpoint = model.checkpoint(config.epochs, Some(&rngs));
    Ok(PretrainOutcome {
        model,
        checkpoint,
        losses,
    })
}

/// Stride-`stride` lookback windows of every channel of `series`, each
/// instance-normalized, as the pre-training corpus.
pub fn pretrain_corpus(series: &[&MultivariateSeries], lookback: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for s in series {
        let windows = make_windows(s, lookback, 0, stride)?;
        for inst in channelize(&windows).instances {
            let t = Tensor::from_vec(&[1, inst.lookback.len()], inst.lookback)?;
            out.push(instance_normalize(&t).0.into_data());
        }
    }
    Ok(out)
}

/// Writes the per-epoch loss log: a `#` header line describing the
/// effective setup, then `epoch,loss` rows.
pub fn write_loss_log(path: impl AsRef<Path>, setup: &EffectiveSetup, losses: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut text = format!("# {}\nepoch,loss\n", setup.describe());
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", i + 1));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
