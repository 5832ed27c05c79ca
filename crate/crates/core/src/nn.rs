//! Transformer encoder, denoising decoder and projector.
//!
//! Layers are expressed as operations on an autograd [`Tape`] so the same
//! code serves inference and training. Parameters live in a [`ParamStore`]
//! under stable dotted names (`encoder.0.attn.q.weight`, ...); the structs
//! here only remember the [`ParamId`]s.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormLayout {
    /// attention → add & norm → feed-forward → add & norm
    Post,
    /// norm → attention → add, norm → feed-forward → add
    Pre,
}

impl NormLayout {
    pub fn name(self) -> &'static str {
        match self {
            NormLayout::Post => "post",
            NormLayout::Pre => "pre",
        }
    }
}

impl std::str::FromStr for NormLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post" => Ok(NormLayout::Post),
            "pre" => Ok(NormLayout::Pre),
            other => Err(Error::invalid(format!("unknown norm layout `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub layout: NormLayout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_len: 4,
            model_dim: 16,
            heads: 8,
            ff_dim: 64,
            encoder_layers: 2,
            decoder_layers: 1,
            layout: NormLayout::Post,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 {
            return Err(Error::invalid("patch length must be positive"));
        }
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("model width {} must be even", self.model_dim)));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "{} heads do not divide model width {}",
                self.heads, self.model_dim
            )));
        }
        if self.ff_dim == 0 {
            return Err(Error::invalid("feed-forward width must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    fn register(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Affine {
            weight: store.register(format!("{name}.weight"), uniform_init(&[din, dout], din, rng))?,
            bias: store.register(format!("{name}.bias"), uniform_init(&[dout], din, rng))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn register(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[d], 1.0))?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
    pub o: Affine,
}

impl AttentionParams {
    fn register(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(AttentionParams {
            q: Affine::register(store, &format!("{name}.q"), d, d, rng)?,
            k: Affine::register(store, &format!("{name}.k"), d, d, rng)?,
            v: Affine::register(store, &format!("{name}.v"), d, d, rng)?,
            o: Affine::register(store, &format!("{name}.o"), d, d, rng)?,
        })
    }

    /// Queries from `x`, keys and values from `context`.
    fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        context: Var,
        heads: usize,
        mask: &Mask,
    ) -> Result<Var> {
        let q = self.q.apply(tape, store, x)?;
        let k = self.k.apply(tape, store, context)?;
        let v = self.v.apply(tape, store, context)?;
        let a = tape.attention(q, k, v, heads, mask)?;
        self.o.apply(tape, store, a)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Affine,
    pub down: Affine,
}

impl FeedForward {
    fn register(store: &mut ParamStore, name: &str, d: usize, f: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FeedForward {
            up: Affine::register(store, &format!("{name}.ff1"), d, f, rng)?,
            down: Affine::register(store, &format!("{name}.ff2"), f, d, rng)?,
        })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.apply(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.apply(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub norm1: Norm,
    pub ff: FeedForward,
    pub norm2: Norm,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub norm1: Norm,
    pub cross_attn: AttentionParams,
    pub norm2: Norm,
    pub ff: FeedForward,
    pub norm3: Norm,
}

/// Residual sub-block `x + f(x)` with the configured normalization placement.
fn residual(
    tape: &mut Tape,
    store: &ParamStore,
    layout: NormLayout,
    norm: &Norm,
    x: Var,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    match layout {
        NormLayout::Post => {
            let y = f(tape, x)?;
            let s = tape.add(x, y)?;
            norm.apply(tape, store, s)
        }
        NormLayout::Pre => {
            let n = norm.apply(tape, store, x)?;
            let y = f(tape, n)?;
            tape.add(x, y)
        }
    }
}

fn check_finite(tape: &Tape, v: Var, stage: &'static str, layer: usize) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { stage, layer })
    }
}

/// Patch embedding, SOS vector and encoder stack: the part of the model
/// that is transferred to downstream tasks.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: ModelConfig,
    pub embedding: Affine,
    pub sos: ParamId,
    pub encoder: Vec<EncoderLayer>,
}

impl Backbone {
    pub fn register(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (p, d, f) = (config.patch_len, config.model_dim, config.ff_dim);
        let embedding = Affine::register(store, "embedding", p, d, rng)?;
        let sos = store.register("sos", Tensor::zeros(&[d]))?;
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let name = format!("encoder.{i}");
                Ok(EncoderLayer {
                    attn: AttentionParams::register(store, &format!("{name}.attn"), d, rng)?,
                    norm1: Norm::register(store, &format!("{name}.norm1"), d)?,
                    ff: FeedForward::register(store, &name, d, f, rng)?,
                    norm2: Norm::register(store, &format!("{name}.norm2"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Backbone {
            config: config.clone(),
            embedding,
            sos,
            encoder,
        })
    }

    /// Embeds `[B × N × P]` patches; clean and noisy patches share this map.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Result<Var> {
        self.embedding.apply(tape, store, patches)
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, input: Var, mask: &Mask) -> Result<Var> {
        encoder_forward(tape, store, self, input, mask)
    }
}

/// Runs the encoder stack over `input: [B × N × D]`.
pub fn encoder_forward(
    tape: &mut Tape,
    store: &ParamStore,
    backbone: &Backbone,
    input: Var,
    mask: &Mask,
) -> Result<Var> {
    let cfg = &backbone.config;
    let mut x = input;
    for (i, layer) in backbone.encoder.iter().enumerate() {
        x = residual(tape, store, cfg.layout, &layer.norm1, x, |t, h| {
            layer.attn.apply(t, store, h, h, cfg.heads, mask)
        })?;
        x = residual(tape, store, cfg.layout, &layer.norm2, x, |t, h| layer.ff.apply(t, store, h))?;
        check_finite(tape, x, "encoder", i)?;
    }
    Ok(x)
}

/// Denoising decoder stack plus the projector back to patch space.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: ModelConfig,
    pub decoder: Vec<DecoderLayer>,
    pub projector: Affine,
}

impl Denoiser {
    pub fn register(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (p, d, f) = (config.patch_len, config.model_dim, config.ff_dim);
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                Ok(DecoderLayer {
                    self_attn: AttentionParams::register(store, &format!("{name}.self_attn"), d, rng)?,
                    norm1: Norm::register(store, &format!("{name}.norm1"), d)?,
                    cross_attn: AttentionParams::register(store, &format!("{name}.cross_attn"), d, rng)?,
                    norm2: Norm::register(store, &format!("{name}.norm2"), d)?,
                    ff: FeedForward::register(store, &name, d, f, rng)?,
                    norm3: Norm::register(store, &format!("{name}.norm3"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        let projector = Affine::register(store, "projector", d, p, rng)?;
        Ok(Denoiser {
            config: config.clone(),
            decoder,
            projector,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.decoder {
            for a in [&l.self_attn, &l.cross_attn] {
                for aff in [a.q, a.k, a.v, a.o] {
                    ids.extend(aff.ids());
                }
            }
            for n in [l.norm1, l.norm2, l.norm3] {
                ids.extend([n.gamma, n.beta]);
            }
            ids.extend(l.ff.up.ids());
            ids.extend(l.ff.down.ids());
        }
        ids
    }
}

/// Decoder over noisy-patch queries `noisy: [B × N × D]` attending to
/// `enc_out: [B × N × D]`. `mask` governs both the self-attention among
/// noisy queries and the cross-attention.
pub fn decoder_forward(
    tape: &mut Tape,
    store: &ParamStore,
    denoiser: &Denoiser,
    noisy: Var,
    enc_out: Var,
    mask: &Mask,
) -> Result<Var> {
    let cfg = &denoiser.config;
    let mut x = noisy;
    for (i, layer) in denoiser.decoder.iter().enumerate() {
        x = residual(tape, store, cfg.layout, &layer.norm1, x, |t, h| {
            layer.self_attn.apply(t, store, h, h, cfg.heads, mask)
        })?;
        x = residual(tape, store, cfg.layout, &layer.norm2, x, |t, h| {
            layer.cross_attn.apply(t, store, h, enc_out, cfg.heads, mask)
        })?;
        x = residual(tape, store, cfg.layout, &layer.norm3, x, |t, h| layer.ff.apply(t, store, h))?;
        check_finite(tape, x, "decoder", i)?;
    }
    Ok(x)
}

/// Per-position affine map `[B × N × D] → [B × N × P]`.
pub fn project(tape: &mut Tape, store: &ParamStore, projector: &Affine, z: Var) -> Result<Var> {
    projector.apply(tape, store, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(layers: usize, heads: usize) -> (ParamStore, Backbone, Denoiser) {
        let cfg = ModelConfig {
            patch_len: 3,
            model_dim: 8,
            heads,
            ff_dim: 16,
            encoder_layers: layers,
            decoder_layers: layers,
            layout: NormLayout::Post,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = Backbone::register(&cfg, &mut store, &mut rng).unwrap();
        let d = Denoiser::register(&cfg, &mut store, &mut rng).unwrap();
        (store, b, d)
    }

    fn input(b: usize, n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::diffusion::standard_normal(&[b, n, d], &mut rng)
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.model_dim = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_position_ignores_mask_kind() {
        let (store, bb, _) = tiny(2, 2);
        let x = input(2, 1, 8, 1);
        let run = |mask: Mask| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = encoder_forward(&mut tape, &store, &bb, xv, &mask).unwrap();
            tape.value(y).clone()
        };
        let a = run(Mask::causal(1));
        assert_eq!(a, run(Mask::self_only(1)));
        assert_eq!(a, run(Mask::full(1)));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (store, bb, _) = tiny(1, 2);
        let mut tape = Tape::new();
        let xv = tape.constant(input(3, 6, 8, 2));
        let layer = &bb.encoder[0].attn;
        let q = layer.q.apply(&mut tape, &store, xv).unwrap();
        let k = layer.k.apply(&mut tape, &store, xv).unwrap();
        let v = layer.v.apply(&mut tape, &store, xv).unwrap();
        let a = tape.attention(q, k, v, 2, &Mask::causal(6)).unwrap();
        let probs = tape.attention_probs(a).unwrap();
        for (r, row) in probs.chunks(6).enumerate() {
            let i = r % 6;
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!(row[i + 1..].iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn unmasked_model_keeps_shape_and_finiteness() {
        let (store, bb, dn) = tiny(2, 4);
        let mut tape = Tape::new();
        let x = tape.constant(input(2, 5, 8, 3));
        let noisy = tape.constant(input(2, 5, 8, 4));
        let e1 = encoder_forward(&mut tape, &store, &bb, x, &Mask::full(5)).unwrap();
        let e2 = encoder_forward(&mut tape, &store, &bb, x, &Mask::causal(5)).unwrap();
        assert_ne!(tape.value(e1), tape.value(e2));
        let z = decoder_forward(&mut tape, &store, &dn, noisy, e1, &Mask::full(5)).unwrap();
        let out = project(&mut tape, &store, &dn.projector, z).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 5, 3]);
        assert!(tape.value(out).all_finite());
    }

    #[test]
    fn projector_identity_and_zero() {
        let mut store = ParamStore::new();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let proj = Affine {
            weight: store.register("w", eye).unwrap(),
            bias: store.register("b", Tensor::zeros(&[2])).unwrap(),
        };
        let z = input(1, 3, 2, 5);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = project(&mut tape, &store, &proj, zv).unwrap();
        assert_eq!(tape.value(out), &z);

        let mut zero = ParamStore::new();
        let proj = Affine {
            weight: zero.register("w", Tensor::zeros(&[2, 4])).unwrap(),
            bias: zero.register("b", Tensor::zeros(&[4])).unwrap(),
        };
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let out = project(&mut tape, &zero, &proj, zv).unwrap();
        assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let (store, bb, _) = tiny(1, 1);
        let mut tape = Tape::new();
        let mut x = input(1, 2, 8, 6);
        x.data_mut()[0] = f64::NAN;
        let xv = tape.constant(x);
        let err = encoder_forward(&mut tape, &store, &bb, xv, &Mask::causal(2)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteActivation { stage: "encoder", layer: 0 }));
    }
}
