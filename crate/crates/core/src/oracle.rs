//! Brute-force reference implementations for testing.
//!
//! Nothing here calls the tape, the tensor kernels or the schedule code:
//! every oracle is written with explicit scalar loops over `f64` so it can
//! stand as an independent check on the production path.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, NormLayout};
use crate::params::ParamStore;
use crate::tensor::Tensor;

type Matrix = Vec<Vec<f64>>;

/// Single-head scaled dot-product attention. Rows of `q`, `k`, `v` are
/// positions; invisible keys are skipped outright.
pub fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], visible: impl Fn(usize, usize) -> bool) -> Matrix {
    let d = q.first().map_or(0, Vec::len);
    let dv = v.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; dv]; q.len()];
    for i in 0..q.len() {
        let mut scores = vec![None; k.len()];
        let mut max = f64::NEG_INFINITY;
        for j in 0..k.len() {
            if !visible(i, j) {
                continue;
            }
            let mut s = 0.0;
            for c in 0..d {
                s += q[i][c] * k[j][c];
            }
            s /= (d as f64).sqrt();
            max = max.max(s);
            scores[j] = Some(s);
        }
        let mut total = 0.0;
        for s in scores.iter().flatten() {
            total += (s - max).exp();
        }
        for j in 0..k.len() {
            if let Some(s) = scores[j] {
                let w = (s - max).exp() / total;
                for c in 0..dv {
                    out[i][c] += w * v[j][c];
                }
            }
        }
    }
    out
}

/// Multi-head version: columns are split into `heads` equal groups and
/// [`naive_attention`] runs on each.
pub fn naive_multihead(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize, visible: impl Fn(usize, usize) -> bool) -> Matrix {
    let d = q.first().map_or(0, Vec::len);
    let dh = d / heads;
    let cols = |m: &[Vec<f64>], h: usize| -> Matrix { m.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect() };
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let o = naive_attention(&cols(q, h), &cols(k, h), &cols(v, h), &visible);
        for (i, row) in o.iter().enumerate() {
            out[i][h * dh..(h + 1) * dh].copy_from_slice(row);
        }
    }
    out
}

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("oracle: parameter `{name}` missing"))
}

/// `x · W + b` with `W` stored `[in × out]` row-major.
fn affine(x: &[Vec<f64>], store: &ParamStore, name: &str) -> Matrix {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for i in 0..din {
                        acc += row[i] * w.data()[i * dout + o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &[Vec<f64>], store: &ParamStore, name: &str) -> Matrix {
    let g = param(store, &format!("{name}.gamma")).data();
    let b = param(store, &format!("{name}.beta")).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
        })
        .collect()
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Matrix {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn attention_block(x: &[Vec<f64>], ctx: &[Vec<f64>], store: &ParamStore, name: &str, heads: usize, visible: &dyn Fn(usize, usize) -> bool) -> Matrix {
    let q = affine(x, store, &format!("{name}.q"));
    let k = affine(ctx, store, &format!("{name}.k"));
    let v = affine(ctx, store, &format!("{name}.v"));
    let a = naive_multihead(&q, &k, &v, heads, visible);
    affine(&a, store, &format!("{name}.o"))
}

fn feed_forward(x: &[Vec<f64>], store: &ParamStore, name: &str) -> Matrix {
    let h: Matrix = affine(x, store, &format!("{name}.ff1"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu_tanh).collect())
        .collect();
    affine(&h, store, &format!("{name}.ff2"))
}

/// Post-norm residual: `norm(x + f(x))`.
fn residual(x: &[Vec<f64>], y: Matrix, store: &ParamStore, norm: &str) -> Matrix {
    layer_norm(&add(x, &y), store, norm)
}

fn sinusoid_position(n: usize, d: usize) -> Matrix {
    (0..n)
        .map(|pos| {
            (0..d)
                .map(|i| {
                    let pair = (i / 2) * 2;
                    let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
                    if i % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// Noise injected into the reference loss: one step and one noise vector
/// per patch, plus the cumulative schedule `gamma[0..=T]`.
pub struct OracleNoise<'a> {
    /// `steps[b][j]`.
    pub steps: &'a [Vec<usize>],
    /// `eps[b][j][p]`.
    pub eps: &'a [Matrix],
    pub gamma: &'a [f64],
}

/// Reference pre-training loss for patches `x[b][j][p]`, reading weights
/// by name. With `noise` the denoising objective is computed (decoder
/// masked by `decoder_visible`); without it, the plain next-patch
/// regression through the projector. Post-norm layout only.
pub fn naive_pretrain_loss(
    store: &ParamStore,
    config: &ModelConfig,
    x: &[Matrix],
    noise: Option<&OracleNoise<'_>>,
    encoder_visible: &dyn Fn(usize, usize) -> bool,
    decoder_visible: &dyn Fn(usize, usize) -> bool,
) -> Result<f64> {
    if config.layout != NormLayout::Post {
        return Err(Error::invalid("the reference loss covers the post-norm layout only"));
    }
    let d = config.model_dim;
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, patches) in x.iter().enumerate() {
        let n = patches.len();
        let pe = sinusoid_position(n, d);
        let emb = affine(patches, store, "embedding");
        let sos = param(store, "sos").data().to_vec();
        let mut z: Matrix = (0..n)
            .map(|j| {
                let src = if j == 0 { &sos } else { &emb[j - 1] };
                (0..d).map(|i| src[i] + pe[j][i]).collect()
            })
            .collect();
        for l in 0..config.encoder_layers {
            let name = format!("encoder.{l}");
            let a = attention_block(&z, &z, store, &format!("{name}.attn"), config.heads, encoder_visible);
            z = residual(&z, a, store, &format!("{name}.norm1"));
            let f = feed_forward(&z, store, &name);
            z = residual(&z, f, store, &format!("{name}.norm2"));
        }
        let out = match noise {
            None => affine(&z, store, "projector"),
            Some(nz) => {
                let noisy: Matrix = (0..n)
                    .map(|j| {
                        let g = nz.gamma[nz.steps[b][j]];
                        (0..patches[j].len())
                            .map(|p| g.sqrt() * patches[j][p] + (1.0 - g).sqrt() * nz.eps[b][j][p])
                            .collect()
                    })
                    .collect();
                let nemb = affine(&noisy, store, "embedding");
                let mut h: Matrix = (0..n).map(|j| (0..d).map(|i| nemb[j][i] + pe[j][i]).collect()).collect();
                for l in 0..config.decoder_layers {
                    let name = format!("decoder.{l}");
                    let a = attention_block(&h, &h, store, &format!("{name}.self_attn"), config.heads, decoder_visible);
                    h = residual(&h, a, store, &format!("{name}.norm1"));
                    let c = attention_block(&h, &z, store, &format!("{name}.cross_attn"), config.heads, decoder_visible);
                    h = residual(&h, c, store, &format!("{name}.norm2"));
                    let f = feed_forward(&h, store, &name);
                    h = residual(&h, f, store, &format!("{name}.norm3"));
                }
                affine(&h, store, "projector")
            }
        };
        for j in 0..n {
            for p in 0..patches[j].len() {
                let e = patches[j][p] - out[j][p];
                total += e * e;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Central-difference gradient of `loss` with respect to every scalar of
/// every parameter, as `(name, gradient)` pairs in registration order.
/// Parameters are perturbed in place without rounding.
pub fn finite_diff_gradient(store: &ParamStore, loss: impl Fn(&ParamStore) -> f64, h: f64) -> Vec<(String, Tensor)> {
    let mut work = store.clone();
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let len = store.get(id).len();
        let mut g = Tensor::zeros(store.get(id).shape());
        for i in 0..len {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(&work);
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(&work);
            work.get_mut(id).data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push((store.name(id).to_string(), g));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseStats {
    pub mean: f64,
    pub variance: f64,
}

/// Pooled mean and variance of the noised window over `trials` draws.
/// Patch `j` (of length `patch_len`) is noised at `steps[j]` using
/// `gamma[steps[j]]`.
pub fn monte_carlo_noise_stats(
    window: &[f64],
    patch_len: usize,
    steps: &[usize],
    gamma: &[f64],
    trials: usize,
    rng: &mut impl Rng,
) -> Result<NoiseStats> {
    if trials < 100 {
        return Err(Error::invalid(format!("{trials} trials; at least 100 are required")));
    }
    if patch_len == 0 || window.len() != steps.len() * patch_len {
        return Err(Error::shape(format!(
            "{} steps of patch length {patch_len} for a window of {}",
            steps.len(),
            window.len()
        )));
    }
    if let Some(&s) = steps.iter().find(|&&s| s >= gamma.len()) {
        return Err(Error::invalid(format!("step {s} outside the schedule")));
    }
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut values = Vec::with_capacity(window.len());
    for _ in 0..trials {
        values.clear();
        for (t, &x) in window.iter().enumerate() {
            let g = gamma[steps[t / patch_len]];
            let e: f64 = rng.sample(StandardNormal);
            values.push(g.sqrt() * x + (1.0 - g).sqrt() * e);
        }
        let s: f64 = values.iter().sum();
        sum += s;
        sum_sq += values.iter().map(|v| v * v).sum::<f64>();
    }
    let n = (trials * window.len()) as f64;
    let mean = sum / n;
    Ok(NoiseStats {
        mean,
        variance: (sum_sq / n - mean * mean).max(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_singleton_and_uniform() {
        let v = vec![vec![3.0, -1.0]];
        let out = naive_attention(&[vec![1.0, 2.0]], &[vec![0.5, 0.5]], &v, |_, _| true);
        assert_eq!(out, v);

        let q = vec![vec![0.0, 0.0]; 3];
        let k = vec![vec![1.0, 2.0], vec![-1.0, 0.0], vec![4.0, 4.0]];
        let v = vec![vec![1.0, 0.0], vec![2.0, 3.0], vec![6.0, 9.0]];
        let out = naive_attention(&q, &k, &v, |i, j| j <= i);
        assert_eq!(out[0], vec![1.0, 0.0]);
        assert!((out[1][0] - 1.5).abs() < 1e-15 && (out[1][1] - 1.5).abs() < 1e-15);
        assert!((out[2][0] - 3.0).abs() < 1e-15 && (out[2][1] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn finite_diff_of_square() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::scalar(3.0)).unwrap();
        store.register("unused", Tensor::scalar(1.0)).unwrap();
        let g = finite_diff_gradient(&store, |s| s.by_name("x").unwrap().data()[0].powi(2), 1e-3);
        assert!((g[0].1.data()[0] - 6.0).abs() <= 1e-6);
        assert_eq!(g[1].1.data()[0], 0.0);
    }

    #[test]
    fn monte_carlo_rejects_few_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(monte_carlo_noise_stats(&[0.0; 4], 2, &[1, 1], &[1.0, 0.5], 0, &mut rng).is_err());
        assert!(monte_carlo_noise_stats(&[0.0; 4], 2, &[1, 1], &[1.0, 0.5], 99, &mut rng).is_err());
    }

    #[test]
    fn monte_carlo_clean_step_gives_data_variance() {
        let x = [1.0, -1.0, 2.0, 0.0, -2.0, 0.0];
        let mean = 0.0;
        let var = x.iter().map(|v: &f64| (v - mean).powi(2)).sum::<f64>() / 6.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = monte_carlo_noise_stats(&x, 3, &[0, 0], &[1.0, 0.2], 100, &mut rng).unwrap();
        assert!(s.mean.abs() < 1e-15);
        assert!((s.variance - var).abs() < 1e-12);
    }
}
