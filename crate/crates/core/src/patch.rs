//! Non-overlapping patching, patch embedding, sinusoidal positions and the
//! start-of-sequence shift.
//!
//! A length-`L` channel is cut into `N = L / P` patches of length `P` with
//! stride `P`. Patches are embedded by one affine map `[P → D]`, which is
//! reused for noisy patches during pre-training. For next-patch
//! prediction the clean embeddings are shifted one position to the right
//! behind a learnable SOS vector, so encoder position `j` only ever sees
//! patches `< j`.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Tensor};

/// `[C × N × P]` patches of a `[C × L]` window.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTensor {
    patches: Tensor,
}

impl PatchTensor {
    pub fn patch_len(&self) -> usize {
        self.patches.shape()[2]
    }

    pub fn num_patches(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.patches
    }

    pub fn into_tensor(self) -> Tensor {
        self.patches
    }

    pub fn patch(&self, channel: usize, j: usize) -> &[f64] {
        self.patches.row(channel * self.num_patches() + j)
    }
}

/// Cuts `[C × L]` (or `[L]`, treated as one channel) into patches.
pub fn patchify(window: &Tensor, patch_len: usize) -> Result<PatchTensor> {
    let (c, l) = match window.rank() {
        1 => (1, window.len()),
        2 => (window.shape()[0], window.shape()[1]),
        _ => return Err(Error::shape(format!("cannot patchify {:?}", window.shape()))),
    };
    if patch_len == 0 || l == 0 || l % patch_len != 0 {
        return Err(Error::invalid(format!(
            "window length {l} is not a positive multiple of patch length {patch_len}"
        )));
    }
    let patches = window.clone().reshape(&[c, l / patch_len, patch_len])?;
    Ok(PatchTensor { patches })
}

/// Exact inverse of [`patchify`], giving `[C × L]`.
pub fn unpatchify(patches: &PatchTensor) -> Tensor {
    let (c, n, p) = (patches.channels(), patches.num_patches(), patches.patch_len());
    patches
        .patches
        .clone()
        .reshape(&[c, n * p])
        .expect("patch tensor shape is consistent")
}

/// Affine patch embedding `patch · weight + bias`, weight `[P × D]`.
/// Returns `[C × N × D]`.
pub fn embed_patches(patches: &PatchTensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let p = patches.patch_len();
    if weight.rank() != 2 || weight.shape()[0] != p || bias.len() != weight.shape()[1] {
        return Err(Error::shape(format!(
            "embedding weight {:?} / bias {:?} for patch length {p}",
            weight.shape(),
            bias.shape()
        )));
    }
    let d = weight.shape()[1];
    let rows = patches.channels() * patches.num_patches();
    let mut out = Tensor::zeros(&[patches.channels(), patches.num_patches(), d]);
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(bias.data());
    }
    gemm_acc(rows, p, d, patches.patches.data(), false, weight.data(), false, out.data_mut());
    Ok(out)
}

/// `[N × D]` sinusoidal table: `sin(pos / 10000^(2i/D))` in even columns,
/// the matching cosine in odd columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    table: Tensor,
}

impl PositionalEncoding {
    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn get(&self, pos: usize, i: usize) -> f64 {
        self.table.at2(pos, i)
    }
}

pub fn positional_table(positions: usize, dim: usize) -> Result<PositionalEncoding> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("model width {dim} must be even and positive")));
    }
    let mut table = Tensor::zeros(&[positions, dim]);
    for pos in 0..positions {
        let row = table.row_mut(pos);
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Ok(PositionalEncoding { table })
}

/// Encoder input for next-patch prediction: position 0 holds `sos`,
/// position `j ≥ 1` holds embedding `j - 1`; the positional table is added
/// to every position and the final embedding is dropped.
pub fn sos_shift(embeddings: &Tensor, sos: &Tensor, pe: &PositionalEncoding) -> Result<Tensor> {
    if embeddings.rank() != 3 {
        return Err(Error::shape(format!("expected [C × N × D], got {:?}", embeddings.shape())));
    }
    let (c, n, d) = (embeddings.shape()[0], embeddings.shape()[1], embeddings.shape()[2]);
    if sos.len() != d || pe.len() < n || pe.dim() != d {
        return Err(Error::shape(format!(
            "sos {:?} / positional table {:?} for embeddings {:?}",
            sos.shape(),
            pe.table.shape(),
            embeddings.shape()
        )));
    }
    let mut out = Tensor::zeros(embeddings.shape());
    for ch in 0..c {
        for j in 0..n {
            let src = if j == 0 { sos.data() } else { embeddings.row(ch * n + j - 1) };
            let dst = out.row_mut(ch * n + j);
            for i in 0..d {
                dst[i] = src[i] + pe.get(j, i);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patch_count() {
        let w = Tensor::zeros(&[1, 336]);
        assert_eq!(patchify(&w, 2).unwrap().num_patches(), 168);
        assert!(patchify(&w, 5).is_err());
        assert!(patchify(&w, 0).is_err());
    }

    #[test]
    fn patch_contents() {
        let w = Tensor::from_vec(&[1, 6], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let p = patchify(&w, 3).unwrap();
        assert_eq!(p.patch(0, 0), &[1., 2., 3.]);
        assert_eq!(p.patch(0, 1), &[4., 5., 6.]);
        let single = patchify(&w, 6).unwrap();
        assert_eq!(single.num_patches(), 1);
        assert_eq!(unpatchify(&single), w);
    }

    proptest! {
        #[test]
        fn patchify_round_trip(c in 1usize..4, n in 1usize..9, p in 1usize..7, seed in any::<u64>()) {
            let l = n * p;
            let data: Vec<f64> = (0..c * l)
                .map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0)
                .collect();
            let w = Tensor::from_vec(&[c, l], data).unwrap();
            let pt = patchify(&w, p).unwrap();
            prop_assert_eq!(pt.num_patches() * pt.patch_len(), l);
            for ch in 0..c {
                for j in 0..n {
                    for k in 0..p {
                        prop_assert_eq!(pt.patch(ch, j)[k], w.at2(ch, j * p + k));
                    }
                }
            }
            prop_assert_eq!(unpatchify(&pt), w);
        }
    }

    #[test]
    fn identity_embedding() {
        let w = Tensor::from_vec(&[1, 4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let p = patchify(&w, 2).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let e = embed_patches(&p, &eye, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(e.data(), w.data());
    }

    #[test]
    fn hand_embedding() {
        let w = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let p = patchify(&w, 2).unwrap();
        let weight = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let bias = Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
        let e = embed_patches(&p, &weight, &bias).unwrap();
        assert_eq!(e.data(), &[1.5, 4.5]);
    }

    #[test]
    fn batch_embedding_matches_loop() {
        let (c, n, p, d) = (3, 5, 4, 6);
        let w = Tensor::from_vec(&[c, n * p], (0..c * n * p).map(|i| (i as f64).sin()).collect()).unwrap();
        let weight = Tensor::from_vec(&[p, d], (0..p * d).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let bias = Tensor::from_vec(&[d], (0..d).map(|i| i as f64 * 0.1).collect()).unwrap();
        let pt = patchify(&w, p).unwrap();
        let e = embed_patches(&pt, &weight, &bias).unwrap();
        for ch in 0..c {
            for j in 0..n {
                for o in 0..d {
                    let mut acc = bias.data()[o];
                    for k in 0..p {
                        acc += pt.patch(ch, j)[k] * weight.at2(k, o);
                    }
                    assert!((acc - e.at3(ch, j, o)).abs() < 1e-12);
                }
            }
        }
        assert!(embed_patches(&pt, &Tensor::zeros(&[p + 1, d]), &bias).is_err());
    }

    #[test]
    fn positional_closed_form() {
        for d in [2, 8, 16] {
            let pe = positional_table(12, d).unwrap();
            for i in 0..d {
                assert_eq!(pe.get(0, i), if i % 2 == 0 { 0.0 } else { 1.0 });
            }
            assert!((pe.get(1, 0) - 0.841_470_984_807_896_5).abs() < 1e-12);
            assert!(pe.table().data().iter().all(|v| (-1.0..=1.0).contains(v)));
            // scalar-loop oracle
            for pos in 0..12 {
                for i in 0..d {
                    let freq = (pos as f64) / 10000f64.powf((i - i % 2) as f64 / d as f64);
                    let want = if i % 2 == 0 { freq.sin() } else { freq.cos() };
                    assert!((pe.get(pos, i) - want).abs() <= 1e-6);
                }
            }
        }
        assert!(positional_table(4, 7).is_err());
    }

    #[test]
    fn sos_shift_cases() {
        let (n, d) = (4, 2);
        let emb = Tensor::from_vec(&[1, n, d], (0..n * d).map(|i| i as f64 + 1.0).collect()).unwrap();
        let zero_pe = PositionalEncoding {
            table: Tensor::zeros(&[n, d]),
        };
        let shifted = sos_shift(&emb, &Tensor::zeros(&[d]), &zero_pe).unwrap();
        assert_eq!(shifted.data(), &[0., 0., 1., 2., 3., 4., 5., 6.]);

        let pe = positional_table(n, d).unwrap();
        let sos = Tensor::from_vec(&[d], vec![0.25, -0.25]).unwrap();
        let out = sos_shift(&emb, &sos, &pe).unwrap();
        for j in 1..n {
            for i in 0..d {
                assert!((out.at3(0, j, i) - emb.at3(0, j - 1, i) - pe.get(j, i)).abs() < 1e-12);
            }
        }

        let one = Tensor::from_vec(&[1, 1, d], vec![9.0, 9.0]).unwrap();
        let out = sos_shift(&one, &sos, &pe).unwrap();
        assert_eq!(out.data(), &[0.25 + pe.get(0, 0), -0.25 + pe.get(0, 1)]);
    }
}
