//! Attention visibility policies.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Which keys a query position may attend to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskKind {
    /// Position `j` sees positions `0..=j`.
    Causal,
    /// Position `j` sees only position `j`.
    SelfOnly,
    /// Position `j` sees itself plus `round((1 - ratio) * j)` randomly chosen
    /// earlier positions. `ratio = 1` is self-only, `ratio = 0` is causal.
    PartialCausal(f64),
    /// Full visibility.
    None,
}

impl MaskKind {
    pub fn name(&self) -> String {
        match self {
            MaskKind::Causal => "causal".into(),
            MaskKind::SelfOnly => "self_only".into(),
            MaskKind::PartialCausal(r) => format!("partial_causal({r})"),
            MaskKind::None => "none".into(),
        }
    }

    /// Whether building this mask consumes randomness.
    pub fn is_random(&self) -> bool {
        matches!(self, MaskKind::PartialCausal(r) if *r > 0.0 && *r < 1.0)
    }
}

/// Dense `[size × size]` boolean visibility matrix, `visible(q, k)` true iff
/// query `q` may attend key `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    size: usize,
    visible: Vec<bool>,
}

impl Mask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn visible(&self, query: usize, key: usize) -> bool {
        self.visible[query * self.size + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.visible[query * self.size..(query + 1) * self.size]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.visible
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut visible = vec![false; size * size];
        for q in 0..size {
            for k in 0..size {
                visible[q * size + k] = f(q, k);
            }
        }
        Mask { size, visible }
    }

    pub fn causal(size: usize) -> Self {
        Mask::from_fn(size, |q, k| k <= q)
    }

    pub fn self_only(size: usize) -> Self {
        Mask::from_fn(size, |q, k| k == q)
    }

    pub fn full(size: usize) -> Self {
        Mask::from_fn(size, |_, _| true)
    }
}

/// Builds the visibility matrix for `kind`. Only partial-causal masks draw
/// from `rng`; a fresh subset is sampled on every call.
pub fn build_mask(kind: MaskKind, size: usize, rng: &mut impl Rng) -> Result<Mask> {
    if size == 0 {
        return Err(Error::invalid("mask size must be at least 1"));
    }
    Ok(match kind {
        MaskKind::Causal => Mask::causal(size),
        MaskKind::SelfOnly => Mask::self_only(size),
        MaskKind::None => Mask::full(size),
        MaskKind::PartialCausal(ratio) => {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::invalid(format!(
                    "mask ratio {ratio} outside [0, 1]"
                )));
            }
            let mut mask = Mask::self_only(size);
            for q in 1..size {
                let keep = ((1.0 - ratio) * q as f64).round() as usize;
                if keep == q {
                    mask.visible[q * size..q * size + q].fill(true);
                } else if keep > 0 {
                    for k in sample(rng, q, keep) {
                        mask.visible[q * size + k] = true;
                    }
                }
            }
            mask
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(m: &Mask) -> Vec<Vec<u8>> {
        (0..m.size())
            .map(|q| m.row(q).iter().map(|&b| b as u8).collect())
            .collect()
    }

    #[test]
    fn causal_is_lower_triangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = build_mask(MaskKind::Causal, 3, &mut rng).unwrap();
        assert_eq!(rows(&m), vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]]);
    }

    #[test]
    fn self_only_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = build_mask(MaskKind::SelfOnly, 3, &mut rng).unwrap();
        assert_eq!(rows(&m), vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn partial_causal_row_counts() {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = build_mask(MaskKind::PartialCausal(0.5), 5, &mut rng).unwrap();
            let row4 = m.row(4);
            assert!(row4[4]);
            assert_eq!(row4[..4].iter().filter(|&&b| b).count(), 2);
            // never sees the future
            for q in 0..5 {
                for k in q + 1..5 {
                    assert!(!m.visible(q, k));
                }
            }
        }
    }

    #[test]
    fn partial_causal_endpoints_reduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            build_mask(MaskKind::PartialCausal(1.0), 6, &mut rng).unwrap(),
            Mask::self_only(6)
        );
        assert_eq!(
            build_mask(MaskKind::PartialCausal(0.0), 6, &mut rng).unwrap(),
            Mask::causal(6)
        );
    }

    #[test]
    fn partial_causal_resamples_per_call() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = build_mask(MaskKind::PartialCausal(0.5), 12, &mut rng).unwrap();
        let b = build_mask(MaskKind::PartialCausal(0.5), 12, &mut rng).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn ratio_out_of_range_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_mask(MaskKind::PartialCausal(1.5), 4, &mut rng).is_err());
        assert!(build_mask(MaskKind::PartialCausal(-0.1), 4, &mut rng).is_err());
    }
}
