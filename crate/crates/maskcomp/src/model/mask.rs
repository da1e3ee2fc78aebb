//! The structural attention mask.
//!
//! An additive bias over the concatenated sequence enforcing two rules:
//! every stream may attend to the text and image segments (and itself),
//! but the reference and style segments are mutually masked. The bias
//! depends only on the four segment lengths, never on token content.

use super::StreamLens;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPolicy {
    /// No structural bias; all positions open (ablation setting).
    None,
    /// Reference and style mutually masked.
    Structural,
}

/// Additive 0 / -inf bias matrix over the concatenated sequence.
#[derive(Clone, Debug)]
pub struct StructuralMask<T: Scalar> {
    pub bias: Tensor<T>,
    pub lens: StreamLens,
}

impl<T: Scalar> StructuralMask<T> {
    /// All-open mask of the right shape.
    pub fn open(lens: StreamLens) -> StructuralMask<T> {
        let n = lens.total();
        StructuralMask {
            bias: Tensor::zeros(vec![n, n]),
            lens,
        }
    }

    pub fn for_policy(policy: MaskPolicy, lens: StreamLens) -> StructuralMask<T> {
        match policy {
            MaskPolicy::None => StructuralMask::open(lens),
            MaskPolicy::Structural => build_structural_mask(lens),
        }
    }

    /// Number of masked (-inf) entries.
    pub fn masked_count(&self) -> usize {
        let cut = T::MASK_NEG * T::from_f64(0.5);
        self.bias.data().iter().filter(|&&v| v <= cut).count()
    }
}

/// Builds the disentanglement mask for the given segment lengths.
///
/// `bias[q][k]` is -inf exactly when one of `q`, `k` falls in the style
/// segment and the other in the reference segment; 0 everywhere else.
pub fn build_structural_mask<T: Scalar>(lens: StreamLens) -> StructuralMask<T> {
    let n = lens.total();
    let style_start = lens.text + lens.image;
    let ref_start = style_start + lens.style;
    let in_style = |i: usize| i >= style_start && i < ref_start;
    let in_ref = |i: usize| i >= ref_start;

    let mut bias = vec![T::ZERO; n * n];
    for q in 0..n {
        for k in 0..n {
            if (in_ref(q) && in_style(k)) || (in_style(q) && in_ref(k)) {
                bias[q * n + k] = T::MASK_NEG;
            }
        }
    }
    StructuralMask {
        bias: Tensor::new(vec![n, n], bias).expect("square bias"),
        lens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent rule enumeration: classify every index pair by segment
    /// membership, computed from scratch.
    fn oracle_masked(lens: StreamLens) -> Vec<(usize, usize)> {
        let mut segments = Vec::new();
        for _ in 0..lens.text {
            segments.push('c');
        }
        for _ in 0..lens.image {
            segments.push('t');
        }
        for _ in 0..lens.style {
            segments.push('s');
        }
        for _ in 0..lens.reference {
            segments.push('r');
        }
        let mut pairs = Vec::new();
        for (q, &sq) in segments.iter().enumerate() {
            for (k, &sk) in segments.iter().enumerate() {
                if (sq == 'r' && sk == 's') || (sq == 's' && sk == 'r') {
                    pairs.push((q, k));
                }
            }
        }
        pairs
    }

    #[test]
    fn worked_example_has_eight_masked_entries() {
        let lens = StreamLens::new(2, 3, 2, 2);
        let m = build_structural_mask::<f64>(lens);
        assert_eq!(m.bias.shape(), &[9, 9]);
        assert_eq!(m.masked_count(), 8);
        for (q, k) in oracle_masked(lens) {
            assert_eq!(m.bias.data()[q * 9 + k], f64::MASK_NEG);
        }
    }

    #[test]
    fn no_style_tokens_means_no_rule() {
        let m = build_structural_mask::<f32>(StreamLens::new(3, 4, 0, 2));
        assert_eq!(m.masked_count(), 0);
        assert!(m.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_is_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let lens = StreamLens::new(
                rng.random_range(0..5),
                rng.random_range(0..6),
                rng.random_range(0..5),
                rng.random_range(0..5),
            );
            let m = build_structural_mask::<f64>(lens);
            let n = lens.total();
            let d = m.bias.data();
            for q in 0..n {
                for k in 0..n {
                    assert_eq!(d[q * n + k], d[k * n + q]);
                }
            }
            // Exactly the oracle's pairs are masked.
            let oracle = oracle_masked(lens);
            assert_eq!(m.masked_count(), oracle.len());
            for (q, k) in oracle {
                assert_eq!(d[q * n + k], f64::MASK_NEG);
            }
        }
    }

    #[test]
    fn open_mask_matches_policy_none() {
        let lens = StreamLens::new(1, 2, 3, 4);
        let a = StructuralMask::<f32>::for_policy(MaskPolicy::None, lens);
        let b = StructuralMask::<f32>::open(lens);
        assert_eq!(a.bias.data(), b.bias.data());
        let c = StructuralMask::<f32>::for_policy(MaskPolicy::Structural, lens);
        assert_eq!(c.masked_count(), 2 * 3 * 4);
    }
}
