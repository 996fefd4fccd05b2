//! Attentiveness-based token dropping for the online image encoder.

use tapegrad::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Patch tokens kept out of `n` at keep rate `keep_rate`: `⌈κ·n⌉`.
pub fn kept_count(n: usize, keep_rate: f64) -> usize {
    // tolerance absorbs products such as 0.9 * 10 = 9.000000000000002
    let k = (keep_rate * n as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(n)
}

/// Sparsify layers for a `depth`-layer encoder: depth fractions 4/12, 7/12
/// and 10/12 rounded to the nearest layer (1-based), deduplicated.
pub fn default_sparsify_layers(depth: usize) -> Vec<usize> {
    let mut layers: Vec<usize> = [4.0, 7.0, 10.0]
        .iter()
        .map(|f| ((f / 12.0 * depth as f64).round() as usize).clamp(1, depth.max(1)))
        .collect();
    layers.dedup();
    layers
}

/// Head-averaged attention from the `[CLS]` query (position 0) to every patch
/// token, given weights shaped `[heads, n + 1, n + 1]`.
pub fn cls_attentiveness<T: Scalar>(attention: &Tensor<T>) -> Result<Vec<T>> {
    let s = attention.shape();
    if s.len() != 3 || s[1] != s[2] || s[1] == 0 {
        return Err(Error::Contract(format!(
            "attention must be [heads, n+1, n+1], got {s:?}"
        )));
    }
    Ok(cls_scores(attention.data(), s[0], s[1]))
}

/// Slice form of [`cls_attentiveness`] for one image's `[heads, seq, seq]`
/// block.
pub(crate) fn cls_scores<T: Scalar>(attn: &[T], heads: usize, seq: usize) -> Vec<T> {
    let mut scores = vec![T::zero(); seq - 1];
    for h in 0..heads {
        let row = &attn[h * seq * seq..h * seq * seq + seq];
        for (s, &a) in scores.iter_mut().zip(&row[1..]) {
            *s = *s + a;
        }
    }
    let inv = T::from_usize(heads).unwrap().recip();
    scores.iter_mut().for_each(|s| *s = *s * inv);
    scores
}

/// Indices (into the patch tokens) of the `⌈κ·n⌉` highest scores, in
/// ascending index order. Ties go to the lower index.
pub fn select_kept<T: Scalar>(scores: &[T], keep_rate: f64) -> Vec<usize> {
    let k = kept_count(scores.len(), keep_rate);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Drops inattentive patch tokens from a `[(n + 1), d]` sequence whose row 0
/// is `[CLS]`. Returns the shortened sequence and the kept patch indices.
pub fn token_sparsify<T: Scalar>(
    tokens: &Tensor<T>,
    scores: &[T],
    keep_rate: f64,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != scores.len() + 1 {
        return Err(Error::Contract(format!(
            "{} scores for token matrix {s:?}",
            scores.len()
        )));
    }
    let kept = select_kept(scores, keep_rate);
    let mut data = tokens.row(0).to_vec();
    for &j in &kept {
        data.extend_from_slice(tokens.row(j + 1));
    }
    Ok((Tensor::new(&[kept.len() + 1, s[1]], data)?, kept))
}

/// Kept patch indices (into the original patch grid) after each sparsify
/// layer, for one image. `[CLS]` is implicit and never dropped.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SparsifyTrace {
    pub layers: Vec<Vec<usize>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_counts() {
        assert_eq!(kept_count(196, 0.7), 138);
        assert_eq!(kept_count(64, 0.7), 45);
        assert_eq!(kept_count(45, 0.7), 32);
        assert_eq!(kept_count(32, 0.7), 23);
        assert_eq!(kept_count(10, 0.9), 9);
        assert_eq!(kept_count(7, 1.0), 7);
    }

    #[test]
    fn default_layers() {
        assert_eq!(default_sparsify_layers(12), vec![4, 7, 10]);
        assert_eq!(default_sparsify_layers(6), vec![2, 4, 5]);
        assert_eq!(default_sparsify_layers(4), vec![1, 2, 3]);
    }

    #[test]
    fn attentiveness_examples() {
        // one head, uniform over CLS + 3 patches
        let a = Tensor::<f64>::full(&[1, 4, 4], 0.25);
        assert_eq!(cls_attentiveness(&a).unwrap(), vec![0.25; 3]);

        // two heads, CLS rows [_, 1,0,0] and [_, 0,1,0]
        let mut data = vec![0.0; 2 * 16];
        data[1] = 1.0;
        data[16 + 2] = 1.0;
        let a = Tensor::<f64>::new(&[2, 4, 4], data).unwrap();
        assert_eq!(cls_attentiveness(&a).unwrap(), vec![0.5, 0.5, 0.0]);

        // single patch: score is what CLS does not spend on itself
        let a = Tensor::<f64>::new(&[1, 2, 2], vec![0.3, 0.7, 0.5, 0.5]).unwrap();
        let s = cls_attentiveness(&a).unwrap();
        assert!((s[0] - (1.0 - 0.3)).abs() < 1e-12);
    }

    #[test]
    fn sparsify_examples() {
        let tokens = Tensor::<f64>::new(&[4, 1], vec![9.0, 1.0, 2.0, 3.0]).unwrap();
        let (all, kept) = token_sparsify(&tokens, &[0.1, 0.5, 0.2], 1.0).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
        assert_eq!(all, tokens);

        let (out, kept) = token_sparsify(&tokens, &[0.5, 0.3, 0.2], 0.6).unwrap();
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(out.data(), &[9.0, 1.0, 2.0]);

        // order of survivors follows original position, not score
        let (out, kept) = token_sparsify(&tokens, &[0.1, 0.3, 0.9], 0.6).unwrap();
        assert_eq!(kept, vec![1, 2]);
        assert_eq!(out.data(), &[9.0, 2.0, 3.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(select_kept(&[0.2, 0.2, 0.2, 0.2], 0.5), vec![0, 1]);
    }

    #[test]
    fn score_length_mismatch_is_rejected() {
        let tokens = Tensor::<f32>::zeros(&[3, 2]);
        assert!(token_sparsify(&tokens, &[0.1], 0.5).is_err());
    }
}
