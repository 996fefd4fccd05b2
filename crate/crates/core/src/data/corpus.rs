use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tapegrad::Tensor;

use super::scene::{SceneSpec, SCENE_COUNT};
use super::vocab::{caption, Vocab, TEMPLATES};
use crate::error::{Error, Result};

/// Name of the generator behind every random stream, recorded in configs.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    TrainCorpus,
    EvalCorpus,
    ModelInit,
    EpochOrder(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::TrainCorpus => 0,
            Stream::EvalCorpus => 1,
            Stream::ModelInit => 2,
            Stream::EpochOrder(e) => 1024 + e,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// One image–caption pair, stored symbolically. The caption may describe a
/// different scene than the image when the pair was misaligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image: SceneSpec,
    pub caption: SceneSpec,
    pub template: usize,
    pub misaligned: bool,
}

impl PairRecord {
    pub fn caption_words(&self) -> Vec<&'static str> {
        caption(&self.caption, self.template)
    }
}

/// Draws `n` uniform scenes with templated captions, then deranges the
/// captions of `⌊p·n⌋` randomly chosen pairs among themselves. A single chosen
/// pair cannot be deranged and stays aligned.
pub fn generate_pairs<R: Rng>(rng: &mut R, n: usize, misalignment: f64) -> Result<Vec<PairRecord>> {
    if !(0.0..=1.0).contains(&misalignment) {
        return Err(Error::config(
            "corpus.misalignment",
            format!("{misalignment} outside [0, 1]"),
        ));
    }
    let mut pairs: Vec<PairRecord> = (0..n)
        .map(|_| {
            let spec = SceneSpec::from_index(rng.gen_range(0..SCENE_COUNT));
            PairRecord {
                image: spec,
                caption: spec,
                template: rng.gen_range(0..TEMPLATES),
                misaligned: false,
            }
        })
        .collect();
    let m = (misalignment * n as f64).floor() as usize;
    if m >= 2 {
        let chosen = sample(rng, n, m).into_vec();
        // Sattolo's algorithm yields a single m-cycle: no fixed points
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            let j = rng.gen_range(0..i);
            perm.swap(i, j);
        }
        let originals: Vec<(SceneSpec, usize)> = chosen.iter().map(|&i| (pairs[i].caption, pairs[i].template)).collect();
        for (slot, &target) in chosen.iter().enumerate() {
            let (spec, template) = originals[perm[slot]];
            pairs[target].caption = spec;
            pairs[target].template = template;
            pairs[target].misaligned = true;
        }
    }
    Ok(pairs)
}

/// Rendered images plus token rows for a set of pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    /// `[n, size, size, 3]` in `[0, 1]`.
    pub images: Tensor<f32>,
    pub token_id_rows: Vec<Vec<usize>>,
    pub misaligned_mask: Vec<bool>,
    pub records: Vec<PairRecord>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn from_records(records: &[PairRecord], vocab: &Vocab, image_size: usize, max_len: usize) -> Result<Self> {
        let mut pixels = Vec::with_capacity(records.len() * image_size * image_size * 3);
        let mut rows = Vec::with_capacity(records.len());
        for r in records {
            r.image.render_into(image_size, &mut pixels);
            rows.push(vocab.tokenize(&r.caption_words(), max_len)?);
        }
        Ok(Self {
            images: Tensor::new(&[records.len(), image_size, image_size, 3], pixels)?,
            token_id_rows: rows,
            misaligned_mask: records.iter().map(|r| r.misaligned).collect(),
            records: records.to_vec(),
        })
    }
}

/// Pure function of `(seed, n, p)`: renders and captions `n` pairs with
/// `⌊p·n⌋` caption swaps.
pub fn make_batch(seed: u64, n: usize, misalignment: f64, image_size: usize, max_len: usize) -> Result<PairBatch> {
    let mut rng = stream_rng(seed, Stream::TrainCorpus);
    let records = generate_pairs(&mut rng, n, misalignment)?;
    PairBatch::from_records(&records, &Vocab::new(), image_size, max_len)
}

/// Visiting order of `n` training pairs in `epoch`; depends only on the seed
/// and the epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::EpochOrder(epoch)));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_keeps_every_pair_aligned() {
        let b = make_batch(1, 50, 0.0, 16, 16).unwrap();
        assert!(b.misaligned_mask.iter().all(|m| !m));
        assert!(b.records.iter().all(|r| r.image == r.caption));
    }

    #[test]
    fn full_rate_deranges_every_caption() {
        let mut rng = stream_rng(4, Stream::TrainCorpus);
        let aligned = {
            let mut r = rng.clone();
            generate_pairs(&mut r, 40, 0.0).unwrap()
        };
        let swapped = generate_pairs(&mut rng, 40, 1.0).unwrap();
        assert_eq!(swapped.iter().filter(|r| r.misaligned).count(), 40);
        // each caption now comes from another pair's original caption
        for (i, r) in swapped.iter().enumerate() {
            let source = aligned
                .iter()
                .position(|a| (a.caption, a.template) == (r.caption, r.template))
                .unwrap();
            let own = (aligned[i].caption, aligned[i].template);
            assert!(source != i || aligned.iter().filter(|a| (a.caption, a.template) == own).count() > 1);
        }
    }

    #[test]
    fn single_swap_is_impossible_and_left_aligned() {
        let mut rng = stream_rng(0, Stream::TrainCorpus);
        let pairs = generate_pairs(&mut rng, 10, 0.15).unwrap();
        assert_eq!(pairs.iter().filter(|r| r.misaligned).count(), 0);
    }

    #[test]
    fn mask_count_is_floor_of_rate() {
        let mut rng = stream_rng(9, Stream::TrainCorpus);
        let pairs = generate_pairs(&mut rng, 128, 0.2).unwrap();
        assert_eq!(pairs.iter().filter(|r| r.misaligned).count(), 25);
    }

    #[test]
    fn swapping_preserves_caption_multiset() {
        let mut a = stream_rng(11, Stream::TrainCorpus);
        let mut b = a.clone();
        let clean = generate_pairs(&mut a, 64, 0.0).unwrap();
        let noisy = generate_pairs(&mut b, 64, 0.5).unwrap();
        let key = |r: &PairRecord| (r.caption.index(), r.template);
        let mut x: Vec<_> = clean.iter().map(key).collect();
        let mut y: Vec<_> = noisy.iter().map(key).collect();
        x.sort_unstable();
        y.sort_unstable();
        assert_eq!(x, y);
        assert!(clean.iter().zip(&noisy).all(|(c, n)| c.image == n.image));
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a = make_batch(21, 16, 0.25, 16, 16).unwrap();
        let b = make_batch(21, 16, 0.25, 16, 16).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_batch(22, 16, 0.25, 16, 16).unwrap());
    }

    #[test]
    fn rejects_rate_outside_unit_interval() {
        assert!(make_batch(0, 4, 1.5, 16, 16).is_err());
    }

    #[test]
    fn epoch_orders_differ_but_are_reproducible() {
        assert_eq!(epoch_order(3, 0, 100), epoch_order(3, 0, 100));
        assert_ne!(epoch_order(3, 0, 100), epoch_order(3, 1, 100));
    }
}
