use serde::{Deserialize, Serialize};
use tapegrad::{Tape, Tensor};

use super::state::{Model, TrainState};
use crate::data::{class_prompt, Color, PairBatch, PairRecord, Shape, Vocab};
use crate::encoders::SparsifyMode;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 128;
pub const CLASS_COUNT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub encoder: Encoder,
    pub keep_rate: f64,
    pub zero_shot_top1: f64,
    pub image_to_text: Recall,
    pub text_to_image: Recall,
}

/// Unit-norm image embeddings `[n, proj_dim]`, computed in chunks.
pub fn embed_images(model: &Model, store: &ParamStore<f32>, images: &Tensor<f32>, mode: SparsifyMode) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let per = images.numel() / n.max(1);
    let mut out = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(&shape, images.data()[start * per..end * per].to_vec())?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let e = model.vit.forward(&mut tape, &p, &chunk, mode)?.embeddings;
        out.extend_from_slice(tape.value(e).data());
    }
    Ok(Tensor::new(&[n, model.vit.config().proj_dim], out)?)
}

pub fn embed_texts(model: &Model, store: &ParamStore<f32>, rows: &[Vec<usize>]) -> Result<Tensor<f32>> {
    let mut out = Vec::new();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let e = model.text.forward(&mut tape, &p, chunk)?;
        out.extend_from_slice(tape.value(e).data());
    }
    Ok(Tensor::new(&[rows.len(), model.text.config().proj_dim], out)?)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest score; the lowest index wins ties.
fn argmax(scores: impl Iterator<Item = f32>) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Top-1 accuracy of nearest-prompt classification.
pub fn zero_shot_accuracy(images: &Tensor<f32>, prompts: &Tensor<f32>, labels: &[usize]) -> f64 {
    let hits = (0..images.rows())
        .filter(|&i| argmax((0..prompts.rows()).map(|c| dot(images.row(i), prompts.row(c)))) == labels[i])
        .count();
    hits as f64 / images.rows() as f64
}

/// Token rows of the sixteen "a photo of a {color} {shape}" prompts, in
/// class order.
pub fn class_prompt_rows(vocab: &Vocab, max_len: usize) -> Result<Vec<Vec<usize>>> {
    let mut rows = Vec::with_capacity(CLASS_COUNT);
    for &shape in Shape::ALL {
        for &color in Color::ALL {
            rows.push(vocab.tokenize(&class_prompt(shape, color), max_len)?);
        }
    }
    Ok(rows)
}

/// R@1/5/10 of ranking `candidates` for each query by cosine similarity. A
/// candidate counts as correct when its key equals the query's key, so
/// duplicate scenes in the pool are interchangeable; ties rank the lower
/// index first.
pub fn recall_at_k(queries: &Tensor<f32>, candidates: &Tensor<f32>, query_keys: &[usize], candidate_keys: &[usize]) -> Result<Recall> {
    let m = candidates.rows();
    if m < 10 {
        return Err(Error::config("eval", format!("R@10 needs at least 10 candidates, got {m}")));
    }
    let mut hits = [0usize; 3];
    let mut order: Vec<(f32, usize)> = Vec::with_capacity(m);
    for q in 0..queries.rows() {
        order.clear();
        order.extend((0..m).map(|j| (dot(queries.row(q), candidates.row(j)), j)));
        order.select_nth_unstable_by(9, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        order[..10].sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let first = order[..10].iter().position(|&(_, j)| candidate_keys[j] == query_keys[q]);
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            if first.is_some_and(|r| r < k) {
                *h += 1;
            }
        }
    }
    let n = queries.rows() as f64;
    Ok(Recall {
        r1: hits[0] as f64 / n,
        r5: hits[1] as f64 / n,
        r10: hits[2] as f64 / n,
    })
}

/// Zero-shot accuracy and retrieval on aligned `eval` pairs.
pub fn evaluate(
    model: &Model,
    state: &TrainState,
    encoder: Encoder,
    keep_rate: f64,
    eval: &[PairRecord],
    checkpoint: String,
) -> Result<EvalReport> {
    let cfg = model.vit.config();
    let max_len = model.text.config().max_len;
    let vocab = Vocab::new();
    let batch = PairBatch::from_records(eval, &vocab, cfg.image_size, max_len)?;
    let (image_store, text_store) = match encoder {
        Encoder::Student => (&state.online, &state.text),
        Encoder::Teacher => (&state.teacher, state.text_teacher.as_ref().unwrap_or(&state.text)),
    };
    let images = embed_images(model, image_store, &batch.images, SparsifyMode::KeepRate(keep_rate))?;
    let texts = embed_texts(model, text_store, &batch.token_id_rows)?;
    let prompts = embed_texts(model, text_store, &class_prompt_rows(&vocab, max_len)?)?;
    let labels: Vec<usize> = eval.iter().map(|r| r.image.class()).collect();
    let image_keys: Vec<usize> = eval.iter().map(|r| r.image.index()).collect();
    let caption_keys: Vec<usize> = eval.iter().map(|r| r.caption.index()).collect();
    Ok(EvalReport {
        checkpoint,
        encoder,
        keep_rate,
        zero_shot_top1: zero_shot_accuracy(&images, &prompts, &labels),
        image_to_text: recall_at_k(&images, &texts, &image_keys, &caption_keys)?,
        text_to_image: recall_at_k(&texts, &images, &caption_keys, &image_keys)?,
    })
}

/// Expected R@1 of a ranking independent of the keys: the mean fraction of
/// candidates sharing each query's key.
pub fn chance_recall_at_1(query_keys: &[usize], candidate_keys: &[usize]) -> f64 {
    let m = candidate_keys.len() as f64;
    query_keys
        .iter()
        .map(|q| candidate_keys.iter().filter(|c| *c == q).count() as f64 / m)
        .sum::<f64>()
        / query_keys.len() as f64
}
