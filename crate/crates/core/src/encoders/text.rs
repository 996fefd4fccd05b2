use rand::Rng;
use tapegrad::{Scalar, Tape, Tensor, Var, L2_NORMALIZE_EPS};

use super::layers::{Block, LayerNorm};
use super::TextConfig;
use crate::data::PAD_ID;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// Causal transformer pooled at the last non-pad position of each row.
///
/// Rows are right-padded, so under the causal mask no real token ever
/// attends to a pad and trailing pads cannot change the pooled state.
#[derive(Debug, Clone)]
pub struct TextTransformer {
    cfg: TextConfig,
    token_embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    proj: ParamId,
}

fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.data_mut()[i * len + j] = T::neg_infinity();
        }
    }
    m
}

impl TextTransformer {
    pub fn new<T: Scalar, R: Rng>(cfg: &TextConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let d = cfg.width;
        let token_embed = store.add_normal("token_embed", &[cfg.vocab_size, d], 0.02, rng);
        let pos = store.add_normal("pos", &[cfg.max_len, d], 0.01, rng);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("block{i}"), d, cfg.heads, rng))
            .collect();
        let ln_f = LayerNorm::new(store, "ln_f", d);
        let proj = store.add_normal("proj", &[d, cfg.proj_dim], (d as f64).powf(-0.5), rng);
        Ok(Self {
            cfg: cfg.clone(),
            token_embed,
            pos,
            blocks,
            ln_f,
            proj,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    /// Encodes equal-length token rows into `[batch, proj_dim]` unit vectors.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, rows: &[Vec<usize>]) -> Result<Var> {
        let batch = rows.len();
        let len = rows.first().map_or(0, Vec::len);
        if batch == 0 || len == 0 || len > self.cfg.max_len || rows.iter().any(|r| r.len() != len) {
            return Err(Error::Contract(format!(
                "token rows must be non-empty, equal-length and at most {} long",
                self.cfg.max_len
            )));
        }
        let mut ids = Vec::with_capacity(batch * len);
        for row in rows {
            for &id in row {
                if id >= self.cfg.vocab_size {
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab_size: self.cfg.vocab_size,
                    });
                }
                ids.push(id);
            }
        }
        let tok = tape.embedding_lookup(p[self.token_embed], &ids)?;
        let pos_rows: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = tape.gather_rows(p[self.pos], &pos_rows)?;
        let mut x = tape.add(tok, pos)?;
        let mask = causal_mask::<T>(len);
        for block in &self.blocks {
            let (h, _) = block.attend(tape, p, x, batch, len, Some(&mask))?;
            x = block.feed_forward(tape, p, h)?;
        }
        let pooled: Vec<usize> = rows
            .iter()
            .enumerate()
            .map(|(b, r)| b * len + r.iter().rposition(|&id| id != PAD_ID).unwrap_or(0))
            .collect();
        let x = tape.gather_rows(x, &pooled)?;
        let x = self.ln_f.forward(tape, p, x)?;
        let z = tape.matmul(x, p[self.proj])?;
        Ok(tape.l2_normalize_rows(z, L2_NORMALIZE_EPS)?)
    }
}
