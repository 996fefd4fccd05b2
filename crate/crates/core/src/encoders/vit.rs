use rand::Rng;
use tapegrad::{Scalar, Tape, Tensor, Var, L2_NORMALIZE_EPS};

use super::layers::{Block, LayerNorm, Linear};
use super::sparsify::{cls_scores, select_kept, SparsifyTrace};
use super::ViTConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

/// Splits an `H×W×C` image into non-overlapping raster-order patches, each
/// flattened row-major (patch row, patch column, channel).
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != s[1] || patch_size == 0 || !s[0].is_multiple_of(patch_size) {
        return Err(Error::config(
            "patch_size",
            format!("image {s:?} cannot be split into {patch_size}-pixel patches"),
        ));
    }
    let mut out = Vec::with_capacity(image.numel());
    patchify_into(image.data(), s[0], s[2], patch_size, &mut out);
    let side = s[0] / patch_size;
    Ok(Tensor::new(&[side * side, patch_size * patch_size * s[2]], out)?)
}

fn patchify_into<T: Scalar>(img: &[T], size: usize, channels: usize, patch: usize, out: &mut Vec<T>) {
    let side = size / patch;
    for py in 0..side {
        for px in 0..side {
            for y in 0..patch {
                let row = (py * patch + y) * size + px * patch;
                out.extend_from_slice(&img[row * channels..(row + patch) * channels]);
            }
        }
    }
}

/// Whether the forward pass runs the token-dropping code at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsifyMode {
    /// Plain ViT: no attentiveness ranking, no row gathering.
    Dense,
    /// Drop to `⌈κ·n⌉` patch tokens at every configured sparsify layer.
    KeepRate(f64),
}

pub struct VitOutput {
    /// Unit-norm projected embeddings, `[batch, proj_dim]`.
    pub embeddings: Var,
    pub traces: Vec<SparsifyTrace>,
    /// Patch tokens per image after each sparsify layer.
    pub patch_counts: Vec<usize>,
}

/// Pre-norm ViT with a learned `[CLS]` token and attentiveness-based token
/// sparsification.
#[derive(Debug, Clone)]
pub struct VisionTransformer {
    cfg: ViTConfig,
    sparsify_layers: Vec<usize>,
    patch_embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    proj: ParamId,
}

impl VisionTransformer {
    pub fn new<T: Scalar, R: Rng>(cfg: &ViTConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
        let patch_embed = Linear::new(store, "patch_embed", patch_dim, d, true, rng);
        let cls = store.add_normal("cls", &[1, d], 0.02, rng);
        let pos = store.add_normal("pos", &[cfg.patches() + 1, d], 0.02, rng);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("block{i}"), d, cfg.heads, rng))
            .collect();
        let ln_f = LayerNorm::new(store, "ln_f", d);
        let proj = store.add_normal("proj", &[d, cfg.proj_dim], (d as f64).powf(-0.5), rng);
        Ok(Self {
            cfg: cfg.clone(),
            sparsify_layers: cfg.resolved_sparsify_layers(),
            patch_embed,
            cls,
            pos,
            blocks,
            ln_f,
            proj,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    /// Encodes `[batch, H, W, C]` images.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        images: &Tensor<T>,
        mode: SparsifyMode,
    ) -> Result<VitOutput> {
        let cfg = &self.cfg;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != cfg.channels {
            return Err(Error::Contract(format!(
                "expected [batch, {0}, {0}, {1}] images, got {s:?}",
                cfg.image_size, cfg.channels
            )));
        }
        let batch = s[0];
        let n = cfg.patches();
        let patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
        let per_image = cfg.image_size * cfg.image_size * cfg.channels;

        let mut patches = Vec::with_capacity(images.numel());
        for img in images.data().chunks(per_image) {
            patchify_into(img, cfg.image_size, cfg.channels, cfg.patch_size, &mut patches);
        }
        let patches = tape.constant(Tensor::new(&[batch * n, patch_dim], patches)?);
        let emb = self.patch_embed.forward(tape, p, patches)?;

        // row 0 of `all` is [CLS]; patch i of image b is row 1 + b*n + i
        let all = tape.concat_rows(&[p[self.cls], emb])?;
        let mut rows = Vec::with_capacity(batch * (n + 1));
        let mut pos_rows = Vec::with_capacity(batch * (n + 1));
        for b in 0..batch {
            rows.push(0);
            rows.extend((0..n).map(|i| 1 + b * n + i));
            pos_rows.extend(0..=n);
        }
        let x = tape.gather_rows(all, &rows)?;
        let pos = tape.gather_rows(p[self.pos], &pos_rows)?;
        let mut x = tape.add(x, pos)?;

        // original patch index of every surviving non-CLS token, per image
        let mut origin: Vec<Vec<usize>> = vec![(0..n).collect(); batch];
        let mut traces = vec![SparsifyTrace::default(); batch];
        let mut patch_counts = Vec::new();
        let mut seq = n + 1;

        for (layer, block) in self.blocks.iter().enumerate() {
            let (h, probs) = block.attend(tape, p, x, batch, seq, None)?;
            x = h;
            let keep_rate = match mode {
                SparsifyMode::KeepRate(k) if self.sparsify_layers.contains(&(layer + 1)) => Some(k),
                _ => None,
            };
            if let Some(keep_rate) = keep_rate {
                let attn = tape.value(probs).data();
                let block_len = cfg.heads * seq * seq;
                let mut keep_rows = Vec::new();
                let mut kept_len = 0;
                for b in 0..batch {
                    let scores = cls_scores(&attn[b * block_len..(b + 1) * block_len], cfg.heads, seq);
                    let kept = select_kept(&scores, keep_rate);
                    kept_len = kept.len();
                    keep_rows.push(b * seq);
                    keep_rows.extend(kept.iter().map(|&j| b * seq + 1 + j));
                    origin[b] = kept.iter().map(|&j| origin[b][j]).collect();
                    traces[b].layers.push(origin[b].clone());
                }
                x = tape.gather_rows(x, &keep_rows)?;
                seq = kept_len + 1;
                patch_counts.push(kept_len);
            }
            x = block.feed_forward(tape, p, x)?;
        }

        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        let cls = self.ln_f.forward(tape, p, cls)?;
        let z = tape.matmul(cls, p[self.proj])?;
        let embeddings = tape.l2_normalize_rows(z, L2_NORMALIZE_EPS)?;
        Ok(VitOutput {
            embeddings,
            traces,
            patch_counts,
        })
    }
}
