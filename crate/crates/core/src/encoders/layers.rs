use rand::Rng;
use tapegrad::{Scalar, Tape, Tensor, Var, LAYER_NORM_EPS};

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};

/// `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(&format!("{name}.weight"), &[fan_in, fan_out], (fan_in as f64).powf(-0.5), rng);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        Ok(match self.b {
            Some(b) => tape.add_bias(y, p[b])?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[width])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p[self.gamma], p[self.beta], LAYER_NORM_EPS)?)
    }
}

/// Multi-head self-attention over `batch` sequences of equal length packed
/// as `[batch * seq, width]`.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    width: usize,
}

pub struct AttentionOutput {
    pub value: Var,
    /// Row-softmaxed attention weights, `[batch * heads, seq, seq]`.
    pub probs: Var,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, true, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, true, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, true, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng),
            heads,
            width,
        }
    }

    fn split_heads<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let dh = self.width / self.heads;
        let x = tape.reshape(x, &[batch, seq, self.heads, dh])?;
        let x = tape.swap_axes12(x)?;
        Ok(tape.reshape(x, &[batch * self.heads, seq, dh])?)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        batch: usize,
        seq: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<AttentionOutput> {
        let dh = self.width / self.heads;
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let q = self.split_heads(tape, q, batch, seq)?;
        let k = self.split_heads(tape, k, batch, seq)?;
        let v = self.split_heads(tape, v, batch, seq)?;
        let scores = tape.matmul_t(q, k, false, true)?;
        let mut scores = tape.scale(scores, T::from_f64_lossy((dh as f64).powf(-0.5)))?;
        if let Some(mask) = mask {
            scores = tape.add_constant(scores, mask)?;
        }
        let probs = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.reshape(ctx, &[batch, self.heads, seq, dh])?;
        let ctx = tape.swap_axes12(ctx)?;
        let ctx = tape.reshape(ctx, &[batch * seq, self.width])?;
        let value = self.out.forward(tape, p, ctx)?;
        Ok(AttentionOutput { value, probs })
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, p, h)
    }
}

/// Pre-norm transformer block, split in two halves so callers can act on the
/// sequence between attention and the MLP.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: Attention::new(store, &format!("{name}.attn"), width, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, 4 * width, rng),
        }
    }

    /// `x + attn(ln1(x))`, plus the attention weights.
    pub fn attend<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        batch: usize,
        seq: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var, Var)> {
        let h = self.ln1.forward(tape, p, x)?;
        let out = self.attn.forward(tape, p, h, batch, seq, mask)?;
        Ok((tape.add(x, out.value)?, out.probs))
    }

    /// `x + mlp(ln2(x))`.
    pub fn feed_forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.mlp.forward(tape, p, h)?;
        Ok(tape.add(x, h)?)
    }
}
