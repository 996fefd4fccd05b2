use crate::error::{Result, TensorError};
use crate::fault::{self, Fault};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    StopGradient,
    Matmul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        dims: (usize, usize, usize),
        groups: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    AddConst(usize),
    AddScalar(usize),
    Scale(usize, T),
    ScaleBy(usize, usize),
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    SwapAxes12 {
        x: usize,
        dims: [usize; 4],
    },
    Reshape(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    /// Input and the derivative at each element.
    Gelu(usize, Vec<T>),
    Sum(usize),
    Mean(usize),
    Log(usize),
    Exp(usize),
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    ConcatRows(Vec<usize>),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    L2Normalize {
        x: usize,
        eps: T,
    },
    TakeDiag(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
///
/// Nodes are appended in execution order, so the tape is always in
/// topological order and [`Tape::backward`] visits each node once by walking
/// it in reverse. Leaf gradients accumulate across backward calls until
/// [`Tape::zero_grad`].
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    sg_record: Vec<Tensor<T>>,
    sg_replay: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        None => (1, 1),
        Some((&r, rest)) => (r, rest.iter().product()),
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `c (+)= op(a)·op(b)` for a single `m×k · k×n` product.
#[allow(clippy::too_many_arguments)]
fn mm<T: Scalar>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    beta: T,
) {
    let sa = if ta { (1, m as isize) } else { (k as isize, 1) };
    let sb = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::one(), a, sa, b, sb, beta, c, (n as isize, 1));
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let two = T::from_f64_lossy(2.0);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    // (1 + tanh u) / 2 = sigmoid(2u)
    let s = T::one() / (T::one() + (-two * u).exp());
    let y = x * s;
    let dy = s + two * x * s * (T::one() - s) * c * (T::one() + three * a * x * x);
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            sg_record: Vec::new(),
            sg_replay: None,
        }
    }

    /// A tape whose stop-gradient nodes emit `values` (in call order) instead
    /// of their live inputs. Used to hold detached quantities fixed while a
    /// finite-difference probe perturbs the inputs.
    pub fn with_frozen_stop_gradients(values: Vec<Tensor<T>>) -> Self {
        let mut tape = Self::new();
        tape.sg_replay = Some(values);
        tape
    }

    /// Values produced by every stop-gradient node so far, in call order.
    pub fn stop_gradient_values(&self) -> &[Tensor<T>] {
        &self.sg_record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradient storage is materialized (as zeros) iff
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let shape = value.shape().to_vec();
        let v = self.push(value, Op::Leaf, requires_grad);
        if requires_grad {
            self.leaf_grads[v.0] = Some(Tensor::zeros(&shape));
        }
        v
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.req(v)
    }

    /// Accumulated gradient of a leaf, `None` for non-differentiable nodes.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    // ---- primitives -------------------------------------------------------

    /// Identity in the forward pass; the result is a constant for backward.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = match &self.sg_replay {
            Some(replay) => {
                let k = self.sg_record.len();
                let v = replay
                    .get(k)
                    .cloned()
                    .ok_or(TensorError::ReplayExhausted(replay.len()))?;
                if v.shape() != self.shape(x) {
                    return Err(shape_err("stop_gradient", self.shape(x), v.shape()));
                }
                v
            }
            None => self.value(x).clone(),
        };
        self.sg_record.push(value.clone());
        Ok(self.push(value, Op::StopGradient, false))
    }

    /// Matrix product of rank-2 operands, or a batched product of rank-3
    /// operands with a shared leading dimension. `ta`/`tb` transpose the last
    /// two axes of the respective operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || shape_err("matmul", &sa, &sb);
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(bad());
        }
        let r = sa.len();
        let groups = if r == 3 {
            if sa[0] != sb[0] {
                return Err(bad());
            }
            sa[0]
        } else {
            1
        };
        let (m, ka) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if ka != kb {
            return Err(bad());
        }
        let k = ka;
        let mut out = vec![T::zero(); groups * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for g in 0..groups {
                mm(
                    &mut out[g * m * n..(g + 1) * m * n],
                    &av[g * m * k..(g + 1) * m * k],
                    &bv[g * k * n..(g + 1) * k * n],
                    m,
                    k,
                    n,
                    ta,
                    tb,
                    T::zero(),
                );
            }
        }
        let shape = if r == 3 { vec![groups, m, n] } else { vec![m, n] };
        let req = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Matmul {
                a: a.0,
                b: b.0,
                ta,
                tb,
                dims: (m, k, n),
                groups,
            },
            req,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "add", |x, y| x + y)?;
        let value = Tensor::new(self.shape(a), data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Add(a.0, b.0), req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "sub", |x, y| x - y)?;
        let value = Tensor::new(self.shape(a), data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Sub(a.0, b.0), req))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "mul", |x, y| x * y)?;
        let value = Tensor::new(self.shape(a), data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Mul(a.0, b.0), req))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(bias) != [c] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&b).for_each(|(o, &bb)| *o = *o + bb);
        }
        let req = self.req(x) || self.req(bias);
        Ok(self.push(v, Op::AddBias(x.0, bias.0), req))
    }

    /// Adds a constant tensor broadcast over the leading axes of `x`
    /// (e.g. an attention mask).
    pub fn add_constant(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let xs = self.shape(x);
        let cs = c.shape();
        if cs.len() > xs.len() || xs[xs.len() - cs.len()..] != *cs {
            return Err(shape_err("add_constant", xs, cs));
        }
        let mut v = self.value(x).clone();
        let block = c.numel().max(1);
        for chunk in v.data_mut().chunks_mut(block) {
            chunk.iter_mut().zip(c.data()).for_each(|(o, &cc)| *o = *o + cc);
        }
        let req = self.req(x);
        Ok(self.push(v, Op::AddConst(x.0), req))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|a| a + c);
        let req = self.req(x);
        Ok(self.push(v, Op::AddScalar(x.0), req))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x).map(|a| a * s);
        let req = self.req(x);
        Ok(self.push(v, Op::Scale(x.0, s), req))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("scale_by", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let v = self.value(x).map(|a| a * sv);
        let req = self.req(x) || self.req(s);
        Ok(self.push(v, Op::ScaleBy(x.0, s.0), req))
    }

    /// Transposes the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if !(s.len() == 2 || s.len() == 3) {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: s,
            });
        }
        let r = s.len();
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let groups = if r == 3 { s[0] } else { 1 };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for g in 0..groups {
            let o = g * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[o + j * rows + i] = src[o + i * cols + j];
                }
            }
        }
        let mut shape = s.clone();
        shape.swap(r - 2, r - 1);
        let req = self.req(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Transpose { x: x.0, rows, cols }, req))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Rank {
                op: "swap_axes12",
                expected: 4,
                shape: s,
            });
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.value(x).data(), dims);
        let req = self.req(x);
        Ok(self.push(
            Tensor::new(&[s[0], s[2], s[1], s[3]], out)?,
            Op::SwapAxes12 { x: x.0, dims },
            req,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let req = self.req(x);
        Ok(self.push(v, Op::Reshape(x.0), req))
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        let c = v.cols();
        for row in v.data_mut().chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum = sum + *e;
            }
            row.iter_mut().for_each(|e| *e = *e / sum);
        }
        let req = self.req(x);
        Ok(self.push(v, Op::Softmax(x.0), req))
    }

    /// Log-softmax over the last axis via log-sum-exp.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        let c = v.cols();
        for row in v.data_mut().chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&e| (e - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|e| *e = *e - lse);
        }
        let req = self.req(x);
        Ok(self.push(v, Op::LogSoftmax(x.0), req))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::from_f64_lossy(eps);
        let n = T::from_usize(c).unwrap();
        let src = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); src.numel()];
        let mut xhat = vec![T::zero(); src.numel()];
        let mut rstds = Vec::with_capacity(src.rows());
        for (r, row) in src.data().chunks(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / n;
            let rstd = (var + eps).sqrt().recip();
            rstds.push(rstd);
            for j in 0..c {
                let h = (row[j] - mean) * rstd;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = src.shape().to_vec();
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd: rstds,
            },
            req,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let req = self.req(x);
        let xv = self.value(x);
        let mut y = Vec::with_capacity(xv.numel());
        let mut dy = Vec::with_capacity(if req { xv.numel() } else { 0 });
        for &a in xv.data() {
            let (v, d) = gelu_parts(a);
            y.push(v);
            if req {
                dy.push(d);
            }
        }
        let v = Tensor::new(xv.shape(), y)?;
        Ok(self.push(v, Op::Gelu(x.0, dy), req))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let req = self.req(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x.0), req))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel()).unwrap();
        let req = self.req(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x.0), req))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::ln);
        let req = self.req(x);
        Ok(self.push(v, Op::Log(x.0), req))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::exp);
        let req = self.req(x);
        Ok(self.push(v, Op::Exp(x.0), req))
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        let req = self.req(x);
        Ok(self.push(v, Op::Clamp { x: x.0, lo, hi }, req))
    }

    /// Concatenates along the first axis; trailing shapes must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(TensorError::Rank {
            op: "concat_rows",
            expected: 1,
            shape: vec![],
        })?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let req = xs.iter().any(|&x| self.req(x));
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::ConcatRows(xs.iter().map(|v| v.0).collect()),
            req,
        ))
    }

    /// Selects rows (first-axis slices) by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (rows, width) = rows_of(&s);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = vec![idx.len()];
        if !s.is_empty() {
            shape.extend_from_slice(&s[1..]);
        }
        let req = self.req(x);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            req,
        ))
    }

    /// Looks up rows of a `[vocab, width]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if self.shape(table).len() != 2 {
            return Err(TensorError::Rank {
                op: "embedding_lookup",
                expected: 2,
                shape: self.shape(table).to_vec(),
            });
        }
        self.gather_rows(table, ids)
    }

    /// Scales each row along the last axis by `1 / (‖row‖ + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let eps = T::from_f64_lossy(eps);
        let mut v = self.value(x).clone();
        let c = v.cols();
        for row in v.data_mut().chunks_mut(c.max(1)) {
            let n = row.iter().map(|&e| e * e).sum::<T>().sqrt();
            let s = n + eps;
            row.iter_mut().for_each(|e| *e = *e / s);
        }
        let req = self.req(x);
        Ok(self.push(v, Op::L2Normalize { x: x.0, eps }, req))
    }

    /// Diagonal of a square matrix.
    pub fn take_diag(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(shape_err("take_diag", &s, &s));
        }
        let n = s[0];
        let src = self.value(x).data();
        let d = (0..n).map(|i| src[i * n + i]).collect();
        let req = self.req(x);
        Ok(self.push(Tensor::new(&[n], d)?, Op::TakeDiag(x.0), req))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let nodes = &self.nodes;
        let leaf_grads = &mut self.leaf_grads;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    if let Some(lg) = leaf_grads[i].as_mut() {
                        lg.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b);
                    }
                }
                Op::StopGradient => {}
                Op::Matmul {
                    a,
                    b,
                    ta,
                    tb,
                    dims: (m, k, n),
                    groups,
                } => {
                    let (a, b, ta, tb, m, k, n) = (*a, *b, *ta, *tb, *m, *k, *n);
                    let av = nodes[a].value.data();
                    let bv = nodes[b].value.data();
                    if let Some(ga) = acc(nodes, &mut grads, a) {
                        for gi in 0..*groups {
                            let gc = &g[gi * m * n..(gi + 1) * m * n];
                            let bs = &bv[gi * k * n..(gi + 1) * k * n];
                            let dst = &mut ga[gi * m * k..(gi + 1) * m * k];
                            if ta {
                                mm(dst, bs, gc, k, n, m, tb, true, T::one());
                            } else {
                                mm(dst, gc, bs, m, n, k, false, !tb, T::one());
                            }
                        }
                    }
                    if let Some(gb) = acc(nodes, &mut grads, b) {
                        for gi in 0..*groups {
                            let gc = &g[gi * m * n..(gi + 1) * m * n];
                            let as_ = &av[gi * m * k..(gi + 1) * m * k];
                            let dst = &mut gb[gi * k * n..(gi + 1) * k * n];
                            if tb {
                                mm(dst, gc, as_, n, m, k, true, ta, T::one());
                            } else {
                                mm(dst, as_, gc, k, m, n, !ta, false, T::one());
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for x in [*a, *b] {
                        if let Some(gx) = acc(nodes, &mut grads, x) {
                            gx.iter_mut().zip(&g).for_each(|(o, &d)| *o = *o + d);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        ga.iter_mut().zip(&g).for_each(|(o, &d)| *o = *o + d);
                    }
                    if let Some(gb) = acc(nodes, &mut grads, *b) {
                        gb.iter_mut().zip(&g).for_each(|(o, &d)| *o = *o - d);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if let Some(ga) = acc(nodes, &mut grads, a) {
                        let bv = nodes[b].value.data();
                        for ((o, &d), &bb) in ga.iter_mut().zip(&g).zip(bv) {
                            *o = *o + d * bb;
                        }
                    }
                    if let Some(gb) = acc(nodes, &mut grads, b) {
                        let av = nodes[a].value.data();
                        for ((o, &d), &aa) in gb.iter_mut().zip(&g).zip(av) {
                            *o = *o + d * aa;
                        }
                    }
                }
                Op::AddBias(x, bias) => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        gx.iter_mut().zip(&g).for_each(|(o, &d)| *o = *o + d);
                    }
                    if let Some(gb) = acc(nodes, &mut grads, *bias) {
                        let c = gb.len();
                        for row in g.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(o, &d)| *o = *o + d);
                        }
                    }
                }
                Op::AddConst(x) | Op::AddScalar(x) | Op::Reshape(x) => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        gx.iter_mut().zip(&g).for_each(|(o, &d)| *o = *o + d);
                    }
                }
                Op::Scale(x, s) => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        gx.iter_mut().zip(&g).for_each(|(o, &d)| *o = *o + d * *s);
                    }
                }
                Op::ScaleBy(x, s) => {
                    let (x, s) = (*x, *s);
                    let sv = nodes[s].value.item();
                    if let Some(gx) = acc(nodes, &mut grads, x) {
                        gx.iter_mut().zip(&g).for_each(|(o, &d)| *o = *o + d * sv);
                    }
                    if let Some(gs) = acc(nodes, &mut grads, s) {
                        let xv = nodes[x].value.data();
                        gs[0] = gs[0] + g.iter().zip(xv).map(|(&d, &a)| d * a).sum::<T>();
                    }
                }
                Op::Transpose { x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        let block = rows * cols;
                        for (go, gi) in gx.chunks_mut(block).zip(g.chunks(block)) {
                            for i in 0..rows {
                                for j in 0..cols {
                                    go[i * cols + j] = go[i * cols + j] + gi[j * rows + i];
                                }
                            }
                        }
                    }
                }
                Op::SwapAxes12 { x, dims } => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        let back = swap12(&g, [dims[0], dims[2], dims[1], dims[3]]);
                        gx.iter_mut().zip(&back).for_each(|(o, &d)| *o = *o + d);
                    }
                }
                Op::Softmax(x) => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        let c = node.value.cols().max(1);
                        let broken = fault::active() == Fault::SoftmaxBackward;
                        for ((go, gi), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let dot = if broken {
                                T::zero()
                            } else {
                                gi.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>()
                            };
                            for j in 0..c {
                                go[j] = go[j] + yr[j] * (gi[j] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        let c = node.value.cols().max(1);
                        for ((go, gi), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let s = gi.iter().copied().sum::<T>();
                            for j in 0..c {
                                go[j] = go[j] + gi[j] - yr[j].exp() * s;
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let c = node.value.cols();
                    let n = T::from_usize(c).unwrap();
                    let gv = nodes[*gamma].value.data();
                    if let Some(gg) = acc(nodes, &mut grads, *gamma) {
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                gg[j] = gg[j] + gr[j] * hr[j];
                            }
                        }
                    }
                    if let Some(gb) = acc(nodes, &mut grads, *beta) {
                        for gr in g.chunks(c) {
                            gb.iter_mut().zip(gr).for_each(|(o, &d)| *o = *o + d);
                        }
                    }
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                            let mut mean_d = T::zero();
                            let mut mean_dh = T::zero();
                            for j in 0..c {
                                let d = gr[j] * gv[j];
                                mean_d = mean_d + d;
                                mean_dh = mean_dh + d * hr[j];
                            }
                            mean_d = mean_d / n;
                            mean_dh = mean_dh / n;
                            let out = &mut gx[r * c..(r + 1) * c];
                            for j in 0..c {
                                let d = gr[j] * gv[j];
                                out[j] = out[j] + rstd[r] * (d - mean_d - hr[j] * mean_dh);
                            }
                        }
                    }
                }
                Op::Gelu(x, dy) => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        for ((o, &d), &s) in gx.iter_mut().zip(&g).zip(dy) {
                            *o = *o + d * s;
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        gx.iter_mut().for_each(|o| *o = *o + g[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        let d = g[0] / T::from_usize(gx.len()).unwrap();
                        gx.iter_mut().for_each(|o| *o = *o + d);
                    }
                }
                Op::Log(x) => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        let xv = nodes[*x].value.data();
                        for ((o, &d), &a) in gx.iter_mut().zip(&g).zip(xv) {
                            *o = *o + d / a;
                        }
                    }
                }
                Op::Exp(x) => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        for ((o, &d), &e) in gx.iter_mut().zip(&g).zip(y) {
                            *o = *o + d * e;
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        let xv = nodes[*x].value.data();
                        for ((o, &d), &a) in gx.iter_mut().zip(&g).zip(xv) {
                            if a >= *lo && a <= *hi {
                                *o = *o + d;
                            }
                        }
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let len = nodes[x].value.numel();
                        if let Some(gx) = acc(nodes, &mut grads, x) {
                            gx.iter_mut()
                                .zip(&g[offset..offset + len])
                                .for_each(|(o, &d)| *o = *o + d);
                        }
                        offset += len;
                    }
                }
                Op::GatherRows { x, idx } => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        let width = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                        for (r, &src) in idx.iter().enumerate() {
                            let dst = &mut gx[src * width..(src + 1) * width];
                            dst.iter_mut()
                                .zip(&g[r * width..(r + 1) * width])
                                .for_each(|(o, &d)| *o = *o + d);
                        }
                    }
                }
                Op::L2Normalize { x, eps } => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        let xv = nodes[*x].value.data();
                        let c = node.value.cols().max(1);
                        for ((go, gi), xr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xv.chunks(c)) {
                            let n = xr.iter().map(|&e| e * e).sum::<T>().sqrt();
                            let s = n + *eps;
                            let dot = gi.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                            let coef = if n > T::zero() { dot / (s * s * n) } else { T::zero() };
                            for j in 0..c {
                                go[j] = go[j] + gi[j] / s - xr[j] * coef;
                            }
                        }
                    }
                }
                Op::TakeDiag(x) => {
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        let n = g.len();
                        for (i, &d) in g.iter().enumerate() {
                            gx[i * n + i] = gx[i * n + i] + d;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    i: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let len = nodes[i].value.numel();
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); len]))
}

fn swap12<T: Copy + Default>(src: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::default(); src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let o = ((i * c + k) * b + j) * d;
                out[o..o + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let m = t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]);
        let i2 = tape.constant(Tensor::eye(2));
        let mv = tape.constant(m.clone());
        let out = tape.matmul(i2, mv).unwrap();
        assert_eq!(tape.value(out), &m);

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let out = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
        assert_eq!(tape.shape(out), &[2, 1]);

        let z = tape.constant(Tensor::zeros(&[3, 4]));
        let any = tape.constant(t(&[4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let out = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(out), &Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn matmul_transposed_operands_agree_with_explicit_transpose() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(t(&[2, 3], &[0.5, -1., 2., 1., 0., -3.]));
        let bt = tape.transpose(b).unwrap();
        let direct = tape.matmul(a, bt).unwrap();
        let fused = tape.matmul_t(a, b, false, true).unwrap();
        assert_eq!(tape.value(direct), tape.value(fused));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 3], &[0., 0., 0., 2.5, 2.5 + 2f64.ln(), -1e9, 0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        assert!(close(&v[0..3], &[1. / 3.; 3], 1e-12));
        assert!(close(&v[3..5], &[1. / 3., 2. / 3.], 1e-12));
        assert_eq!(v[5], 0.0);

        let single = tape.constant(t(&[1, 1], &[42.0]));
        let y = tape.softmax_rows(single).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn softmax_propagates_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert!(tape.value(y).data().iter().any(|v| v.is_nan()));
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let y = tape.l2_normalize_rows(x, crate::L2_NORMALIZE_EPS).unwrap();
        assert!(close(tape.value(y).data(), &[0.6, 0.8], 1e-12));

        let u = tape.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let y = tape.l2_normalize_rows(u, crate::L2_NORMALIZE_EPS).unwrap();
        assert!(close(tape.value(y).data(), &[0.0, 1.0, 0.0], 1e-11));

        let z = tape.param(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.l2_normalize_rows(z, crate::L2_NORMALIZE_EPS).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(z).unwrap().is_finite());
    }

    #[test]
    fn stop_gradient_contracts() {
        let mut tape = Tape::new();
        let xv = t(&[3], &[1.0, -2.0, 0.5]);
        let x = tape.param(xv.clone());
        let y = tape.param(t(&[3], &[4.0, 5.0, 6.0]));
        let sg = tape.stop_gradient(x).unwrap();
        assert_eq!(tape.value(sg), &xv);
        let prod = tape.mul(sg, y).unwrap();
        let s1 = tape.sum(sg).unwrap();
        let s2 = tape.sum(prod).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::zeros(&[3]));
        assert_eq!(tape.grad(y).unwrap(), &xv);
    }

    #[test]
    fn primitive_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[2.0; 4]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, crate::LAYER_NORM_EPS).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let z = tape.constant(Tensor::scalar(0.0));
        let y = tape.gelu(z).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);

        let v = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.mean(v).unwrap();
        assert_eq!(tape.value(m).item(), 2.0);
    }

    #[test]
    fn backward_examples_and_accumulation() {
        let mut tape = Tape::new();
        let xv = t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]);
        let x = tape.param(xv.clone());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 2]));
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::full(&[2, 2], 2.0));
        tape.zero_grad();

        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &xv.map(|v| 2.0 * v));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_grad_is_zero() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[2], &[3.0, 4.0]));
        let l = tape.sum(a).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &Tensor::zeros(&[2]));
        let c = tape.constant(t(&[1], &[0.0]));
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn gather_and_concat_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[9.0, 9.0]));
        let b = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        let g = tape.gather_rows(c, &[2, 0, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0, 9.0, 9.0, 9.0, 9.0]);
        assert!(matches!(
            tape.embedding_lookup(b, &[5]),
            Err(TensorError::Index { index: 5, .. })
        ));
    }

    #[test]
    fn swap_axes_roundtrip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[1, 2, 3, 4], &data));
        let y = tape.swap_axes12(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 2, 4]);
        assert_eq!(tape.value(y).data()[4..8], [12.0, 13.0, 14.0, 15.0]);
        let z = tape.swap_axes12(y).unwrap();
        assert_eq!(tape.value(z).data(), &data[..]);
    }

    #[test]
    fn frozen_stop_gradient_replays_values() {
        let mut tape = Tape::with_frozen_stop_gradients(vec![t(&[1], &[7.0])]);
        let x = tape.constant(t(&[1], &[1.0]));
        let s = tape.stop_gradient(x).unwrap();
        assert_eq!(tape.value(s).item(), 7.0);
        assert!(matches!(tape.stop_gradient(x), Err(TensorError::ReplayExhausted(1))));
    }
}
