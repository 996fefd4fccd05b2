//! Finite-difference cases covering every tape primitive.
//!
//! Each case draws random inputs, applies one primitive and reduces the result
//! with a fixed pseudo-random projection so that every output coordinate
//! contributes a distinct weight to the scalar being differentiated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheckReport, StopGradientMode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type CaseFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
pub type InputFn = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;

pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: InputFn,
    pub f: CaseFn,
}

/// Step used for central differences in double precision.
pub const STEP: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.3..2.0)).collect()).unwrap()
}

/// `sum(w ∘ y)` with deterministic, non-degenerate weights.
pub fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| 0.5 + (0.37 * i as f64 + 0.11).sin())
        .collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

macro_rules! case {
    ($name:expr, |$rng:ident| $inputs:expr, |$t:ident, $v:ident| $body:expr) => {
        PrimitiveCase {
            name: $name,
            inputs: |$rng| $inputs,
            f: |$t, $v| {
                let y = $body;
                project($t, y)
            },
        }
    };
}

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        case!("matmul", |r| vec![randn(r, &[3, 4]), randn(r, &[4, 2])], |t, v| t.matmul(v[0], v[1])?),
        case!("matmul_nt", |r| vec![randn(r, &[3, 4]), randn(r, &[2, 4])], |t, v| t
            .matmul_t(v[0], v[1], false, true)?),
        case!("matmul_tn", |r| vec![randn(r, &[4, 3]), randn(r, &[4, 2])], |t, v| t
            .matmul_t(v[0], v[1], true, false)?),
        case!("matmul_tt", |r| vec![randn(r, &[4, 3]), randn(r, &[2, 4])], |t, v| t
            .matmul_t(v[0], v[1], true, true)?),
        case!("matmul_batched", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[2, 3, 4])], |t, v| t
            .matmul_t(v[0], v[1], false, true)?),
        case!("add", |r| vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |t, v| t.add(v[0], v[1])?),
        case!("sub", |r| vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |t, v| t.sub(v[0], v[1])?),
        case!("mul", |r| vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |t, v| t.mul(v[0], v[1])?),
        case!("add_bias", |r| vec![randn(r, &[3, 4]), randn(r, &[4])], |t, v| t.add_bias(v[0], v[1])?),
        case!("add_constant", |r| vec![randn(r, &[2, 2, 3])], |t, v| {
            let c = Tensor::new(&[2, 3], vec![0.1, -0.2, 0.3, 0.0, 1.0, -1.0])?;
            t.add_constant(v[0], &c)?
        }),
        case!("add_scalar", |r| vec![randn(r, &[5])], |t, v| t.add_scalar(v[0], 0.75)?),
        case!("scale", |r| vec![randn(r, &[5])], |t, v| t.scale(v[0], -1.7)?),
        case!("scale_by", |r| vec![randn(r, &[2, 3]), randn(r, &[])], |t, v| t.scale_by(v[0], v[1])?),
        case!("transpose", |r| vec![randn(r, &[2, 3, 4])], |t, v| t.transpose(v[0])?),
        case!("swap_axes12", |r| vec![randn(r, &[2, 3, 2, 2])], |t, v| t.swap_axes12(v[0])?),
        case!("reshape", |r| vec![randn(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4])?),
        case!("softmax_rows", |r| vec![randn(r, &[3, 4])], |t, v| t.softmax_rows(v[0])?),
        case!("log_softmax_rows", |r| vec![randn(r, &[3, 4])], |t, v| t.log_softmax_rows(v[0])?),
        case!("layer_norm", |r| vec![randn(r, &[3, 5]), randn(r, &[5]), randn(r, &[5])], |t, v| t
            .layer_norm(v[0], v[1], v[2], crate::LAYER_NORM_EPS)?),
        case!("gelu", |r| vec![randn(r, &[2, 4])], |t, v| t.gelu(v[0])?),
        case!("sum", |r| vec![randn(r, &[2, 3])], |t, v| t.sum(v[0])?),
        case!("mean", |r| vec![randn(r, &[2, 3])], |t, v| t.mean(v[0])?),
        case!("log", |r| vec![positive(r, &[2, 3])], |t, v| t.log(v[0])?),
        case!("exp", |r| vec![randn(r, &[2, 3])], |t, v| t.exp(v[0])?),
        case!("clamp", |r| vec![randn(r, &[6])], |t, v| {
            // bounds placed outside the sampled range keep every probe interior
            t.clamp(v[0], -5.0, 5.0)?
        }),
        case!("concat_rows", |r| vec![randn(r, &[1, 3]), randn(r, &[2, 3])], |t, v| t
            .concat_rows(&[v[0], v[1]])?),
        case!("gather_rows", |r| vec![randn(r, &[4, 3])], |t, v| t.gather_rows(v[0], &[3, 0, 0, 2])?),
        case!("embedding_lookup", |r| vec![randn(r, &[5, 2])], |t, v| t
            .embedding_lookup(v[0], &[4, 1, 4])?),
        case!("l2_normalize_rows", |r| vec![randn(r, &[3, 4])], |t, v| t
            .l2_normalize_rows(v[0], crate::L2_NORMALIZE_EPS)?),
        case!("take_diag", |r| vec![randn(r, &[3, 3])], |t, v| t.take_diag(v[0])?),
        case!("stop_gradient", |r| vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |t, v| {
            let s = t.stop_gradient(v[0])?;
            let p = t.mul(s, v[1])?;
            t.add(p, v[0])?
        }),
    ]
}

/// Worst report over `trials` random draws of one case.
pub fn run_case(case: &PrimitiveCase, trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Option<GradCheckReport> = None;
    for _ in 0..trials {
        let inputs = (case.inputs)(&mut rng);
        let report = check_gradients(case.f, &inputs, STEP, StopGradientMode::Frozen)?;
        if worst
            .as_ref()
            .is_none_or(|w| report.max_rel_error > w.max_rel_error)
        {
            worst = Some(report);
        }
    }
    Ok(worst.expect("at least one trial"))
}
