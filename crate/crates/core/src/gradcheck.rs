//! Finite-difference verification of every primitive, every loss composite
//! and the gradient-flow contracts of the training graph.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tapegrad::suite::{primitive_cases, run_case, STEP};
use tapegrad::{check_gradients, finite_difference_check, GradCheckReport, StopGradientMode, Tape, Tensor, Var};

use crate::data::{generate_pairs, stream_rng, PairBatch, Stream, Vocab};
use crate::encoders::{SparsifyMode, TextConfig, ViTConfig};
use crate::error::{Error, Result};
use crate::losses::{
    baseline_loss, clip_loss, distill_loss, feature_distill_loss, info_nce, inverse_temperature, kl_rows, online_loss,
    total_loss, variant_loss, DistillVariant, Embeddings,
};
use crate::params::{Bound, ParamStore};
use crate::train::{build_graph, Model, TrainConfig, TrainState};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-5;
const PRIMITIVE_TRIALS: usize = 10;
const COMPOSITE_TRIALS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Status {
    Pass,
    Fail,
    /// Analytic and numeric gradients are meant to disagree.
    ExpectedDivergence,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::ExpectedDivergence => "EXPECTED-DIVERGENCE",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub group: &'static str,
    pub name: String,
    /// Worst relative error, or the offending magnitude for contracts.
    pub error: f64,
    pub tolerance: f64,
    pub status: Status,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.status != Status::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| r.status == Status::Fail)
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} {:<10} {:<44} err {:.3e} (tol {:.0e})  {}",
            self.status, self.group, self.name, self.error, self.tolerance, self.detail
        )
    }
}

fn from_report(group: &'static str, name: String, r: &GradCheckReport, tol: f64) -> CheckResult {
    CheckResult {
        group,
        name,
        error: r.max_rel_error,
        tolerance: tol,
        status: if r.passes(tol) { Status::Pass } else { Status::Fail },
        detail: format!(
            "worst input {} coord {}: analytic {:.6e} numeric {:.6e} over {} coords",
            r.worst.0, r.worst.1, r.analytic, r.numeric, r.coordinates
        ),
    }
}

fn errored(group: &'static str, name: String, e: impl fmt::Display) -> CheckResult {
    CheckResult {
        group,
        name,
        error: f64::INFINITY,
        tolerance: 0.0,
        status: Status::Fail,
        detail: format!("error: {e}"),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

type Composite = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> tapegrad::Result<Var>>;

fn lift<V>(r: Result<V>) -> tapegrad::Result<V> {
    r.map_err(|e| match e {
        Error::Tensor(t) => t,
        other => tapegrad::TensorError::Caller(other.to_string()),
    })
}

fn run_composite(name: &str, inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, f: Composite, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Option<GradCheckReport> = None;
    for _ in 0..COMPOSITE_TRIALS {
        match check_gradients(&f, &inputs(&mut rng), STEP, StopGradientMode::Frozen) {
            Ok(r) => {
                if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                    worst = Some(r);
                }
            }
            Err(e) => return errored("composite", name.to_string(), e),
        }
    }
    from_report("composite", name.to_string(), &worst.expect("trials"), COMPOSITE_TOL)
}

const N: usize = 5;
const D: usize = 6;

fn matrix_inputs(count: usize) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    move |rng| {
        let mut v: Vec<Tensor<f64>> = (0..count).map(|_| uniform(rng, &[N, N], -1.0, 1.0)).collect();
        v.push(Tensor::scalar(rng.gen_range(0.15f64..0.6).ln()));
        v
    }
}

fn embedding_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let mut v: Vec<Tensor<f64>> = (0..4).map(|_| uniform(rng, &[N, D], -1.0, 1.0)).collect();
    v.push(Tensor::scalar(rng.gen_range(0.15f64..0.6).ln()));
    v
}

fn unit(t: &mut Tape<f64>, x: Var) -> tapegrad::Result<Var> {
    t.l2_normalize_rows(x, tapegrad::L2_NORMALIZE_EPS)
}

fn composites() -> Vec<(String, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>, Composite)> {
    let mut out: Vec<(String, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>, Composite)> = vec![
        (
            "info_nce".into(),
            Box::new(matrix_inputs(1)),
            Box::new(|t, v| {
                let inv = lift(inverse_temperature(t, v[1]))?;
                lift(info_nce(t, v[0], inv))
            }),
        ),
        (
            "clip_loss".into(),
            Box::new(matrix_inputs(1)),
            Box::new(|t, v| {
                let inv = lift(inverse_temperature(t, v[1]))?;
                lift(clip_loss(t, v[0], inv))
            }),
        ),
        (
            "kl_rows".into(),
            Box::new(matrix_inputs(2)),
            Box::new(|t, v| {
                let inv = lift(inverse_temperature(t, v[2]))?;
                let inv_d = t.stop_gradient(inv)?;
                lift(kl_rows(t, v[0], v[1], inv_d))
            }),
        ),
        (
            "distill_loss".into(),
            Box::new(matrix_inputs(2)),
            Box::new(|t, v| {
                let inv = lift(inverse_temperature(t, v[2]))?;
                let inv_d = t.stop_gradient(inv)?;
                lift(distill_loss(t, v[0], v[1], inv_d))
            }),
        ),
        (
            "online_loss".into(),
            Box::new(matrix_inputs(2)),
            Box::new(|t, v| {
                let inv = lift(inverse_temperature(t, v[2]))?;
                let inv_d = t.stop_gradient(inv)?;
                lift(online_loss(t, v[0], v[1], 0.5, inv, inv_d))
            }),
        ),
        (
            "total_loss".into(),
            Box::new(matrix_inputs(2)),
            Box::new(|t, v| {
                let inv = lift(inverse_temperature(t, v[2]))?;
                let inv_d = t.stop_gradient(inv)?;
                lift(total_loss(t, v[0], v[1], 0.5, inv, inv_d))
            }),
        ),
        (
            "feature_distill_loss".into(),
            Box::new(|rng| (0..2).map(|_| uniform(rng, &[N, D], -1.0, 1.0)).collect()),
            Box::new(|t, v| {
                let s = unit(t, v[0])?;
                let te = unit(t, v[1])?;
                lift(feature_distill_loss(t, s, te))
            }),
        ),
        (
            "baseline_clip".into(),
            Box::new(embedding_inputs),
            Box::new(|t, v| {
                let text = unit(t, v[0])?;
                let image = unit(t, v[2])?;
                Ok(lift(baseline_loss(t, text, image, v[4]))?.total)
            }),
        ),
    ];
    for variant in DistillVariant::ALL {
        out.push((
            format!("total_loss[{variant}]"),
            Box::new(embedding_inputs),
            Box::new(move |t, v| {
                let e = variant_embeddings(t, v)?;
                let lambda = variant.lambda_schedule(0.5).at(0, 2);
                Ok(lift(variant_loss(t, variant, &e, lambda, v[4]))?.total)
            }),
        ));
    }
    out
}

/// Inputs `[T, T̄, I, Ī]` normalized, with both teacher sides detached.
fn variant_embeddings(t: &mut Tape<f64>, v: &[Var]) -> tapegrad::Result<Embeddings> {
    let text = unit(t, v[0])?;
    let tbar = unit(t, v[1])?;
    let tbar = t.stop_gradient(tbar)?;
    let image = unit(t, v[2])?;
    let ibar = unit(t, v[3])?;
    let ibar = t.stop_gradient(ibar)?;
    Ok(Embeddings {
        text,
        text_teacher: Some(tbar),
        image,
        image_teacher: ibar,
    })
}

/// Smallest configuration that exercises every code path of the training
/// graph, including two sparsify layers.
pub fn tiny_config(variant: DistillVariant, batch_size: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        variant,
        epochs: 1,
        batch_size,
        vit: ViTConfig {
            image_size: 8,
            patch_size: 2,
            channels: 3,
            depth: 2,
            width: 8,
            heads: 2,
            proj_dim: 4,
            keep_rate: 0.5,
            sparsify_layers: Some(vec![1, 2]),
        },
        text: TextConfig {
            depth: 1,
            width: 8,
            heads: 2,
            proj_dim: 4,
            ..TextConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.corpus.train_size = batch_size.max(8);
    cfg.corpus.eval_size = 10;
    cfg.ema.text_ema = variant.needs_text_ema();
    cfg
}

/// A batch of the tiny config's training corpus.
pub fn tiny_batch(cfg: &TrainConfig) -> Result<PairBatch> {
    let records = generate_pairs(&mut stream_rng(cfg.seed, Stream::TrainCorpus), cfg.batch_size, 0.5)?;
    PairBatch::from_records(&records, &Vocab::new(), cfg.vit.image_size, cfg.text.max_len)
}

/// Perturbs every tensor so the teacher differs from the online encoder.
fn perturbed(store: &ParamStore<f32>, seed: u64) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = store.clone();
    for t in out.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.05f32..0.05);
        }
    }
    out
}

fn tiny_state(cfg: &TrainConfig) -> Result<(Model, TrainState)> {
    let (model, mut state) = Model::init(cfg)?;
    state.teacher = perturbed(&state.online, 1);
    if let Some(tt) = state.text_teacher.as_mut() {
        *tt = perturbed(tt, 2);
    }
    state.center = (0..cfg.vit.proj_dim).map(|i| 0.05 * i as f32).collect();
    Ok((model, state))
}

/// End-to-end gradient of the ECLIPSE objective through both encoders with
/// respect to every online image, text and temperature parameter.
fn encoder_composite(seed: u64) -> CheckResult {
    let name = "encoders+total_loss[eclipse]".to_string();
    let run = || -> Result<GradCheckReport> {
        let cfg = tiny_config(DistillVariant::Eclipse, 3);
        let (model, state) = tiny_state(&cfg)?;
        let batch = tiny_batch(&TrainConfig { seed, ..cfg.clone() })?;
        let images: Tensor<f64> = batch.images.cast();
        let online: ParamStore<f64> = state.online.cast();
        let text: ParamStore<f64> = state.text.cast();
        let teacher: ParamStore<f64> = state.teacher.cast();
        let center: Vec<f64> = state.center.iter().map(|&c| c as f64).collect();
        let mut inputs: Vec<Tensor<f64>> = online.tensors().to_vec();
        inputs.extend(text.tensors().iter().cloned());
        inputs.push(Tensor::scalar(0.2f64.ln()));
        let (ni, nt) = (online.len(), text.len());
        let f = |t: &mut Tape<f64>, v: &[Var]| -> tapegrad::Result<Var> {
            let ib = Bound::from_vars(v[..ni].to_vec());
            let tb = Bound::from_vars(v[ni..ni + nt].to_vec());
            let tex = lift(model.text.forward(t, &tb, &batch.token_id_rows))?;
            let img = lift(model.vit.forward(t, &ib, &images, SparsifyMode::KeepRate(cfg.vit.keep_rate)))?.embeddings;
            let teach = teacher.bind(t, false);
            let z = lift(model.vit.forward(t, &teach, &images, SparsifyMode::Dense))?.embeddings;
            let ibar = lift(crate::momentum::apply_center(t, z, &center))?;
            let ibar = t.stop_gradient(ibar)?;
            let e = Embeddings {
                text: tex,
                text_teacher: None,
                image: img,
                image_teacher: ibar,
            };
            Ok(lift(variant_loss(t, DistillVariant::Eclipse, &e, 0.5, v[ni + nt]))?.total)
        };
        Ok(check_gradients(f, &inputs, STEP, StopGradientMode::Frozen)?)
    };
    match run() {
        Ok(r) => from_report("composite", name, &r, COMPOSITE_TOL),
        Err(e) => errored("composite", name, e),
    }
}

fn max_abs(ts: &[Tensor<f32>]) -> f64 {
    ts.iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, &v| m.max((v as f64).abs()))
}

/// Which loss node to differentiate in a contract check.
#[derive(Debug, Clone, Copy)]
pub enum Term {
    Total,
    Distill,
    ClipStudent,
    ClipTeacher,
}

/// Gradients of one loss term of the real training graph with respect to
/// each parameter group.
pub struct GroupGrads {
    pub online: Vec<Tensor<f32>>,
    pub text: Vec<Tensor<f32>>,
    pub teacher: Vec<Tensor<f32>>,
    pub text_teacher: Vec<Tensor<f32>>,
}

pub fn group_grads(cfg: &TrainConfig, term: Term) -> Result<GroupGrads> {
    let (model, state) = tiny_state(cfg)?;
    let batch = tiny_batch(cfg)?;
    let lambda = cfg.variant.lambda_schedule(cfg.lambda).at(0, 2);
    let mut g = build_graph(&model, &state, cfg, &batch, lambda, true)?;
    let node = match term {
        Term::Total => Some(g.terms.total),
        Term::Distill => g.terms.distill,
        Term::ClipStudent => Some(g.terms.clip_student),
        Term::ClipTeacher => g.terms.clip_teacher,
    };
    let node = node.ok_or_else(|| Error::Contract(format!("{term:?} is not part of this graph")))?;
    g.tape.backward(node)?;
    let teacher = match &g.teacher {
        Some(b) => state.teacher.grads(&g.tape, b),
        None => Vec::new(),
    };
    let text_teacher = match (&g.text_teacher, &state.text_teacher) {
        (Some(b), Some(s)) => s.grads(&g.tape, b),
        _ => Vec::new(),
    };
    Ok(GroupGrads {
        online: state.online.grads(&g.tape, &g.online),
        text: state.text.grads(&g.tape, &g.text),
        teacher,
        text_teacher,
    })
}

fn contract(name: String, ok: bool, error: f64, detail: String) -> CheckResult {
    CheckResult {
        group: "contract",
        name,
        error,
        tolerance: 0.0,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn contracts() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let eclipse = tiny_config(DistillVariant::Eclipse, 4);

    let d = group_grads(&eclipse, Term::Distill)?;
    let m = max_abs(&d.text);
    out.push(contract(
        "eclipse: d distill / d text = 0".into(),
        m == 0.0,
        m,
        format!("max |grad| over {} text tensors", d.text.len()),
    ));
    let m = max_abs(&d.online);
    out.push(contract(
        "eclipse: d distill / d online image != 0".into(),
        m > 0.0,
        m,
        "max |grad| over online image tensors".into(),
    ));
    let c = group_grads(&eclipse, Term::ClipStudent)?;
    let m = max_abs(&c.online);
    out.push(contract(
        "eclipse: d clip(A) / d online image != 0".into(),
        m > 0.0,
        m,
        "max |grad| over online image tensors".into(),
    ));

    let total = group_grads(&eclipse, Term::Total)?;
    let teacher_only = group_grads(&eclipse, Term::ClipTeacher)?;
    let mut worst = 0.0f64;
    for (a, b) in total.text.iter().zip(&teacher_only.text) {
        for (&x, &y) in a.data().iter().zip(b.data()) {
            worst = worst.max(tapegrad::gradcheck::relative_error(x as f64, y as f64));
        }
    }
    out.push(contract(
        "eclipse: d total / d text = d clip(Ā) / d text".into(),
        worst <= 1e-6,
        worst,
        "max relative difference".into(),
    ));

    for variant in DistillVariant::ALL {
        let cfg = tiny_config(variant, 4);
        let g = group_grads(&cfg, Term::Total)?;
        let m = max_abs(&g.teacher).max(max_abs(&g.text_teacher));
        out.push(contract(
            format!("{variant}: d total / d teacher = 0"),
            m == 0.0 && !g.teacher.is_empty(),
            m,
            format!("{} teacher tensors, {} text-teacher tensors", g.teacher.len(), g.text_teacher.len()),
        ));
    }

    let dual = tiny_config(DistillVariant::DualMomentum, 2);
    let g = group_grads(&dual, Term::Distill)?;
    let m = max_abs(&g.text);
    out.push(contract(
        "dual_momentum: d distill / d text != 0 (2 pairs)".into(),
        m > 0.0,
        m,
        "max |grad| over text tensors".into(),
    ));
    Ok(out)
}

/// A stop-gradient-only path differentiated with live finite differences:
/// analytic 0, numeric 1.
fn stop_gradient_divergence() -> CheckResult {
    let x = Tensor::new(&[3], vec![0.3, -0.7, 1.1]).expect("shape");
    let r = finite_difference_check(
        |t, v| {
            let s = t.stop_gradient(v)?;
            t.sum(s)
        },
        &x,
        STEP,
    );
    match r {
        Ok(err) => CheckResult {
            group: "contract",
            name: "stop_gradient vs live finite differences".into(),
            error: err,
            tolerance: PRIMITIVE_TOL,
            status: if (err - 1.0).abs() < 1e-9 { Status::ExpectedDivergence } else { Status::Fail },
            detail: "analytic gradient 0, numeric 1: sg blocks the path the perturbation takes".into(),
        },
        Err(e) => errored("contract", "stop_gradient vs live finite differences".into(), e),
    }
}

/// Runs the whole suite; `on_result` sees each result as it completes.
pub fn run_suite(seed: u64, mut on_result: impl FnMut(&CheckResult)) -> SuiteReport {
    let start = Instant::now();
    let mut results = Vec::new();
    let mut push = |r: CheckResult, results: &mut Vec<CheckResult>| {
        on_result(&r);
        results.push(r);
    };
    for (i, case) in primitive_cases().iter().enumerate() {
        let r = match run_case(case, PRIMITIVE_TRIALS, seed.wrapping_add(i as u64)) {
            Ok(rep) => from_report("primitive", case.name.to_string(), &rep, PRIMITIVE_TOL),
            Err(e) => errored("primitive", case.name.to_string(), e),
        };
        push(r, &mut results);
    }
    for (i, (name, inputs, f)) in composites().into_iter().enumerate() {
        push(run_composite(&name, inputs, f, seed.wrapping_add(1000 + i as u64)), &mut results);
    }
    push(encoder_composite(seed), &mut results);
    match contracts() {
        Ok(cs) => {
            for c in cs {
                push(c, &mut results);
            }
        }
        Err(e) => push(errored("contract", "gradient-flow contracts".into(), e), &mut results),
    }
    push(stop_gradient_divergence(), &mut results);
    SuiteReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    }
}
