use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tapegrad::{Tape, Tensor, Var};

use super::config::TrainConfig;
use super::optim::learning_rate;
use super::state::{Model, TrainState};
use crate::data::PairBatch;
use crate::encoders::SparsifyMode;
use crate::error::{Error, Result};
use crate::losses::{baseline_loss, clamp_log_tau, variant_loss, Embeddings, LossTerms};
use crate::momentum::{apply_center, center_update, ema_update};
use crate::params::Bound;

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub total_loss: f64,
    pub clip_teacher_loss: f64,
    pub clip_student_loss: f64,
    pub distill_loss: f64,
    pub tau: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    /// Mean softmax probability of the true partner over aligned rows of `A`.
    pub diag_mass: f64,
}

/// The recorded forward pass of one step.
pub struct StepGraph {
    pub tape: Tape<f32>,
    pub online: Bound,
    pub text: Bound,
    pub teacher: Option<Bound>,
    pub text_teacher: Option<Bound>,
    pub log_tau: Var,
    pub terms: LossTerms,
    /// Unit-norm teacher image embeddings before centering.
    pub teacher_embeddings: Option<Var>,
}

/// Records the forward pass. Teacher parameters enter the tape as leaves
/// with gradient storage only when `probe_teacher` is set; training passes
/// `false` and they are constants.
pub fn build_graph(
    model: &Model,
    state: &TrainState,
    cfg: &TrainConfig,
    batch: &PairBatch,
    lambda: f64,
    probe_teacher: bool,
) -> Result<StepGraph> {
    let mut tape = Tape::new();
    let online = state.online.bind(&mut tape, true);
    let text = state.text.bind(&mut tape, true);
    let log_tau = tape.param(state.log_tau.clone());
    let t = model.text.forward(&mut tape, &text, &batch.token_id_rows)?;
    let i = model
        .vit
        .forward(&mut tape, &online, &batch.images, SparsifyMode::KeepRate(cfg.vit.keep_rate))?
        .embeddings;
    if !cfg.teacher {
        let terms = baseline_loss(&mut tape, t, i, log_tau)?;
        return Ok(StepGraph {
            tape,
            online,
            text,
            teacher: None,
            text_teacher: None,
            log_tau,
            terms,
            teacher_embeddings: None,
        });
    }
    let teacher = state.teacher.bind(&mut tape, probe_teacher);
    let z = model.vit.forward(&mut tape, &teacher, &batch.images, SparsifyMode::Dense)?.embeddings;
    let centered = if cfg.ema.centering {
        apply_center(&mut tape, z, &state.center)?
    } else {
        z
    };
    let ibar = tape.stop_gradient(centered)?;
    let (text_teacher, tbar) = match &state.text_teacher {
        Some(store) => {
            let b = store.bind(&mut tape, probe_teacher);
            let v = model.text.forward(&mut tape, &b, &batch.token_id_rows)?;
            let v = tape.stop_gradient(v)?;
            (Some(b), Some(v))
        }
        None => (None, None),
    };
    let e = Embeddings {
        text: t,
        text_teacher: tbar,
        image: i,
        image_teacher: ibar,
    };
    let terms = variant_loss(&mut tape, cfg.variant, &e, lambda, log_tau)?;
    Ok(StepGraph {
        tape,
        online,
        text,
        teacher: Some(teacher),
        text_teacher,
        log_tau,
        terms,
        teacher_embeddings: Some(z),
    })
}

fn value(tape: &Tape<f32>, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| tape.value(v).item() as f64)
}

fn diag_mass(a: &Tensor<f32>, tau: f64, misaligned: &[bool]) -> f64 {
    let n = a.rows();
    let (mut acc, mut count) = (0.0, 0usize);
    for i in (0..n).filter(|&i| !misaligned[i]) {
        let row = a.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let z: f64 = row.iter().map(|&v| ((v as f64 - max) / tau).exp()).sum();
        acc += ((row[i] as f64 - max) / tau).exp() / z;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: u64,
    total_loss: f64,
    clip_student_loss: f64,
    clip_teacher_loss: f64,
    distill_loss: f64,
    tau: f64,
    a: &'a [f32],
    abar: Option<&'a [f32]>,
    shape: &'a [usize],
}

/// Writes the alignment matrices of a step whose loss is not finite and
/// returns the error to abort with.
pub fn dump_non_finite(dir: &Path, step: u64, graph: &StepGraph, tau: f64) -> Error {
    let tape = &graph.tape;
    let t = &graph.terms;
    let a = tape.value(t.a);
    let dump = NonFiniteDump {
        step,
        total_loss: value(tape, Some(t.total)),
        clip_student_loss: value(tape, Some(t.clip_student)),
        clip_teacher_loss: value(tape, t.clip_teacher),
        distill_loss: value(tape, t.distill),
        tau,
        a: a.data(),
        abar: t.abar.map(|v| tape.value(v).data()),
        shape: a.shape(),
    };
    let path = dir.join(format!("nonfinite_step{step}.json"));
    let written = fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e))
        .and_then(|_| Ok(serde_json::to_vec_pretty(&dump)?))
        .and_then(|bytes| fs::write(&path, bytes).map_err(|e| Error::io(&path, e)));
    match written {
        Ok(()) => Error::NonFiniteLoss { step, dump: path },
        Err(e) => e,
    }
}

/// Forward, backward, optimizer, then EMA and centering.
pub fn train_step(
    model: &Model,
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &PairBatch,
    lambda: f64,
    dump_dir: &Path,
) -> Result<MetricsRow> {
    let lr = learning_rate(&cfg.optim, state.step, cfg.total_steps());
    let tau = state.tau();
    let mut g = build_graph(model, state, cfg, batch, lambda, false)?;
    let total = g.tape.value(g.terms.total).item();
    if !total.is_finite() {
        return Err(dump_non_finite(dump_dir, state.step, &g, tau));
    }
    g.tape.backward(g.terms.total)?;

    let mut grads = state.online.grads(&g.tape, &g.online);
    grads.extend(state.text.grads(&g.tape, &g.text));
    grads.push(g.tape.grad(g.log_tau).cloned().unwrap_or_else(|| Tensor::scalar(0.0)));
    {
        let mut params: Vec<&mut Tensor<f32>> = state
            .online
            .tensors_mut()
            .iter_mut()
            .chain(state.text.tensors_mut().iter_mut())
            .collect();
        params.push(&mut state.log_tau);
        state.optim.step(&mut params, &grads, lr)?;
    }
    let clamped = clamp_log_tau(state.log_tau.item() as f64) as f32;
    state.log_tau.data_mut()[0] = clamped;

    if cfg.teacher {
        ema_update(&mut state.teacher, &state.online, cfg.ema.momentum)?;
        if let Some(tt) = state.text_teacher.as_mut() {
            ema_update(tt, &state.text, cfg.ema.momentum)?;
        }
        if cfg.ema.centering {
            if let Some(z) = g.teacher_embeddings {
                center_update(&mut state.center, g.tape.value(z), cfg.ema.center_momentum)?;
            }
        }
    }

    let t = &g.terms;
    let row = MetricsRow {
        step: state.step,
        epoch: state.epoch,
        total_loss: total as f64,
        clip_teacher_loss: value(&g.tape, t.clip_teacher),
        clip_student_loss: value(&g.tape, Some(t.clip_student)),
        distill_loss: value(&g.tape, t.distill),
        tau,
        lambda,
        learning_rate: lr,
        diag_mass: diag_mass(g.tape.value(t.a), tau, &batch.misaligned_mask),
    };
    state.step += 1;
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diag_mass_of_uniform_rows_is_reciprocal() {
        let a = Tensor::full(&[4, 4], 0.2f32);
        assert!((diag_mass(&a, 0.07, &[false; 4]) - 0.25).abs() < 1e-12);
        let eye = Tensor::<f32>::eye(3);
        let m = diag_mass(&eye, 0.01, &[false, true, false]);
        assert!(m > 0.999);
        assert_eq!(diag_mass(&eye, 1.0, &[true; 3]), 0.0);
    }
}
