use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint;
use super::config::TrainConfig;
use super::state::{Model, TrainState};
use super::step::{train_step, MetricsRow};
use crate::data::{epoch_order, generate_pairs, stream_rng, PairBatch, PairRecord, Stream, Vocab};
use crate::error::{Error, Result};

pub const METRICS_CSV: &str = "metrics.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint";

pub fn train_corpus(cfg: &TrainConfig) -> Result<Vec<PairRecord>> {
    generate_pairs(
        &mut stream_rng(cfg.seed, Stream::TrainCorpus),
        cfg.corpus.train_size,
        cfg.corpus.misalignment,
    )
}

/// Aligned held-out pairs.
pub fn eval_corpus(cfg: &TrainConfig) -> Result<Vec<PairRecord>> {
    generate_pairs(&mut stream_rng(cfg.seed, Stream::EvalCorpus), cfg.corpus.eval_size, 0.0)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: PathBuf,
}

/// Trains from initialization, or from `resume` (a checkpoint saved at an
/// epoch boundary of a run with the same config), writing `metrics.csv`,
/// `timing.csv`, periodic `checkpoints/epoch_K` and the final `checkpoint`
/// under `out`.
pub fn run_training(cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (model, mut state) = match resume {
        Some(dir) => {
            let (saved, model, state) = checkpoint::load(dir)?;
            if &saved != cfg {
                return Err(Error::config(
                    "--resume",
                    format!("{} was trained with a different config", dir.display()),
                ));
            }
            (model, state)
        }
        None => Model::init(cfg)?,
    };
    let corpus = train_corpus(cfg)?;
    let vocab = Vocab::new();
    let spe = cfg.steps_per_epoch();
    let schedule = cfg.variant.lambda_schedule(cfg.lambda);

    let mpath = out.join(METRICS_CSV);
    let mut metrics_csv = csv::Writer::from_writer(File::create(&mpath).map_err(|e| Error::io(&mpath, e))?);
    let tpath = out.join(TIMING_CSV);
    let mut timing_csv = csv::Writer::from_writer(File::create(&tpath).map_err(|e| Error::io(&tpath, e))?);
    timing_csv.write_record(["step", "wall_ms_per_step"])?;
    let mut metrics = Vec::new();

    for epoch in state.epoch..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch as u64, corpus.len());
        let lambda = schedule.at(epoch, cfg.epochs);
        for b in 0..spe {
            let records: Vec<PairRecord> = order[b * cfg.batch_size..(b + 1) * cfg.batch_size]
                .iter()
                .map(|&i| corpus[i])
                .collect();
            let batch = PairBatch::from_records(&records, &vocab, cfg.vit.image_size, cfg.text.max_len)?;
            let start = Instant::now();
            let row = train_step(&model, &mut state, cfg, &batch, lambda, out)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            metrics_csv.serialize(&row)?;
            timing_csv.write_record([row.step.to_string(), format!("{ms:.3}")])?;
            metrics.push(row);
        }
        state.epoch = epoch + 1;
        metrics_csv.flush().map_err(|e| Error::io(&mpath, e))?;
        timing_csv.flush().map_err(|e| Error::io(&tpath, e))?;
        let k = cfg.checkpoint_every;
        if k > 0 && state.epoch % k == 0 && state.epoch < cfg.epochs {
            checkpoint::save(&out.join("checkpoints").join(format!("epoch_{}", state.epoch)), cfg, &state)?;
        }
    }
    if metrics.is_empty() {
        // header only
        metrics_csv.write_record(METRICS_HEADER)?;
    }
    metrics_csv.flush().map_err(|e| Error::io(&mpath, e))?;
    let ckpt = out.join(FINAL_CHECKPOINT);
    checkpoint::save(&ckpt, cfg, &state)?;
    Ok(TrainOutcome {
        model,
        state,
        metrics,
        checkpoint: ckpt,
    })
}

pub const METRICS_HEADER: [&str; 10] = [
    "step",
    "epoch",
    "total_loss",
    "clip_teacher_loss",
    "clip_student_loss",
    "distill_loss",
    "tau",
    "lambda",
    "learning_rate",
    "diag_mass",
];

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
