//! The `clipdistill` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{dump_pairs, PairBatch, Vocab};
use crate::encoders::validate_keep_rate;
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, Status};
use crate::losses::DistillVariant;
use crate::train::{
    checkpoint, eval_corpus, evaluate, monotonicity_violations, render_table, run_ablation, run_training,
    throughput_bench, train_corpus, Encoder, RunConfig,
};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Parser)]
#[command(name = "clipdistill", version, about = "Contrastive image-text pretraining with momentum self-distillation and token sparsification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint directory written by a run with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Zero-shot and retrieval metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Encoder::Student)]
        encoder: Encoder,
        /// Keep rate of the image encoder; defaults to the checkpoint config's.
        #[arg(long, value_parser = parse_keep_rate)]
        keep_rate: Option<f64>,
        /// Report path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Image-encoder forward throughput at several keep rates.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_keep_rate, default_value = "1.0,0.9,0.8,0.7,0.6,0.5")]
        keep_rates: Vec<f64>,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        /// Timed runs per keep rate (at least 20).
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        /// Discarded runs per keep rate.
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Table path (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate several loss variants under one config.
    Ablate {
        #[arg(long, value_delimiter = ',', value_parser = parse_variant, required = true)]
        variants: Vec<DistillVariant>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every primitive, loss and gradient contract.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Break a backward rule to confirm the suite notices.
        #[arg(long, value_enum)]
        inject_fault: Option<InjectFault>,
        /// Report path (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum InjectFault {
    Softmax,
}

fn parse_keep_rate(s: &str) -> std::result::Result<f64, String> {
    let k: f64 = s.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    validate_keep_rate(k, "keep rate").map_err(|e| e.to_string())?;
    Ok(k)
}

fn parse_variant(s: &str) -> std::result::Result<DistillVariant, String> {
    s.trim().parse().map_err(|e: Error| e.to_string())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_run_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if out.is_some() {
        cfg.out_dir = out;
    }
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::config("out_dir", "no output directory: pass --out or set out_dir"))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join(RESOLVED_CONFIG), &cfg)?;
    Ok((cfg, dir))
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>, resume: Option<&Path>) -> Result<()> {
    let (cfg, dir) = load_run_config(config, seed, out)?;
    if cfg.dump_corpus {
        dump_pairs(&dir.join("corpus"), &train_corpus(&cfg.train)?, cfg.train.vit.image_size)?;
    }
    let done = run_training(&cfg.train, &dir, resume)?;
    match done.metrics.last() {
        Some(last) => println!(
            "trained {} steps ({} epochs): total loss {:.4}, tau {:.4}; checkpoint {}",
            done.state.step,
            done.state.epoch,
            last.total_loss,
            last.tau,
            done.checkpoint.display()
        ),
        None => println!("no training steps; checkpoint {}", done.checkpoint.display()),
    }
    Ok(())
}

fn eval(ckpt: &Path, encoder: Encoder, keep_rate: Option<f64>, out: &Path) -> Result<()> {
    let (cfg, model, state) = checkpoint::load(ckpt)?;
    let keep = keep_rate.unwrap_or(cfg.vit.keep_rate);
    let report = evaluate(&model, &state, encoder, keep, &eval_corpus(&cfg)?, checkpoint::checkpoint_id(ckpt)?)?;
    write_json(out, &report)?;
    println!(
        "zero-shot top-1 {:.4} | I→T R@1/5/10 {:.4}/{:.4}/{:.4} | T→I R@1/5/10 {:.4}/{:.4}/{:.4}",
        report.zero_shot_top1,
        report.image_to_text.r1,
        report.image_to_text.r5,
        report.image_to_text.r10,
        report.text_to_image.r1,
        report.text_to_image.r5,
        report.text_to_image.r10
    );
    Ok(())
}

fn bench(ckpt: &Path, keep_rates: &[f64], batch: usize, repeats: usize, warmup: usize, out: Option<&Path>) -> Result<()> {
    let (cfg, model, state) = checkpoint::load(ckpt)?;
    if batch == 0 {
        return Err(Error::config("--batch", "must be positive"));
    }
    let records: Vec<_> = eval_corpus(&cfg)?.into_iter().cycle().take(batch).collect();
    let images = PairBatch::from_records(&records, &Vocab::new(), cfg.vit.image_size, cfg.text.max_len)?.images;
    let rows = throughput_bench(&model, &state.online, &images, keep_rates, repeats, warmup)?;
    println!("{:>9} {:>12} {:>12} {:>8}", "keep_rate", "median_ms", "images/s", "speedup");
    for r in &rows {
        println!("{:>9.2} {:>12.3} {:>12.1} {:>8.3}", r.keep_rate, r.median_ms, r.images_per_sec, r.speedup);
    }
    for (hi, lo) in monotonicity_violations(&rows) {
        eprintln!("warning: throughput at keep rate {lo} is not above keep rate {hi}");
    }
    if let Some(path) = out {
        write_json(path, &rows)?;
    }
    Ok(())
}

fn ablate(variants: &[DistillVariant], config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let (cfg, dir) = load_run_config(config, seed, Some(out.to_path_buf()))?;
    let rows = run_ablation(&cfg.train, variants, &dir)?;
    print!("{}", render_table(&rows));
    Ok(())
}

fn gradcheck(seed: u64, fault: Option<InjectFault>, out: Option<&Path>) -> Result<bool> {
    if let Some(InjectFault::Softmax) = fault {
        tapegrad::fault::inject(tapegrad::fault::Fault::SoftmaxBackward);
    }
    let report = run_suite(seed, |r| println!("{r}"));
    tapegrad::fault::clear();
    let failed: Vec<_> = report.failures().map(|r| r.name.clone()).collect();
    let expected = report.results.iter().filter(|r| r.status == Status::ExpectedDivergence).count();
    println!(
        "{} checks, {} failed, {} expected divergence, {:.1} s",
        report.results.len(),
        failed.len(),
        expected,
        report.seconds
    );
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
    }
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(report.passed())
}

/// Runs the command line and returns the process exit code: 0 on success, 1
/// on runtime failure, 2 on usage or configuration errors.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => train(&config, seed, out, resume.as_deref()).map(|_| true),
        Command::Eval {
            checkpoint,
            encoder,
            keep_rate,
            out,
        } => eval(&checkpoint, encoder, keep_rate, &out).map(|_| true),
        Command::Bench {
            checkpoint,
            keep_rates,
            batch,
            repeats,
            warmup,
            out,
        } => bench(&checkpoint, &keep_rates, batch, repeats, warmup, out.as_deref()).map(|_| true),
        Command::Ablate {
            variants,
            config,
            out,
            seed,
        } => ablate(&variants, &config, &out, seed).map(|_| true),
        Command::Gradcheck { seed, inject_fault, out } => gradcheck(seed, inject_fault, out.as_deref()),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}
