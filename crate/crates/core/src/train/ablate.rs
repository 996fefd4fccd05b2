use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::checkpoint_id;
use super::config::TrainConfig;
use super::eval::{evaluate, Encoder};
use super::run::{eval_corpus, run_training};
use crate::error::{Error, Result};
use crate::losses::{DistillVariant, LambdaSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub variant: DistillVariant,
    pub lambda: String,
    /// Which text embeddings form `Ā` and `A`.
    pub matrices: String,
    pub text_to_image_r1: f64,
    pub image_to_text_r1: f64,
    pub zero_shot_top1: f64,
}

fn lambda_label(s: LambdaSchedule) -> String {
    match s {
        LambdaSchedule::Constant(l) => format!("{l}"),
        LambdaSchedule::LinearRamp { start, end } => format!("{start}→{end}"),
    }
}

fn matrices_label(v: DistillVariant) -> &'static str {
    use DistillVariant::*;
    match v {
        Eclipse | HardOnly | EclipseRamp => "(T×Ī, sg(T)×I)",
        OutputFeature => "output",
        DualMomentum | DualMomentumRamp => "(T̄×Ī, T×I)",
        TextMomentum | TextMomentumRamp => "(T×Ī, T̄×I)",
    }
}

/// Trains and evaluates every variant under `base`, in table order.
pub fn run_ablation(base: &TrainConfig, variants: &[DistillVariant], out: &Path) -> Result<Vec<AblationRow>> {
    let mut list = variants.to_vec();
    list.sort_by_key(|v| DistillVariant::ALL.iter().position(|a| a == v));
    list.dedup();
    for &v in &list {
        let cfg = TrainConfig {
            variant: v,
            ..base.clone()
        };
        cfg.validate()?;
    }
    let eval = eval_corpus(base)?;
    let mut rows = Vec::with_capacity(list.len());
    for &v in &list {
        let cfg = TrainConfig {
            variant: v,
            ..base.clone()
        };
        let dir = out.join(v.tag());
        let done = run_training(&cfg, &dir, None)?;
        let report = evaluate(
            &done.model,
            &done.state,
            Encoder::Student,
            cfg.vit.keep_rate,
            &eval,
            checkpoint_id(&done.checkpoint)?,
        )?;
        rows.push(AblationRow {
            row: v.row().to_string(),
            variant: v,
            lambda: lambda_label(v.lambda_schedule(cfg.lambda)),
            matrices: matrices_label(v).to_string(),
            text_to_image_r1: report.text_to_image.r1,
            image_to_text_r1: report.image_to_text.r1,
            zero_shot_top1: report.zero_shot_top1,
        });
    }
    let json = out.join("ablation.json");
    fs::write(&json, serde_json::to_vec_pretty(&rows)?).map_err(|e| Error::io(&json, e))?;
    let md = out.join("ablation.md");
    fs::write(&md, render_table(&rows)).map_err(|e| Error::io(&md, e))?;
    Ok(rows)
}

pub fn render_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| row | variant | λ | (Ā, A) | T→I R@1 | I→T R@1 | zero-shot top-1 |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} |",
            r.row, r.variant, r.lambda, r.matrices, r.text_to_image_r1, r.image_to_text_r1, r.zero_shot_top1
        );
    }
    s
}
