//! Contrastive and distillation objectives over text–image alignment
//! matrices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tapegrad::{Scalar, Tape, Var};

use crate::error::{Error, Result};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const TAU_INIT: f64 = 0.07;

/// `A_ij = ⟨T_i, I_j⟩` for unit-norm rows `T` (text) and `I` (image).
pub fn alignment_matrix<T: Scalar>(tape: &mut Tape<T>, text: Var, image: Var) -> Result<Var> {
    let (ts, is) = (tape.shape(text), tape.shape(image));
    if ts.len() != 2 || ts != is || ts[0] == 0 {
        return Err(Error::Contract(format!(
            "alignment needs two equal non-empty [N, D] batches, got {ts:?} and {is:?}"
        )));
    }
    Ok(tape.matmul_t(text, image, false, true)?)
}

/// `1/τ` with `τ = exp(clamp(log_tau, ln τ_min, ln τ_max))`.
pub fn inverse_temperature<T: Scalar>(tape: &mut Tape<T>, log_tau: Var) -> Result<Var> {
    let lo = T::from_f64_lossy(TAU_MIN.ln());
    let hi = T::from_f64_lossy(TAU_MAX.ln());
    let c = tape.clamp(log_tau, lo, hi)?;
    let neg = tape.scale(c, -T::one())?;
    Ok(tape.exp(neg)?)
}

pub fn clamp_log_tau(log_tau: f64) -> f64 {
    log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln())
}

/// Mean cross-entropy of each row against its diagonal entry, on logits
/// `A·(1/τ)`.
pub fn info_nce<T: Scalar>(tape: &mut Tape<T>, a: Var, inv_tau: Var) -> Result<Var> {
    let logits = tape.scale_by(a, inv_tau)?;
    let ls = tape.log_softmax_rows(logits)?;
    let diag = tape.take_diag(ls)?;
    let m = tape.mean(diag)?;
    Ok(tape.scale(m, -T::one())?)
}

/// Symmetric InfoNCE: text→image rows and image→text columns.
pub fn clip_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, inv_tau: Var) -> Result<Var> {
    let rows = info_nce(tape, a, inv_tau)?;
    let at = tape.transpose(a)?;
    let cols = info_nce(tape, at, inv_tau)?;
    let s = tape.add(rows, cols)?;
    Ok(tape.scale(s, half())?)
}

/// Row-averaged `KL(softmax(target/τ_d) ‖ softmax(pred/τ_d))`. The target
/// receives no gradient.
pub fn kl_rows<T: Scalar>(tape: &mut Tape<T>, target: Var, pred: Var, inv_tau_d: Var) -> Result<Var> {
    let (ts, ps) = (tape.shape(target), tape.shape(pred));
    if ts.len() != 2 || ts != ps {
        return Err(Error::Contract(format!("kl_rows shapes differ: {ts:?} vs {ps:?}")));
    }
    let n = ts[0];
    let target = tape.stop_gradient(target)?;
    let t_logits = tape.scale_by(target, inv_tau_d)?;
    let p_logits = tape.scale_by(pred, inv_tau_d)?;
    let p = tape.softmax_rows(t_logits)?;
    let log_p = tape.log_softmax_rows(t_logits)?;
    let log_q = tape.log_softmax_rows(p_logits)?;
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let s = tape.sum(terms)?;
    Ok(tape.scale(s, T::one() / T::from_usize(n).unwrap_or_else(T::one))?)
}

/// Average of row-wise and column-wise KL from `Ā` (target) to `A`.
pub fn distill_loss<T: Scalar>(tape: &mut Tape<T>, abar: Var, a: Var, inv_tau_d: Var) -> Result<Var> {
    let rows = kl_rows(tape, abar, a, inv_tau_d)?;
    let abar_t = tape.transpose(abar)?;
    let a_t = tape.transpose(a)?;
    let cols = kl_rows(tape, abar_t, a_t, inv_tau_d)?;
    let s = tape.add(rows, cols)?;
    Ok(tape.scale(s, half())?)
}

/// `λ·clip + (1−λ)·distill`; with `λ = 1` the distill term is not built.
pub fn mix<T: Scalar>(tape: &mut Tape<T>, clip: Var, distill: Option<Var>, lambda: f64) -> Result<Var> {
    match distill {
        Some(d) if lambda != 1.0 => {
            let c = tape.scale(clip, T::from_f64_lossy(lambda))?;
            let d = tape.scale(d, T::from_f64_lossy(1.0 - lambda))?;
            Ok(tape.add(c, d)?)
        }
        _ => Ok(clip),
    }
}

/// Student objective: `λ·clip_loss(A) + (1−λ)·distill_loss(Ā, A)`.
pub fn online_loss<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    abar: Var,
    lambda: f64,
    inv_tau: Var,
    inv_tau_d: Var,
) -> Result<Var> {
    let clip = clip_loss(tape, a, inv_tau)?;
    let distill = if lambda != 1.0 {
        Some(distill_loss(tape, abar, a, inv_tau_d)?)
    } else {
        None
    };
    mix(tape, clip, distill, lambda)
}

/// `online_loss(A, Ā) + clip_loss(Ā)`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    abar: Var,
    lambda: f64,
    inv_tau: Var,
    inv_tau_d: Var,
) -> Result<Var> {
    let online = online_loss(tape, a, abar, lambda, inv_tau, inv_tau_d)?;
    let teacher = clip_loss(tape, abar, inv_tau)?;
    Ok(tape.add(online, teacher)?)
}

/// Mean cosine distance between student features and detached teacher
/// features, both unit norm.
pub fn feature_distill_loss<T: Scalar>(tape: &mut Tape<T>, student: Var, teacher: Var) -> Result<Var> {
    let teacher = tape.stop_gradient(teacher)?;
    let prod = tape.mul(student, teacher)?;
    let n = tape.shape(student)[0];
    let dots = tape.sum(prod)?;
    let mean = tape.scale(dots, -T::one() / T::from_usize(n.max(1)).unwrap_or_else(T::one))?;
    Ok(tape.add_scalar(mean, T::one())?)
}

fn half<T: Scalar>() -> T {
    T::from_f64_lossy(0.5)
}

/// The eight wirings of teacher/student alignment matrices, in the order
/// their comparison table lists them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillVariant {
    Eclipse,
    HardOnly,
    EclipseRamp,
    OutputFeature,
    DualMomentum,
    DualMomentumRamp,
    TextMomentum,
    TextMomentumRamp,
}

impl DistillVariant {
    pub const ALL: [DistillVariant; 8] = [
        Self::Eclipse,
        Self::HardOnly,
        Self::EclipseRamp,
        Self::OutputFeature,
        Self::DualMomentum,
        Self::DualMomentumRamp,
        Self::TextMomentum,
        Self::TextMomentumRamp,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Eclipse => "eclipse",
            Self::HardOnly => "hard_only",
            Self::EclipseRamp => "eclipse_ramp",
            Self::OutputFeature => "output_feature",
            Self::DualMomentum => "dual_momentum",
            Self::DualMomentumRamp => "dual_momentum_ramp",
            Self::TextMomentum => "text_momentum",
            Self::TextMomentumRamp => "text_momentum_ramp",
        }
    }

    /// Row label in the ablation table.
    pub fn row(self) -> &'static str {
        match self {
            Self::Eclipse => "ECLIPSE",
            Self::HardOnly => "(a)",
            Self::EclipseRamp => "(b)",
            Self::OutputFeature => "(c)",
            Self::DualMomentum => "(d)",
            Self::DualMomentumRamp => "(e)",
            Self::TextMomentum => "(f)",
            Self::TextMomentumRamp => "(g)",
        }
    }

    /// Whether the variant needs a momentum text encoder.
    pub fn needs_text_ema(self) -> bool {
        matches!(
            self,
            Self::DualMomentum | Self::DualMomentumRamp | Self::TextMomentum | Self::TextMomentumRamp
        )
    }

    pub fn lambda_schedule(self, lambda: f64) -> LambdaSchedule {
        match self {
            Self::HardOnly => LambdaSchedule::Constant(1.0),
            Self::EclipseRamp | Self::DualMomentumRamp | Self::TextMomentumRamp => {
                LambdaSchedule::LinearRamp { start: 0.5, end: 1.0 }
            }
            _ => LambdaSchedule::Constant(lambda),
        }
    }

    pub fn valid_tags() -> String {
        Self::ALL.iter().map(|v| v.tag()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for DistillVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for DistillVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown tag {s:?}; valid tags: {}", Self::valid_tags())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSchedule {
    Constant(f64),
    LinearRamp { start: f64, end: f64 },
}

impl LambdaSchedule {
    /// λ for `epoch` of `epochs`, linear from the first to the last epoch.
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        match *self {
            Self::Constant(l) => l,
            Self::LinearRamp { start, end } => {
                if epochs <= 1 {
                    start
                } else {
                    let f = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
                    start + (end - start) * f
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |l: f64| (0.0..=1.0).contains(&l);
        let fine = match *self {
            Self::Constant(l) => ok(l),
            Self::LinearRamp { start, end } => ok(start) && ok(end),
        };
        if fine {
            Ok(())
        } else {
            Err(Error::config("lambda", format!("{self:?} leaves [0, 1]")))
        }
    }
}

/// Unit-norm embeddings of one batch. `text_teacher` is present only when a
/// momentum text encoder runs; `image_teacher` is a constant on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Embeddings {
    pub text: Var,
    pub text_teacher: Option<Var>,
    pub image: Var,
    pub image_teacher: Var,
}

/// Loss nodes of one step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub clip_teacher: Option<Var>,
    pub clip_student: Var,
    pub distill: Option<Var>,
    /// Student matrix `A`.
    pub a: Var,
    /// Teacher matrix `Ā`, absent for the plain contrastive baseline.
    pub abar: Option<Var>,
}

/// Forms `(Ā, A)` for `variant`:
///
/// | variant | Ā | A |
/// |---|---|---|
/// | eclipse, hard_only, eclipse_ramp, output_feature | T·Īᵀ | sg(T)·Iᵀ |
/// | dual_momentum(_ramp) | T̄·Īᵀ | T·Iᵀ |
/// | text_momentum(_ramp) | T·Īᵀ | T̄·Iᵀ |
pub fn build_variant_matrices<T: Scalar>(
    tape: &mut Tape<T>,
    variant: DistillVariant,
    e: &Embeddings,
) -> Result<(Var, Var)> {
    use DistillVariant::*;
    let text_teacher = || {
        e.text_teacher.ok_or_else(|| {
            Error::config(
                "ema.text_ema",
                format!("variant {variant} needs the momentum text encoder"),
            )
        })
    };
    match variant {
        Eclipse | HardOnly | EclipseRamp | OutputFeature => {
            let abar = alignment_matrix(tape, e.text, e.image_teacher)?;
            let sg_text = tape.stop_gradient(e.text)?;
            let a = alignment_matrix(tape, sg_text, e.image)?;
            Ok((abar, a))
        }
        DualMomentum | DualMomentumRamp => {
            let tbar = text_teacher()?;
            let abar = alignment_matrix(tape, tbar, e.image_teacher)?;
            let a = alignment_matrix(tape, e.text, e.image)?;
            Ok((abar, a))
        }
        TextMomentum | TextMomentumRamp => {
            let tbar = text_teacher()?;
            let abar = alignment_matrix(tape, e.text, e.image_teacher)?;
            let a = alignment_matrix(tape, tbar, e.image)?;
            Ok((abar, a))
        }
    }
}

/// Full objective for `variant` at mixing weight `lambda`.
pub fn variant_loss<T: Scalar>(
    tape: &mut Tape<T>,
    variant: DistillVariant,
    e: &Embeddings,
    lambda: f64,
    log_tau: Var,
) -> Result<LossTerms> {
    let inv_tau = inverse_temperature(tape, log_tau)?;
    let inv_tau_d = tape.stop_gradient(inv_tau)?;
    let (abar, a) = build_variant_matrices(tape, variant, e)?;
    let clip_student = clip_loss(tape, a, inv_tau)?;
    let distill = if lambda == 1.0 {
        None
    } else if variant == DistillVariant::OutputFeature {
        Some(feature_distill_loss(tape, e.image, e.image_teacher)?)
    } else {
        Some(distill_loss(tape, abar, a, inv_tau_d)?)
    };
    let online = mix(tape, clip_student, distill, lambda)?;
    let clip_teacher = clip_loss(tape, abar, inv_tau)?;
    let total = tape.add(online, clip_teacher)?;
    Ok(LossTerms {
        total,
        clip_teacher: Some(clip_teacher),
        clip_student,
        distill,
        a,
        abar: Some(abar),
    })
}

/// Plain symmetric contrastive loss on `T·Iᵀ`, with no teacher branch.
pub fn baseline_loss<T: Scalar>(tape: &mut Tape<T>, text: Var, image: Var, log_tau: Var) -> Result<LossTerms> {
    let inv_tau = inverse_temperature(tape, log_tau)?;
    let a = alignment_matrix(tape, text, image)?;
    let clip = clip_loss(tape, a, inv_tau)?;
    Ok(LossTerms {
        total: clip,
        clip_teacher: None,
        clip_student: clip,
        distill: None,
        a,
        abar: None,
    })
}
