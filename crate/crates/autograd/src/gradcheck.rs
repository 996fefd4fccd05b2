//! Central-difference gradient oracle.
//!
//! The analytic gradient comes from [`Tape::backward`]; the numeric one from
//! `(f(x + h·e) − f(x − h·e)) / 2h` per coordinate. Relative error uses the
//! denominator `max(|analytic|, |numeric|, 1e-8)`. A coordinate whose absolute
//! difference is within the rounding noise of the difference quotient,
//! `64·ε·max(|f(x ± h·e)|) / 2h`, counts as exact agreement; this matters for
//! gradients that are zero in exact arithmetic.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const DENOM_FLOOR: f64 = 1e-8;
const NOISE_ULPS: f64 = 64.0;

/// How stop-gradient nodes behave while probing with perturbed inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopGradientMode {
    /// Stop-gradient outputs follow the perturbed inputs. Paths that only run
    /// through stop-gradient then show a numeric gradient the analytic one
    /// deliberately lacks.
    Live,
    /// Stop-gradient outputs are held at their values from the unperturbed
    /// evaluation, which is the function the analytic gradient differentiates.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input position, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates that agreed only to within rounding noise.
    pub below_noise: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `f` against central differences for every
/// coordinate of every input.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    mode: StopGradientMode,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.data().to_vec()).unwrap_or_default())
        .collect();
    let frozen = tape.stop_gradient_values().to_vec();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = match mode {
            StopGradientMode::Live => Tape::new(),
            StopGradientMode::Frozen => Tape::with_frozen_stop_gradients(frozen.clone()),
        };
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        below_noise: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (p, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let base = input.data()[j];
            probe[p].data_mut()[j] = base + h;
            let plus = eval(&probe)?;
            probe[p].data_mut()[j] = base - h;
            let minus = eval(&probe)?;
            probe[p].data_mut()[j] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p][j];
            let noise = NOISE_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * h);
            let err = if (a - numeric).abs() <= noise && relative_error(a, numeric) > 0.0 {
                report.below_noise += 1;
                0.0
            } else {
                relative_error(a, numeric)
            };
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (p, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input check with live stop-gradients; returns the worst relative
/// error.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_gradients(
        |t, vs| f(t, vs[0]),
        std::slice::from_ref(x),
        h,
        StopGradientMode::Live,
    )
    .map(|r| r.max_rel_error)
}
