//! Momentum teacher: parameter EMA and embedding centering.

use serde::{Deserialize, Serialize};
use tapegrad::{Scalar, Tape, Tensor, Var, L2_NORMALIZE_EPS};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const DEFAULT_MOMENTUM: f64 = 0.994;
pub const DEFAULT_CENTER_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    /// Teacher momentum `m`.
    pub momentum: f64,
    pub center_momentum: f64,
    pub centering: bool,
    /// Keep a momentum copy of the text encoder as well.
    pub text_ema: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            momentum: DEFAULT_MOMENTUM,
            center_momentum: DEFAULT_CENTER_MOMENTUM,
            centering: true,
            text_ema: false,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("ema.momentum", self.momentum), ("ema.center_momentum", self.center_momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("{v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `θ̄ ← m·θ̄ + (1−m)·θ` for every tensor of `teacher`.
pub fn ema_update<T: Scalar>(teacher: &mut ParamStore<T>, online: &ParamStore<T>, m: f64) -> Result<()> {
    if !teacher.mirrors(online) {
        return Err(Error::Contract("teacher parameters do not mirror the online encoder".into()));
    }
    let keep = T::from_f64_lossy(m);
    let take = T::from_f64_lossy(1.0 - m);
    for (t, o) in teacher.tensors_mut().iter_mut().zip(online.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
            *a = keep * *a + take * b;
        }
    }
    Ok(())
}

/// `c ← ρ·c + (1−ρ)·mean_rows(embeddings)`.
pub fn center_update<T: Scalar>(center: &mut [T], embeddings: &Tensor<T>, rho: f64) -> Result<()> {
    let s = embeddings.shape();
    if s.len() != 2 || s[1] != center.len() || s[0] == 0 {
        return Err(Error::Contract(format!(
            "center of width {} cannot absorb embeddings {s:?}",
            center.len()
        )));
    }
    let inv_n = 1.0 / s[0] as f64;
    let mut mean = vec![0.0f64; center.len()];
    for i in 0..s[0] {
        for (m, &v) in mean.iter_mut().zip(embeddings.row(i)) {
            *m += v.to_f64_lossy();
        }
    }
    let (keep, take) = (T::from_f64_lossy(rho), T::from_f64_lossy(1.0 - rho));
    for (c, m) in center.iter_mut().zip(mean) {
        *c = keep * *c + take * T::from_f64_lossy(m * inv_n);
    }
    Ok(())
}

/// `l2_normalize(z − c)` for unit-norm rows `z`. An all-zero center returns
/// `z` itself.
pub fn apply_center<T: Scalar>(tape: &mut Tape<T>, z: Var, center: &[T]) -> Result<Var> {
    if center.iter().all(|c| c.is_zero()) {
        return Ok(z);
    }
    let neg = Tensor::new(&[center.len()], center.iter().map(|&c| -c).collect())?;
    let x = tape.add_constant(z, &neg)?;
    Ok(tape.l2_normalize_rows(x, L2_NORMALIZE_EPS)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[v.len()], v.to_vec()).unwrap());
        s
    }

    #[test]
    fn ema_examples() {
        let online = store(&[1.0, -2.0]);
        let mut t = store(&[0.0, 0.5]);
        ema_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.tensors()[0].data(), &[0.0, 0.5]);
        ema_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, online);

        let mut t = store(&[0.0]);
        ema_update(&mut t, &store(&[1.0]), DEFAULT_MOMENTUM).unwrap();
        assert!((t.tensors()[0].data()[0] - 0.006).abs() < 1e-7);

        let mut bad = ParamStore::<f32>::new();
        bad.add("w", Tensor::zeros(&[3]));
        assert!(ema_update(&mut bad, &online, 0.5).is_err());
    }

    #[test]
    fn center_examples() {
        let e = Tensor::new(&[2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let mut c = vec![0.3f32, 0.2];
        center_update(&mut c, &e, 1.0).unwrap();
        assert_eq!(c, [0.3, 0.2]);
        let mut c = vec![0.0f32, 0.0];
        center_update(&mut c, &e, 0.0).unwrap();
        assert_eq!(c, [0.5, 0.5]);
    }

    #[test]
    fn constant_batches_pull_center_geometrically() {
        let v = [0.6f64, -0.8];
        let e = Tensor::new(&[3, 2], [v, v, v].concat()).unwrap();
        let c0 = [0.1f64, 0.4];
        let mut c = c0.to_vec();
        for t in 1..=30 {
            center_update(&mut c, &e, 0.9).unwrap();
            for k in 0..2 {
                let oracle = v[k] + (c0[k] - v[k]) * 0.9f64.powi(t);
                assert!((c[k] - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn centering_is_finite_and_unit_norm() {
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(Tensor::new(&[2, 2], vec![0.6, 0.8, 0.0, -1.0]).unwrap());
        assert_eq!(apply_center(&mut tape, z, &[0.0, 0.0]).unwrap(), z);

        let shifted = apply_center(&mut tape, z, &[0.5, 0.5]).unwrap();
        for i in 0..2 {
            let n: f32 = tape.value(shifted).row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }

        let same = apply_center(&mut tape, z, &[0.6, 0.8]).unwrap();
        assert!(tape.value(same).is_finite());
        assert!(tape.value(same).row(0).iter().all(|v| v.abs() < 1e-3));
    }
}
