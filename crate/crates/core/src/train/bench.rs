use std::time::Instant;

use serde::{Deserialize, Serialize};
use tapegrad::{Tape, Tensor};

use super::state::Model;
use crate::encoders::{validate_keep_rate, SparsifyMode};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MIN_REPEATS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub keep_rate: f64,
    pub median_ms: f64,
    pub images_per_sec: f64,
    /// Throughput relative to the `κ = 1` row, or to the first row when
    /// `κ = 1` was not measured.
    pub speedup: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times the image encoder's forward pass on `images` at each keep rate.
/// Keep rates are visited round-robin so slow drift affects all equally.
pub fn throughput_bench(
    model: &Model,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
    keep_rates: &[f64],
    repeats: usize,
    warmup: usize,
) -> Result<Vec<BenchRow>> {
    if repeats < MIN_REPEATS {
        return Err(Error::config("--repeats", format!("{repeats} is below the minimum of {MIN_REPEATS}")));
    }
    if keep_rates.is_empty() {
        return Err(Error::config("--keep-rates", "no keep rates given"));
    }
    for &k in keep_rates {
        validate_keep_rate(k, "--keep-rates")?;
    }
    let batch = images.shape()[0] as f64;
    let mut times = vec![Vec::with_capacity(repeats); keep_rates.len()];
    for round in 0..warmup + repeats {
        for (slot, &k) in keep_rates.iter().enumerate() {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let start = Instant::now();
            let out = model.vit.forward(&mut tape, &p, images, SparsifyMode::KeepRate(k))?;
            std::hint::black_box(tape.value(out.embeddings));
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if round >= warmup {
                times[slot].push(ms);
            }
        }
    }
    let medians: Vec<f64> = times.into_iter().map(median).collect();
    let base = keep_rates.iter().position(|&k| k == 1.0).unwrap_or(0);
    Ok(keep_rates
        .iter()
        .zip(&medians)
        .map(|(&keep_rate, &ms)| BenchRow {
            keep_rate,
            median_ms: ms,
            images_per_sec: batch / (ms / 1e3),
            speedup: medians[base] / ms,
        })
        .collect())
}

/// Pairs of adjacent rows, ordered by decreasing keep rate, whose
/// throughput does not increase.
pub fn monotonicity_violations(rows: &[BenchRow]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<&BenchRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.keep_rate.total_cmp(&a.keep_rate));
    sorted
        .windows(2)
        .filter(|w| w[1].images_per_sec <= w[0].images_per_sec)
        .map(|w| (w[0].keep_rate, w[1].keep_rate))
        .collect()
}
