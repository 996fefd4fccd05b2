//! Checkpoint directories: `manifest.json` plus `weights.bin`, a
//! concatenation of little-endian `f32` tensors in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tapegrad::Tensor;

use super::config::TrainConfig;
use super::state::{Model, TrainState};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    /// Completed epochs; the λ schedule and data order resume from here.
    pub epoch: usize,
    pub optimizer_steps: u64,
    pub config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
    pub weights_bytes: u64,
    /// Hex SHA-256 of `weights.bin`.
    pub sha256: String,
}

fn prefixed<'a>(prefix: &'a str, store: &'a ParamStore<f32>) -> impl Iterator<Item = (String, &'a Tensor<f32>)> + 'a {
    store.iter().map(move |(n, t)| (format!("{prefix}/{n}"), t))
}

fn entries(state: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    let mut out: Vec<(String, &Tensor<f32>)> = Vec::new();
    out.extend(prefixed("online", &state.online));
    out.extend(prefixed("teacher", &state.teacher));
    out.extend(prefixed("text", &state.text));
    if let Some(tt) = &state.text_teacher {
        out.extend(prefixed("text_teacher", tt));
    }
    out.push(("log_tau".into(), &state.log_tau));
    let tracked: Vec<String> = state
        .online
        .names()
        .iter()
        .map(|n| format!("online/{n}"))
        .chain(state.text.names().iter().map(|n| format!("text/{n}")))
        .chain(std::iter::once("log_tau".to_string()))
        .collect();
    for (name, m) in tracked.iter().zip(&state.optim.m) {
        out.push((format!("adam_m/{name}"), m));
    }
    for (name, v) in tracked.iter().zip(&state.optim.v) {
        out.push((format!("adam_v/{name}"), v));
    }
    out
}

pub fn save(dir: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let center = Tensor::new(&[state.center.len()], state.center.clone())?;
    let mut list = entries(state);
    list.push(("center".into(), &center));
    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(list.len());
    for (name, t) in list {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step: state.step,
        epoch: state.epoch,
        optimizer_steps: state.optim.t,
        config: cfg.clone(),
        tensors,
        weights_bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let wpath = dir.join(WEIGHTS);
    fs::write(&wpath, &bytes).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Checkpoint {
        path: mpath.clone(),
        message: "manifest has no format_version".into(),
    })?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::Checkpoint {
        path: mpath,
        message: e.to_string(),
    })
}

/// Short identifier derived from the weights checksum.
pub fn checkpoint_id(dir: &Path) -> Result<String> {
    Ok(read_manifest(dir)?.sha256[..16].to_string())
}

pub fn load(dir: &Path) -> Result<(TrainConfig, Model, TrainState)> {
    let manifest = read_manifest(dir)?;
    let wpath = dir.join(WEIGHTS);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let corrupt = |message: String| Error::Checkpoint {
        path: wpath.clone(),
        message,
    };
    if bytes.len() as u64 != manifest.weights_bytes {
        return Err(corrupt(format!(
            "{} bytes, manifest expects {}",
            bytes.len(),
            manifest.weights_bytes
        )));
    }
    if hex::encode(Sha256::digest(&bytes)) != manifest.sha256 {
        return Err(corrupt("checksum mismatch".into()));
    }
    let cfg = manifest.config.clone();
    cfg.validate()?;
    let (model, mut state) = Model::init(&cfg)?;

    let mut read = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 4;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| corrupt(format!("tensor {} runs past the end", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        read.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    let mut it = read.into_iter().peekable();
    let mut take = |prefix: &str, store: &mut ParamStore<f32>| -> Result<()> {
        let want = format!("{prefix}/");
        let mut part = Vec::with_capacity(store.len());
        while let Some((name, _)) = it.peek() {
            if !name.starts_with(&want) {
                break;
            }
            let (name, t) = it.next().expect("peeked");
            part.push((name[want.len()..].to_string(), t));
        }
        store.load_from(part)
    };
    take("online", &mut state.online)?;
    take("teacher", &mut state.teacher)?;
    take("text", &mut state.text)?;
    if let Some(tt) = state.text_teacher.as_mut() {
        take("text_teacher", tt)?;
    }
    let mut rest: Vec<(String, Tensor<f32>)> = it.collect();
    let expected = 2 + 2 * state.optim.m.len();
    if rest.len() != expected {
        return Err(corrupt(format!(
            "{} trailing tensors, expected {expected}",
            rest.len()
        )));
    }
    let (name, center) = rest.pop().expect("non-empty");
    if name != "center" || center.shape() != [state.center.len()] {
        return Err(corrupt(format!("expected center, found {name}")));
    }
    state.center = center.into_data();
    let mut rest = rest.into_iter();
    let (name, log_tau) = rest.next().expect("non-empty");
    if name != "log_tau" || !log_tau.shape().is_empty() {
        return Err(corrupt(format!("expected log_tau, found {name}")));
    }
    state.log_tau = log_tau;
    let k = state.optim.m.len();
    let moments: Vec<(String, Tensor<f32>)> = rest.collect();
    for (i, (name, t)) in moments.into_iter().enumerate() {
        let slot = if i < k { &mut state.optim.m[i] } else { &mut state.optim.v[i - k] };
        if t.shape() != slot.shape() || !(name.starts_with("adam_m/") || name.starts_with("adam_v/")) {
            return Err(corrupt(format!("unexpected optimizer tensor {name} {:?}", t.shape())));
        }
        *slot = t;
    }
    state.optim.t = manifest.optimizer_steps;
    state.step = manifest.step;
    state.epoch = manifest.epoch;
    Ok((cfg, model, state))
}
