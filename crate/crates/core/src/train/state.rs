use tapegrad::Tensor;

use super::config::TrainConfig;
use super::optim::AdamW;
use crate::data::{stream_rng, Stream};
use crate::encoders::{TextTransformer, VisionTransformer};
use crate::error::Result;
use crate::losses::TAU_INIT;
use crate::params::ParamStore;

/// Network layouts. Parameter values live in [`TrainState`].
#[derive(Debug, Clone)]
pub struct Model {
    pub vit: VisionTransformer,
    pub text: TextTransformer,
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub online: ParamStore<f32>,
    pub teacher: ParamStore<f32>,
    pub text: ParamStore<f32>,
    pub text_teacher: Option<ParamStore<f32>>,
    /// Scalar `log τ`.
    pub log_tau: Tensor<f32>,
    pub center: Vec<f32>,
    /// Moments over online, text, then `log τ`.
    pub optim: AdamW,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl Model {
    /// Builds both encoders from the seed's init stream; the teacher starts as
    /// an exact copy of the online encoder.
    pub fn init(cfg: &TrainConfig) -> Result<(Model, TrainState)> {
        let mut rng = stream_rng(cfg.seed, Stream::ModelInit);
        let mut online = ParamStore::new();
        let vit = VisionTransformer::new(&cfg.vit, &mut online, &mut rng)?;
        let mut text = ParamStore::new();
        let text_net = TextTransformer::new(&cfg.text, &mut text, &mut rng)?;
        let log_tau = Tensor::scalar(TAU_INIT.ln() as f32);
        let optim = {
            let mut all: Vec<&Tensor<f32>> = online.tensors().iter().chain(text.tensors()).collect();
            all.push(&log_tau);
            AdamW::new(cfg.optim.clone(), &all)
        };
        let state = TrainState {
            teacher: online.clone(),
            text_teacher: cfg.ema.text_ema.then(|| text.clone()),
            online,
            text,
            log_tau,
            center: vec![0.0; cfg.vit.proj_dim],
            optim,
            step: 0,
            epoch: 0,
        };
        Ok((Model { vit, text: text_net }, state))
    }
}

impl TrainState {
    pub fn tau(&self) -> f64 {
        crate::losses::clamp_log_tau(self.log_tau.item() as f64).exp()
    }
}
