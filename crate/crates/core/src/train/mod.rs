//! Desk-scale training of the three prediction regimes on synthetic motion
//! data.
//!
//! All three regimes share one inner loop that trains a single model on
//! `(frame_{t-1}, frame_t) -> frame_{t+k}` samples with the pyramid L1 loss:
//!
//! - recurrent: one model, horizon fixed at 1;
//! - arbitrary: one timestep-embedding model, `k` sampled per step with
//!   stratified coverage of `1..=k_max` every epoch;
//! - independent: `k_max` separate models, one per horizon.
//!
//! Training is bit-reproducible: sample order is seeded, batch gradients are
//! computed in parallel but reduced in a fixed order, so results do not
//! depend on the worker count.

mod adam;
mod pyramid;
pub mod synth;

pub use adam::{adam_step, AdamParams, AdamState};
pub use pyramid::{lap_l1_loss, laplacian_pyramid, reconstruct};
pub use synth::{gen_synthetic_dataset, load_dataset, save_dataset, Sequence, SyntheticSceneSpec};

use crate::error::{Error, Result};
use crate::model::{init_model, Model, ModelConfig};
use crate::predict::{synthesize_backward, synthesize_cached, FramePair, ModelSet};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Recurrent,
    Arbitrary,
    Independent,
}

impl TrainMethod {
    pub const ALL: [TrainMethod; 3] =
        [TrainMethod::Recurrent, TrainMethod::Arbitrary, TrainMethod::Independent];

    pub fn name(self) -> &'static str {
        match self {
            TrainMethod::Recurrent => "recurrent",
            TrainMethod::Arbitrary => "arbitrary",
            TrainMethod::Independent => "independent",
        }
    }
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TrainMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training method `{s}`")))
    }
}

fn default_epochs() -> usize {
    18
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    3e-4
}
fn default_k_max() -> u32 {
    5
}
fn default_loss_levels() -> usize {
    4
}
fn default_model() -> ModelConfig {
    ModelConfig {
        levels: 3,
        channels: vec![12, 18, 24],
        block_kinds: vec![crate::blocks::BlockKind::IfrnetResidual; 3],
        embed_timestep: false,
        k_max: default_k_max(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: TrainMethod,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_k_max")]
    pub k_max: u32,
    /// Pyramid depth of the training loss.
    #[serde(default = "default_loss_levels")]
    pub loss_levels: usize,
    #[serde(default)]
    pub seed: u64,
    /// Network shape; `embed_timestep` is forced per method.
    #[serde(default = "default_model")]
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(method: TrainMethod) -> Self {
        Self {
            method,
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            k_max: default_k_max(),
            loss_levels: default_loss_levels(),
            seed: 0,
            model: default_model(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.k_max < 1 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        let mut m = self.model.clone();
        m.embed_timestep = false;
        m.validate()
    }
}

pub enum TrainedPredictor {
    Single(Model<f32>),
    Set(ModelSet<f32>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelTrainReport {
    /// Fixed horizon of this model; absent for the arbitrary regime.
    pub horizon: Option<u32>,
    pub epoch_loss: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub models: Vec<ModelTrainReport>,
    /// Per-epoch counts of each sampled horizon (arbitrary regime only).
    pub k_counts: Option<Vec<Vec<u64>>>,
    pub wall_time_s: f64,
}

/// Loss of one training sample and its gradients for every weight tensor:
/// pyramid L1 between the synthesized frame and the target, chained through
/// synthesis and the network.
pub fn training_loss_and_grads<T: Scalar>(
    model: &Model<T>,
    pair: &FramePair<T>,
    target: &Tensor<T>,
    k: Option<u32>,
    loss_levels: usize,
) -> Result<(T, BTreeMap<String, Tensor<T>>)> {
    let (out, cache) = model.forward_cached(&pair.prev, &pair.curr, k)?;
    let (pred, scache) = synthesize_cached(&out, pair)?;
    let (loss, gpred) = lap_l1_loss(&pred, target, loss_levels)?;
    let fgrads = synthesize_backward(&out, pair, &scache, &gpred)?;
    let wgrads = model.backward(&cache, &fgrads)?;
    Ok((loss, wgrads))
}

/// Loss only, on the same path as [`training_loss_and_grads`].
pub fn training_loss<T: Scalar>(
    model: &Model<T>,
    pair: &FramePair<T>,
    target: &Tensor<T>,
    k: Option<u32>,
    loss_levels: usize,
) -> Result<T> {
    let (out, _) = model.forward_cached(&pair.prev, &pair.curr, k)?;
    let (pred, _) = synthesize_cached(&out, pair)?;
    Ok(lap_l1_loss(&pred, target, loss_levels)?.0)
}

/// `(sequence, t, k)`: inputs are frames `t-1` and `t`, target is `t + k`.
type Sample = (usize, usize, u32);

enum HorizonMode {
    Fixed(u32),
    Sampled { k_max: u32 },
}

fn base_positions(data: &[Sequence], horizon: u32) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (si, seq) in data.iter().enumerate() {
        let len = seq.frames.len();
        if len < horizon as usize + 2 {
            continue;
        }
        for t in 1..len - horizon as usize {
            out.push((si, t));
        }
    }
    out
}

fn train_one(
    cfg: &TrainConfig,
    data: &[Sequence],
    mode: HorizonMode,
    model_seed: u64,
) -> Result<(Model<f32>, Vec<f64>, Option<Vec<Vec<u64>>>)> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.embed_timestep = matches!(mode, HorizonMode::Sampled { .. });
    model_cfg.k_max = cfg.k_max;
    let mut model = init_model::<f32>(&model_cfg, model_seed)?;

    let (bases, needed) = match mode {
        HorizonMode::Fixed(k) => (base_positions(data, k), k as usize + 2),
        HorizonMode::Sampled { k_max } => (base_positions(data, k_max), k_max as usize + 2),
    };
    if bases.is_empty() {
        return Err(Error::Config(format!(
            "no usable training positions: sequences must hold at least {needed} frames"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(model_seed ^ 0x5eed_5a17);
    let mut state = AdamState::new();
    let params = AdamParams::with_lr(cfg.learning_rate);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut k_counts: Option<Vec<Vec<u64>>> =
        matches!(mode, HorizonMode::Sampled { .. }).then(Vec::new);

    for _epoch in 0..cfg.epochs {
        // assemble this epoch's samples
        let mut samples: Vec<Sample> = match mode {
            HorizonMode::Fixed(k) => bases.iter().map(|&(s, t)| (s, t, k)).collect(),
            HorizonMode::Sampled { k_max } => {
                // stratified horizons: every k appears (nearly) equally often
                let mut ks: Vec<u32> = (0..bases.len())
                    .map(|i| 1 + (i as u32) % k_max)
                    .collect();
                ks.shuffle(&mut rng);
                bases.iter().zip(ks).map(|(&(s, t), k)| (s, t, k)).collect()
            }
        };
        samples.shuffle(&mut rng);

        if let (Some(counts), HorizonMode::Sampled { k_max }) = (&mut k_counts, &mode) {
            let mut hist = vec![0u64; *k_max as usize];
            for &(_, _, k) in &samples {
                hist[k as usize - 1] += 1;
            }
            counts.push(hist);
        }

        let mut loss_sum = 0.0f64;
        for batch in samples.chunks(cfg.batch_size) {
            // gradients per sample in parallel, reduced in sample order
            let results: Vec<(f64, BTreeMap<String, Tensor<f32>>)> = batch
                .par_iter()
                .map(|&(si, t, k)| {
                    let seq = &data[si];
                    let pair =
                        FramePair::new(seq.frames[t - 1].clone(), seq.frames[t].clone())?;
                    let target = &seq.frames[t + k as usize];
                    let kk = model_cfg.embed_timestep.then_some(k);
                    let (loss, grads) =
                        training_loss_and_grads(&model, &pair, target, kk, cfg.loss_levels)?;
                    Ok((f64::from(loss), grads))
                })
                .collect::<Result<_>>()?;

            let scale = 1.0 / batch.len() as f32;
            let mut total: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for (loss, grads) in results {
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss".into()));
                }
                loss_sum += loss;
                for (name, g) in grads {
                    match total.get_mut(&name) {
                        Some(acc) => crate::tensor::add_assign(acc, &g)?,
                        None => {
                            total.insert(name, g);
                        }
                    }
                }
            }
            for g in total.values_mut() {
                *g = crate::tensor::scale(g, scale);
            }
            adam_step(model.weights_mut(), &total, &mut state, &params)?;
        }
        epoch_losses.push(loss_sum / samples.len() as f64);
    }
    Ok((model, epoch_losses, k_counts))
}

/// Trains per the configured method. Deterministic: `(seed, config, dataset)`
/// fixes the resulting weights bit for bit at any worker count.
pub fn train(cfg: &TrainConfig, data: &[Sequence]) -> Result<(TrainedPredictor, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let (predictor, models, k_counts) = match cfg.method {
        TrainMethod::Recurrent => {
            let (model, losses, _) = train_one(cfg, data, HorizonMode::Fixed(1), cfg.seed)?;
            (
                TrainedPredictor::Single(model),
                vec![ModelTrainReport { horizon: Some(1), epoch_loss: losses }],
                None,
            )
        }
        TrainMethod::Arbitrary => {
            let (model, losses, counts) =
                train_one(cfg, data, HorizonMode::Sampled { k_max: cfg.k_max }, cfg.seed)?;
            (
                TrainedPredictor::Single(model),
                vec![ModelTrainReport { horizon: None, epoch_loss: losses }],
                counts,
            )
        }
        TrainMethod::Independent => {
            let mut set = Vec::new();
            let mut reports = Vec::new();
            for k in 1..=cfg.k_max {
                // horizon 1 shares the recurrent seed so f_1 and the
                // recurrent model coincide exactly
                let seed = cfg.seed + u64::from(k) - 1;
                let (model, losses, _) = train_one(cfg, data, HorizonMode::Fixed(k), seed)?;
                set.push(model);
                reports.push(ModelTrainReport { horizon: Some(k), epoch_loss: losses });
            }
            (TrainedPredictor::Set(ModelSet::new(set)?), reports, None)
        }
    };
    let report = TrainReport {
        config: cfg.clone(),
        models,
        k_counts,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((predictor, report))
}
