//! Per-pair training: masked point sampling, Adam, and the epoch loop.
//!
//! One epoch is one freshly sampled batch and one Adam step.

use crate::error::{Error, Result};
use crate::grad::{loss_gradients, ParamGrads};
use crate::loss::{LossConfig, LossTerms};
use crate::net::{DeformationModel, NetConfig, Normalization};
use crate::volume::Volume;
use crate::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub points_per_epoch: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            points_per_epoch: 10_000,
            learning_rate: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            deterministic: false,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.points_per_epoch == 0 {
            return bad("train.points_per_epoch must be positive".into());
        }
        if self.log_every == 0 {
            return bad("train.log_every must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("train.{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps >= 0.0) {
            return bad(format!(
                "train.adam_eps must be nonnegative, got {}",
                self.adam_eps
            ));
        }
        Ok(())
    }
}

/// Named settings for the two motion regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Inspiration/expiration COPD-style pairs: 4 layers, 15000 points, 6000 epochs.
    LargeMotion,
    /// Respiratory-phase 4DCT-style pairs: 3 layers, 10000 points, 3000 epochs.
    SmallMotion,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::LargeMotion => "large-motion",
            Preset::SmallMotion => "small-motion",
        }
    }

    pub fn apply(self, net: &mut NetConfig, train: &mut TrainConfig) {
        let (layers, points, epochs) = match self {
            Preset::LargeMotion => (4, 15_000, 6000),
            Preset::SmallMotion => (3, 10_000, 3000),
        };
        net.num_layers = layers;
        net.hidden_units = 256;
        train.points_per_epoch = points;
        train.epochs = epochs;
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "large-motion" => Ok(Preset::LargeMotion),
            "small-motion" => Ok(Preset::SmallMotion),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?} (expected large-motion or small-motion)"
            ))),
        }
    }
}

/// Uniform sampler over the masked voxels of a volume.
#[derive(Debug, Clone)]
pub struct MaskSampler {
    geometry: crate::volume::Geometry,
    voxels: Vec<[usize; 3]>,
}

impl MaskSampler {
    pub fn new(vol: &Volume) -> Result<Self> {
        let voxels = vol.masked_indices()?;
        if voxels.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(Self {
            geometry: vol.geometry,
            voxels,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    /// `count` world points: masked voxel centers drawn with replacement,
    /// each jittered uniformly within ±half a voxel per axis.
    pub fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..count)
            .map(|_| {
                let v = self.voxels[rng.gen_range(0..self.voxels.len())];
                let idx: Vec3 = std::array::from_fn(|a| v[a] as f64 + rng.gen_range(-0.5..0.5));
                self.geometry.index_to_world(idx)
            })
            .collect()
    }
}

/// One-off batch draw; see [`MaskSampler::sample`].
pub fn sample_batch(vol: &Volume, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec3>> {
    Ok(MaskSampler::new(vol)?.sample(count, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let g = &grads.values;
    if g.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            g.len(),
            state.m.len()
        )));
    }
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::non_finite("gradient", format!("parameter {i}")));
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub similarity: f64,
    pub regulariser: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,similarity,regulariser,total\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.epoch, r.similarity, r.regulariser, r.total
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Means of the total loss over consecutive non-overlapping blocks of
    /// `window` epochs (a trailing partial block is dropped).
    pub fn block_means(&self, window: usize) -> Vec<f64> {
        let Some(last) = self.records.last() else {
            return Vec::new();
        };
        let complete = (last.epoch + 1) / window;
        let mut sums = vec![(0.0, 0usize); complete];
        for r in &self.records {
            if let Some(s) = sums.get_mut(r.epoch / window) {
                s.0 += r.total;
                s.1 += 1;
            }
        }
        sums.into_iter()
            .filter(|s| s.1 > 0)
            .map(|(s, c)| s / c as f64)
            .collect()
    }
}

/// Fits a deformation model mapping target coordinates into the source image.
/// The target's mask restricts where points are sampled. Both images are
/// rescaled to `[0, 1]` first (the target over its mask interior).
pub fn register(
    source: &Volume,
    target: &Volume,
    net_cfg: &NetConfig,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<(DeformationModel, TrainingLog)> {
    register_with(source, target, net_cfg, loss_cfg, train_cfg, |_| {})
}

/// [`register`] with a callback invoked for every logged record.
pub fn register_with(
    source: &Volume,
    target: &Volume,
    net_cfg: &NetConfig,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<(DeformationModel, TrainingLog)> {
    loss_cfg.validate()?;
    train_cfg.validate()?;
    let mut model =
        DeformationModel::new(*net_cfg, Normalization::from_geometry(&target.geometry))?;
    let sampler = MaskSampler::new(target)?;
    let source = &source.normalized();
    let target = &target.normalized();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut adam = AdamState::new(model.param_count());
    let mut log = TrainingLog::default();

    for epoch in 0..train_cfg.epochs {
        let batch = sampler.sample(train_cfg.points_per_epoch, &mut rng);
        let (terms, grads) = loss_gradients(
            &model,
            source,
            target,
            &batch,
            loss_cfg,
            train_cfg.deterministic,
        )
        .map_err(|e| at_epoch(e, epoch))?;
        if epoch % train_cfg.log_every == 0 || epoch + 1 == train_cfg.epochs {
            let record = record(epoch, terms);
            on_log(&record);
            log.records.push(record);
        }
        adam_step(model.params_mut(), &grads, &mut adam, train_cfg)
            .map_err(|e| at_epoch(e, epoch))?;
    }
    Ok((model, log))
}

fn record(epoch: usize, t: LossTerms) -> LogRecord {
    LogRecord {
        epoch,
        similarity: t.similarity,
        regulariser: t.regulariser,
        total: t.total,
    }
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { what, context } => Error::NonFinite {
            what,
            context: format!("epoch {epoch}, {context}"),
        },
        other => other,
    }
}
