//! Registration objective: negative squared-correlation similarity plus `λ`
//! times the batch mean of the stored-energy density.
//!
//! The windowed similarity at a target point `p` takes the `n³` window of
//! target voxel offsets around `p`, warps each window point through `Φ`, and
//! scores
//!
//! ```text
//! (Σ (s_i − s̄)(t_i − t̄))² / (Σ (s_i − s̄)² · Σ (t_i − t̄)² + variance_eps)
//! ```
//!
//! with `s_i = I_S(Φ(p_i))` and `t_i = I_T(p_i)`. Windows where either
//! intensity variance falls below `variance_eps` score 0.

use crate::energy::{density_value_and_grad, EnergyParams, TermSelection};
use crate::error::{Error, Result};
use crate::net::Deformation;
use crate::volume::Volume;
use crate::Vec3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NccMode {
    /// Local `n³` window around every sampled point.
    #[default]
    Windowed,
    /// One correlation over all sampled point pairs of the batch.
    BatchGlobal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub window_n: usize,
    pub ncc_mode: NccMode,
    pub variance_eps: f64,
    pub energy: EnergyParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            window_n: 5,
            ncc_mode: NccMode::Windowed,
            variance_eps: 1e-8,
            energy: EnergyParams::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss.lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.ncc_mode == NccMode::Windowed
            && (self.window_n < 3 || self.window_n.is_multiple_of(2))
        {
            return Err(Error::InvalidConfig(format!(
                "loss.window_n must be odd and at least 3, got {}",
                self.window_n
            )));
        }
        if !(self.variance_eps.is_finite() && self.variance_eps > 0.0) {
            return Err(Error::InvalidConfig(
                "loss.variance_eps must be positive".into(),
            ));
        }
        self.energy.validate()
    }
}

/// Components of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    /// Negative mean (or global) squared correlation, in `[−1, 0]`.
    pub similarity: f64,
    /// Mean stored-energy density over the batch, before weighting.
    pub regulariser: f64,
    /// `similarity + λ · regulariser`.
    pub total: f64,
}

/// World-space offsets of the `n³` window, in target voxel steps, ordered
/// x-fastest.
pub fn window_offsets(target: &Volume, n: usize) -> Vec<Vec3> {
    let r = (n / 2) as isize;
    let sp = target.geometry.spacing;
    let mut out = Vec::with_capacity(n * n * n);
    for k in -r..=r {
        for j in -r..=r {
            for i in -r..=r {
                out.push([i as f64 * sp[0], j as f64 * sp[1], k as f64 * sp[2]]);
            }
        }
    }
    out
}

/// Squared correlation of paired samples and its gradient with respect to
/// each `s_i`. Returns `(0, zeros)` when either variance is below `eps`.
pub(crate) fn squared_correlation(s: &[f64], t: &[f64], eps: f64, grad: Option<&mut [f64]>) -> f64 {
    let n = s.len() as f64;
    let s_mean = s.iter().sum::<f64>() / n;
    let t_mean = t.iter().sum::<f64>() / n;
    let mut cross = 0.0;
    let mut s_var = 0.0;
    let mut t_var = 0.0;
    for (a, b) in s.iter().zip(t) {
        let (ds, dt) = (a - s_mean, b - t_mean);
        cross += ds * dt;
        s_var += ds * ds;
        t_var += dt * dt;
    }
    if s_var / n < eps || t_var / n < eps {
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        return 0.0;
    }
    let denom = s_var * t_var + eps;
    let value = cross * cross / denom;
    if let Some(g) = grad {
        // ∂cross/∂s_i = t_i − t̄,  ∂s_var/∂s_i = 2(s_i − s̄)
        let a = 2.0 * cross / denom;
        let b = value * t_var * 2.0 / denom;
        for ((g, si), ti) in g.iter_mut().zip(s).zip(t) {
            *g = a * (ti - t_mean) - b * (si - s_mean);
        }
    }
    value
}

/// Windowed squared NCC at one target point, in `[0, 1]`.
pub fn ncc_window(
    source: &Volume,
    target: &Volume,
    model: &impl Deformation,
    p: Vec3,
    cfg: &LossConfig,
) -> f64 {
    let offsets = window_offsets(target, cfg.window_n);
    let pts: Vec<Vec3> = offsets
        .iter()
        .map(|o| [p[0] + o[0], p[1] + o[1], p[2] + o[2]])
        .collect();
    let s: Vec<f64> = pts.iter().map(|&q| source.sample(model.map(q))).collect();
    let t: Vec<f64> = pts.iter().map(|&q| target.sample(q)).collect();
    squared_correlation(&s, &t, cfg.variance_eps, None)
}

/// Squared NCC over the batch pairs `(I_S(Φ(p_b)), I_T(p_b))`.
pub fn ncc_global(
    source: &Volume,
    target: &Volume,
    model: &impl Deformation,
    batch: &[Vec3],
    cfg: &LossConfig,
) -> f64 {
    let warped = model.map_batch(batch);
    let s: Vec<f64> = warped.iter().map(|&q| source.sample(q)).collect();
    let t: Vec<f64> = batch.iter().map(|&q| target.sample(q)).collect();
    squared_correlation(&s, &t, cfg.variance_eps, None)
}

/// Value of the objective on a batch of target points.
pub fn total_loss(
    source: &Volume,
    target: &Volume,
    model: &impl Deformation,
    batch: &[Vec3],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let n = batch.len() as f64;
    let similarity = match cfg.ncc_mode {
        NccMode::Windowed => {
            let scores: Vec<f64> = batch
                .par_iter()
                .map(|&p| ncc_window(source, target, model, p, cfg))
                .collect();
            if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
                return Err(Error::non_finite(
                    "similarity",
                    format!("batch point {i} {:?}", batch[i]),
                ));
            }
            -pairwise_sum(&scores) / n
        }
        NccMode::BatchGlobal => {
            let v = ncc_global(source, target, model, batch, cfg);
            if !v.is_finite() {
                return Err(Error::non_finite("similarity", "batch-global correlation"));
            }
            -v
        }
    };
    let densities: Vec<f64> = model
        .map_batch_with_jacobian(batch)
        .iter()
        .map(|(_, j)| density_value_and_grad(j, &cfg.energy, TermSelection::All).0)
        .collect();
    if let Some(i) = densities.iter().position(|v| !v.is_finite()) {
        return Err(Error::non_finite(
            "regulariser",
            format!("batch point {i} {:?}", batch[i]),
        ));
    }
    let regulariser = pairwise_sum(&densities) / n;
    Ok(LossTerms {
        similarity,
        regulariser,
        total: similarity + cfg.lambda * regulariser,
    })
}

/// Fixed-shape pairwise summation; the result depends only on the input order.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2..=8 => v.iter().sum(),
        n => {
            let (a, b) = v.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}
