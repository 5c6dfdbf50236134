//! Sine-activated coordinate network representing the deformation.
//!
//! The map is identity plus displacement,
//!
//! ```text
//! Φ(p) = p + h ⊙ u(N(p)),     N(p) = (p − center) ⊘ h
//! ```
//!
//! where `N` sends the target grid onto `[−1, 1]³`, `h` is the per-axis half
//! extent in mm, and `u` is an MLP whose hidden layers compute `sin(ω(Wz + b))`
//! and whose final layer is linear and zero-initialized. The spatial Jacobian
//! in world coordinates is therefore `∇Φ = I + diag(h) · ∂u/∂N · diag(h)⁻¹`.

use crate::error::{Error, Result};
use crate::grad::Tape;
use crate::mat3::Mat3;
use crate::volume::Geometry;
use crate::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::{Read, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    /// Coordinates feed a sine layer directly.
    #[default]
    Periodic,
    /// Coordinates pass through a fixed random map `[sin(2πBp), cos(2πBp)]`
    /// that replaces the first layer.
    Fourier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Number of layers counting the output layer; with the Fourier encoder
    /// the fixed feature map takes the place of the first one.
    pub num_layers: usize,
    pub hidden_units: usize,
    pub omega: f64,
    pub encoder: Encoder,
    pub fourier_features: usize,
    pub fourier_sigma: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            hidden_units: 256,
            omega: 32.0,
            encoder: Encoder::Periodic,
            fourier_features: 128,
            fourier_sigma: 1.0,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::InvalidConfig(format!(
                "net.num_layers must be at least 2, got {}",
                self.num_layers
            )));
        }
        if self.hidden_units == 0 {
            return Err(Error::InvalidConfig(
                "net.hidden_units must be positive".into(),
            ));
        }
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "net.omega must be positive, got {}",
                self.omega
            )));
        }
        if self.encoder == Encoder::Fourier {
            if self.fourier_features == 0 {
                return Err(Error::InvalidConfig(
                    "net.fourier_features must be positive".into(),
                ));
            }
            if !(self.fourier_sigma.is_finite() && self.fourier_sigma > 0.0) {
                return Err(Error::InvalidConfig(
                    "net.fourier_sigma must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Dense layer sizes `(inputs, outputs)` in evaluation order.
    pub fn layer_sizes(&self) -> Vec<(usize, usize)> {
        let (first_in, trainable) = match self.encoder {
            Encoder::Periodic => (3, self.num_layers),
            Encoder::Fourier => (2 * self.fourier_features, self.num_layers - 1),
        };
        (0..trainable)
            .map(|l| {
                let inputs = if l == 0 { first_in } else { self.hidden_units };
                let outputs = if l + 1 == trainable {
                    3
                } else {
                    self.hidden_units
                };
                (inputs, outputs)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Diagonal affine map between world mm and the normalized cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vec3,
    pub half_extent: Vec3,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            half_extent: [1.0; 3],
        }
    }

    /// Maps the outermost voxel centers of `g` to ±1. Singleton axes use half
    /// a voxel instead.
    pub fn from_geometry(g: &Geometry) -> Self {
        let half_extent = std::array::from_fn(|a| {
            if g.dims[a] > 1 {
                0.5 * g.spacing[a] * (g.dims[a] - 1) as f64
            } else {
                0.5 * g.spacing[a]
            }
        });
        let center =
            std::array::from_fn(|a| g.origin[a] + 0.5 * g.spacing[a] * (g.dims[a] - 1) as f64);
        Self {
            center,
            half_extent,
        }
    }

    #[inline]
    pub fn to_normalized(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|a| (p[a] - self.center[a]) / self.half_extent[a])
    }

    #[inline]
    pub fn to_world(&self, q: Vec3) -> Vec3 {
        std::array::from_fn(|a| self.center[a] + self.half_extent[a] * q[a])
    }
}

/// Placement of one dense layer inside the flat parameter vector. Weights are
/// row-major `outputs × inputs` followed by `outputs` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
    pub sine: bool,
}

impl LayerShape {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }
}

/// Anything that maps target world points into source world points.
pub trait Deformation: Sync {
    fn map(&self, p: Vec3) -> Vec3;

    fn map_with_jacobian(&self, p: Vec3) -> (Vec3, Mat3);

    fn map_batch(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.par_iter().map(|&p| self.map(p)).collect()
    }

    fn map_batch_with_jacobian(&self, points: &[Vec3]) -> Vec<(Vec3, Mat3)> {
        points
            .par_iter()
            .map(|&p| self.map_with_jacobian(p))
            .collect()
    }
}

/// The identity map, useful as a baseline for evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMap;

impl Deformation for IdentityMap {
    fn map(&self, p: Vec3) -> Vec3 {
        p
    }

    fn map_with_jacobian(&self, p: Vec3) -> (Vec3, Mat3) {
        (p, Mat3::IDENTITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationModel {
    config: NetConfig,
    norm: Normalization,
    layers: Vec<LayerShape>,
    params: Vec<f64>,
    /// Fourier frequency matrix `B`, one row per feature.
    features: Vec<Vec3>,
}

/// Points per batched evaluation block.
const EVAL_CHUNK: usize = 512;

impl DeformationModel {
    /// Sine-network initialization, deterministic in `config.seed`: the first
    /// coordinate layer draws from `U(−1/n, 1/n)`, later sine layers from
    /// `U(−√(6/n)/ω, √(6/n)/ω)`, sine biases from `U(−1/√n, 1/√n)`, and the
    /// output layer starts at zero so the model is the identity map.
    pub fn new(config: NetConfig, norm: Normalization) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let features = match config.encoder {
            Encoder::Periodic => Vec::new(),
            Encoder::Fourier => {
                let normal = Normal::new(0.0, config.fourier_sigma)
                    .map_err(|e| Error::InvalidConfig(format!("net.fourier_sigma: {e}")))?;
                (0..config.fourier_features)
                    .map(|_| std::array::from_fn(|_| normal.sample(&mut rng)))
                    .collect()
            }
        };

        let sizes = config.layer_sizes();
        let mut layers = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for (l, &(inputs, outputs)) in sizes.iter().enumerate() {
            layers.push(LayerShape {
                inputs,
                outputs,
                offset,
                sine: l + 1 < sizes.len(),
            });
            offset += inputs * outputs + outputs;
        }

        let mut params = vec![0.0; offset];
        for (l, layer) in layers.iter().enumerate() {
            if !layer.sine {
                continue;
            }
            let n = layer.inputs as f64;
            let bound = if l == 0 && config.encoder == Encoder::Periodic {
                1.0 / n
            } else {
                (6.0 / n).sqrt() / config.omega
            };
            for w in &mut params[layer.weight_range()] {
                *w = rng.gen_range(-bound..=bound);
            }
            let bias_bound = 1.0 / n.sqrt();
            for b in &mut params[layer.bias_range()] {
                *b = rng.gen_range(-bias_bound..=bias_bound);
            }
        }

        Ok(Self {
            config,
            norm,
            layers,
            params,
            features,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn features(&self) -> &[Vec3] {
        &self.features
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.params[self.layers[layer].weight_range()]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.params[self.layers[layer].bias_range()]
    }

    /// Width of the vector entering the first dense layer.
    pub(crate) fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    /// Encoder output and its derivatives with respect to the three
    /// normalized coordinates, written into `value` and `tangents[k]`.
    pub(crate) fn encode(&self, q: Vec3, value: &mut [f64], tangents: Option<[&mut [f64]; 3]>) {
        match self.config.encoder {
            Encoder::Periodic => {
                value[..3].copy_from_slice(&q);
                if let Some(t) = tangents {
                    for (k, row) in t.into_iter().enumerate() {
                        row[..3]
                            .iter_mut()
                            .enumerate()
                            .for_each(|(a, v)| *v = f64::from(u8::from(a == k)));
                    }
                }
            }
            Encoder::Fourier => {
                let f = self.features.len();
                let mut t = tangents;
                for (r, b) in self.features.iter().enumerate() {
                    let arg = TAU * (b[0] * q[0] + b[1] * q[1] + b[2] * q[2]);
                    let (s, c) = crate::trig::sin_cos(arg);
                    value[r] = s;
                    value[f + r] = c;
                    if let Some(t) = t.as_mut() {
                        for k in 0..3 {
                            t[k][r] = TAU * b[k] * c;
                            t[k][f + r] = -TAU * b[k] * s;
                        }
                    }
                }
            }
        }
    }

    /// Network output `u` at a normalized point, optionally with `∂u/∂q`
    /// (columns indexed by normalized input axis). Scalar reference path.
    fn evaluate(&self, q: Vec3, jacobian: bool) -> (Vec3, Mat3) {
        let omega = self.config.omega;
        let mut value = vec![0.0; self.input_width()];
        let mut tans: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; self.input_width()]);
        {
            let [t0, t1, t2] = &mut tans;
            let t = jacobian.then_some([t0.as_mut_slice(), t1.as_mut_slice(), t2.as_mut_slice()]);
            self.encode(q, &mut value, t);
        }
        for layer in &self.layers {
            let w = &self.params[layer.weight_range()];
            let b = &self.params[layer.bias_range()];
            let mut next = vec![0.0; layer.outputs];
            let mut next_t: [Vec<f64>; 3] =
                std::array::from_fn(|_| vec![0.0; if jacobian { layer.outputs } else { 0 }]);
            for o in 0..layer.outputs {
                let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                let z = b[o] + dot(row, &value);
                if layer.sine {
                    let (s, c) = crate::trig::sin_cos(omega * z);
                    next[o] = s;
                    if jacobian {
                        for k in 0..3 {
                            next_t[k][o] = omega * c * dot(row, &tans[k]);
                        }
                    }
                } else {
                    next[o] = z;
                    if jacobian {
                        for k in 0..3 {
                            next_t[k][o] = dot(row, &tans[k]);
                        }
                    }
                }
            }
            value = next;
            if jacobian {
                tans = next_t;
            }
        }
        let u = [value[0], value[1], value[2]];
        let du = if jacobian {
            Mat3::from_cols([
                [tans[0][0], tans[0][1], tans[0][2]],
                [tans[1][0], tans[1][1], tans[1][2]],
                [tans[2][0], tans[2][1], tans[2][2]],
            ])
        } else {
            Mat3::ZERO
        };
        (u, du)
    }

    /// `Φ(p)` in world mm.
    pub fn forward(&self, p: Vec3) -> Vec3 {
        let (u, _) = self.evaluate(self.norm.to_normalized(p), false);
        self.displace(p, u)
    }

    /// `(Φ(p), ∇Φ(p))` with the Jacobian in world coordinates, by forward-mode
    /// propagation of the three coordinate tangents through every layer.
    pub fn spatial_jacobian(&self, p: Vec3) -> (Vec3, Mat3) {
        let (u, du) = self.evaluate(self.norm.to_normalized(p), true);
        (self.displace(p, u), self.world_jacobian(&du))
    }

    #[inline]
    pub(crate) fn displace(&self, p: Vec3, u: Vec3) -> Vec3 {
        std::array::from_fn(|a| p[a] + self.norm.half_extent[a] * u[a])
    }

    /// `I + diag(h) · du · diag(h)⁻¹`.
    #[inline]
    pub(crate) fn world_jacobian(&self, du: &Mat3) -> Mat3 {
        let h = &self.norm.half_extent;
        let mut j = Mat3::IDENTITY;
        for i in 0..3 {
            for k in 0..3 {
                j[(i, k)] += h[i] * du[(i, k)] / h[k];
            }
        }
        j
    }

    /// Sets the output layer to small uniform random values so the model is
    /// no longer the identity. Used to build non-trivial test models.
    pub fn randomize_output_layer(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = *self.layers.last().expect("at least one layer");
        for v in &mut self.params[last.weight_range().start..last.bias_range().end] {
            *v = rng.gen_range(-scale..=scale);
        }
    }

    /// Writes the binary checkpoint (all fields little-endian):
    ///
    /// | bytes | content |
    /// |-------|---------|
    /// | 8 | magic `CIREGNET` |
    /// | 4 | u32 format version (1) |
    /// | 4 | u32 num_layers |
    /// | 4 | u32 hidden_units |
    /// | 8 | f64 omega |
    /// | 1 | u8 encoder (0 periodic, 1 fourier) |
    /// | 4 | u32 fourier_features |
    /// | 8 | f64 fourier_sigma |
    /// | 8 | u64 seed |
    /// | 24 | 3×f64 normalization center (mm) |
    /// | 24 | 3×f64 normalization half extent (mm) |
    /// | 8 | u64 F, rows of the Fourier matrix (0 for periodic) |
    /// | 24F | F×3 f64 Fourier matrix, row-major |
    /// | 8 | u64 P, parameter count |
    /// | 8P | f64 parameters: per layer, weights (out×in row-major) then biases |
    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(c.num_layers as u32).to_le_bytes())?;
        w.write_all(&(c.hidden_units as u32).to_le_bytes())?;
        w.write_all(&c.omega.to_le_bytes())?;
        w.write_all(&[match c.encoder {
            Encoder::Periodic => 0u8,
            Encoder::Fourier => 1u8,
        }])?;
        w.write_all(&(c.fourier_features as u32).to_le_bytes())?;
        w.write_all(&c.fourier_sigma.to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        for v in self.norm.center.iter().chain(self.norm.half_extent.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.features.len() as u64).to_le_bytes())?;
        for v in self.features.iter().flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * self.params.len());
        self.params
            .iter()
            .for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        w.write_all(&buf)
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut rd = CheckpointReader { r: &mut r };
        let mut magic = [0u8; 8];
        rd.bytes(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing CIREGNET magic".into()));
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let num_layers = rd.u32()? as usize;
        let hidden_units = rd.u32()? as usize;
        let omega = rd.f64()?;
        let encoder = match rd.u8()? {
            0 => Encoder::Periodic,
            1 => Encoder::Fourier,
            other => return Err(Error::Checkpoint(format!("unknown encoder tag {other}"))),
        };
        let fourier_features = rd.u32()? as usize;
        let fourier_sigma = rd.f64()?;
        let seed = rd.u64()?;
        let config = NetConfig {
            num_layers,
            hidden_units,
            omega,
            encoder,
            fourier_features,
            fourier_sigma,
            seed,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let center = [rd.f64()?, rd.f64()?, rd.f64()?];
        let half_extent = [rd.f64()?, rd.f64()?, rd.f64()?];
        let norm = Normalization {
            center,
            half_extent,
        };

        let mut model = DeformationModel::new(config, norm)?;
        let f = rd.u64()? as usize;
        let expected_f = if encoder == Encoder::Fourier {
            fourier_features
        } else {
            0
        };
        if f != expected_f {
            return Err(Error::Checkpoint(format!(
                "feature rows {f}, expected {expected_f}"
            )));
        }
        for row in model.features.iter_mut() {
            *row = [rd.f64()?, rd.f64()?, rd.f64()?];
        }
        let p = rd.u64()? as usize;
        if p != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {p} does not match architecture ({})",
                model.params.len()
            )));
        }
        let mut buf = vec![0u8; 8 * p];
        rd.bytes(&mut buf)?;
        for (v, chunk) in model.params.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            != 0
        {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CIREGNET";
const CHECKPOINT_VERSION: u32 = 1;

struct CheckpointReader<'a, R: Read> {
    r: &'a mut R,
}

impl<R: Read> CheckpointReader<'_, R> {
    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.r
            .read_exact(buf)
            .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))
    }
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.bytes(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Deformation for DeformationModel {
    fn map(&self, p: Vec3) -> Vec3 {
        self.forward(p)
    }

    fn map_with_jacobian(&self, p: Vec3) -> (Vec3, Mat3) {
        self.spatial_jacobian(p)
    }

    /// Blocked GEMM evaluation; agrees with [`DeformationModel::forward`] up
    /// to floating-point summation order.
    fn map_batch(&self, points: &[Vec3]) -> Vec<Vec3> {
        points
            .par_chunks(EVAL_CHUNK)
            .flat_map_iter(|chunk| {
                let tape = Tape::record(self, chunk, false);
                (0..chunk.len()).map(move |i| tape.phi(self, i))
            })
            .collect()
    }

    fn map_batch_with_jacobian(&self, points: &[Vec3]) -> Vec<(Vec3, Mat3)> {
        points
            .par_chunks(EVAL_CHUNK)
            .flat_map_iter(|chunk| {
                let tape = Tape::record(self, chunk, true);
                (0..chunk.len()).map(move |i| (tape.phi(self, i), tape.grad_phi(self, i)))
            })
            .collect()
    }
}
