//! Exact parameter gradients of the registration objective.
//!
//! Loss terms consume both `Φ(p)` and `∇Φ(p)`. The forward pass therefore
//! carries four channels per point through every layer: the activation and
//! its three derivatives with respect to the normalized coordinates
//! (`T_l = diag(ω cos(ω z_l)) · W_l · T_{l−1}`). All four channels are
//! recorded on a [`Tape`], and one reverse sweep over that record yields
//! `∂loss/∂θ`, including the mixed second derivatives that arise because the
//! tangent channels depend on the weights through `cos(ω z)`.
//!
//! For a sine layer with adjoints `ā` (activation) and `T̄_k` (tangents):
//!
//! ```text
//! z̄    = ā ⊙ ω cos(ωz) − ω² sin(ωz) ⊙ Σ_k T̄_k ⊙ Tz_k
//! T̄z_k = T̄_k ⊙ ω cos(ωz)
//! W̄   += z̄ ⊗ a_prev + Σ_k T̄z_k ⊗ T_prev,k,     b̄ += z̄
//! ```
//!
//! Points are processed in fixed-size chunks; per-chunk gradients are summed
//! with a fixed pairwise tree when determinism is requested, so results do
//! not depend on the number of worker threads.

use crate::energy::{density_selected, density_value_and_grad, EnergyTerm, TermSelection};
use crate::error::{Error, Result};
use crate::linalg::{matmul_nn, matmul_nt, matmul_tn_acc};
use crate::loss::{
    ncc_global, ncc_window, pairwise_sum, squared_correlation, window_offsets, LossConfig,
    LossTerms, NccMode,
};
use crate::mat3::Mat3;
use crate::net::{DeformationModel, LayerShape};
use crate::trig::sine_activation;
use crate::volume::Volume;
use crate::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Batch points per chunk for point-local losses.
const CHUNK: usize = 256;
/// Batch points per chunk in windowed mode (each expands to `n³` window points).
const WINDOW_CHUNK: usize = 8;

struct SineRecord {
    /// Activations then the three tangent blocks, `(channels · n) × outputs`.
    act: Vec<f64>,
    /// `ω cos(ω z)` for the value rows, `n × outputs`.
    cosw: Vec<f64>,
    /// Pre-activation tangents `W · T_prev`, `3n × outputs`; empty without tangents.
    tz: Vec<f64>,
}

/// Recorded forward pass over a block of points.
pub(crate) struct Tape {
    n: usize,
    channels: usize,
    points: Vec<Vec3>,
    input: Vec<f64>,
    records: Vec<SineRecord>,
    /// `u` and `∂u/∂q_k`, `(channels · n) × 3`.
    output: Vec<f64>,
}

impl Tape {
    pub(crate) fn record(model: &DeformationModel, points: &[Vec3], tangents: bool) -> Tape {
        let n = points.len();
        let channels = if tangents { 4 } else { 1 };
        let rows = channels * n;
        let width = model.input_width();
        let norm = model.normalization();
        let omega = model.config().omega;

        let mut input = vec![0.0; rows * width];
        {
            let (value, rest) = input.split_at_mut(n * width);
            let mut tangent_blocks: Vec<&mut [f64]> = if tangents {
                rest.chunks_mut(n * width).collect()
            } else {
                Vec::new()
            };
            for (i, &p) in points.iter().enumerate() {
                let q = norm.to_normalized(p);
                let v = &mut value[i * width..(i + 1) * width];
                if tangents {
                    let [t0, t1, t2] = &mut tangent_blocks[..] else {
                        unreachable!()
                    };
                    let t = [
                        &mut t0[i * width..(i + 1) * width],
                        &mut t1[i * width..(i + 1) * width],
                        &mut t2[i * width..(i + 1) * width],
                    ];
                    model.encode(q, v, Some(t));
                } else {
                    model.encode(q, v, None);
                }
            }
        }

        let mut records = Vec::with_capacity(model.layers().len());
        let mut output = Vec::new();
        for (l, layer) in model.layers().iter().enumerate() {
            let x: &[f64] = if l == 0 {
                &input
            } else {
                &records
                    .last()
                    .map(|r: &SineRecord| &r.act)
                    .expect("previous layer")[..]
            };
            let out = layer.outputs;
            let mut z = vec![0.0; rows * out];
            matmul_nt(x, rows, layer.inputs, model.weights(l), out, &mut z);
            let bias = model.bias(l);
            for row in z[..n * out].chunks_exact_mut(out) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
            if layer.sine {
                let mut cosw = vec![0.0; n * out];
                let tz = z[n * out..].to_vec();
                let (value, tangent) = z.split_at_mut(n * out);
                sine_activation(omega, value, &mut cosw);
                for block in tangent.chunks_exact_mut(n * out) {
                    block.iter_mut().zip(&cosw).for_each(|(t, c)| *t *= c);
                }
                records.push(SineRecord { act: z, cosw, tz });
            } else {
                output = z;
            }
        }

        Tape {
            n,
            channels,
            points: points.to_vec(),
            input,
            records,
            output,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.n
    }

    pub(crate) fn phi(&self, model: &DeformationModel, i: usize) -> Vec3 {
        let u = [
            self.output[3 * i],
            self.output[3 * i + 1],
            self.output[3 * i + 2],
        ];
        model.displace(self.points[i], u)
    }

    pub(crate) fn grad_phi(&self, model: &DeformationModel, i: usize) -> Mat3 {
        assert_eq!(self.channels, 4, "tape recorded without tangents");
        let mut du = Mat3::ZERO;
        for k in 0..3 {
            let row = 3 * ((k + 1) * self.n + i);
            for a in 0..3 {
                du[(a, k)] = self.output[row + a];
            }
        }
        model.world_jacobian(&du)
    }

    /// Reverse sweep. `phi_adj[i]` is `∂loss/∂Φ(p_i)`; `jac_adj[i]` is
    /// `∂loss/∂∇Φ(p_i)` and must be empty for a tape without tangents.
    pub(crate) fn backward(
        &self,
        model: &DeformationModel,
        phi_adj: &[Vec3],
        jac_adj: &[Mat3],
    ) -> Vec<f64> {
        let n = self.n;
        let rows = self.channels * n;
        let h = model.normalization().half_extent;
        let omega = model.config().omega;
        assert_eq!(phi_adj.len(), n);
        assert!(jac_adj.is_empty() || (self.channels == 4 && jac_adj.len() == n));

        let mut grads = vec![0.0; model.param_count()];
        let mut ybar = vec![0.0; rows * 3];
        for (i, g) in phi_adj.iter().enumerate() {
            for a in 0..3 {
                ybar[3 * i + a] = h[a] * g[a];
            }
        }
        if self.channels == 4 {
            for (i, g) in jac_adj.iter().enumerate() {
                for k in 0..3 {
                    let row = 3 * ((k + 1) * n + i);
                    for a in 0..3 {
                        ybar[row + a] = g[(a, k)] * h[a] / h[k];
                    }
                }
            }
        }

        let layers: &[LayerShape] = model.layers();
        for l in (0..layers.len()).rev() {
            let layer = layers[l];
            let out = layer.outputs;
            let zbar = if layer.sine {
                let rec = &self.records[l];
                let mut zbar = ybar;
                if self.channels == 4 {
                    let (value, tangent) = zbar.split_at_mut(n * out);
                    let w2 = omega * omega;
                    for idx in 0..n * out {
                        let mut mixed = 0.0;
                        for k in 0..3 {
                            mixed += tangent[k * n * out + idx] * rec.tz[k * n * out + idx];
                        }
                        value[idx] = value[idx] * rec.cosw[idx] - w2 * rec.act[idx] * mixed;
                    }
                    for block in tangent.chunks_exact_mut(n * out) {
                        block.iter_mut().zip(&rec.cosw).for_each(|(t, c)| *t *= c);
                    }
                } else {
                    zbar.iter_mut().zip(&rec.cosw).for_each(|(v, c)| *v *= c);
                }
                zbar
            } else {
                ybar
            };

            let x: &[f64] = if l == 0 {
                &self.input
            } else {
                &self.records[l - 1].act
            };
            matmul_tn_acc(
                &zbar,
                rows,
                out,
                x,
                layer.inputs,
                &mut grads[layer.weight_range()],
            );
            let bias = &mut grads[layer.bias_range()];
            for row in zbar[..n * out].chunks_exact(out) {
                bias.iter_mut().zip(row).for_each(|(b, z)| *b += z);
            }

            ybar = if l > 0 {
                let mut prev = vec![0.0; rows * layer.inputs];
                matmul_nn(&zbar, rows, out, model.weights(l), layer.inputs, &mut prev);
                prev
            } else {
                Vec::new()
            };
        }
        grads
    }
}

/// Gradient of a scalar loss with respect to every model parameter, in the
/// model's flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub values: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(model: &DeformationModel) -> Self {
        Self {
            values: vec![0.0; model.param_count()],
        }
    }

    pub fn layer(&self, model: &DeformationModel, l: usize) -> (&[f64], &[f64]) {
        let shape = model.layers()[l];
        (
            &self.values[shape.weight_range()],
            &self.values[shape.bias_range()],
        )
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    fn add_assign(&mut self, other: &ParamGrads) {
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += b);
    }

    /// Sum in a fixed pairwise tree over the given order.
    fn tree_sum(mut parts: Vec<ParamGrads>) -> Option<ParamGrads> {
        while parts.len() > 1 {
            let mut next = Vec::with_capacity(parts.len().div_ceil(2));
            let mut it = parts.into_iter();
            while let Some(mut a) = it.next() {
                if let Some(b) = it.next() {
                    a.add_assign(&b);
                }
                next.push(a);
            }
            parts = next;
        }
        parts.pop()
    }
}

/// Which part of the objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossComponent {
    /// `similarity + λ · regulariser`.
    Total,
    /// Similarity term alone.
    Similarity,
    /// Unweighted batch-mean density, optionally restricted to one term.
    Regulariser(TermSelection),
}

impl LossComponent {
    fn weights(self, cfg: &LossConfig) -> (f64, f64, TermSelection) {
        match self {
            LossComponent::Total => (1.0, cfg.lambda, TermSelection::All),
            LossComponent::Similarity => (1.0, 0.0, TermSelection::All),
            LossComponent::Regulariser(sel) => (0.0, 1.0, sel),
        }
    }

    pub fn name(self) -> String {
        match self {
            LossComponent::Total => "total".into(),
            LossComponent::Similarity => "similarity".into(),
            LossComponent::Regulariser(TermSelection::All) => "regulariser".into(),
            LossComponent::Regulariser(TermSelection::Only(t)) => {
                format!("regulariser.{}", t.name())
            }
        }
    }
}

/// One evaluation of a loss component and its gradient.
#[derive(Debug, Clone)]
pub struct GradientResult {
    /// Value of the differentiated component.
    pub value: f64,
    /// Similarity and (all-term) regulariser as far as they were computed.
    pub terms: LossTerms,
    pub grads: ParamGrads,
}

struct ChunkOut {
    sim_sum: f64,
    reg_sum: f64,
    grads: ParamGrads,
}

/// Objective value and exact parameter gradients on a batch of target points.
pub fn loss_gradients(
    model: &DeformationModel,
    source: &Volume,
    target: &Volume,
    batch: &[Vec3],
    cfg: &LossConfig,
    deterministic: bool,
) -> Result<(LossTerms, ParamGrads)> {
    let r = component_gradients(
        model,
        source,
        target,
        batch,
        cfg,
        LossComponent::Total,
        deterministic,
    )?;
    Ok((r.terms, r.grads))
}

pub fn component_gradients(
    model: &DeformationModel,
    source: &Volume,
    target: &Volume,
    batch: &[Vec3],
    cfg: &LossConfig,
    component: LossComponent,
    deterministic: bool,
) -> Result<GradientResult> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let (sim_w, reg_w, sel) = component.weights(cfg);
    let need_sim = sim_w != 0.0 || component == LossComponent::Total;
    let need_reg = reg_w != 0.0 || component == LossComponent::Total;
    let n = batch.len() as f64;

    let chunk_results: Vec<ChunkOut> = match cfg.ncc_mode {
        NccMode::Windowed => {
            let offsets = window_offsets(target, cfg.window_n);
            let run = |(c, chunk): (usize, &[Vec3])| -> Result<ChunkOut> {
                let base = c * WINDOW_CHUNK;
                let mut grads = ParamGrads::zeros(model);
                let mut sim_sum = 0.0;
                if need_sim {
                    let (s, g) = windowed_chunk(
                        model,
                        source,
                        target,
                        chunk,
                        &offsets,
                        cfg,
                        -sim_w / n,
                        base,
                    )?;
                    sim_sum = s;
                    grads.add_assign(&g);
                }
                let mut reg_sum = 0.0;
                if need_reg {
                    let tape = Tape::record(model, chunk, true);
                    let (r, phi_adj, jac_adj) =
                        regulariser_adjoints(model, &tape, cfg, sel, reg_w / n, base)?;
                    reg_sum = r;
                    grads.add_assign(&ParamGrads {
                        values: tape.backward(model, &phi_adj, &jac_adj),
                    });
                }
                Ok(ChunkOut {
                    sim_sum,
                    reg_sum,
                    grads,
                })
            };
            batch
                .par_chunks(WINDOW_CHUNK)
                .enumerate()
                .map(run)
                .collect::<Result<_>>()?
        }
        NccMode::BatchGlobal => {
            struct Forward {
                tape: Tape,
                s: Vec<f64>,
                t: Vec<f64>,
                ds: Vec<Vec3>,
                reg_sum: f64,
                jac_adj: Vec<Mat3>,
            }
            let forward = |(c, chunk): (usize, &[Vec3])| -> Result<Forward> {
                let base = c * CHUNK;
                let tape = Tape::record(model, chunk, need_reg);
                let mut s = Vec::with_capacity(chunk.len());
                let mut ds = Vec::with_capacity(chunk.len());
                let mut t = Vec::with_capacity(chunk.len());
                for (i, &p) in chunk.iter().enumerate() {
                    let (v, g) = source.sample_with_gradient(tape.phi(model, i));
                    if !v.is_finite() {
                        return Err(Error::non_finite(
                            "warped intensity",
                            format!("batch point {} {:?}", base + i, p),
                        ));
                    }
                    s.push(v);
                    ds.push(g);
                    t.push(target.sample(p));
                }
                let (reg_sum, jac_adj) = if need_reg {
                    let (r, _, j) = regulariser_adjoints(model, &tape, cfg, sel, reg_w / n, base)?;
                    (r, j)
                } else {
                    (0.0, Vec::new())
                };
                Ok(Forward {
                    tape,
                    s,
                    t,
                    ds,
                    reg_sum,
                    jac_adj,
                })
            };
            let fwd: Vec<Forward> = batch
                .par_chunks(CHUNK)
                .enumerate()
                .map(forward)
                .collect::<Result<_>>()?;

            let s_all: Vec<f64> = fwd.iter().flat_map(|f| f.s.iter().copied()).collect();
            let t_all: Vec<f64> = fwd.iter().flat_map(|f| f.t.iter().copied()).collect();
            let mut dcorr = vec![0.0; s_all.len()];
            let corr = squared_correlation(&s_all, &t_all, cfg.variance_eps, Some(&mut dcorr));
            if !corr.is_finite() {
                return Err(Error::non_finite("similarity", "batch-global correlation"));
            }

            let mut offsets = Vec::with_capacity(fwd.len());
            let mut acc = 0;
            for f in &fwd {
                offsets.push(acc);
                acc += f.tape.len();
            }
            let backward = |(f, &start): (&Forward, &usize)| -> ChunkOut {
                let phi_adj: Vec<Vec3> = (0..f.tape.len())
                    .map(|i| {
                        let w = if need_sim {
                            -sim_w * dcorr[start + i]
                        } else {
                            0.0
                        };
                        let g = f.ds[i];
                        [w * g[0], w * g[1], w * g[2]]
                    })
                    .collect();
                let grads = ParamGrads {
                    values: f.tape.backward(model, &phi_adj, &f.jac_adj),
                };
                ChunkOut {
                    sim_sum: 0.0,
                    reg_sum: f.reg_sum,
                    grads,
                }
            };
            let mut outs: Vec<ChunkOut> = fwd
                .par_iter()
                .zip(offsets.par_iter())
                .map(backward)
                .collect();
            // The global correlation enters once, not per point.
            if let Some(first) = outs.first_mut() {
                first.sim_sum = corr * n;
            }
            outs
        }
    };

    let sim_total = pairwise_sum(&chunk_results.iter().map(|c| c.sim_sum).collect::<Vec<_>>());
    let reg_total = pairwise_sum(&chunk_results.iter().map(|c| c.reg_sum).collect::<Vec<_>>());
    let grads = if deterministic {
        ParamGrads::tree_sum(chunk_results.into_iter().map(|c| c.grads).collect())
    } else {
        chunk_results
            .into_par_iter()
            .map(|c| c.grads)
            .reduce_with(|mut a, b| {
                a.add_assign(&b);
                a
            })
    }
    .unwrap_or_else(|| ParamGrads::zeros(model));

    let similarity = if need_sim { -sim_total / n } else { 0.0 };
    let regulariser = if need_reg { reg_total / n } else { 0.0 };
    let value = sim_w * similarity + reg_w * regulariser;
    let terms = LossTerms {
        similarity,
        regulariser: if sel == TermSelection::All {
            regulariser
        } else {
            f64::NAN
        },
        total: similarity + cfg.lambda * regulariser,
    };
    if !grads.is_finite() {
        return Err(Error::non_finite("parameter gradient", "batch reduction"));
    }
    Ok(GradientResult {
        value,
        terms,
        grads,
    })
}

/// Windowed similarity on a chunk of batch points: returns the summed squared
/// correlation and the gradient of `scale · Σ ncc`.
#[allow(clippy::too_many_arguments)]
fn windowed_chunk(
    model: &DeformationModel,
    source: &Volume,
    target: &Volume,
    chunk: &[Vec3],
    offsets: &[Vec3],
    cfg: &LossConfig,
    scale: f64,
    base: usize,
) -> Result<(f64, ParamGrads)> {
    let w = offsets.len();
    let pts: Vec<Vec3> = chunk
        .iter()
        .flat_map(|p| {
            offsets
                .iter()
                .map(move |o| [p[0] + o[0], p[1] + o[1], p[2] + o[2]])
        })
        .collect();
    let tape = Tape::record(model, &pts, false);
    let mut phi_adj = vec![[0.0; 3]; pts.len()];
    let mut s = vec![0.0; w];
    let mut t = vec![0.0; w];
    let mut ds = vec![[0.0; 3]; w];
    let mut dcorr = vec![0.0; w];
    let mut sum = 0.0;
    for (b, p) in chunk.iter().enumerate() {
        for j in 0..w {
            let idx = b * w + j;
            let (v, g) = source.sample_with_gradient(tape.phi(model, idx));
            s[j] = v;
            ds[j] = g;
            t[j] = target.sample(pts[idx]);
        }
        let corr = squared_correlation(&s, &t, cfg.variance_eps, Some(&mut dcorr));
        if !corr.is_finite() {
            return Err(Error::non_finite(
                "similarity",
                format!("batch point {} {:?}", base + b, p),
            ));
        }
        sum += corr;
        for j in 0..w {
            let k = scale * dcorr[j];
            phi_adj[b * w + j] = [k * ds[j][0], k * ds[j][1], k * ds[j][2]];
        }
    }
    let grads = ParamGrads {
        values: tape.backward(model, &phi_adj, &[]),
    };
    Ok((sum, grads))
}

/// Density values and adjoints for the points of a tangent tape. Returns the
/// sum of the all-term density (or the selected term) and `scale · ∂W/∂J`.
fn regulariser_adjoints(
    model: &DeformationModel,
    tape: &Tape,
    cfg: &LossConfig,
    sel: TermSelection,
    scale: f64,
    base: usize,
) -> Result<(f64, Vec<Vec3>, Vec<Mat3>)> {
    let mut sum = 0.0;
    let mut jac_adj = Vec::with_capacity(tape.len());
    let mut values = Vec::with_capacity(tape.len());
    for i in 0..tape.len() {
        let j = tape.grad_phi(model, i);
        let (w, g) = density_value_and_grad(&j, &cfg.energy, sel);
        if !w.is_finite() || !g.is_finite() {
            return Err(Error::non_finite(
                "regulariser",
                format!("batch point {} {:?}", base + i, tape.points[i]),
            ));
        }
        values.push(w);
        jac_adj.push(g.scaled(scale));
    }
    sum += pairwise_sum(&values);
    Ok((sum, vec![[0.0; 3]; tape.len()], jac_adj))
}

/// Value of one loss component computed through the scalar reference path
/// (per-point forward and forward-mode Jacobian), independent of the tape.
pub fn component_value(
    model: &DeformationModel,
    source: &Volume,
    target: &Volume,
    batch: &[Vec3],
    cfg: &LossConfig,
    component: LossComponent,
) -> f64 {
    let (sim_w, reg_w, sel) = component.weights(cfg);
    let n = batch.len() as f64;
    let mut value = 0.0;
    if sim_w != 0.0 {
        let sim = match cfg.ncc_mode {
            NccMode::Windowed => {
                -batch
                    .iter()
                    .map(|&p| ncc_window(source, target, &ScalarPath(model), p, cfg))
                    .sum::<f64>()
                    / n
            }
            NccMode::BatchGlobal => -ncc_global(source, target, &ScalarPath(model), batch, cfg),
        };
        value += sim_w * sim;
    }
    if reg_w != 0.0 {
        let reg = batch
            .iter()
            .map(|&p| density_selected(&model.spatial_jacobian(p).1, &cfg.energy, sel))
            .sum::<f64>()
            / n;
        value += reg_w * reg;
    }
    value
}

/// Forces the per-point evaluation path for every map call.
struct ScalarPath<'a>(&'a DeformationModel);

impl crate::net::Deformation for ScalarPath<'_> {
    fn map(&self, p: Vec3) -> Vec3 {
        self.0.forward(p)
    }
    fn map_with_jacobian(&self, p: Vec3) -> (Vec3, Mat3) {
        self.0.spatial_jacobian(p)
    }
    fn map_batch(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|&p| self.0.forward(p)).collect()
    }
}

/// Images, batch and loss settings for a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckProblem {
    pub source: Volume,
    pub target: Volume,
    pub batch: Vec<Vec3>,
    pub loss: LossConfig,
}

impl GradCheckProblem {
    /// Smooth textured image pair on the model's grid and a small batch whose
    /// warped samples all stay at least `1e-3` voxels away from trilinear cell
    /// faces and the grid boundary, where the interpolant is not differentiable.
    pub fn synthetic(
        model: &DeformationModel,
        geometry: crate::volume::Geometry,
        points: usize,
        loss: LossConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let textures = |rng: &mut ChaCha8Rng| -> Vec<(Vec3, f64)> {
            (0..5)
                .map(|_| {
                    (
                        [
                            rng.gen_range(-0.6..0.6),
                            rng.gen_range(-0.6..0.6),
                            rng.gen_range(-0.6..0.6),
                        ],
                        rng.gen_range(0.0..6.3),
                    )
                })
                .collect()
        };
        let (ws, wt) = (textures(&mut rng), textures(&mut rng));
        let field = |w: &Vec<(Vec3, f64)>, x: Vec3| -> f64 {
            w.iter()
                .map(|(k, ph)| (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph).sin())
                .sum()
        };
        let source = Volume::from_fn(geometry, |x| field(&ws, x));
        let target = Volume::from_fn(geometry, |x| 0.6 * field(&ws, x) + 0.4 * field(&wt, x));

        let offsets = match loss.ncc_mode {
            NccMode::Windowed => window_offsets(&target, loss.window_n),
            NccMode::BatchGlobal => vec![[0.0; 3]],
        };
        let margin = 1e-3;
        let reach = (loss.window_n / 2 + 2) as f64;
        let clear = |x: Vec3| -> bool {
            let c = geometry.world_to_index(x);
            (0..3).all(|a| {
                let hi = (geometry.dims[a] - 1) as f64;
                c[a] > margin && c[a] < hi - margin && (c[a] - c[a].round()).abs() > margin
            })
        };
        let mut batch = Vec::with_capacity(points);
        let mut attempts = 0;
        while batch.len() < points {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Shape(
                    "could not place gradient-check points away from cell faces".into(),
                ));
            }
            let idx: Vec3 = std::array::from_fn(|a| {
                rng.gen_range(reach..(geometry.dims[a] as f64 - 1.0 - reach))
            });
            let p = geometry.index_to_world(idx);
            let ok = offsets
                .iter()
                .all(|o| clear(model.forward([p[0] + o[0], p[1] + o[1], p[2] + o[2]])));
            if ok {
                batch.push(p);
            }
        }
        Ok(Self {
            source,
            target,
            batch,
            loss,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    /// Parameter index with the largest relative error.
    pub worst_param: Option<usize>,
    pub max_abs_gradient: f64,
    /// Analytic and finite-difference gradients were both identically zero.
    pub exact_zero: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub floor: f64,
    pub parameters: usize,
    pub components: Vec<ComponentCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.components
            .iter()
            .fold(0.0, |a, c| a.max(c.max_rel_error))
    }
}

/// Every component checked by [`check_gradients`]: the similarity and each
/// density term separately.
pub fn check_components() -> Vec<LossComponent> {
    std::iter::once(LossComponent::Similarity)
        .chain(
            EnergyTerm::ALL
                .iter()
                .map(|&t| LossComponent::Regulariser(TermSelection::Only(t))),
        )
        .collect()
}

/// Central-difference step for gradient checks.
pub const CHECK_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const CHECK_FLOOR: f64 = 1e-3;

/// Compares tape gradients against fourth-order central differences of the scalar
/// reference path over every parameter, per loss component.
pub fn check_gradients(
    model: &DeformationModel,
    problem: &GradCheckProblem,
    tolerance: f64,
) -> Result<GradCheckReport> {
    check_gradients_with(model, problem, tolerance, CHECK_STEP, |_, _| {})
}

/// [`check_gradients`] with a hook that may alter each analytic gradient
/// before comparison (fault injection in tests).
pub fn check_gradients_with(
    model: &DeformationModel,
    problem: &GradCheckProblem,
    tolerance: f64,
    step: f64,
    hook: impl Fn(LossComponent, &mut ParamGrads),
) -> Result<GradCheckReport> {
    let mut components = Vec::new();
    for component in check_components() {
        let mut analytic = component_gradients(
            model,
            &problem.source,
            &problem.target,
            &problem.batch,
            &problem.loss,
            component,
            true,
        )?
        .grads;
        hook(component, &mut analytic);

        let fd: Vec<f64> = (0..model.param_count())
            .into_par_iter()
            .map(|j| {
                let mut m = model.clone();
                let theta = m.params()[j];
                let mut at = |k: f64| {
                    m.params_mut()[j] = theta + k * step;
                    component_value(
                        &m,
                        &problem.source,
                        &problem.target,
                        &problem.batch,
                        &problem.loss,
                        component,
                    )
                };
                (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * step)
            })
            .collect();

        let scale = fd
            .iter()
            .chain(&analytic.values)
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let mut max_rel = 0.0;
        let mut worst = None;
        for (j, (&a, &f)) in analytic.values.iter().zip(&fd).enumerate() {
            let err = if a == f {
                0.0
            } else {
                (a - f).abs() / a.abs().max(f.abs()).max(CHECK_FLOOR)
            };
            if err > max_rel || (err.is_nan() && worst.is_none()) {
                max_rel = if err.is_nan() { f64::INFINITY } else { err };
                worst = Some(j);
            }
        }
        let exact_zero = analytic.values.iter().all(|&v| v == 0.0) && fd.iter().all(|&v| v == 0.0);
        components.push(ComponentCheck {
            component: component.name(),
            max_rel_error: max_rel,
            worst_param: worst,
            max_abs_gradient: scale,
            exact_zero,
            passed: max_rel <= tolerance,
        });
    }
    let passed = components.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        tolerance,
        step,
        floor: CHECK_FLOOR,
        parameters: model.param_count(),
        components,
        passed,
    })
}
