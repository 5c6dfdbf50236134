//! Evaluation: landmark TRE, Jacobian-determinant fields, and closed-form
//! synthetic deformations with known ground truth.
//!
//! TRE maps each target-space landmark through `Φ` into source space and
//! measures the distance to its source-space partner.

use crate::error::{Error, Result};
use crate::mat3::Mat3;
use crate::net::{Deformation, Normalization};
use crate::volume::{Geometry, Volume};
use crate::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;

/// Paired landmarks in voxel index coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub target: Vec<Vec3>,
    pub source: Vec<Vec3>,
    /// 0 or 1; DIRLab files count from 1.
    pub index_base: u8,
}

impl LandmarkSet {
    pub fn new(target: Vec<Vec3>, source: Vec<Vec3>, index_base: u8) -> Result<Self> {
        if target.len() != source.len() {
            return Err(Error::LandmarkMismatch {
                fixed: target.len(),
                moving: source.len(),
            });
        }
        if index_base > 1 {
            return Err(Error::InvalidConfig(format!(
                "index base must be 0 or 1, got {index_base}"
            )));
        }
        Ok(Self {
            target,
            source,
            index_base,
        })
    }

    pub fn count(&self) -> usize {
        self.target.len()
    }

    fn to_world(&self, g: &Geometry, idx: Vec3) -> Vec3 {
        let b = self.index_base as f64;
        g.index_to_world([idx[0] - b, idx[1] - b, idx[2] - b])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreReport {
    pub mean: f64,
    pub std: f64,
    pub per_landmark: Vec<f64>,
}

impl TreReport {
    fn from_errors(per_landmark: Vec<f64>) -> Self {
        let n = per_landmark.len().max(1) as f64;
        let mean = per_landmark.iter().sum::<f64>() / n;
        let var = per_landmark.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            per_landmark,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("landmark,tre_mm\n");
        for (i, e) in self.per_landmark.iter().enumerate() {
            let _ = writeln!(s, "{i},{e}");
        }
        s
    }
}

/// TRE in mm when target and source landmarks index the same grid.
pub fn tre(map: &impl Deformation, lm: &LandmarkSet, grid: &Geometry) -> Result<TreReport> {
    tre_between(map, lm, grid, grid)
}

/// TRE with target landmarks indexing `target_grid` and source landmarks
/// indexing `source_grid`.
pub fn tre_between(
    map: &impl Deformation,
    lm: &LandmarkSet,
    target_grid: &Geometry,
    source_grid: &Geometry,
) -> Result<TreReport> {
    if lm.target.len() != lm.source.len() {
        return Err(Error::LandmarkMismatch {
            fixed: lm.target.len(),
            moving: lm.source.len(),
        });
    }
    let targets: Vec<Vec3> = lm
        .target
        .iter()
        .map(|&p| lm.to_world(target_grid, p))
        .collect();
    let mapped = map.map_batch(&targets);
    let errors = mapped
        .iter()
        .zip(&lm.source)
        .map(|(m, &s)| {
            let s = lm.to_world(source_grid, s);
            ((m[0] - s[0]).powi(2) + (m[1] - s[1]).powi(2) + (m[2] - s[2]).powi(2)).sqrt()
        })
        .collect();
    Ok(TreReport::from_errors(errors))
}

/// `det ∇Φ` at every voxel center of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct JacDetField {
    pub geometry: Geometry,
    pub values: Vec<f64>,
    pub negative_fraction: f64,
    pub min_value: f64,
    pub max_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacDetSummary {
    pub voxels: usize,
    pub negative_fraction: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl JacDetField {
    pub fn new(geometry: Geometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "{} determinants for {} voxels",
                values.len(),
                geometry.len()
            )));
        }
        let folded = values.iter().filter(|&&v| v <= 0.0).count();
        let (min_value, max_value) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Ok(Self {
            geometry,
            negative_fraction: folded as f64 / values.len() as f64,
            values,
            min_value,
            max_value,
        })
    }

    pub fn summary(&self) -> JacDetSummary {
        JacDetSummary {
            voxels: self.values.len(),
            negative_fraction: self.negative_fraction,
            min: self.min_value,
            max: self.max_value,
            mean: self.values.iter().sum::<f64>() / self.values.len() as f64,
        }
    }

    /// Mean absolute difference to another field on the same grid.
    pub fn mean_abs_deviation(&self, other: &JacDetField) -> Result<f64> {
        if self.geometry != other.geometry {
            return Err(Error::Shape(
                "determinant fields live on different grids".into(),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.values.len() as f64)
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(self.geometry, self.values.clone()).expect("shape checked on construction")
    }
}

pub fn jacdet_grid(map: &impl Deformation, geometry: &Geometry) -> JacDetField {
    let values = map
        .map_batch_with_jacobian(&geometry.voxel_centers())
        .iter()
        .map(|(_, j)| j.det())
        .collect();
    JacDetField::new(*geometry, values).expect("one value per voxel")
}

/// Backward warp: the output at `p` is `vol(Φ(p))`, on `vol`'s grid.
pub fn warp_volume(vol: &Volume, map: &impl Deformation) -> Volume {
    warp_onto(vol, map, &vol.geometry)
}

/// Backward warp onto an arbitrary output grid.
pub fn warp_onto(vol: &Volume, map: &impl Deformation, grid: &Geometry) -> Volume {
    let mapped = map.map_batch(&grid.voxel_centers());
    Volume::new(*grid, mapped.iter().map(|&q| vol.sample(q)).collect())
        .expect("one value per voxel")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Translation,
    Scaling,
    Sinusoidal,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(SynthKind::Translation),
            "scaling" => Ok(SynthKind::Scaling),
            "sinusoidal" => Ok(SynthKind::Sinusoidal),
            other => Err(Error::InvalidConfig(format!(
                "unknown synthetic kind {other:?} (expected translation, scaling or sinusoidal)"
            ))),
        }
    }
}

/// Closed-form deformation with an exact Jacobian.
///
/// * translation: `Φ(x) = x + t`, `|t| = amplitude` mm along a seeded direction;
/// * scaling: `Φ(x) = c + s (x − c)` about the grid center with factor `s = amplitude`;
/// * sinusoidal: `u_i(x) = a sin(π q_{i+1} + φ_i)` with `q` the normalized
///   coordinate, `a = amplitude / √3` so that `|u| ≤ amplitude` mm, and seeded
///   phases `φ_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthDeformation {
    pub kind: SynthKind,
    pub amplitude: f64,
    norm: Normalization,
    translation: Vec3,
    phases: Vec3,
}

/// Largest sinusoidal amplitude (mm) on `g` for which the map stays a
/// diffeomorphism: each off-diagonal Jacobian entry must stay below 1.
pub fn sinusoidal_amplitude_bound(g: &Geometry) -> f64 {
    let h = Normalization::from_geometry(g).half_extent;
    let h_min = h.iter().cloned().fold(f64::INFINITY, f64::min);
    3f64.sqrt() * h_min / PI
}

pub fn synth_deform(
    kind: SynthKind,
    amplitude: f64,
    geometry: &Geometry,
    seed: u64,
) -> Result<SynthDeformation> {
    if !amplitude.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "amplitude must be finite, got {amplitude}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = Normalization::from_geometry(geometry);
    let mut translation = [0.0; 3];
    let mut phases = [0.0; 3];
    match kind {
        SynthKind::Translation => {
            let d: Vec3 = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
            translation = std::array::from_fn(|a| amplitude * d[a] / n);
        }
        SynthKind::Scaling => {
            if amplitude <= 0.0 {
                return Err(Error::AmplitudeTooLarge {
                    amplitude,
                    bound: 0.0,
                });
            }
        }
        SynthKind::Sinusoidal => {
            let bound = sinusoidal_amplitude_bound(geometry);
            if amplitude.abs() >= bound {
                return Err(Error::AmplitudeTooLarge { amplitude, bound });
            }
            phases = std::array::from_fn(|_| rng.gen_range(0.0..2.0 * PI));
        }
    }
    Ok(SynthDeformation {
        kind,
        amplitude,
        norm,
        translation,
        phases,
    })
}

impl SynthDeformation {
    pub fn translation(t: Vec3) -> Self {
        Self {
            kind: SynthKind::Translation,
            amplitude: (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt(),
            norm: Normalization::identity(),
            translation: t,
            phases: [0.0; 3],
        }
    }

    pub fn displacement(&self, p: Vec3) -> Vec3 {
        let q = self.map(p);
        [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
    }

    /// Displacement at every voxel center of `g`, x-fastest.
    pub fn dense_field(&self, g: &Geometry) -> Vec<Vec3> {
        g.voxel_centers()
            .into_iter()
            .map(|p| self.displacement(p))
            .collect()
    }
}

impl Deformation for SynthDeformation {
    fn map(&self, p: Vec3) -> Vec3 {
        self.map_with_jacobian(p).0
    }

    fn map_with_jacobian(&self, p: Vec3) -> (Vec3, Mat3) {
        match self.kind {
            SynthKind::Translation => (
                std::array::from_fn(|a| p[a] + self.translation[a]),
                Mat3::IDENTITY,
            ),
            SynthKind::Scaling => {
                let c = self.norm.center;
                let s = self.amplitude;
                (
                    std::array::from_fn(|a| c[a] + s * (p[a] - c[a])),
                    Mat3::diag([s; 3]),
                )
            }
            SynthKind::Sinusoidal => {
                let q = self.norm.to_normalized(p);
                let h = self.norm.half_extent;
                let a = self.amplitude / 3f64.sqrt();
                let mut out = p;
                let mut j = Mat3::IDENTITY;
                for i in 0..3 {
                    let k = (i + 1) % 3;
                    let (s, c) = (PI * q[k] + self.phases[i]).sin_cos();
                    out[i] += a * s;
                    j[(i, k)] += a * PI * c / h[k];
                }
                (out, j)
            }
        }
    }
}

/// Smooth random texture: a sum of isotropic Gaussian blobs.
#[derive(Debug, Clone)]
pub struct BlobTexture {
    blobs: Vec<(Vec3, f64, f64)>,
}

impl BlobTexture {
    /// `count` blobs with centers spread over `g` (plus a margin) and widths
    /// between `min_sigma` and `max_sigma` mm.
    pub fn new(g: &Geometry, count: usize, min_sigma: f64, max_sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = g.origin;
        let hi = g.index_to_world(std::array::from_fn(|a| (g.dims[a] - 1) as f64));
        let blobs = (0..count)
            .map(|_| {
                let c: Vec3 =
                    std::array::from_fn(|a| rng.gen_range(lo[a] - max_sigma..=hi[a] + max_sigma));
                let sigma = rng.gen_range(min_sigma..=max_sigma);
                let weight = rng.gen_range(0.5..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                (c, sigma, weight)
            })
            .collect();
        Self { blobs }
    }

    pub fn value(&self, x: Vec3) -> f64 {
        self.blobs
            .iter()
            .map(|(c, s, w)| {
                let r2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2);
                w * (-r2 / (2.0 * s * s)).exp()
            })
            .sum()
    }
}

/// A complete synthetic registration problem with known ground truth.
#[derive(Debug, Clone)]
pub struct SynthCase {
    pub source: Volume,
    /// `source ∘ Φ`, evaluated from the continuous texture; carries a full mask.
    pub target: Volume,
    pub deformation: SynthDeformation,
    /// Target voxels on a regular interior grid and their images under `Φ`
    /// (source voxel coordinates), 1-based.
    pub landmarks: LandmarkSet,
}

/// Landmarks per axis of the synthetic landmark grid.
pub const SYNTH_LANDMARKS_PER_AXIS: usize = 6;

pub fn synthetic_case(
    kind: SynthKind,
    amplitude: f64,
    geometry: &Geometry,
    seed: u64,
) -> Result<SynthCase> {
    let deformation = synth_deform(kind, amplitude, geometry, seed)?;
    let min_spacing = geometry
        .spacing
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let texture = BlobTexture::new(
        geometry,
        blob_count(geometry),
        2.0 * min_spacing,
        6.0 * min_spacing,
        seed ^ 0x5eed,
    );
    let raw_source = Volume::from_fn(*geometry, |x| texture.value(x));
    let raw_target = Volume::from_fn(*geometry, |x| texture.value(deformation.map(x)));
    // Shared affine rescale so that both images land in [0, 1] together.
    let (lo, hi) = raw_source.intensity_range();
    let scale = if hi > lo { 1.0 / (hi - lo) } else { 1.0 };
    let rescale = |v: Volume| {
        Volume::new(
            v.geometry,
            v.data.iter().map(|x| (x - lo) * scale).collect(),
        )
        .expect("same grid")
    };
    let source = rescale(raw_source);
    let target = rescale(raw_target).with_mask(vec![true; geometry.len()])?;

    let margin: Vec3 = std::array::from_fn(|a| {
        ((amplitude.abs() / geometry.spacing[a]).ceil() + 2.0)
            .min((geometry.dims[a] as f64 - 1.0) / 2.0)
    });
    let n = SYNTH_LANDMARKS_PER_AXIS;
    let mut fixed = Vec::with_capacity(n * n * n);
    let mut moving = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let idx: Vec3 = std::array::from_fn(|a| {
                    let t = [i, j, k][a] as f64 / (n - 1) as f64;
                    let top = geometry.dims[a] as f64 - 1.0 - margin[a];
                    margin[a] + t * (top - margin[a])
                });
                let mapped = geometry.world_to_index(deformation.map(geometry.index_to_world(idx)));
                fixed.push(idx.map(|v| v + 1.0));
                moving.push(mapped.map(|v| v + 1.0));
            }
        }
    }
    Ok(SynthCase {
        source,
        target,
        deformation,
        landmarks: LandmarkSet::new(fixed, moving, 1)?,
    })
}

fn blob_count(g: &Geometry) -> usize {
    // About one blob per (6 voxel)³ cube.
    (g.len() / 216).clamp(16, 4000)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{DeformationModel, IdentityMap, NetConfig};

    fn grid() -> Geometry {
        Geometry::new([16, 14, 12], [1.0, 1.5, 2.0], [-5.0, 3.0, 10.0]).unwrap()
    }

    #[test]
    fn identity_tre_on_identical_lists_is_zero() {
        let pts = vec![[1.0, 2.0, 3.0], [4.5, 5.0, 6.0]];
        let lm = LandmarkSet::new(pts.clone(), pts, 1).unwrap();
        let r = tre(&IdentityMap, &lm, &grid()).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.per_landmark, vec![0.0, 0.0]);
    }

    #[test]
    fn translation_tre_closed_form() {
        let g = grid();
        let t = [2.0, -3.0, 4.0];
        let map = SynthDeformation::translation(t);
        let target = vec![[3.0, 4.0, 5.0], [8.0, 2.0, 1.0]];
        // Source landmarks displaced by t in mm, expressed in voxels.
        let exact: Vec<Vec3> = target
            .iter()
            .map(|p| std::array::from_fn(|a| p[a] + t[a] / g.spacing[a]))
            .collect();
        let lm = LandmarkSet::new(target.clone(), exact, 1).unwrap();
        let r = tre(&map, &lm, &g).unwrap();
        assert!(r.per_landmark.iter().all(|e| e.abs() < 1e-12));

        let t2 = [1.0, -1.0, 2.0];
        let other: Vec<Vec3> = target
            .iter()
            .map(|p| std::array::from_fn(|a| p[a] + t2[a] / g.spacing[a]))
            .collect();
        let lm = LandmarkSet::new(target, other, 1).unwrap();
        let r = tre(&map, &lm, &g).unwrap();
        let expect =
            ((2.0f64 - 1.0).powi(2) + (-3.0f64 + 1.0).powi(2) + (4.0f64 - 2.0).powi(2)).sqrt();
        for e in r.per_landmark {
            assert!((e - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tre_is_invariant_to_joint_reordering() {
        let g = grid();
        let map = synth_deform(SynthKind::Sinusoidal, 3.0, &g, 2).unwrap();
        let target: Vec<Vec3> = (0..7)
            .map(|i| [2.0 + i as f64, 3.0, 4.0 + 0.5 * i as f64])
            .collect();
        let source: Vec<Vec3> = (0..7).map(|i| [1.0 + i as f64, 5.0, 2.0]).collect();
        let a = tre(
            &map,
            &LandmarkSet::new(target.clone(), source.clone(), 1).unwrap(),
            &g,
        )
        .unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let b = tre(
            &map,
            &LandmarkSet::new(
                perm.iter().map(|&i| target[i]).collect(),
                perm.iter().map(|&i| source[i]).collect(),
                1,
            )
            .unwrap(),
            &g,
        )
        .unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b.per_landmark[k], a.per_landmark[i]);
        }
    }

    #[test]
    fn mismatched_landmarks_rejected() {
        assert!(matches!(
            LandmarkSet::new(vec![[0.0; 3]], vec![], 1),
            Err(Error::LandmarkMismatch {
                fixed: 1,
                moving: 0
            })
        ));
    }

    #[test]
    fn index_base_is_honored() {
        let g = grid();
        let p = vec![[2.0, 2.0, 2.0]];
        let zero = LandmarkSet::new(p.clone(), vec![[3.0, 2.0, 2.0]], 0).unwrap();
        let one = LandmarkSet::new(p, vec![[3.0, 2.0, 2.0]], 1).unwrap();
        assert_eq!(tre(&IdentityMap, &zero, &g).unwrap().mean, 1.0);
        assert_eq!(tre(&IdentityMap, &one, &g).unwrap().mean, 1.0);
        assert_eq!(zero.to_world(&g, [0.0; 3]), one.to_world(&g, [1.0; 3]));
    }

    #[test]
    fn jacdet_of_identity_model_is_one() {
        let g = grid();
        let m = DeformationModel::new(
            NetConfig {
                hidden_units: 32,
                ..NetConfig::default()
            },
            Normalization::from_geometry(&g),
        )
        .unwrap();
        let f = jacdet_grid(&m, &g);
        assert!(f.values.iter().all(|&v| v == 1.0));
        assert_eq!(
            (f.negative_fraction, f.min_value, f.max_value),
            (0.0, 1.0, 1.0)
        );
    }

    #[test]
    fn scaling_determinant() {
        let g = grid();
        let c = 1.3;
        let map = synth_deform(SynthKind::Scaling, c, &g, 0).unwrap();
        let f = jacdet_grid(&map, &g);
        assert!(f.values.iter().all(|&v| (v - c * c * c).abs() < 1e-12));
        let unit = synth_deform(SynthKind::Scaling, 1.0, &g, 0).unwrap();
        assert!(unit
            .dense_field(&g)
            .iter()
            .all(|d| d.iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn translation_has_identity_jacobian() {
        let g = grid();
        let map = synth_deform(SynthKind::Translation, 4.0, &g, 9).unwrap();
        let t = map.displacement([0.0; 3]);
        assert!(((t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt() - 4.0).abs() < 1e-12);
        for p in g.voxel_centers().into_iter().step_by(37) {
            assert_eq!(map.map_with_jacobian(p).1, Mat3::IDENTITY);
        }
    }

    #[test]
    fn sinusoidal_is_orientation_preserving() {
        let g = grid();
        let bound = sinusoidal_amplitude_bound(&g);
        let map = synth_deform(SynthKind::Sinusoidal, 0.95 * bound, &g, 4).unwrap();
        let f = jacdet_grid(&map, &g);
        assert_eq!(f.negative_fraction, 0.0);
        assert!(f.min_value > 0.0);
        assert!(matches!(
            synth_deform(SynthKind::Sinusoidal, 1.01 * bound, &g, 4),
            Err(Error::AmplitudeTooLarge { .. })
        ));
        // Displacement magnitude never exceeds the amplitude.
        let amp = 0.5 * bound;
        let map = synth_deform(SynthKind::Sinusoidal, amp, &g, 4).unwrap();
        assert!(map
            .dense_field(&g)
            .iter()
            .all(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() <= amp + 1e-12));
    }

    #[test]
    fn sinusoidal_jacobian_matches_differences() {
        let g = grid();
        let map = synth_deform(SynthKind::Sinusoidal, 2.0, &g, 8).unwrap();
        let p = [1.3, 9.1, 20.4];
        let (_, j) = map.map_with_jacobian(p);
        let h = 1e-5;
        for k in 0..3 {
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            let (fa, fb) = (map.map(a), map.map(b));
            for i in 0..3 {
                assert!(((fa[i] - fb[i]) / (2.0 * h) - j[(i, k)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn warp_by_identity_is_exact() {
        let g = grid();
        let v = Volume::from_fn(g, |x| (0.3 * x[0]).sin() + x[1] * 0.01 - x[2]);
        assert_eq!(warp_volume(&v, &IdentityMap).data, v.data);
    }

    #[test]
    fn integer_translation_shifts_interior() {
        let g = grid();
        let v = Volume::from_fn(g, |x| (0.3 * x[0]).sin() + x[1] * 0.01 - 0.2 * x[2]);
        let shift = [2, 1, 3];
        let t: Vec3 = std::array::from_fn(|a| shift[a] as f64 * g.spacing[a]);
        let w = warp_volume(&v, &SynthDeformation::translation(t));
        for k in 0..g.dims[2] - shift[2] {
            for j in 0..g.dims[1] - shift[1] {
                for i in 0..g.dims[0] - shift[0] {
                    assert_eq!(
                        w.at([i, j, k]),
                        v.at([i + shift[0], j + shift[1], k + shift[2]])
                    );
                }
            }
        }
    }

    #[test]
    fn synthetic_case_is_consistent() {
        let g = Geometry::new([24, 24, 24], [1.0; 3], [0.0; 3]).unwrap();
        let case = synthetic_case(SynthKind::Sinusoidal, 4.0, &g, 3).unwrap();
        let lm = &case.landmarks;
        assert_eq!(lm.count(), SYNTH_LANDMARKS_PER_AXIS.pow(3));
        assert!(tre(&case.deformation, lm, &g).unwrap().mean < 1e-12);
        let init = tre(&IdentityMap, lm, &g).unwrap().mean;
        assert!(init > 1.0 && init <= 4.0);
        assert_eq!(case.target.masked_indices().unwrap().len(), g.len());
        let (lo, hi) = case.source.intensity_range();
        assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        // Target equals the source texture pulled back through Φ.
        for l in (0..g.len()).step_by(97) {
            let p = g.voxel_center(l);
            let q = case.deformation.map(p);
            let idx = g.world_to_index(q);
            if idx.iter().all(|&c| (c - c.round()).abs() < 1e-9) {
                assert!((case.target.data[l] - case.source.sample(q)).abs() < 1e-9);
            }
        }
        let src_again = warp_volume(&case.source, &case.deformation);
        let mean_err = src_again
            .data
            .iter()
            .zip(&case.target.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / g.len() as f64;
        assert!(mean_err < 0.02, "{mean_err}");
    }
}
