//! Scalar 3D grids with physical geometry and trilinear sampling.
//!
//! Voxel `(i, j, k)` has its center at `origin + spacing ⊙ (i, j, k)` in mm.
//! Storage is x-fastest: the linear index is `i + dims[0] * (j + dims[1] * k)`.

use crate::error::{Error, Result};
use crate::Vec3;
use serde::{Deserialize, Serialize};

/// Grid geometry shared by volumes, masks and derived fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Shape(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Shape(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, [i, j, k]: [usize; 3]) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn voxel_index(&self, linear: usize) -> [usize; 3] {
        let i = linear % self.dims[0];
        let rest = linear / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// World position of a (possibly fractional) voxel index.
    #[inline]
    pub fn index_to_world(&self, idx: Vec3) -> Vec3 {
        std::array::from_fn(|a| self.origin[a] + self.spacing[a] * idx[a])
    }

    #[inline]
    pub fn world_to_index(&self, x: Vec3) -> Vec3 {
        std::array::from_fn(|a| (x[a] - self.origin[a]) / self.spacing[a])
    }

    pub fn voxel_center(&self, linear: usize) -> Vec3 {
        let v = self.voxel_index(linear);
        self.index_to_world([v[0] as f64, v[1] as f64, v[2] as f64])
    }

    /// All voxel centers in storage order.
    pub fn voxel_centers(&self) -> Vec<Vec3> {
        (0..self.len()).map(|l| self.voxel_center(l)).collect()
    }
}

/// A scalar image on a [`Geometry`], with an optional binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub geometry: Geometry,
    pub data: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

/// Cell lookup along one axis: lower node, fractional offset, and whether the
/// coordinate was clamped (the interpolant is flat there).
#[inline]
fn locate(c: f64, dim: usize) -> (usize, f64, bool) {
    if dim == 1 {
        return (0, 0.0, true);
    }
    let max = (dim - 1) as f64;
    let clamped = c < 0.0 || c > max;
    let mut c = c.clamp(0.0, max);
    // Round-off from the world-to-index transform must not move grid points.
    if (c - c.round()).abs() < 1e-9 {
        c = c.round();
    }
    let i0 = (c.floor() as usize).min(dim - 2);
    (i0, c - i0 as f64, clamped)
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "data has {} values but geometry {:?} needs {}",
                data.len(),
                geometry.dims,
                geometry.len()
            )));
        }
        Ok(Self {
            geometry,
            data,
            mask: None,
        })
    }

    pub fn from_fn(geometry: Geometry, f: impl Fn(Vec3) -> f64) -> Self {
        let data = (0..geometry.len())
            .map(|l| f(geometry.voxel_center(l)))
            .collect();
        Self {
            geometry,
            data,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "mask has {} voxels but volume has {}",
                mask.len(),
                self.data.len()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    #[inline]
    pub fn at(&self, idx: [usize; 3]) -> f64 {
        self.data[self.geometry.linear_index(idx)]
    }

    /// Trilinear interpolation at a world position; out-of-bounds positions
    /// clamp to the boundary.
    pub fn sample(&self, x: Vec3) -> f64 {
        let g = &self.geometry;
        let c = g.world_to_index(x);
        let (i, fx, _) = locate(c[0], g.dims[0]);
        let (j, fy, _) = locate(c[1], g.dims[1]);
        let (k, fz, _) = locate(c[2], g.dims[2]);
        let (sx, sy, sz) = self.strides();
        let base = i + g.dims[0] * (j + g.dims[1] * k);
        let d = &self.data;
        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        let c00 = lerp(d[base], d[base + sx], fx);
        let c10 = lerp(d[base + sy], d[base + sy + sx], fx);
        let c01 = lerp(d[base + sz], d[base + sz + sx], fx);
        let c11 = lerp(d[base + sz + sy], d[base + sz + sy + sx], fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    /// Value and analytic gradient (intensity per mm) of the trilinear
    /// interpolant. Axes on which `x` lies outside the grid have zero gradient,
    /// matching the clamped value.
    pub fn sample_with_gradient(&self, x: Vec3) -> (f64, Vec3) {
        let g = &self.geometry;
        let c = g.world_to_index(x);
        let (i, fx, cx) = locate(c[0], g.dims[0]);
        let (j, fy, cy) = locate(c[1], g.dims[1]);
        let (k, fz, cz) = locate(c[2], g.dims[2]);
        let (sx, sy, sz) = self.strides();
        let base = i + g.dims[0] * (j + g.dims[1] * k);
        let d = &self.data;
        let v000 = d[base];
        let v100 = d[base + sx];
        let v010 = d[base + sy];
        let v110 = d[base + sy + sx];
        let v001 = d[base + sz];
        let v101 = d[base + sz + sx];
        let v011 = d[base + sz + sy];
        let v111 = d[base + sz + sy + sx];

        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        let c00 = lerp(v000, v100, fx);
        let c10 = lerp(v010, v110, fx);
        let c01 = lerp(v001, v101, fx);
        let c11 = lerp(v011, v111, fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        let value = lerp(c0, c1, fz);

        let dx0 = (v100 - v000) + ((v110 - v010) - (v100 - v000)) * fy;
        let dx1 = (v101 - v001) + ((v111 - v011) - (v101 - v001)) * fy;
        let dx = dx0 + (dx1 - dx0) * fz;
        let dy = (c10 - c00) + ((c11 - c01) - (c10 - c00)) * fz;
        let dz = c1 - c0;

        let grad = [
            if cx { 0.0 } else { dx / g.spacing[0] },
            if cy { 0.0 } else { dy / g.spacing[1] },
            if cz { 0.0 } else { dz / g.spacing[2] },
        ];
        (value, grad)
    }

    pub fn sample_gradient(&self, x: Vec3) -> Vec3 {
        self.sample_with_gradient(x).1
    }

    /// Neighbor strides, zero along singleton axes so the 8-corner stencil
    /// stays in bounds.
    fn strides(&self) -> (usize, usize, usize) {
        let [nx, ny, nz] = self.geometry.dims;
        (
            usize::from(nx > 1),
            if ny > 1 { nx } else { 0 },
            if nz > 1 { nx * ny } else { 0 },
        )
    }

    /// Voxel indices inside the mask, in storage (lexicographic, x-fastest) order.
    pub fn masked_indices(&self) -> Result<Vec<[usize; 3]>> {
        let mask = self.mask.as_ref().ok_or(Error::MissingMask)?;
        Ok(mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(l, _)| self.geometry.voxel_index(l))
            .collect())
    }

    /// Minimum and maximum over the mask interior (whole volume without a mask).
    pub fn intensity_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (l, &v) in self.data.iter().enumerate() {
            if self.mask.as_ref().is_none_or(|m| m[l]) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }

    /// Copy linearly rescaled so the mask interior spans `[0, 1]`. A constant
    /// interior maps to 0.
    pub fn normalized(&self) -> Volume {
        let (lo, hi) = self.intensity_range();
        let span = hi - lo;
        let data = if span > 0.0 && span.is_finite() {
            self.data.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume {
            geometry: self.geometry,
            data,
            mask: self.mask.clone(),
        }
    }
}
