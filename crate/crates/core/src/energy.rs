//! Conformal-invariant hyperelastic stored-energy density.
//!
//! For a deformation gradient `J` with `d = det J > 0`:
//!
//! ```text
//! W(J) = a1‖J‖⁹/d³ + a2‖Cof J‖⁶/d⁴ + a3(d − 1)² + a4/dᵅ − 3^(9/2)a1 − 27a2 − a4
//! ```
//!
//! The first two terms are unchanged by any similarity transform `cR` and
//! measure deviation from conformality; the last two penalize volume change
//! and collapse. The additive constants make `W(I) = 0`.
//!
//! Below `eps_det` the density continues as a C¹ linear extension in `d`, so
//! the value stays finite and the gradient keeps pushing the determinant back
//! up instead of returning `+∞`.

use crate::error::{Error, Result};
use crate::mat3::Mat3;
use serde::{Deserialize, Serialize};

/// 3^(9/2)
const SQRT3_POW9: f64 = 81.0 * 1.732_050_807_568_877_2;

/// Coefficients of the stored-energy density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub alpha: f64,
    pub eps_det: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            a1: 1.0,
            a2: 1.0,
            a3: 1.0,
            a4: 1.0,
            alpha: 2.0,
            eps_det: 1e-6,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.a1, self.a2, self.a3, self.a4];
        if positive.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "energy coefficients must be positive, got a1={} a2={} a3={} a4={}",
                self.a1, self.a2, self.a3, self.a4
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "energy.alpha must exceed 1, got {}",
                self.alpha
            )));
        }
        if !(self.eps_det > 0.0 && self.eps_det < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "energy.eps_det must lie in (0, 1), got {}",
                self.eps_det
            )));
        }
        Ok(())
    }

    /// The normalizing constant `3^(9/2)a1 + 27a2 + a4`.
    pub fn offset(&self) -> f64 {
        SQRT3_POW9 * self.a1 + 27.0 * self.a2 + self.a4
    }

    /// Pointwise lower bound of the density: every raw term is nonnegative,
    /// leaving only the normalizing constants.
    pub fn lower_bound(&self) -> f64 {
        -self.offset()
    }
}

/// One additive term of the density, each carrying its own normalizing
/// constant so that every term vanishes at the identity except `InverseVolume`'s
/// stationarity residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyTerm {
    /// `a1‖J‖⁹/d³ − 3^(9/2)a1`
    LengthDistortion,
    /// `a2‖Cof J‖⁶/d⁴ − 27a2`
    AreaDistortion,
    /// `a3(d − 1)²`
    Volume,
    /// `a4/dᵅ − a4`
    InverseVolume,
}

impl EnergyTerm {
    pub const ALL: [EnergyTerm; 4] = [
        EnergyTerm::LengthDistortion,
        EnergyTerm::AreaDistortion,
        EnergyTerm::Volume,
        EnergyTerm::InverseVolume,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnergyTerm::LengthDistortion => "length_distortion",
            EnergyTerm::AreaDistortion => "area_distortion",
            EnergyTerm::Volume => "volume",
            EnergyTerm::InverseVolume => "inverse_volume",
        }
    }
}

/// Selects the whole density or a single term of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TermSelection {
    #[default]
    All,
    Only(EnergyTerm),
}

impl TermSelection {
    fn includes(self, term: EnergyTerm) -> bool {
        match self {
            TermSelection::All => true,
            TermSelection::Only(t) => t == term,
        }
    }
}

/// Invariants of `J` shared by the value and the gradient.
struct Invariants {
    frob_sq: f64,
    cof: Mat3,
    /// `‖Cof J‖²`, the second principal invariant of `JᵀJ`.
    cof_sq: f64,
    det: f64,
}

impl Invariants {
    fn of(j: &Mat3) -> Self {
        let cof = j.cofactor();
        Self {
            frob_sq: j.frob_sq(),
            cof_sq: cof.frob_sq(),
            cof,
            det: j.det(),
        }
    }
}

/// `g(F, C, d)`: the density as a function of the frozen invariants with the
/// determinant supplied separately.
fn value_at(inv: &Invariants, d: f64, p: &EnergyParams, sel: TermSelection) -> f64 {
    let mut w = 0.0;
    if sel.includes(EnergyTerm::LengthDistortion) {
        w += p.a1 * inv.frob_sq.powi(4) * inv.frob_sq.sqrt() / (d * d * d) - SQRT3_POW9 * p.a1;
    }
    if sel.includes(EnergyTerm::AreaDistortion) {
        w += p.a2 * inv.cof_sq.powi(3) / d.powi(4) - 27.0 * p.a2;
    }
    if sel.includes(EnergyTerm::Volume) {
        w += p.a3 * (d - 1.0) * (d - 1.0);
    }
    if sel.includes(EnergyTerm::InverseVolume) {
        w += p.a4 * d.powf(-p.alpha) - p.a4;
    }
    w
}

/// `∂g/∂d` at fixed `F`, `C`.
fn d_value_dd(inv: &Invariants, d: f64, p: &EnergyParams, sel: TermSelection) -> f64 {
    let mut s = 0.0;
    if sel.includes(EnergyTerm::LengthDistortion) {
        s -= 3.0 * p.a1 * inv.frob_sq.powi(4) * inv.frob_sq.sqrt() / d.powi(4);
    }
    if sel.includes(EnergyTerm::AreaDistortion) {
        s -= 4.0 * p.a2 * inv.cof_sq.powi(3) / d.powi(5);
    }
    if sel.includes(EnergyTerm::Volume) {
        s += 2.0 * p.a3 * (d - 1.0);
    }
    if sel.includes(EnergyTerm::InverseVolume) {
        s -= p.alpha * p.a4 * d.powf(-p.alpha - 1.0);
    }
    s
}

/// Gradient of `g` with respect to `J` through `F` and `C` only, `d` held fixed.
fn grad_frozen_det(
    j: &Mat3,
    inv: &Invariants,
    d: f64,
    p: &EnergyParams,
    sel: TermSelection,
) -> Mat3 {
    let mut g = Mat3::ZERO;
    if sel.includes(EnergyTerm::LengthDistortion) {
        // ∂‖J‖⁹/∂J = 9‖J‖⁷ J
        let f7 = inv.frob_sq.powi(3) * inv.frob_sq.sqrt();
        g = g + j.scaled(9.0 * p.a1 * f7 / (d * d * d));
    }
    if sel.includes(EnergyTerm::AreaDistortion) {
        // ‖Cof J‖² = ½(tr(B)² − tr(B²)) with B = JᵀJ, so ∂/∂J = 2(tr(B)·J − J·B).
        let b = j.transpose() * *j;
        let d_cof_sq = (j.scaled(b.trace()) - *j * b).scaled(2.0);
        g = g + d_cof_sq.scaled(3.0 * p.a2 * inv.cof_sq * inv.cof_sq / d.powi(4));
    }
    g
}

/// Stored-energy density `W(J)` including the barrier extension.
pub fn density(j: &Mat3, params: &EnergyParams) -> f64 {
    density_selected(j, params, TermSelection::All)
}

/// Density restricted to a selection of terms. The barrier extension is
/// applied to whichever terms are selected.
pub fn density_selected(j: &Mat3, params: &EnergyParams, sel: TermSelection) -> f64 {
    let inv = Invariants::of(j);
    let eps = params.eps_det;
    if inv.det > eps {
        value_at(&inv, inv.det, params, sel)
    } else {
        let slope = d_value_dd(&inv, eps, params, sel).abs();
        value_at(&inv, eps, params, sel) + slope * (eps - inv.det)
    }
}

/// Exact `∂W/∂J`, continuous across `det J = eps_det`.
pub fn density_grad(j: &Mat3, params: &EnergyParams) -> Mat3 {
    density_value_and_grad(j, params, TermSelection::All).1
}

/// Value and gradient together; the training loop needs both.
pub fn density_value_and_grad(j: &Mat3, params: &EnergyParams, sel: TermSelection) -> (f64, Mat3) {
    let inv = Invariants::of(j);
    let eps = params.eps_det;
    if inv.det > eps {
        let d = inv.det;
        let value = value_at(&inv, d, params, sel);
        let grad = grad_frozen_det(j, &inv, d, params, sel)
            + inv.cof.scaled(d_value_dd(&inv, d, params, sel));
        (value, grad)
    } else {
        // E(J) = g(F, C, eps) + s(F, C)·(eps − d) with s = |∂g/∂d (eps)|.
        let dg_dd = d_value_dd(&inv, eps, params, sel);
        let sign = if dg_dd < 0.0 { -1.0 } else { 1.0 };
        let slope = dg_dd.abs();
        let value = value_at(&inv, eps, params, sel) + slope * (eps - inv.det);
        let frozen = grad_frozen_det(j, &inv, eps, params, sel);
        let slope_grad = slope_gradient(j, &inv, eps, params, sel).scaled(sign);
        let grad = frozen + slope_grad.scaled(eps - inv.det) - inv.cof.scaled(slope);
        (value, grad)
    }
}

/// `∂(∂g/∂d)/∂J` at fixed `d`; only the distortion terms depend on `F`, `C`.
fn slope_gradient(
    j: &Mat3,
    inv: &Invariants,
    d: f64,
    p: &EnergyParams,
    sel: TermSelection,
) -> Mat3 {
    let mut g = Mat3::ZERO;
    if sel.includes(EnergyTerm::LengthDistortion) {
        let f7 = inv.frob_sq.powi(3) * inv.frob_sq.sqrt();
        g = g - j.scaled(27.0 * p.a1 * f7 / d.powi(4));
    }
    if sel.includes(EnergyTerm::AreaDistortion) {
        let b = j.transpose() * *j;
        let d_cof_sq = (j.scaled(b.trace()) - *j * b).scaled(2.0);
        g = g - d_cof_sq.scaled(12.0 * p.a2 * inv.cof_sq * inv.cof_sq / d.powi(5));
    }
    g
}

/// The two conformal-invariant distortion ratios `‖J‖⁹/d³` and `‖Cof J‖⁶/d⁴`
/// without coefficients or constants.
pub fn distortion_ratios(j: &Mat3) -> (f64, f64) {
    let d = j.det();
    let f = j.frob();
    let c = j.cofactor().frob();
    (f.powi(9) / d.powi(3), c.powi(6) / d.powi(4))
}
