//! Branch-light sine/cosine for the activation hot loop.
//!
//! Cody–Waite reduction by π/2 followed by the fdlibm minimax kernels on
//! `[−π/4, π/4]`; accurate to about one ulp for `|x| < 2^17`. Larger or
//! non-finite arguments use the standard library.

#![allow(clippy::excessive_precision)]

const INV_PIO2: f64 = std::f64::consts::FRAC_2_PI;
const PIO2_1: f64 = 1.570_796_326_734_125_614_17;
const PIO2_2: f64 = 6.077_100_506_506_192_249_32e-11;
const PIO2_3: f64 = 2.022_266_248_795_950_631_54e-21;
const LIMIT: f64 = 131_072.0;
const ROUNDER: f64 = 6_755_399_441_055_744.0;

const S1: f64 = -1.666_666_666_666_663_243_48e-1;
const S2: f64 = 8.333_333_333_322_489_461_24e-3;
const S3: f64 = -1.984_126_982_985_794_931_34e-4;
const S4: f64 = 2.755_731_370_707_006_767_89e-6;
const S5: f64 = -2.505_076_025_340_686_341_95e-8;
const S6: f64 = 1.589_690_995_211_550_102_21e-10;

const C1: f64 = 4.166_666_666_666_660_190_37e-2;
const C2: f64 = -1.388_888_888_887_410_957_49e-3;
const C3: f64 = 2.480_158_728_947_672_941_78e-5;
const C4: f64 = -2.755_731_435_139_066_330_35e-7;
const C5: f64 = 2.087_572_321_298_174_827_90e-9;
const C6: f64 = -1.135_964_755_778_819_482_65e-11;

#[inline(always)]
fn kernel(x: f64) -> (f64, f64) {
    // Adding 1.5·2^52 rounds to the nearest integer and leaves it in the low mantissa bits.
    let shifted = x * INV_PIO2 + ROUNDER;
    let q = shifted.to_bits() & 3;
    let k = shifted - ROUNDER;
    let r = ((x - k * PIO2_1) - k * PIO2_2) - k * PIO2_3;
    let z = r * r;

    let ps = S2 + z * (S3 + z * (S4 + z * (S5 + z * S6)));
    let s = r + r * z * (S1 + z * ps);

    let pc = z * (C1 + z * (C2 + z * (C3 + z * (C4 + z * (C5 + z * C6)))));
    let hz = 0.5 * z;
    let w = 1.0 - hz;
    let c = w + (((1.0 - w) - hz) + z * pc);

    let (sin, cos) = if q & 1 == 0 { (s, c) } else { (c, s) };
    let sin = if q & 2 == 0 { sin } else { -sin };
    let cos = if (q + 1) & 2 == 0 { cos } else { -cos };
    (sin, cos)
}

#[inline]
pub(crate) fn sin_cos(x: f64) -> (f64, f64) {
    if x.abs() < LIMIT {
        kernel(x)
    } else {
        x.sin_cos()
    }
}

/// In place: `v ← sin(ω v)` and `cosw ← ω cos(ω v)`.
pub(crate) fn sine_activation(omega: f64, v: &mut [f64], cosw: &mut [f64]) {
    assert_eq!(v.len(), cosw.len());
    if v.iter().all(|x| (omega * x).abs() < LIMIT) {
        for (x, c) in v.iter_mut().zip(cosw.iter_mut()) {
            let (s, co) = kernel(omega * *x);
            *x = s;
            *c = omega * co;
        }
    } else {
        for (x, c) in v.iter_mut().zip(cosw.iter_mut()) {
            let (s, co) = sin_cos(omega * *x);
            *x = s;
            *c = omega * co;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ulps(a: f64, b: f64) -> f64 {
        let scale = f64::EPSILON * b.abs().max(f64::MIN_POSITIVE);
        (a - b).abs() / scale
    }

    #[test]
    fn matches_std_within_two_ulps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for range in [1.0, 10.0, 1e3, 1e5] {
            for _ in 0..20_000 {
                let x: f64 = rng.gen_range(-range..range);
                let (s, c) = sin_cos(x);
                let (rs, rc) = x.sin_cos();
                // Absolute error near zeros of sin/cos is bounded by the reduction.
                assert!(
                    ulps(s, rs) <= 2.0 || (s - rs).abs() < 1e-16 * x.abs().max(1.0),
                    "sin {x}: {s} vs {rs}"
                );
                assert!(
                    ulps(c, rc) <= 2.0 || (c - rc).abs() < 1e-16 * x.abs().max(1.0),
                    "cos {x}: {c} vs {rc}"
                );
            }
        }
    }

    #[test]
    fn special_values() {
        assert_eq!(sin_cos(0.0), (0.0, 1.0));
        let (s, c) = sin_cos(std::f64::consts::FRAC_PI_2);
        assert!((s - 1.0).abs() < 1e-16 && c.abs() < 1e-16);
        let (s, c) = sin_cos(1e9);
        assert_eq!((s, c), 1e9f64.sin_cos());
        assert!(sin_cos(f64::NAN).0.is_nan());
    }

    #[test]
    fn activation_slices() {
        let mut v: Vec<f64> = (0..100).map(|i| 0.37 * i as f64 - 20.0).collect();
        let orig = v.clone();
        let mut c = vec![0.0; 100];
        sine_activation(32.0, &mut v, &mut c);
        for i in 0..100 {
            let (s, co) = (32.0 * orig[i]).sin_cos();
            assert!((v[i] - s).abs() < 1e-14 && (c[i] - 32.0 * co).abs() < 32.0 * 1e-14);
        }
    }
}
