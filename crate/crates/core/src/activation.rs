//! Hyperbolic tangent built from IEEE arithmetic only.
//!
//! The network evaluates tanh hundreds of millions of times per training run, and
//! libm's `tanh` is both slow and allowed to differ between C libraries. This
//! version is a Cody–Waite reduced exponential plus an odd series near zero, so
//! results depend only on basic `+ - * /`, which Rust never contracts into FMA.

const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

/// `exp(x)` for `x` in `[0, 41]`; relative error below 2e-16.
#[inline(always)]
fn exp_reduced(x: f64) -> f64 {
    // Adding and removing 1.5 * 2^52 rounds to the nearest integer without a libm call,
    // and the low mantissa bits of the shifted value hold that integer.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let shifted = x * std::f64::consts::LOG2_E + SHIFT;
    let k = shifted - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor polynomial to degree 13 on |r| <= ln2/2.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let bits = shifted
        .to_bits()
        .wrapping_sub(SHIFT.to_bits())
        .wrapping_add(1023);
    p * f64::from_bits(bits << 52)
}

/// Branch-free so that slice loops vectorize. Past `|x| = 20` the exponential branch
/// rounds to exactly +-1; NaN propagates through it.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let ax = x.abs();
    let x2 = x * x;
    let mut p = 21_844.0 / 6_081_075.0;
    p = p * x2 - 1_382.0 / 155_925.0;
    p = p * x2 + 62.0 / 2_835.0;
    p = p * x2 - 17.0 / 315.0;
    p = p * x2 + 2.0 / 15.0;
    p = p * x2 - 1.0 / 3.0;
    let small = x + x * x2 * p;
    let y = 2.0 * ax;
    let y = if y > 40.0 { 40.0 } else { y };
    let e = exp_reduced(y);
    let large = (1.0 - 2.0 / (e + 1.0)).copysign(x);
    if ax < 0.125 {
        small
    } else {
        large
    }
}

#[inline(always)]
fn tanh_into_generic(src: &[f64], dst: &mut [f64]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o = tanh(x);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tanh_into_avx2(src: &[f64], dst: &mut [f64]) {
    tanh_into_generic(src, dst)
}

/// `dst[i] = tanh(src[i])`, bit-identical to [`tanh`]: only wider registers are used,
/// never fused multiply-adds.
pub fn tanh_into(src: &[f64], dst: &mut [f64]) {
    assert_eq!(src.len(), dst.len(), "tanh_into length mismatch");
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { tanh_into_avx2(src, dst) };
        return;
    }
    tanh_into_generic(src, dst)
}
