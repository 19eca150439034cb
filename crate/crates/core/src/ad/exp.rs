//! Branch-free `exp` for non-positive arguments, written so that loops over
//! slices auto-vectorise. Accurate to a few ulp on `[-708, 0]`; returns 0
//! below that.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const ROUND: f64 = 6_755_399_441_055_744.0;

#[inline(always)]
pub(crate) fn exp_nonpos(x: f64) -> f64 {
    let under = x < -708.0;
    let x = if under { -708.0 } else { x };
    let t = x * LOG2E + ROUND;
    let k = t - ROUND;
    let r = (x - k * LN2_HI) - k * LN2_LO;
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
    let bits = (t.to_bits() as i64).wrapping_add(1023) << 52;
    let y = p * f64::from_bits(bits as u64);
    if under {
        0.0
    } else {
        y
    }
}

/// `row[i] = exp(row[i] - shift)`, returning the sum.
#[inline]
pub(crate) fn exp_shifted_sum(row: &mut [f64], shift: f64) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut chunks = row.chunks_exact_mut(4);
    for c in &mut chunks {
        for (a, x) in acc.iter_mut().zip(c.iter_mut()) {
            *x = exp_nonpos(*x - shift);
            *a += *x;
        }
    }
    let mut s = acc[0] + acc[1] + acc[2] + acc[3];
    for x in chunks.into_remainder() {
        *x = exp_nonpos(*x - shift);
        s += *x;
    }
    s
}
