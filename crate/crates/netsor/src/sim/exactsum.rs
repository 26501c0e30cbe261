//! Exact floating-point accumulation.
//!
//! Reductions in the simulator (matrix-vector rows, readout dot products,
//! Moment averages) use a fixed-point superaccumulator so that the result is
//! the correctly-rounded exact sum: independent of summation order, hence of
//! coordinate permutations and worker counts.

/// Base-2^32 limbs spanning the full f64 exponent range with headroom for
/// 2^31 addends per limb.
const LIMBS: usize = 70;
/// Bit offset of limb 0: the lowest set bit of any finite f64 is 2^-1074.
const BIAS: i64 = 1074;

#[derive(Clone)]
pub struct ExactAcc {
    limbs: [i64; LIMBS],
}

impl Default for ExactAcc {
    fn default() -> Self {
        Self::new()
    }
}

impl ExactAcc {
    pub fn new() -> Self {
        ExactAcc { limbs: [0; LIMBS] }
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        if x == 0.0 {
            return;
        }
        debug_assert!(x.is_finite());
        let bits = x.to_bits();
        let neg = (bits >> 63) != 0;
        let biased = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & 0xf_ffff_ffff_ffff;
        let (mantissa, exp2) = if biased == 0 {
            (frac, -1074_i64) // subnormal
        } else {
            (frac | (1 << 52), biased - 1075)
        };
        let pos = exp2 + BIAS; // bit position of the mantissa's LSB, >= 0
        let limb = (pos >> 5) as usize;
        let shift = (pos & 31) as u32;
        let wide = (mantissa as u128) << shift; // <= 84 bits
        let s = if neg { -1_i64 } else { 1 };
        self.limbs[limb] += s * ((wide & 0xffff_ffff) as i64);
        self.limbs[limb + 1] += s * (((wide >> 32) & 0xffff_ffff) as i64);
        self.limbs[limb + 2] += s * ((wide >> 64) as i64);
    }

    /// Merge another accumulator (exact).
    pub fn merge(&mut self, other: &ExactAcc) {
        for (a, b) in self.limbs.iter_mut().zip(&other.limbs) {
            *a += b;
        }
    }

    /// Round the exact sum to the nearest f64.
    pub fn finalize(&self) -> f64 {
        // canonicalize: limbs in [0, 2^32), then an overall sign
        let mut limbs = self.limbs;
        for k in 0..LIMBS - 1 {
            let carry = limbs[k] >> 32;
            limbs[k] -= carry << 32;
            limbs[k + 1] += carry;
        }
        let mut sign = 1.0;
        if limbs[LIMBS - 1] < 0 {
            sign = -1.0;
            for l in limbs.iter_mut() {
                *l = -*l;
            }
            for k in 0..LIMBS - 1 {
                let borrow = if limbs[k] < 0 { (-limbs[k] + 0xffff_ffff) >> 32 } else { 0 };
                limbs[k] += borrow << 32;
                limbs[k + 1] -= borrow;
            }
        }
        let top = match (0..LIMBS).rev().find(|&k| limbs[k] != 0) {
            Some(t) => t,
            None => return 0.0,
        };
        // assemble up to 96 bits from the top three limbs, with a sticky bit
        // from anything below
        let mut acc: u128 = 0;
        for k in (top.saturating_sub(2)..=top).rev() {
            acc = (acc << 32) | (limbs[k] as u128);
        }
        let low_exp = 32 * (top.saturating_sub(2) as i64) - BIAS;
        let sticky = (0..top.saturating_sub(2)).any(|k| limbs[k] != 0);
        if sticky {
            acc |= 1;
        }
        // acc * 2^low_exp, correctly rounded via the u128 -> f64 conversion
        // (sticky bit folded into the lowest position keeps ties honest)
        sign * libm::scalbn(acc as f64, low_exp as i32)
    }
}

/// Exact dot product of two slices. Four independent accumulators keep the
/// limb updates pipelined; merging them is exact, so the result is still the
/// correctly-rounded true sum.
pub fn exact_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [ExactAcc::new(), ExactAcc::new(), ExactAcc::new(), ExactAcc::new()];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0].add(a[i] * b[i]);
        acc[1].add(a[i + 1] * b[i + 1]);
        acc[2].add(a[i + 2] * b[i + 2]);
        acc[3].add(a[i + 3] * b[i + 3]);
    }
    for i in 4 * chunks..a.len() {
        acc[0].add(a[i] * b[i]);
    }
    let [mut a0, a1, a2, a3] = acc;
    a0.merge(&a1);
    a0.merge(&a2);
    a0.merge(&a3);
    a0.finalize()
}

/// Exact sum of a slice.
pub fn exact_sum(values: &[f64]) -> f64 {
    let mut acc = ExactAcc::new();
    for &v in values {
        acc.add(v);
    }
    acc.finalize()
}
