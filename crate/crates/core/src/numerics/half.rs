//! binary16 rounding used to emulate FP16 inference kernels.

use half::f16;

use super::tensor::{Precision, Tensor};

/// Largest finite binary16 magnitude.
pub const HALF_MAX: f64 = 65504.0;

/// Rounds one value to the nearest binary16 (ties to even), saturating at ±[`HALF_MAX`].
pub fn round_half(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let clamped = x.clamp(-HALF_MAX, HALF_MAX);
    f16::from_f64(clamped).to_f64()
}

pub(crate) fn round_half_slice(xs: &mut [f64]) {
    xs.iter_mut().for_each(|x| *x = round_half(*x));
}

/// Rounds every element to binary16 and marks the result `EmulatedHalf`.
pub fn quantize_half(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    round_half_slice(out.data_mut());
    out.with_precision(Precision::EmulatedHalf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Bit-level reference: round-to-nearest-even on the binary16 grid, computed
    /// from the exponent of the input without going through any float16 library.
    fn reference_round(x: f64) -> f64 {
        if x == 0.0 {
            return x;
        }
        let a = x.abs().min(HALF_MAX);
        // spacing of representable values around `a`
        let exp = a.log2().floor() as i32;
        let exp = exp.max(-14);
        let ulp = 2f64.powi(exp - 10);
        let q = a / ulp;
        let lo = q.floor();
        let frac = q - lo;
        let n = if frac > 0.5 || (frac == 0.5 && lo % 2.0 == 1.0) {
            lo + 1.0
        } else {
            lo
        };
        (n * ulp).min(HALF_MAX).copysign(x)
    }

    #[test]
    fn known_values() {
        assert_eq!(round_half(1.0), 1.0);
        assert_eq!(round_half(2049.0), 2048.0);
        assert_eq!(round_half(2051.0), 2052.0);
        assert_eq!(round_half(1e9), HALF_MAX);
        assert_eq!(round_half(-1e9), -HALF_MAX);
        assert_eq!(reference_round(2049.0), 2048.0);
    }

    #[test]
    fn quantize_marks_precision() {
        let t = Tensor::vector(vec![0.1, 2049.0]);
        let q = quantize_half(&t);
        assert_eq!(q.precision(), Precision::EmulatedHalf);
        assert_eq!(q.data()[1], 2048.0);
        assert_eq!(quantize_half(&q), q);
    }

    proptest! {
        #[test]
        fn matches_bit_level_reference(x in -70000.0f64..70000.0) {
            prop_assert_eq!(round_half(x), reference_round(x));
        }

        #[test]
        fn matches_reference_small(x in -1e-3f64..1e-3) {
            prop_assert_eq!(round_half(x), reference_round(x));
        }

        #[test]
        fn idempotent(x in -1e6f64..1e6) {
            prop_assert_eq!(round_half(round_half(x)), round_half(x));
        }

        #[test]
        fn monotone(a in -1e5f64..1e5, b in -1e5f64..1e5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(round_half(lo) <= round_half(hi));
        }
    }
}
