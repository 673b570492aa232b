//! Element arithmetic plugged into the shared kernels.
//!
//! The kernels are written once against [`Arith`]; [`FloatArith`] makes
//! them the float path and [`QuantArith`] the `uint8` path with `i32`
//! accumulators and requantization at STORE.

use std::marker::PhantomData;

use crate::layer::{MaxFloor, ReductionOp};
use crate::scalar::Scalar;

pub trait Arith: Sync {
    /// Stored activation / weight element.
    type Elem: Copy + Default + Send + Sync + 'static;
    /// Register accumulator.
    type Acc: Copy + Send + Sync;
    /// Per-channel affine coefficient.
    type Coef: Copy + Send + Sync + 'static;

    fn fma_seed(&self) -> Self::Acc;
    fn max_seed(&self, floor: MaxFloor) -> Self::Acc;
    /// LOAD of an existing output value into an accumulator.
    fn load(&self, e: Self::Elem) -> Self::Acc;
    fn mac(&self, acc: Self::Acc, x: Self::Elem, w: Self::Elem) -> Self::Acc;
    fn max(&self, acc: Self::Acc, x: Self::Elem) -> Self::Acc;
    fn store_fma(&self, acc: Self::Acc) -> Self::Elem;
    fn store_max(&self, acc: Self::Acc) -> Self::Elem;
    fn add(&self, a: Self::Elem, b: Self::Elem) -> Self::Elem;
    fn affine(&self, a: Self::Elem, scale: Self::Coef, shift: Self::Coef) -> Self::Elem;
    /// Value written to channel pad lanes.
    fn pad_lane(&self) -> Self::Elem {
        Self::Elem::default()
    }
    /// Value of spatial padding that leaves a reduction of `op` unchanged.
    fn spatial_fill(&self, op: ReductionOp) -> Self::Elem;
}

/// Plain IEEE arithmetic in `T`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FloatArith<T>(PhantomData<T>);

impl<T> FloatArith<T> {
    pub fn new() -> Self {
        FloatArith(PhantomData)
    }
}

impl<T: Scalar> Arith for FloatArith<T> {
    type Elem = T;
    type Acc = T;
    type Coef = T;

    #[inline(always)]
    fn fma_seed(&self) -> T {
        T::zero()
    }

    #[inline(always)]
    fn max_seed(&self, floor: MaxFloor) -> T {
        match floor {
            MaxFloor::NegInfinity => T::neg_infinity(),
            MaxFloor::Zero => T::zero(),
        }
    }

    #[inline(always)]
    fn load(&self, e: T) -> T {
        e
    }

    #[inline(always)]
    fn mac(&self, acc: T, x: T, w: T) -> T {
        acc + x * w
    }

    #[inline(always)]
    fn max(&self, acc: T, x: T) -> T {
        // NaN in the input propagates; `Float::max` would drop it.
        if x > acc || x.is_nan() {
            x
        } else {
            acc
        }
    }

    #[inline(always)]
    fn store_fma(&self, acc: T) -> T {
        acc
    }

    #[inline(always)]
    fn store_max(&self, acc: T) -> T {
        acc
    }

    #[inline(always)]
    fn add(&self, a: T, b: T) -> T {
        a + b
    }

    #[inline(always)]
    fn affine(&self, a: T, scale: T, shift: T) -> T {
        a * scale + shift
    }

    fn spatial_fill(&self, op: ReductionOp) -> T {
        match op {
            ReductionOp::Max(_) => T::neg_infinity(),
            _ => T::zero(),
        }
    }
}

/// Per-layer constants of the `uint8` path.
///
/// FMA: `acc = Σ (x - x_zero) * (w - w_zero)` in `i32`, then
/// `q = clamp(round(acc * mac_scale) + out_zero, 0, 255)` with
/// round-half-away-from-zero. Max works on raw bytes (quantization is
/// monotone) and the "zero" floor is `x_zero`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantArith {
    pub x_zero: i32,
    pub w_zero: i32,
    pub out_zero: i32,
    /// `in_scale * w_scale / out_scale`.
    pub mac_scale: f64,
    /// Add: `a_scale / out_scale`.
    pub a_scale: f64,
    pub b_zero: i32,
    /// Add: `b_scale / out_scale`.
    pub b_scale: f64,
}

impl QuantArith {
    #[inline(always)]
    pub fn requantize(&self, real: f64) -> u8 {
        (real.round() as i64 + self.out_zero as i64).clamp(0, 255) as u8
    }
}

impl Arith for QuantArith {
    type Elem = u8;
    type Acc = i32;
    type Coef = f64;

    #[inline(always)]
    fn fma_seed(&self) -> i32 {
        0
    }

    #[inline(always)]
    fn max_seed(&self, floor: MaxFloor) -> i32 {
        match floor {
            MaxFloor::NegInfinity => 0,
            MaxFloor::Zero => self.x_zero,
        }
    }

    #[inline(always)]
    fn load(&self, e: u8) -> i32 {
        e as i32
    }

    #[inline(always)]
    fn mac(&self, acc: i32, x: u8, w: u8) -> i32 {
        acc.wrapping_add((x as i32 - self.x_zero) * (w as i32 - self.w_zero))
    }

    #[inline(always)]
    fn max(&self, acc: i32, x: u8) -> i32 {
        acc.max(x as i32)
    }

    #[inline(always)]
    fn store_fma(&self, acc: i32) -> u8 {
        self.requantize(acc as f64 * self.mac_scale)
    }

    #[inline(always)]
    fn store_max(&self, acc: i32) -> u8 {
        acc as u8
    }

    #[inline(always)]
    fn add(&self, a: u8, b: u8) -> u8 {
        let real = (a as i32 - self.x_zero) as f64 * self.a_scale
            + (b as i32 - self.b_zero) as f64 * self.b_scale;
        self.requantize(real)
    }

    #[inline(always)]
    fn affine(&self, a: u8, scale: f64, shift: f64) -> u8 {
        self.requantize((a as i32 - self.x_zero) as f64 * scale + shift)
    }

    /// The input zero point encodes real zero; 0 is the smallest byte.
    fn spatial_fill(&self, op: ReductionOp) -> u8 {
        match op {
            ReductionOp::Max(_) => 0,
            _ => self.x_zero as u8,
        }
    }
}
