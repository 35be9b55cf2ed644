//! Typed element access over word-addressed memory.

use crate::dtype::DType;
use crate::memory::Memory;

/// An element type kernels can load from and store into a [`Memory`].
pub trait Element: Copy + PartialEq + Send + Sync + 'static {
    const DTYPE: DType;
    fn load(mem: &Memory, idx: usize) -> Self;
    fn store(mem: &Memory, idx: usize, v: Self);
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn load(mem: &Memory, idx: usize) -> Self {
        mem.read_f32(idx)
    }

    #[inline]
    fn store(mem: &Memory, idx: usize, v: Self) {
        mem.write_f32(idx, v)
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn load(mem: &Memory, idx: usize) -> Self {
        mem.read_f64(idx)
    }

    #[inline]
    fn store(mem: &Memory, idx: usize, v: Self) {
        mem.write_f64(idx, v)
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Element for i64 {
    const DTYPE: DType = DType::I64;

    #[inline]
    fn load(mem: &Memory, idx: usize) -> Self {
        mem.read_i64(idx)
    }

    #[inline]
    fn store(mem: &Memory, idx: usize, v: Self) {
        mem.write_i64(idx, v)
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(v: f64) -> Self {
        v as i64
    }
}

impl Element for bool {
    const DTYPE: DType = DType::Bool;

    #[inline]
    fn load(mem: &Memory, idx: usize) -> Self {
        mem.read_bool(idx)
    }

    #[inline]
    fn store(mem: &Memory, idx: usize, v: Self) {
        mem.write_bool(idx, v)
    }

    fn to_f64(self) -> f64 {
        if self {
            1.0
        } else {
            0.0
        }
    }

    fn from_f64(v: f64) -> Self {
        v != 0.0
    }
}

/// Float element with the transcendental ops the kernels need.
pub trait FloatElement:
    Element
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + PartialOrd
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
}

impl FloatElement for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    const NEG_INFINITY: f32 = f32::NEG_INFINITY;

    fn exp(self) -> Self {
        f32::exp(self)
    }

    fn ln(self) -> Self {
        f32::ln(self)
    }

    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }

    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl FloatElement for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    const NEG_INFINITY: f64 = f64::NEG_INFINITY;

    fn exp(self) -> Self {
        f64::exp(self)
    }

    fn ln(self) -> Self {
        f64::ln(self)
    }

    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }

    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}
