//! Floating-point abstraction so every numeric path runs in f32 (the
//! training/inference default) or f64 (the verification mode used by
//! gradient checks).

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Element type of all tensors. Implemented for `f32` and `f64` only.
pub trait Scalar: Float + Debug + Display + Default + Send + Sync + 'static {
    /// Width in bytes of the serialized representation.
    const BYTE_WIDTH: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Append the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);

    /// Decode from exactly `BYTE_WIDTH` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTE_WIDTH: u8 = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTE_WIDTH: u8 = 8;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}
