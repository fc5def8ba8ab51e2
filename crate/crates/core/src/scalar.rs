//! Scalar abstraction: every tensor is generic over an IEEE float type.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Element type tag, used by checkpoint serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Floating-point element of a [`crate::Tensor`].
///
/// `f64` is the verification mode (finite-difference checks, exactness
/// suites); `f32` is the training mode. Conversions through `f64` are used
/// for seeding and reporting; byte accessors give checkpoints a bit-exact
/// little-endian layout.
pub trait Scalar: Float + Debug + Display + Default + 'static {
    const DTYPE: DType;
    const BYTE_WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Write the little-endian bytes of `self` into `out` (exactly
    /// `BYTE_WIDTH` bytes).
    fn put_le(self, out: &mut [u8]);
    /// Read a value from `BYTE_WIDTH` little-endian bytes.
    fn get_le(src: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const BYTE_WIDTH: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn put_le(self, out: &mut [u8]) {
        out[..4].copy_from_slice(&self.to_le_bytes());
    }

    fn get_le(src: &[u8]) -> Self {
        f32::from_le_bytes([src[0], src[1], src[2], src[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const BYTE_WIDTH: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn put_le(self, out: &mut [u8]) {
        out[..8].copy_from_slice(&self.to_le_bytes());
    }

    fn get_le(src: &[u8]) -> Self {
        f64::from_le_bytes([
            src[0], src[1], src[2], src[3], src[4], src[5], src[6], src[7],
        ])
    }
}
