//! Floating-point element types for tensors.
//!
//! Training defaults to `f32`; verification suites run at `f64`. All
//! numeric kernels are generic over [`Scalar`] so both precisions share
//! one implementation.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

/// Element dtype tag, also used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    /// Tag byte written to checkpoint files.
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element of a tensor: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float + AddAssign + Sum + Send + Sync + Debug + Display + 'static
{
    const DTYPE: Dtype;

    fn fromf(v: f64) -> Self;
    fn tof(self) -> f64;

    /// Raw little-endian bytes of one element.
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn fromf(v: f64) -> Self {
        v as f32
    }
    fn tof(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn fromf(v: f64) -> Self {
        v
    }
    fn tof(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}
