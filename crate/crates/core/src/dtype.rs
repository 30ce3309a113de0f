//! Scalar abstraction so every numeric path runs at f32 or f64.
//!
//! Training defaults to f32 for throughput on CPU; gradient verification runs
//! the identical code at f64. The trait carries the pieces that genuinely
//! differ per dtype: the BLAS-style matmul kernel, normal sampling, and the
//! little-endian byte layout used by checkpoints.

use crate::rng::SeedRng;
use ndarray::ScalarOperand;
use num_traits::{Float, NumAssign};
use rand::Rng;

/// Floating-point element type for model tensors.
pub trait Scalar:
    Float + NumAssign + ScalarOperand + Send + Sync + std::fmt::Debug + 'static
{
    /// Dtype tag stored in checkpoints ("f32" / "f64").
    const NAME: &'static str;
    /// Bytes per element.
    const BYTES: usize;

    /// `c = alpha * a@b + beta * c` over raw row/col strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// One standard-normal draw at this dtype.
    fn standard_normal(rng: &mut SeedRng) -> Self;

    fn from_f64(x: f64) -> Self;

    fn to_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn standard_normal(rng: &mut SeedRng) -> Self {
        rng.raw().sample::<f32, _>(rand_distr::StandardNormal)
    }

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
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn standard_normal(rng: &mut SeedRng) -> Self {
        rng.raw().sample::<f64, _>(rand_distr::StandardNormal)
    }

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
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Runtime dtype selector used by configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl Default for Dtype {
    fn default() -> Self {
        Dtype::F32
    }
}
