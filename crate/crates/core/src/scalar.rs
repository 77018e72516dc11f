//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Storage tag used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// Real scalar the networks, losses and metrics are generic over.
///
/// Implemented for `f32` (training and inference) and `f64` (gradient
/// verification and reference computations).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a·b + beta * c` for row-major `a` (m×k), `b` (k×n), `c` (m×n)
    /// with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from `f64`; constants in generic code go through here.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

fn max_offset(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative gemm strides");
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize
}

macro_rules! impl_scalar {
    ($t:ty, $tag:expr, $kernel:path, $bytes:expr) => {
        impl Scalar for $t {
            const DTYPE: DType = $tag;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k > 0 {
                    assert!(max_offset(m, k, a_strides) < a.len(), "gemm: lhs out of bounds");
                    assert!(max_offset(k, n, b_strides) < b.len(), "gemm: rhs out of bounds");
                }
                assert!(max_offset(m, n, c_strides) < c.len(), "gemm: output out of bounds");
                // SAFETY: every element addressed through the strides was bounds-checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm, 4);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm, 8);

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}
