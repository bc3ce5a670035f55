//! A small dense-tensor network engine.
//!
//! Layers operate on whole batches laid out row-major with the batch as the
//! leading dimension. Gradients are computed by explicit per-layer backward
//! passes; [`gradcheck`] verifies them against central finite differences.
//!
//! Work is split over samples in fixed-size groups and reduced in group order,
//! so results do not depend on the number of worker threads.

mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod network;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{init_uniform_fan_in, BatchNorm, Conv2d, Layer, Linear, MaxPool2d, Param};
pub use loss::{contrastive_loss, pair_distances, ContrastiveOutput};
pub use network::{LayerSpec, Mode, Network, NetworkSpec, TwoStreamNet};
pub use optim::{plateau_reductions, Adam, PlateauScheduler};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the engine.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// Raw strided GEMM, `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `C (m×n) = op(A) · op(B) + beta · C` for row-major storage.
///
/// `op(A)` is `m×k`: A is stored `m×k`, or `k×m` when `trans_a`. Likewise `op(B)`
/// is `k×n`, stored `k×n` or `n×k` when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    beta: T,
) {
    assert_eq!(a.len(), m * k, "matmul: A has {} elements, expected {m}x{k}", a.len());
    assert_eq!(b.len(), k * n, "matmul: B has {} elements, expected {k}x{n}", b.len());
    assert_eq!(c.len(), m * n, "matmul: C has {} elements, expected {m}x{n}", c.len());
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Samples per work group. Fixed so that reductions do not depend on thread count.
pub(crate) const GROUP: usize = 8;
