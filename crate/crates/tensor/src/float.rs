use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float as NumFloat, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

/// Element type of a tensor, fixed when the tensor is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types the engine can differentiate through.
pub trait Float:
    NumFloat
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Serial `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
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

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;

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

impl Float for f64 {
    const DTYPE: DType = DType::F64;

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

/// Rows of `c` handed to one worker. Fixed so the partition (and therefore
/// every rounding sequence) is independent of the thread count.
const GEMM_ROW_CHUNK: usize = 64;

/// `c (+)= op(a) · op(b)` for row-major `a` (`m×k`, or `k×m` when
/// `trans_a`), `b` (`k×n`, or `n×k` when `trans_b`) and `c` (`m×n`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: out buffer");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = F::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let b_ptr = b.as_ptr() as usize;
    let a_ptr = a.as_ptr() as usize;
    let run = |row0: usize, chunk: &mut [F]| {
        let rows = chunk.len() / n;
        // SAFETY: the row block [row0, row0 + rows) lies inside `a` and `c`
        // and the strides match the layouts asserted above.
        unsafe {
            let a_off = (a_ptr as *const F).offset(row0 as isize * rsa);
            F::gemm_raw(
                rows,
                k,
                n,
                F::one(),
                a_off,
                rsa,
                csa,
                b_ptr as *const F,
                rsb,
                csb,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * k * n < 1 << 18 || m <= GEMM_ROW_CHUNK {
        run(0, c);
    } else {
        c.par_chunks_mut(GEMM_ROW_CHUNK * n)
            .enumerate()
            .for_each(|(i, chunk)| run(i * GEMM_ROW_CHUNK, chunk));
    }
}
