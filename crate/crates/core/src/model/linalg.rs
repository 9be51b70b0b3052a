//! Small dense kernels on row-major slices.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Element type the network runs in.
pub trait Scalar:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
    fn f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// `c ← α·a·b + β·c` on strided `m×k` and `k×n` operands.
    ///
    /// # Safety
    /// The strides must keep every access inside the slices' allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
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
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn raw_gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `c ← op(a)·op(b) + β·c` for row-major buffers, where `op` optionally
/// transposes. `a` is stored as `m×k` (or `k×m` when `ta`), `b` as `k×n`
/// (or `n×k` when `tb`), `c` as `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index the strides reach.
    unsafe {
        T::raw_gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1)
    }
}

/// A strided matrix window: element `(i, j)` is `data[off + i·rs + j·cs]`.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

fn span(off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        off + (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c ← a·b + β·c` on strided windows (`a: m×k`, `b: k×n`, `c: m×n`).
pub fn gemm_view<T: Scalar>(m: usize, k: usize, n: usize, a: View<T>, b: View<T>, beta: T, c: ViewMut<T>) {
    assert!(span(a.off, m, k, a.rs, a.cs) <= a.data.len(), "gemm: a out of bounds");
    assert!(span(b.off, k, n, b.rs, b.cs) <= b.data.len(), "gemm: b out of bounds");
    assert!(span(c.off, m, n, c.rs, c.cs) <= c.data.len(), "gemm: c out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the spans asserted above bound every index the strides reach.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `out = x · w + b` with `x: n×k`, `w: k×m`, `b: m`.
pub fn linear<T: Scalar>(x: &[T], n: usize, k: usize, w: &[T], b: Option<&[T]>, m: usize, out: &mut [T]) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    match b {
        Some(b) => {
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(b);
            }
        }
        None => out.fill(T::zero()),
    }
    gemm(n, k, m, x, false, w, false, T::one(), out);
}

/// Backward of [`linear`]: `dw += xᵀ·dy`, `db += Σ dy`, and, when asked,
/// `dx = dy · wᵀ` (overwritten).
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    n: usize,
    k: usize,
    w: &[T],
    m: usize,
    dy: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    gemm(k, n, m, x, true, dy, false, T::one(), dw);
    if let Some(db) = db {
        for row in dy.chunks_exact(m) {
            add_into(db, row);
        }
    }
    if let Some(dx) = dx {
        gemm(n, m, k, dy, false, w, true, T::zero(), dx);
    }
}

pub fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
