//! Strided matrix views over flat slices and a bounds-checked GEMM.

use super::scalar::Scalar;

#[derive(Clone, Copy)]
pub struct View<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

pub struct ViewMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

fn check_extent(len: usize, offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = offset + (rows - 1) * rs + (cols - 1) * cs;
    assert!(
        last < len,
        "matrix view out of bounds: last index {last}, buffer length {len}"
    );
}

impl<'a, T> View<'a, T> {
    /// Row-major `rows × cols` matrix occupying the whole slice prefix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a [T],
        offset: usize,
        rows: usize,
        cols: usize,
        rs: usize,
        cs: usize,
    ) -> Self {
        check_extent(data.len(), offset, rows, cols, rs, cs);
        View {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a mut [T],
        offset: usize,
        rows: usize,
        cols: usize,
        rs: usize,
        cs: usize,
    ) -> Self {
        check_extent(data.len(), offset, rows, cols, rs, cs);
        ViewMut {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }
}

/// `c = alpha · a · b + beta · c`. When `beta` is zero `c` is not read.
pub fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == T::zero() {
                    T::zero()
                } else {
                    beta * c.data[idx]
                };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked on construction and `c` is
    // exclusively borrowed, so the kernel never reads or writes out of range.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Row-major `[m × k] · [k × n]` product written into `out`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm(
        T::one(),
        View::new(a, m, k),
        View::new(b, k, n),
        T::zero(),
        ViewMut::new(out, m, n),
    );
}

/// `out += aᵀ · b` with `a: [m × k]`, `b: [m × n]`, `out: [k × n]`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm(
        T::one(),
        View::new(a, m, k).t(),
        View::new(b, m, n),
        T::one(),
        ViewMut::new(out, k, n),
    );
}

/// `out = a · bᵀ` with `a: [m × n]`, `b: [k × n]`, `out: [m × k]`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    gemm(
        T::one(),
        View::new(a, m, n),
        View::new(b, k, n).t(),
        T::zero(),
        ViewMut::new(out, m, k),
    );
}

/// `out += a · bᵀ`, same shapes as [`matmul_nt`].
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    gemm(
        T::one(),
        View::new(a, m, n),
        View::new(b, k, n).t(),
        T::one(),
        ViewMut::new(out, m, k),
    );
}

/// Single-row product `x · w` with a fixed summation order, independent of
/// how many rows a caller processes. Inference uses this so incremental and
/// batched decoding produce bitwise identical activations.
pub fn vec_mat<T: Scalar>(x: &[T], w: &[T], out: &mut [T]) {
    let k = x.len();
    let n = out.len();
    assert_eq!(w.len(), k * n, "vec_mat weight shape");
    out.iter_mut().for_each(|o| *o = T::zero());
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o = *o + xi * wij;
        }
    }
}
