//! Thin safe wrappers over `matrixmultiply` plus a few shared loops.

/// Strided view of a matrix stored in a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols` view.
    pub fn rm(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// Transpose of a row-major matrix that has `cols` columns.
    pub fn rm_t(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, with `c` row-major of width `n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "output buffer too small");
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the views were bounds-checked above for the m×k, k×n and m×n
    // extents that dgemm reads and writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Visits `(dst_index, src_index)` pairs for broadcasting `src_shape` up to
/// `dst_shape` (numpy trailing alignment, size-1 dims repeat).
pub(crate) fn for_each_broadcast(
    src_shape: &[usize],
    dst_shape: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let nd = dst_shape.len();
    let offset = nd - src_shape.len();
    let mut src_strides = vec![0usize; nd];
    let mut stride = 1;
    for i in (0..src_shape.len()).rev() {
        if src_shape[i] != 1 {
            src_strides[i + offset] = stride;
        }
        stride *= src_shape[i];
    }
    let total: usize = dst_shape.iter().product();
    if total == 0 {
        return;
    }
    if nd == 0 {
        f(0, 0);
        return;
    }
    let last = dst_shape[nd - 1];
    let last_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut src_base = 0usize;
    let mut dst = 0usize;
    loop {
        for j in 0..last {
            f(dst + j, src_base + j * last_stride);
        }
        dst += last;
        if dst == total {
            break;
        }
        // advance the multi-index over the leading dims
        let mut d = nd - 1;
        loop {
            d -= 1;
            idx[d] += 1;
            src_base += src_strides[d];
            if idx[d] < dst_shape[d] {
                break;
            }
            src_base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}
