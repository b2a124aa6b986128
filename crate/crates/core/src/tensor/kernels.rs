//! Raw buffer kernels shared by the forward and backward passes.

/// Row-major operand view: `rows x cols` with the given strides.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` buffer, without copying.
    pub fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `out = a * b + beta * out`, with `out` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: View<'_>, b: View<'_>, out: &mut [f64], beta: f64) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.len(), a.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the views describe in-bounds strided regions of their slices and
    // `out` is an exclusively borrowed row-major m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Swaps two axes of a row-major buffer, returning the new buffer.
pub(crate) fn swap_axes(data: &[f64], shape: &[usize], d0: usize, d1: usize) -> Vec<f64> {
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let in_strides = strides(shape);
    // Stride in the input buffer for each output axis.
    let mut src_strides = in_strides.clone();
    src_strides.swap(d0, d1);
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    while out.len() < n {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&src_strides[..rank - 1])
            .map(|(i, s)| i * s)
            .sum();
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        // Advance the multi-index over all but the last axis.
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
