use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Layout of a row-major matrix operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored as given: `rows x cols`.
    N,
    /// Stored transposed: the buffer holds a `cols x rows` matrix.
    T,
}

fn view(rows: usize, cols: usize, data: &[f32], layout: Layout) -> ArrayView2<'_, f32> {
    match layout {
        Layout::N => ArrayView2::from_shape((rows, cols), data).expect("gemm operand shape"),
        Layout::T => ArrayView2::from_shape((cols, rows), data)
            .expect("gemm operand shape")
            .reversed_axes(),
    }
}

/// `c = a · b + beta · c` with `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
) {
    let av = view(m, k, a, la);
    let bv = view(k, n, b, lb);
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm output shape");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}
