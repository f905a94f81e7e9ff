//! Bounds-checked strided GEMM.

use super::Element;

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `[rows, cols]`.
    pub fn row_major(cols: usize) -> Self {
        Self {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major `[rows, cols]` matrix.
    pub fn transposed(cols: usize) -> Self {
        Self {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = a · b + beta · c` where `a` is `[m, k]`, `b` is `[k, n]`, `c` is
/// row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
) {
    assert!(max_offset(m, k, la) < a.len().max(1));
    assert!(max_offset(k, n, lb) < b.len().max(1));
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access of `a` and `b`
    // inside their slices, and `c` is exactly `m * n` row-major elements.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_offset(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * l.rs as usize + (cols - 1) * l.cs as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, Layout::row_major(2), &b, Layout::row_major(2), 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // a^T b
        gemm(2, 2, 2, &a, Layout::transposed(2), &b, Layout::row_major(2), 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // accumulate a b^T
        let mut d = [1.0; 4];
        gemm(2, 2, 2, &a, Layout::row_major(2), &b, Layout::transposed(2), 1.0, &mut d);
        assert_eq!(d, [18.0, 24.0, 40.0, 54.0]);
    }
}
