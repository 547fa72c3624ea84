//! Safe strided wrapper over `matrixmultiply::dgemm`.

/// Strided view of a dense matrix: element `(i, j)` lives at
/// `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub struct Strided<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `C = alpha · A B + beta · C` with `A: m×k`, `B: k×n`, `C: m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: Strided, b: Strided, beta: f64, c: &mut [f64], rsc: usize, csc: usize) {
    assert!(a.data.len() >= span(m, k, a.rs, a.cs), "A buffer too small");
    assert!(b.data.len() >= span(k, n, b.rs, b.cs), "B buffer too small");
    assert!(c.len() >= span(m, n, rsc, csc), "C buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above guarantee every index the kernel touches is
    // inside the respective slice; C does not alias A or B (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major view.
pub fn rm(data: &[f64], cols: usize) -> Strided<'_> {
    Strided { data, rs: cols, cs: 1 }
}

/// Transposed view of a row-major matrix with `cols` columns.
pub fn tr(data: &[f64], cols: usize) -> Strided<'_> {
    Strided { data, rs: 1, cs: cols }
}
