// SPDX-License-Identifier: Apache-2.0

//! Dense helpers: small least squares and the GEMM wrapper used by the layers.

/// Solves `min ||A x - b||` for a tall `rows x cols` row-major `A` by
/// Householder QR. Returns `None` when `A` is numerically rank deficient.
pub fn least_squares(a: &[f64], rows: usize, cols: usize, b: &[f64]) -> Option<Vec<f64>> {
    assert_eq!(a.len(), rows * cols);
    assert_eq!(b.len(), rows);
    if rows < cols {
        return None;
    }
    let mut r = a.to_vec();
    let mut y = b.to_vec();
    let col_norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| r[i * cols + j].powi(2)).sum::<f64>().sqrt())
        .collect();
    for k in 0..cols {
        let norm = (k..rows).map(|i| r[i * cols + k].powi(2)).sum::<f64>().sqrt();
        if norm <= 1e-10 * col_norms[k].max(f64::MIN_POSITIVE) {
            return None;
        }
        let alpha = if r[k * cols + k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..rows).map(|i| r[i * cols + k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..cols {
            let dot: f64 = (k..rows).map(|i| v[i - k] * r[i * cols + j]).sum();
            let s = 2.0 * dot / vnorm2;
            for i in k..rows {
                r[i * cols + j] -= s * v[i - k];
            }
        }
        let dot: f64 = (k..rows).map(|i| v[i - k] * y[i]).sum();
        let s = 2.0 * dot / vnorm2;
        for i in k..rows {
            y[i] -= s * v[i - k];
        }
    }
    let mut x = vec![0.0; cols];
    for k in (0..cols).rev() {
        let mut acc = y[k];
        for j in k + 1..cols {
            acc -= r[k * cols + j] * x[j];
        }
        x[k] = acc / r[k * cols + k];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k, "gemm: a too short");
    assert!(b.len() >= k * n, "gemm: b too short");
    assert!(c.len() >= m * n, "gemm: c too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Strided `c = alpha * a * b + beta * c` with `a` `m x k`, `b` `k x n`; each
/// operand is given by its slice and (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    beta: f64,
    (c, rsc, csc): (&mut [f64], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cols: usize, rs: usize, cs: usize| (r - 1) * rs + cols.saturating_sub(1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len(), "gemm_strided: a too short");
    assert!(k == 0 || last(k, n, rsb, csb) < b.len(), "gemm_strided: b too short");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm_strided: c too short");
    // SAFETY: the furthest element of each operand is bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
