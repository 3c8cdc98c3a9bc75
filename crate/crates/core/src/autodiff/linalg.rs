//! Raw dense kernels on row-major buffers: matrix products, Cholesky
//! factorization and blocked triangular solves. No tape involvement.

use rayon::prelude::*;

/// Borrowed strided view of a logical `rows x cols` matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    /// `transposed == false`: `data` is row-major `rows x cols`.
    /// `transposed == true`: `data` is row-major `cols x rows` and the view is its transpose.
    pub fn new(data: &'a [f64], rows: usize, cols: usize, transposed: bool) -> Self {
        let (rs, cs) = if transposed { (1, rows) } else { (cols, 1) };
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    fn sub(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> MatRef<'a> {
        let offset = r0 * self.rs + c0 * self.cs;
        MatRef {
            data: &self.data[offset.min(self.data.len())..],
            rows: r1 - r0,
            cols: c1 - c0,
            rs: self.rs,
            cs: self.cs,
        }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.rs + j * self.cs]
    }
}

const PAR_THRESHOLD: usize = 1 << 18;

/// `c <- alpha * a * b + beta * c`, `c` row-major `a.rows x b.cols` with row stride `ldc`.
pub(crate) fn gemm_into(alpha: f64, a: MatRef, b: MatRef, beta: f64, c: &mut [f64], ldc: usize) {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    let threads = rayon::current_num_threads();
    if threads > 1 && m * n * k >= PAR_THRESHOLD && m >= 32 {
        // Row chunks are independent and each output element is computed by
        // the same kernel sequence regardless of chunking, so results do not
        // depend on the thread count.
        let chunk = m.div_ceil(threads).max(16);
        c[..(m - 1) * ldc + n]
            .par_chunks_mut(chunk * ldc)
            .enumerate()
            .for_each(|(ci, cchunk)| {
                let r0 = ci * chunk;
                let r1 = (r0 + chunk).min(m);
                let asub = a.sub(r0, r1, 0, k);
                raw_dgemm(alpha, asub, b, beta, cchunk, ldc);
            });
    } else {
        raw_dgemm(alpha, a, b, beta, c, ldc);
    }
}

fn raw_dgemm(alpha: f64, a: MatRef, b: MatRef, beta: f64, c: &mut [f64], ldc: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * ldc + n);
    assert!(a.data.len() > (m - 1) * a.rs + (k - 1) * a.cs);
    assert!(b.data.len() > (k - 1) * b.rs + (n - 1) * b.cs);
    // SAFETY: the asserts above bound every index the kernel touches
    // (row/column strides are non-negative and within the borrowed slices),
    // and `c` is exclusively borrowed.
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
            ldc as isize,
            1,
        );
    }
}

pub(crate) fn gemm(a: MatRef, b: MatRef, c: &mut [f64], beta: f64) {
    let n = b.cols;
    gemm_into(1.0, a, b, beta, c, n);
}

/// Lower Cholesky factor of a row-major `n x n` matrix; `None` if a pivot is
/// not strictly positive.
pub(crate) fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let (ri, rj) = (i * n, j * n);
            let mut s = a[ri + j];
            for k in 0..j {
                s -= l[ri + k] * l[rj + k];
            }
            l[ri + j] = s / djj;
        }
    }
    Some(l)
}

const BLOCK: usize = 64;

/// Solves `op(T) X = B` in place, `T` row-major `n x n` triangular
/// (`upper` selects the stored triangle), `op` is the transpose when `trans`.
/// `b` is row-major `n x k`.
pub(crate) fn solve_triangular(t: &[f64], n: usize, upper: bool, trans: bool, b: &mut [f64], k: usize) {
    debug_assert_eq!(b.len(), n * k);
    let e = MatRef::new(t, n, n, trans);
    if upper == trans {
        forward_sub(e, b, n, k);
    } else {
        back_sub(e, b, n, k);
    }
}

fn forward_sub(e: MatRef, b: &mut [f64], n: usize, k: usize) {
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + BLOCK).min(n);
        let (done, rest) = b.split_at_mut(i0 * k);
        let cur = &mut rest[..(i1 - i0) * k];
        if i0 > 0 {
            let x = MatRef::new(done, i0, k, false);
            gemm_into(-1.0, e.sub(i0, i1, 0, i0), x, 1.0, cur, k);
        }
        for i in i0..i1 {
            let (prev, row) = cur.split_at_mut((i - i0) * k);
            let row = &mut row[..k];
            for j in i0..i {
                let eij = e.get(i, j);
                if eij != 0.0 {
                    let xj = &prev[(j - i0) * k..(j - i0 + 1) * k];
                    for (r, x) in row.iter_mut().zip(xj) {
                        *r -= eij * x;
                    }
                }
            }
            let d = e.get(i, i);
            for r in row.iter_mut() {
                *r /= d;
            }
        }
        i0 = i1;
    }
}

fn back_sub(e: MatRef, b: &mut [f64], n: usize, k: usize) {
    let mut i1 = n;
    while i1 > 0 {
        let i0 = i1.saturating_sub(BLOCK);
        let (head, done) = b.split_at_mut(i1 * k);
        let cur = &mut head[i0 * k..];
        if i1 < n {
            let x = MatRef::new(done, n - i1, k, false);
            gemm_into(-1.0, e.sub(i0, i1, i1, n), x, 1.0, cur, k);
        }
        for i in (i0..i1).rev() {
            let (row, after) = cur.split_at_mut((i - i0 + 1) * k);
            let row = &mut row[(i - i0) * k..];
            for j in i + 1..i1 {
                let eij = e.get(i, j);
                if eij != 0.0 {
                    let xj = &after[(j - i - 1) * k..(j - i) * k];
                    for (r, x) in row.iter_mut().zip(xj) {
                        *r -= eij * x;
                    }
                }
            }
            let d = e.get(i, i);
            for r in row.iter_mut() {
                *r /= d;
            }
        }
        i1 = i0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn lower(n: usize, seed: u64) -> Vec<f64> {
        let mut l = vec![0.0; n * n];
        let mut s = seed;
        for i in 0..n {
            for j in 0..=i {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let u = ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5;
                l[i * n + j] = if i == j { 1.0 + u.abs() } else { u };
            }
        }
        l
    }

    #[test]
    fn blocked_solves_match_products() {
        let n = 150;
        let k = 7;
        let l = lower(n, 3);
        let x: Vec<f64> = (0..n * k).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let lt: Vec<f64> = {
            let mut t = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    t[j * n + i] = l[i * n + j];
                }
            }
            t
        };
        for (upper, trans) in [(false, false), (false, true), (true, false), (true, true)] {
            let stored = if upper { &lt } else { &l };
            let eff: Vec<f64> = if trans {
                let mut t = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        t[j * n + i] = stored[i * n + j];
                    }
                }
                t
            } else {
                stored.clone()
            };
            let mut b = naive_mm(&eff, &x, n, n, k);
            solve_triangular(stored, n, upper, trans, &mut b, k);
            let err = b.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-9, "upper={upper} trans={trans} err={err}");
        }
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-15);
        assert!((l[2] - 1.0).abs() < 1e-15);
        assert!((l[3] - 2f64.sqrt()).abs() < 1e-15);
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn strided_gemm_matches_naive() {
        let (m, k, n) = (37, 19, 23);
        let a: Vec<f64> = (0..m * k).map(|i| (i % 7) as f64 - 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 5) as f64 * 0.5).collect();
        let mut c = vec![0.0; m * n];
        gemm(MatRef::new(&a, m, k, false), MatRef::new(&b, k, n, false), &mut c, 0.0);
        assert_eq!(c, naive_mm(&a, &b, m, k, n));
    }
}
