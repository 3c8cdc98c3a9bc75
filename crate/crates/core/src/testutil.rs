//! Dense reference linear algebra for test oracles. Deliberately naive and
//! independent of the crate's own factorizations.

pub fn mat(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
    (0..rows).map(|i| (0..cols).map(|j| f(i, j)).collect()).collect()
}

pub fn mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    mat(n, m, |i, j| (0..k).map(|p| a[i][p] * b[p][j]).sum())
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    mat(a[0].len(), a.len(), |i, j| a[j][i])
}

/// Gauss-Jordan inverse with partial pivoting; also returns the determinant.
pub fn inv_det(a: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut inv = mat(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| m[x][c].abs().partial_cmp(&m[y][c].abs()).unwrap())
            .unwrap();
        if p != c {
            m.swap(p, c);
            inv.swap(p, c);
            det = -det;
        }
        let d = m[c][c];
        det *= d;
        for j in 0..n {
            m[c][j] /= d;
            inv[c][j] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                for j in 0..n {
                    m[r][j] -= f * m[c][j];
                    inv[r][j] -= f * inv[c][j];
                }
            }
        }
    }
    (inv, det)
}

pub fn se(x: &[f64], y: &[f64], ls: &[f64], s2: f64) -> f64 {
    let d: f64 = x.iter().zip(y).zip(ls).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
    s2 * (-0.5 * d).exp()
}
