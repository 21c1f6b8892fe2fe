//! Singular values via cyclic Jacobi rotations on the smaller Gram matrix.

/// Singular values of the row-major `rows x cols` matrix, descending.
pub fn singular_values(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    let n = rows.min(cols);
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = if rows <= cols {
                (0..cols).map(|k| a[i * cols + k] * a[j * cols + k]).sum()
            } else {
                (0..rows).map(|k| a[k * cols + i] * a[k * cols + j]).sum()
            };
        }
    }
    let mut s: Vec<f64> = symmetric_eigenvalues(n, g)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

fn symmetric_eigenvalues(n: usize, mut m: Vec<f64>) -> Vec<f64> {
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        let diag: f64 = (0..n).map(|i| m[i * n + i].powi(2)).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}

#[test]
fn oracle_recovers_known_singular_values() {
    let s = singular_values(2, 3, &[3.0, 0.0, 0.0, 0.0, -2.0, 0.0]);
    assert!((s[0] - 3.0).abs() < 1e-12 && (s[1] - 2.0).abs() < 1e-12);
    // [[1, 1], [0, 1]]: singular values are the golden ratio and its inverse.
    let s = singular_values(2, 2, &[1.0, 1.0, 0.0, 1.0]);
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    assert!((s[0] - phi).abs() < 1e-12 && (s[1] - 1.0 / phi).abs() < 1e-12);
}
