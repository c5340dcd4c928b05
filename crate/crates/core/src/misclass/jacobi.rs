//! Cyclic Jacobi eigen-decomposition for small dense symmetric matrices.

/// Sweeps stop once the off-diagonal Frobenius norm falls below this.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    /// Sorted descending.
    pub values: Vec<f64>,
    /// `vectors[i]` is the unit eigenvector for `values[i]`.
    pub vectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

fn off_norm(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i][j] * a[i][j];
            }
        }
    }
    s.sqrt()
}

/// Only the upper triangle of `a` is read; the matrix is symmetrized first.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> SymmetricEigen {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if j >= i { a[i][j] } else { a[j][i] }).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();

    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS && off_norm(&m) > OFF_DIAGONAL_TOL {
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    SymmetricEigen {
        values: order.iter().map(|&i| m[i][i]).collect(),
        vectors: order.iter().map(|&i| v.iter().map(|row| row[i]).collect()).collect(),
        sweeps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_characteristic_polynomial() {
        // λ² − (a+d)λ + (ad − b²) = 0
        let (a, b, d) = (0.9, 0.1, 0.9);
        let tr: f64 = a + d;
        let det = a * d - b * b;
        let disc = (tr * tr - 4.0 * det).sqrt();
        let want = [(tr + disc) / 2.0, (tr - disc) / 2.0];
        let e = jacobi_eigen(&[vec![a, b], vec![b, d]]);
        assert!((e.values[0] - want[0]).abs() < 1e-12);
        assert!((e.values[1] - want[1]).abs() < 1e-12);
        assert!((e.values[0] - 1.0).abs() < 1e-12 && (e.values[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn reconstructs_matrix() {
        let a = vec![
            vec![4.0, 1.0, -2.0, 0.5],
            vec![1.0, 3.0, 0.0, 1.5],
            vec![-2.0, 0.0, 5.0, -1.0],
            vec![0.5, 1.5, -1.0, 2.0],
        ];
        let e = jacobi_eigen(&a);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let trace: f64 = (0..4).map(|i| a[i][i]).sum();
        assert!((e.values.iter().sum::<f64>() - trace).abs() < 1e-10);
        for i in 0..4 {
            for j in 0..4 {
                let r: f64 = (0..4).map(|k| e.values[k] * e.vectors[k][i] * e.vectors[k][j]).sum();
                assert!((r - a[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn diagonal_needs_no_sweeps() {
        let e = jacobi_eigen(&[vec![2.0, 0.0], vec![0.0, 7.0]]);
        assert_eq!(e.sweeps, 0);
        assert_eq!(e.values, vec![7.0, 2.0]);
    }
}
