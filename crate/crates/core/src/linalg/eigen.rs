use super::{LinalgError, Matrix, Result};

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and a matrix whose columns are the
/// matching unit eigenvectors. Only the upper triangle is trusted to be
/// symmetric; the input is symmetrized first.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(LinalgError::Dimension(format!(
            "eigendecomposition expects a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = Matrix::identity(n);

    let scale = m.max_abs();
    if scale == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    let tol = 1e-15 * scale;

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_matrix_sorted() {
        let (vals, vecs) = symmetric_eigen(&Matrix::from_diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
        assert_eq!(vecs[(1, 0)].abs(), 1.0);
    }

    #[test]
    fn reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 12;
        let b = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let a = b.transpose().matmul(&b).unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        let rec = vecs
            .matmul(&Matrix::from_diag(&vals))
            .unwrap()
            .matmul(&vecs.transpose())
            .unwrap();
        assert!(rec.max_abs_diff(&a).unwrap() < 1e-10);
        let vtv = vecs.transpose().matmul(&vecs).unwrap();
        assert!(vtv.max_abs_diff(&Matrix::identity(n)).unwrap() < 1e-12);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    }
}
