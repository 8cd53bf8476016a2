use super::{LinalgError, Matrix, Result};

/// Householder QR of a square matrix.
///
/// Returns `(q, r)` with `q` orthonormal, `r` upper triangular and
/// `diag(r) >= 0`: whenever a reflector leaves a negative diagonal entry, the
/// matching column of `q` and row of `r` are negated together.
pub fn qr_decompose(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(LinalgError::Dimension(format!(
            "QR expects a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if let Some(pos) = a.data().iter().position(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite {
            row: pos / n,
            col: pos % n,
        });
    }

    // Column-major working copy: column j lives in w[j*n..(j+1)*n]. Reflectors
    // are applied column by column, so every inner loop is contiguous.
    let mut w = a.transpose().into_data();
    let mut tau = vec![0.0; n];

    for k in 0..n {
        let (head, tail) = w.split_at_mut((k + 1) * n);
        let col = &mut head[k * n..];
        let alpha = col[k];
        let sigma: f64 = col[k + 1..].iter().map(|v| v * v).sum();
        if sigma == 0.0 {
            // Already triangular in this column; H = I.
            tau[k] = 0.0;
            continue;
        }
        let norm = (alpha * alpha + sigma).sqrt();
        let beta = if alpha >= 0.0 { -norm } else { norm };
        tau[k] = (beta - alpha) / beta;
        let scale = 1.0 / (alpha - beta);
        for v in &mut col[k + 1..] {
            *v *= scale;
        }
        col[k] = beta;

        let v = &col[k + 1..];
        let t = tau[k];
        for cj in tail.chunks_exact_mut(n) {
            let s = t * (cj[k] + dot_tail(v, &cj[k + 1..]));
            cj[k] -= s;
            for (x, vi) in cj[k + 1..].iter_mut().zip(v) {
                *x -= s * vi;
            }
        }
    }

    // Accumulate Q = H_0 H_1 ... H_{n-1} by backward application to I.
    let mut q = vec![0.0; n * n];
    for j in 0..n {
        q[j * n + j] = 1.0;
    }
    for k in (0..n).rev() {
        let t = tau[k];
        if t == 0.0 {
            continue;
        }
        let v = &w[k * n + k + 1..(k + 1) * n];
        for qj in q[k * n..].chunks_exact_mut(n) {
            let s = t * (qj[k] + dot_tail(v, &qj[k + 1..]));
            qj[k] -= s;
            for (x, vi) in qj[k + 1..].iter_mut().zip(v) {
                *x -= s * vi;
            }
        }
    }

    let mut r = Matrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            r[(i, j)] = w[j * n + i];
        }
    }
    let mut q_out = Matrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            q_out[(i, j)] = q[j * n + i];
        }
    }

    for k in 0..n {
        if r[(k, k)] < 0.0 {
            for j in k..n {
                r[(k, j)] = -r[(k, j)];
            }
            for i in 0..n {
                q_out[(i, k)] = -q_out[(i, k)];
            }
        }
    }
    Ok((q_out, r))
}

#[inline]
fn dot_tail(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn check(a: &Matrix) {
        let n = a.rows();
        let (q, r) = qr_decompose(a).unwrap();
        let qtq = q.transpose().matmul(&q).unwrap();
        assert!(qtq.max_abs_diff(&Matrix::identity(n)).unwrap() < 1e-10);
        for i in 0..n {
            assert!(r[(i, i)] >= 0.0);
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
        let scale = a.max_abs().max(1.0);
        assert!(q.matmul(&r).unwrap().max_abs_diff(a).unwrap() < 1e-10 * scale);
    }

    #[test]
    fn identity_is_fixed_point() {
        let (q, r) = qr_decompose(&Matrix::identity(3)).unwrap();
        assert_eq!(q, Matrix::identity(3));
        assert_eq!(r, Matrix::identity(3));
    }

    #[test]
    fn negative_diagonal_flips_sign() {
        let (q, r) = qr_decompose(&Matrix::from_diag(&[-2.0, 3.0])).unwrap();
        assert_eq!(r, Matrix::from_diag(&[2.0, 3.0]));
        assert_eq!(q, Matrix::from_diag(&[-1.0, 1.0]));
    }

    #[test]
    fn seeded_5x5_reconstructs() {
        let a = random(5, 7);
        let (q, r) = qr_decompose(&a).unwrap();
        let rec = q.matmul(&r).unwrap();
        for (x, y) in rec.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn random_up_to_32() {
        for n in 1..=32 {
            check(&random(n, n as u64 + 100));
        }
    }

    #[test]
    fn rank_deficient_and_zero_columns() {
        let mut a = random(6, 3);
        for i in 0..6 {
            a[(i, 2)] = 0.0;
            a[(i, 4)] = 2.0 * a[(i, 1)];
        }
        check(&a);
        check(&Matrix::zeros(4, 4));
    }

    #[test]
    fn non_square_is_rejected() {
        assert!(matches!(
            qr_decompose(&Matrix::zeros(2, 3)),
            Err(LinalgError::Dimension(_))
        ));
    }
}
