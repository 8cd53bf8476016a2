use super::{dot, symmetric_eigen, LinalgError, Matrix, Result};
use serde::{Deserialize, Serialize};

/// Fitted principal-component projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `out_dim x input_dim`, orthonormal rows ordered by explained variance.
    pub components: Matrix,
    /// Population variance along each component.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn out_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fits PCA on `points` using the population covariance matrix.
///
/// Each component's sign is fixed so that its largest-magnitude entry is
/// positive, which makes the fit deterministic.
pub fn pca_fit(points: &[Vec<f64>], out_dim: usize) -> Result<PcaModel> {
    if points.len() < 2 {
        return Err(LinalgError::InsufficientData(format!(
            "PCA needs at least 2 points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(LinalgError::Dimension("PCA points of unequal dimension".into()));
    }
    if out_dim == 0 || out_dim > dim {
        return Err(LinalgError::Dimension(format!(
            "PCA output dimension {out_dim} not in 1..={dim}"
        )));
    }
    if out_dim > points.len() {
        return Err(LinalgError::InsufficientData(format!(
            "PCA output dimension {out_dim} exceeds the {} fit points",
            points.len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite { row: 0, col: 0 });
    }

    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let centered: Vec<f64> = points
        .iter()
        .flat_map(|p| p.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let centered = Matrix::new(points.len(), dim, centered)?;
    let cov = centered.transpose().matmul(&centered)?.scale(1.0 / n);

    let (values, vectors) = symmetric_eigen(&cov)?;
    let mut components = Matrix::zeros(out_dim, dim);
    for c in 0..out_dim {
        let col = vectors.column(c);
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, v)| {
                if v.abs() > bv.abs() {
                    (i, *v)
                } else {
                    (bi, bv)
                }
            })
            .1;
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (j, v) in col.iter().enumerate() {
            components[(c, j)] = sign * v;
        }
    }
    let explained_variance = values[..out_dim].iter().map(|v| v.max(0.0)).collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

/// `components * (point - mean)`.
pub fn pca_project(model: &PcaModel, point: &[f64]) -> Result<Vec<f64>> {
    if point.len() != model.mean.len() {
        return Err(LinalgError::Dimension(format!(
            "point of dimension {} projected by a PCA fitted on dimension {}",
            point.len(),
            model.mean.len()
        )));
    }
    let centered: Vec<f64> = point.iter().zip(&model.mean).map(|(p, m)| p - m).collect();
    Ok((0..model.out_dim())
        .map(|c| dot(model.components.row(c), &centered))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..dim)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * (j + 1) as f64
                    })
                    .collect()
            })
            .collect()
    }

    fn variance_sum(points: &[Vec<f64>]) -> f64 {
        let n = points.len() as f64;
        let dim = points[0].len();
        (0..dim)
            .map(|j| {
                let m = points.iter().map(|p| p[j]).sum::<f64>() / n;
                points.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / n
            })
            .sum()
    }

    #[test]
    fn collinear_points() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 - 3.0, 0.0, 0.0]).collect();
        let model = pca_fit(&pts, 2).unwrap();
        assert!((model.components[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!(model.explained_variance[1] < 1e-12);
    }

    #[test]
    fn mean_projects_to_origin() {
        let pts = gaussian_points(20, 4, 3);
        let model = pca_fit(&pts, 2).unwrap();
        let z = pca_project(&model, &model.mean).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn projected_variance_bounded_by_total() {
        let pts = gaussian_points(50, 5, 9);
        let total = variance_sum(&pts);
        let model = pca_fit(&pts, 2).unwrap();
        let proj: Vec<Vec<f64>> = pts.iter().map(|p| pca_project(&model, p).unwrap()).collect();
        assert!(variance_sum(&proj) <= total + 1e-9);

        let full = pca_fit(&pts, 5).unwrap();
        let proj: Vec<Vec<f64>> = pts.iter().map(|p| pca_project(&full, p).unwrap()).collect();
        assert!((variance_sum(&proj) - total).abs() < 1e-9 * total);
    }

    #[test]
    fn one_dimensional_data_keeps_distances() {
        let dir = [0.6, 0.0, -0.8];
        let ts = [-1.5, 0.2, 0.7, 3.0, 4.25];
        let pts: Vec<Vec<f64>> = ts
            .iter()
            .map(|t| dir.iter().map(|d| 1.0 + t * d).collect())
            .collect();
        let model = pca_fit(&pts, 1).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let a = pca_project(&model, &pts[i]).unwrap()[0];
                let b = pca_project(&model, &pts[j]).unwrap()[0];
                assert!(((a - b).abs() - (ts[i] - ts[j]).abs()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn contraction() {
        let pts = gaussian_points(30, 6, 1);
        let model = pca_fit(&pts, 2).unwrap();
        let d = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        for w in pts.windows(2) {
            let pa = pca_project(&model, &w[0]).unwrap();
            let pb = pca_project(&model, &w[1]).unwrap();
            assert!(d(&pa, &pb) <= d(&w[0], &w[1]) + 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            pca_fit(&[vec![1.0, 2.0]], 1),
            Err(LinalgError::InsufficientData(_))
        ));
        assert!(matches!(
            pca_fit(&[vec![1.0, 2.0], vec![0.0, 1.0]], 3),
            Err(LinalgError::Dimension(_))
        ));
        let model = pca_fit(&[vec![1.0, 2.0], vec![0.0, 1.0]], 1).unwrap();
        assert!(matches!(
            pca_project(&model, &[1.0]),
            Err(LinalgError::Dimension(_))
        ));
    }
}
