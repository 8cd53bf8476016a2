//! Embedding of Lyapunov spectra into a low-dimensional space and distances
//! between candidates and the dense reference inside it.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, pca_fit, pca_project, PcaModel};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMethod {
    #[default]
    Pca,
    Raw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    L2,
    Cosine,
}

/// Output dimension of the PCA embedding.
pub const EMBEDDING_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub method: EmbeddingMethod,
    pub pca: Option<PcaModel>,
    pub input_dim: usize,
}

/// Fits the embedding on the reference spectrum together with every
/// candidate spectrum collected so far.
pub fn fit_embedding(reference: &[f64], history: &[&[f64]], method: EmbeddingMethod) -> Result<EmbeddingModel> {
    let input_dim = reference.len();
    if input_dim == 0 {
        return Err(Error::InvalidArgument("reference spectrum is empty".into()));
    }
    if let Some(bad) = history.iter().find(|s| s.len() != input_dim) {
        return Err(Error::Dimension(format!(
            "spectrum of length {} among spectra of length {input_dim}",
            bad.len()
        )));
    }
    let pca = match method {
        EmbeddingMethod::Raw => None,
        EmbeddingMethod::Pca => {
            let mut points: Vec<Vec<f64>> = Vec::with_capacity(history.len() + 1);
            points.push(reference.to_vec());
            points.extend(history.iter().map(|s| s.to_vec()));
            if points.len() < 2 {
                return Err(Error::InsufficientData("PCA embedding needs at least 2 spectra".into()));
            }
            Some(pca_fit(&points, EMBEDDING_DIM.min(input_dim))?)
        }
    };
    Ok(EmbeddingModel { method, pca, input_dim })
}

impl EmbeddingModel {
    pub fn project(&self, spectrum: &[f64]) -> Result<Vec<f64>> {
        if spectrum.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "spectrum of length {} for an embedding fitted on length {}",
                spectrum.len(),
                self.input_dim
            )));
        }
        match &self.pca {
            None => Ok(spectrum.to_vec()),
            Some(p) => Ok(pca_project(p, spectrum)?),
        }
    }
}

/// `sqrt(sum (p_i - q_i)^2)` or `1 - p.q / (|p| |q|)` between embedded points.
pub fn distance(p: &[f64], q: &[f64], metric: DistanceMetric) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!("points of length {} and {}", p.len(), q.len())));
    }
    match metric {
        DistanceMetric::L2 => Ok(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()),
        DistanceMetric::Cosine => {
            let (np, nq) = (norm2(p), norm2(q));
            if np == 0.0 || nq == 0.0 {
                return Err(Error::UndefinedDistance("cosine distance to a zero vector".into()));
            }
            // Rounding can push the ratio a hair outside [-1, 1].
            Ok(1.0 - (dot(p, q) / (np * nq)).clamp(-1.0, 1.0))
        }
    }
}

pub fn ls_distance(model: &EmbeddingModel, reference: &[f64], candidate: &[f64], metric: DistanceMetric) -> Result<f64> {
    distance(&model.project(reference)?, &model.project(candidate)?, metric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_is_identity() {
        let m = fit_embedding(&[1.0, 2.0, 3.0], &[], EmbeddingMethod::Raw).unwrap();
        assert_eq!(m.project(&[4.0, -5.0, 6.0]).unwrap(), vec![4.0, -5.0, 6.0]);
    }

    #[test]
    fn pythagoras() {
        let m = fit_embedding(&[0.0; 4], &[], EmbeddingMethod::Raw).unwrap();
        let d = ls_distance(&m, &[0.0; 4], &[3.0, 4.0, 0.0, 0.0], DistanceMetric::L2).unwrap();
        assert_eq!(d, 5.0);
    }

    #[test]
    fn cosine_cases() {
        assert!((distance(&[1.0, 0.0], &[0.0, 2.0], DistanceMetric::Cosine).unwrap() - 1.0).abs() < 1e-15);
        assert!((distance(&[1.0, 1.0], &[-1.0, -1.0], DistanceMetric::Cosine).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            distance(&[0.0, 0.0], &[1.0, 0.0], DistanceMetric::Cosine),
            Err(Error::UndefinedDistance(_))
        ));
    }

    #[test]
    fn pca_needs_two_points() {
        assert!(matches!(
            fit_embedding(&[1.0, 2.0], &[], EmbeddingMethod::Pca),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn mixed_lengths_rejected() {
        let short = [1.0];
        assert!(matches!(
            fit_embedding(&[1.0, 2.0], &[&short], EmbeddingMethod::Raw),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn refit_moves_the_mean() {
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0];
        let c = [5.0, 5.0, 1.0];
        let m1 = fit_embedding(&a, &[&b], EmbeddingMethod::Pca).unwrap();
        let m2 = fit_embedding(&a, &[&b, &c], EmbeddingMethod::Pca).unwrap();
        assert_ne!(m1.pca.unwrap().mean, m2.pca.unwrap().mean);
    }
}
