//! Similarity analyses over trained models: pairwise prompt distances and
//! cosine similarity of activation coefficient vectors.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("layer has no prompts")]
    EmptyLayer,
    #[error("coefficient vectors must share one length")]
    RaggedVectors,
}

/// Pairwise distances between the prompt rows of one layer: absolute
/// difference for scalar prompts, Euclidean distance otherwise. Symmetric
/// with a zero diagonal.
pub fn prompt_distance_matrix(prompts: &Tensor) -> Result<Tensor, AnalysisError> {
    let (rows, dim) = (prompts.rows(), prompts.cols());
    if rows == 0 || prompts.is_empty() {
        return Err(AnalysisError::EmptyLayer);
    }
    let mut out = vec![0.0; rows * rows];
    for a in 0..rows {
        for b in (a + 1)..rows {
            let mut sq = 0.0;
            for d in 0..dim {
                let diff = prompts.at(a, d) - prompts.at(b, d);
                sq += diff * diff;
            }
            let dist = sq.sqrt();
            out[a * rows + b] = dist;
            out[b * rows + a] = dist;
        }
    }
    Ok(Tensor::matrix(rows, rows, out).expect("square"))
}

/// Cosine similarity between coefficient vectors. Zero vectors map to
/// similarity 0 against everything (including themselves); nonzero vectors
/// have a unit diagonal.
pub fn coeff_cosine_matrix(vectors: &[Vec<f64>]) -> Result<Tensor, AnalysisError> {
    let n = vectors.len();
    if n == 0 {
        return Err(AnalysisError::EmptyLayer);
    }
    let len = vectors[0].len();
    if vectors.iter().any(|v| v.len() != len) {
        return Err(AnalysisError::RaggedVectors);
    }
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        if norms[a] == 0.0 {
            continue;
        }
        out[a * n + a] = 1.0;
        for b in (a + 1)..n {
            if norms[b] == 0.0 {
                continue;
            }
            let dot: f64 = vectors[a].iter().zip(&vectors[b]).map(|(x, y)| x * y).sum();
            let cos = dot / (norms[a] * norms[b]);
            out[a * n + b] = cos;
            out[b * n + a] = cos;
        }
    }
    Ok(Tensor::matrix(n, n, out).expect("square"))
}
