//! Trainable-parameter accounting across model families.
//!
//! Two counting modes ship. The formula mode evaluates the published
//! closed forms: an MLP needs `sum_l n_l * n_{l+1}` weights, a KAN variant
//! multiplies that by its per-edge coefficient dimension `dim_w`, and a Meta
//! variant replaces the product with `prompt_dim * edges` prompts plus a
//! fixed `C * (d_hidden + 1) * dim_w` meta-learner cost. The exact mode
//! enumerates every stored trainable scalar of a constructed model; for Meta
//! variants it exceeds the formula by precisely the meta-learner input layer,
//! `C * (prompt_dim + 1) * d_hidden`, which the closed form omits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkShape;

#[derive(Debug, Error)]
pub enum CountError {
    #[error("unknown model kind '{0}'")]
    UnknownKind(String),
    #[error("model kind {0:?} has no meta counterpart")]
    NoMetaCounterpart(ModelKind),
    #[error("model kind {0:?} has no base counterpart")]
    NoBaseCounterpart(ModelKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "kan")]
    Kan,
    #[serde(rename = "fastkan")]
    FastKan,
    #[serde(rename = "wavkan")]
    WavKan,
    #[serde(rename = "metakan")]
    MetaKan,
    #[serde(rename = "metafastkan")]
    MetaFastKan,
    #[serde(rename = "metawavkan")]
    MetaWavKan,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self, CountError> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(ModelKind::Mlp),
            "kan" => Ok(ModelKind::Kan),
            "fastkan" => Ok(ModelKind::FastKan),
            "wavkan" => Ok(ModelKind::WavKan),
            "metakan" => Ok(ModelKind::MetaKan),
            "metafastkan" => Ok(ModelKind::MetaFastKan),
            "metawavkan" => Ok(ModelKind::MetaWavKan),
            other => Err(CountError::UnknownKind(other.to_string())),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Kan => "kan",
            ModelKind::FastKan => "fastkan",
            ModelKind::WavKan => "wavkan",
            ModelKind::MetaKan => "metakan",
            ModelKind::MetaFastKan => "metafastkan",
            ModelKind::MetaWavKan => "metawavkan",
        }
    }

    pub fn is_meta(&self) -> bool {
        matches!(
            self,
            ModelKind::MetaKan | ModelKind::MetaFastKan | ModelKind::MetaWavKan
        )
    }

    /// Per-edge coefficient dimension this kind implies.
    pub fn dim_w(&self, grid: usize, order: usize, centers: usize) -> usize {
        match self {
            ModelKind::Mlp => 1,
            ModelKind::Kan | ModelKind::MetaKan => grid + order + 1,
            ModelKind::FastKan | ModelKind::MetaFastKan => centers,
            ModelKind::WavKan | ModelKind::MetaWavKan => 3,
        }
    }

    pub fn meta_counterpart(&self) -> Result<ModelKind, CountError> {
        match self {
            ModelKind::Kan => Ok(ModelKind::MetaKan),
            ModelKind::FastKan => Ok(ModelKind::MetaFastKan),
            ModelKind::WavKan => Ok(ModelKind::MetaWavKan),
            other => Err(CountError::NoMetaCounterpart(*other)),
        }
    }

    pub fn base_counterpart(&self) -> Result<ModelKind, CountError> {
        match self {
            ModelKind::MetaKan => Ok(ModelKind::Kan),
            ModelKind::MetaFastKan => Ok(ModelKind::FastKan),
            ModelKind::MetaWavKan => Ok(ModelKind::WavKan),
            other => Err(CountError::NoBaseCounterpart(*other)),
        }
    }
}

/// Formula-mode trainable parameter count. `dim_w` is the per-edge
/// coefficient dimension; `d_hidden`, `clusters`, and `prompt_dim` only
/// matter for Meta variants.
pub fn count_params(
    kind: ModelKind,
    shape: &NetworkShape,
    dim_w: usize,
    d_hidden: usize,
    clusters: usize,
    prompt_dim: usize,
) -> u64 {
    let edges = shape.total_edges() as u64;
    match kind {
        ModelKind::Mlp => edges,
        ModelKind::Kan | ModelKind::FastKan | ModelKind::WavKan => edges * dim_w as u64,
        ModelKind::MetaKan | ModelKind::MetaFastKan | ModelKind::MetaWavKan => {
            prompt_dim as u64 * edges + clusters as u64 * (d_hidden as u64 + 1) * dim_w as u64
        }
    }
}

/// The meta-learner scalars the published formula leaves out: the input
/// layer of each of the C learners.
pub fn formula_exact_gap(clusters: usize, prompt_dim: usize, d_hidden: usize) -> u64 {
    clusters as u64 * (prompt_dim as u64 + 1) * d_hidden as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryVerdict {
    /// True when the Meta variant needs strictly fewer formula-mode
    /// parameters than its base model.
    pub efficient: bool,
    /// base count minus meta count (positive means the meta model is
    /// smaller).
    pub margin: i64,
    pub base_params: u64,
    pub meta_params: u64,
}

/// Compare a base KAN variant against its Meta form by direct count.
pub fn memory_efficient(
    base_kind: ModelKind,
    shape: &NetworkShape,
    dim_w: usize,
    d_hidden: usize,
    clusters: usize,
    prompt_dim: usize,
) -> Result<MemoryVerdict, CountError> {
    let meta_kind = if base_kind.is_meta() {
        base_kind
    } else {
        base_kind.meta_counterpart()?
    };
    let base_kind = if base_kind.is_meta() {
        base_kind.base_counterpart()?
    } else {
        base_kind
    };
    let base_params = count_params(base_kind, shape, dim_w, d_hidden, clusters, prompt_dim);
    let meta_params = count_params(meta_kind, shape, dim_w, d_hidden, clusters, prompt_dim);
    Ok(MemoryVerdict {
        efficient: meta_params < base_params,
        margin: base_params as i64 - meta_params as i64,
        base_params,
        meta_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(widths: &[usize]) -> NetworkShape {
        NetworkShape::new(widths.to_vec()).unwrap()
    }

    #[test]
    fn table_rows_for_2_2_1_1() {
        let s = shape(&[2, 2, 1, 1]);
        let dim = ModelKind::Kan.dim_w(5, 3, 0);
        assert_eq!(count_params(ModelKind::Mlp, &s, 1, 0, 0, 0), 7);
        assert_eq!(count_params(ModelKind::Kan, &s, dim, 0, 0, 0), 63);
        assert_eq!(count_params(ModelKind::WavKan, &s, 3, 0, 0, 0), 21);
        assert_eq!(count_params(ModelKind::FastKan, &s, 8, 0, 0, 0), 56);
        assert_eq!(
            count_params(ModelKind::MetaKan, &s, dim, 32, 1, 1),
            7 + 33 * 9
        );
    }

    #[test]
    fn break_even_examples() {
        let s = shape(&[2, 2, 1, 1]);
        let v = memory_efficient(ModelKind::Kan, &s, 9, 5, 1, 1).unwrap();
        assert!(v.efficient);
        assert_eq!((v.base_params, v.meta_params), (63, 61));
        assert_eq!(v.margin, 2);

        let v = memory_efficient(ModelKind::Kan, &s, 9, 6, 1, 1).unwrap();
        assert!(!v.efficient);
        assert_eq!(v.meta_params, 70);

        let wide = shape(&[784, 32, 10]);
        let v = memory_efficient(ModelKind::Kan, &wide, 9, 64, 1, 1).unwrap();
        assert!(v.efficient);
        assert!(v.margin > 200_000, "margin {}", v.margin);
    }

    #[test]
    fn meta_kind_accepted_directly() {
        let s = shape(&[2, 2, 1, 1]);
        let from_base = memory_efficient(ModelKind::Kan, &s, 9, 5, 1, 1).unwrap();
        let from_meta = memory_efficient(ModelKind::MetaKan, &s, 9, 5, 1, 1).unwrap();
        assert_eq!(from_base, from_meta);
    }

    #[test]
    fn parse_kind() {
        assert_eq!(ModelKind::parse("MetaKAN").unwrap(), ModelKind::MetaKan);
        assert!(ModelKind::parse("gird").is_err());
    }
}
