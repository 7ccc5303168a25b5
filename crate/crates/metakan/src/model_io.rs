//! Versioned JSON model files.
//!
//! A KAN file stores the full per-layer weight matrices; a MetaKAN file
//! stores prompts, learner weights, and the cluster plan. Arrays are flat
//! row-major f64 lists. Serialization uses the shortest round-trip decimal
//! representation, so save -> load -> save is byte-identical and a loaded
//! model's forward pass reproduces the original bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterPlan;
use crate::network::{ActivationKind, KanNetwork, MetaKanNetwork, NetworkError, NetworkShape};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("unsupported model format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("model file is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixData {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixData {
    fn from_tensor(t: &Tensor) -> Self {
        MatrixData {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }

    fn to_tensor(&self) -> Result<Tensor, ModelIoError> {
        Tensor::matrix(self.rows, self.cols, self.data.clone())
            .map_err(|e| ModelIoError::Inconsistent(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LearnerData {
    w1: MatrixData,
    b1: Vec<f64>,
    w2: MatrixData,
    b2: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ModelPayload {
    Kan {
        shape: Vec<usize>,
        activation: ActivationKind,
        layers: Vec<MatrixData>,
    },
    MetaKan {
        shape: Vec<usize>,
        activation: ActivationKind,
        plan: Vec<(usize, usize)>,
        prompt_dim: usize,
        d_hidden: usize,
        prompts: Vec<MatrixData>,
        learners: Vec<LearnerData>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    model: ModelPayload,
}

/// A model loaded from disk.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Kan(KanNetwork),
    MetaKan(MetaKanNetwork),
}

pub fn kan_to_json(net: &KanNetwork) -> Result<String, ModelIoError> {
    let payload = ModelPayload::Kan {
        shape: net.shape().widths().to_vec(),
        activation: net.kind().clone(),
        layers: (0..net.shape().depth())
            .map(|l| MatrixData::from_tensor(net.layer_weights(l)))
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&ModelFile {
        format_version: FORMAT_VERSION,
        model: payload,
    })?)
}

pub fn metakan_to_json(net: &MetaKanNetwork) -> Result<String, ModelIoError> {
    let learners = net
        .learners()
        .iter()
        .map(|learner| {
            let [w1, b1, w2, b2] = learner.handles();
            LearnerData {
                w1: MatrixData::from_tensor(net.params.get(w1)),
                b1: net.params.get(b1).data().to_vec(),
                w2: MatrixData::from_tensor(net.params.get(w2)),
                b2: net.params.get(b2).data().to_vec(),
            }
        })
        .collect();
    let payload = ModelPayload::MetaKan {
        shape: net.shape().widths().to_vec(),
        activation: net.kind().clone(),
        plan: net.plan().intervals().to_vec(),
        prompt_dim: net.prompt_dim(),
        d_hidden: net.d_hidden(),
        prompts: (0..net.shape().depth())
            .map(|l| MatrixData::from_tensor(net.prompts(l)))
            .collect(),
        learners,
    };
    Ok(serde_json::to_string_pretty(&ModelFile {
        format_version: FORMAT_VERSION,
        model: payload,
    })?)
}

pub fn model_from_json(json: &str) -> Result<LoadedModel, ModelIoError> {
    let file: ModelFile = serde_json::from_str(json)?;
    if file.format_version != FORMAT_VERSION {
        return Err(ModelIoError::Version(file.format_version));
    }
    match file.model {
        ModelPayload::Kan {
            shape,
            activation,
            layers,
        } => {
            let shape = NetworkShape::new(shape)?;
            let weights = layers
                .iter()
                .map(|m| m.to_tensor())
                .collect::<Result<Vec<_>, _>>()?;
            Ok(LoadedModel::Kan(KanNetwork::from_weights(
                shape, activation, weights,
            )?))
        }
        ModelPayload::MetaKan {
            shape,
            activation,
            plan,
            prompt_dim,
            d_hidden,
            prompts,
            learners,
        } => {
            let shape = NetworkShape::new(shape)?;
            let plan =
                ClusterPlan::new(plan).map_err(|e| ModelIoError::Inconsistent(e.to_string()))?;
            if learners.len() != plan.num_clusters() {
                return Err(ModelIoError::Inconsistent(format!(
                    "{} learners for {} clusters",
                    learners.len(),
                    plan.num_clusters()
                )));
            }
            let prompt_tensors = prompts
                .iter()
                .map(|m| m.to_tensor())
                .collect::<Result<Vec<_>, _>>()?;
            let mut learner_tensors = Vec::with_capacity(learners.len());
            for ld in &learners {
                let w1 = ld.w1.to_tensor()?;
                let w2 = ld.w2.to_tensor()?;
                let b1 = Tensor::from_vec(vec![ld.b1.len()], ld.b1.clone())
                    .map_err(|e| ModelIoError::Inconsistent(e.to_string()))?;
                let b2 = Tensor::from_vec(vec![ld.b2.len()], ld.b2.clone())
                    .map_err(|e| ModelIoError::Inconsistent(e.to_string()))?;
                learner_tensors.push([w1, b1, w2, b2]);
            }
            let net = MetaKanNetwork::from_parts(
                shape,
                activation,
                plan,
                prompt_tensors,
                learner_tensors,
            )?;
            if net.prompt_dim() != prompt_dim || net.d_hidden() != d_hidden {
                return Err(ModelIoError::Inconsistent(
                    "declared dims do not match stored tensors".to_string(),
                ));
            }
            Ok(LoadedModel::MetaKan(net))
        }
    }
}

pub fn save_kan(net: &KanNetwork, path: &Path) -> Result<(), ModelIoError> {
    fs::write(path, kan_to_json(net)?)?;
    Ok(())
}

pub fn save_metakan(net: &MetaKanNetwork, path: &Path) -> Result<(), ModelIoError> {
    fs::write(path, metakan_to_json(net)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<LoadedModel, ModelIoError> {
    let json = fs::read_to_string(path)?;
    model_from_json(&json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SplineSpec;

    fn cubic_kind() -> ActivationKind {
        ActivationKind::BSplineSilu(SplineSpec::default_cubic(5).unwrap())
    }

    #[test]
    fn kan_roundtrip_is_byte_identical() {
        let net =
            KanNetwork::new(NetworkShape::new(vec![2, 3, 1]).unwrap(), cubic_kind(), 123).unwrap();
        let json = kan_to_json(&net).unwrap();
        let loaded = match model_from_json(&json).unwrap() {
            LoadedModel::Kan(k) => k,
            _ => panic!("wrong payload"),
        };
        assert_eq!(kan_to_json(&loaded).unwrap(), json);
        let x = [0.31, -0.77];
        assert_eq!(net.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    }

    #[test]
    fn metakan_roundtrip_is_byte_identical() {
        let net = MetaKanNetwork::new(
            NetworkShape::new(vec![2, 4, 3, 1]).unwrap(),
            cubic_kind(),
            2,
            8,
            1,
            9,
        )
        .unwrap();
        let json = metakan_to_json(&net).unwrap();
        let loaded = match model_from_json(&json).unwrap() {
            LoadedModel::MetaKan(m) => m,
            _ => panic!("wrong payload"),
        };
        assert_eq!(metakan_to_json(&loaded).unwrap(), json);
        let x = [0.5, -0.1];
        assert_eq!(net.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    }

    #[test]
    fn rejects_future_version() {
        let json = r#"{"format_version": 99, "model": {"type": "kan", "shape": [1,1], "activation": {"kind": "mexican_hat_wavelet"}, "layers": []}}"#;
        assert!(matches!(
            model_from_json(json),
            Err(ModelIoError::Version(99))
        ));
    }

    #[test]
    fn truncated_json_is_a_parse_error() {
        let net = KanNetwork::zeros(NetworkShape::new(vec![1, 1]).unwrap(), cubic_kind()).unwrap();
        let json = kan_to_json(&net).unwrap();
        let truncated = &json[..json.len() / 2];
        assert!(matches!(
            model_from_json(truncated),
            Err(ModelIoError::Json(_))
        ));
    }
}
