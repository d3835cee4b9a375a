//! Feed-forward classifier with square activations.
//!
//! Hidden layers compute `(W a + b)^2` elementwise; the output layer is a
//! single affine unit whose value is the logit. The square keeps the network
//! a polynomial, so its encrypted evaluation computes the same function.

mod he;
mod train;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ckks::CkksError;
use crate::gbdt::{sigmoid, FeatureMap};

pub use he::{decrypt_logit, encrypt_input, he_forward, rotation_steps, HeOptions, PreparedNn};
pub use train::{
    bce_loss, loss_and_gradient, train_nn, train_nn_with_report, NnTrainConfig, NnTrainReport,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("unsupported depth: {0}")]
    UnsupportedDepth(String),
    #[error("missing feature `{0}`")]
    MissingFeature(String),
    #[error("model JSON error: {0}")]
    Json(String),
    #[error(transparent)]
    Ckks(#[from] CkksError),
}

/// Affine map with `outputs x inputs` row-major weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub outputs: usize,
    pub inputs: usize,
    #[serde(rename = "W")]
    pub weights: Vec<f64>,
    #[serde(rename = "b")]
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(
        outputs: usize,
        inputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, NnError> {
        if outputs == 0 || inputs == 0 {
            return Err(NnError::Shape("layer dimensions must be positive".into()));
        }
        if weights.len() != outputs * inputs || bias.len() != outputs {
            return Err(NnError::Shape(format!(
                "{outputs}x{inputs} layer needs {} weights and {outputs} biases, got {} and {}",
                outputs * inputs,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Dense {
            outputs,
            inputs,
            weights,
            bias,
        })
    }

    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Dense {
            outputs,
            inputs,
            weights: vec![0.0; outputs * inputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.inputs..(i + 1) * self.inputs]
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.inputs + col]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|i| self.row(i).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[i])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NnModel {
    /// Square-activated hidden layers, then the one-output layer.
    layers: Vec<Dense>,
    /// Order of features in the input vector; may be empty for models built
    /// directly from vectors.
    feature_names: Vec<String>,
}

impl NnModel {
    /// One hidden layer of size `b1.len()` over `d` inputs.
    pub fn new(
        d: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    ) -> Result<Self, NnError> {
        let h = b1.len();
        Self::from_layers(vec![
            Dense::new(h, d, w1, b1)?,
            Dense::new(1, h, w2, vec![b2])?,
        ])
    }

    /// Hidden layers followed by the output layer.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, NnError> {
        if layers.len() < 2 {
            return Err(NnError::Shape(
                "need at least one hidden layer and an output layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[1].inputs != pair[0].outputs {
                return Err(NnError::Shape(format!(
                    "layer with {} outputs feeds a layer with {} inputs",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        let out = layers.last().expect("non-empty");
        if out.outputs != 1 {
            return Err(NnError::Shape(format!(
                "output layer has {} units, expected 1",
                out.outputs
            )));
        }
        for l in &layers {
            Dense::new(l.outputs, l.inputs, l.weights.clone(), l.bias.clone())?;
        }
        Ok(NnModel {
            layers,
            feature_names: Vec::new(),
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self, NnError> {
        if !names.is_empty() && names.len() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "{} feature names for {} inputs",
                names.len(),
                self.input_dim()
            )));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// Width of the first hidden layer.
    pub fn hidden_size(&self) -> usize {
        self.layers[0].outputs
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn hidden_layers(&self) -> &[Dense] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn output_layer(&self) -> &Dense {
        self.layers.last().expect("non-empty")
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Widest layer, input included.
    pub fn max_width(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.inputs.max(l.outputs))
            .max()
            .unwrap_or(1)
    }

    pub fn forward_plain(&self, x: &[f64]) -> Result<f64, NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut a = x.to_vec();
        for layer in self.hidden_layers() {
            a = layer.apply(&a).into_iter().map(|z| z * z).collect();
        }
        Ok(self.output_layer().apply(&a)[0])
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, NnError> {
        self.forward_plain(x).map(sigmoid)
    }

    /// Orders a transaction's features as the model's input vector.
    pub fn input_vector(&self, features: &FeatureMap) -> Result<Vec<f64>, NnError> {
        if self.feature_names.is_empty() {
            if features.len() != self.input_dim() {
                return Err(NnError::Shape(format!(
                    "transaction has {} features, model expects {}",
                    features.len(),
                    self.input_dim()
                )));
            }
            return Ok(features.values().copied().collect());
        }
        self.feature_names
            .iter()
            .map(|name| {
                features
                    .get(name)
                    .copied()
                    .ok_or_else(|| NnError::MissingFeature(name.clone()))
            })
            .collect()
    }

    /// All weights and biases, layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<(), NnError> {
        let total: usize = self
            .layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum();
        if params.len() != total {
            return Err(NnError::Shape(format!(
                "{} parameters given, model has {total}",
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weights
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|p| *p = it.next().expect("length checked"));
        }
        Ok(())
    }

    /// JSON form `{d, h, W1, b1, W2, b2, activation}`; deeper models carry
    /// their further hidden layers in `hidden_layers`.
    pub fn to_json(&self) -> Value {
        let first = &self.layers[0];
        let out = self.output_layer();
        let wire = ModelWire {
            d: self.input_dim(),
            h: self.hidden_size(),
            w1: first.weights.clone(),
            b1: first.bias.clone(),
            w2: out.weights.clone(),
            b2: out.bias[0],
            activation: "square".into(),
            hidden_layers: self.layers[1..self.layers.len() - 1].to_vec(),
            feature_names: self.feature_names.clone(),
        };
        serde_json::to_value(wire).expect("model serializes")
    }

    pub fn from_json(value: &Value) -> Result<Self, NnError> {
        let wire: ModelWire =
            serde_json::from_value(value.clone()).map_err(|e| NnError::Json(e.to_string()))?;
        if wire.activation != "square" {
            return Err(NnError::Json(format!(
                "unsupported activation `{}`",
                wire.activation
            )));
        }
        let mut layers = vec![Dense::new(wire.h, wire.d, wire.w1, wire.b1)?];
        layers.extend(wire.hidden_layers);
        let last = layers.last().expect("non-empty").outputs;
        layers.push(Dense::new(1, last, wire.w2, vec![wire.b2])?);
        Self::from_layers(layers)?.with_feature_names(wire.feature_names)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelWire {
    d: usize,
    h: usize,
    #[serde(rename = "W1")]
    w1: Vec<f64>,
    b1: Vec<f64>,
    #[serde(rename = "W2")]
    w2: Vec<f64>,
    b2: f64,
    activation: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    hidden_layers: Vec<Dense>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    feature_names: Vec<String>,
}
