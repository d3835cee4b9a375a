//! Full-batch gradient descent on weighted binary cross-entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::{self, TransactionRecord};
use crate::gbdt::sigmoid;

use super::{Dense, NnError, NnModel};

#[derive(Clone, Debug, PartialEq)]
pub struct NnTrainConfig {
    pub hidden_layer_size: usize,
    /// Hidden layers of `hidden_layer_size` units each; encrypted evaluation
    /// supports exactly one.
    pub hidden_layers: usize,
    /// Extra weight on the positive-class loss term.
    pub pos_weight: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub undersampling_num_negatives: Option<usize>,
    pub seed: u64,
}

impl Default for NnTrainConfig {
    fn default() -> Self {
        NnTrainConfig {
            hidden_layer_size: 47,
            hidden_layers: 1,
            pos_weight: 1.0,
            epochs: 100,
            learning_rate: 0.05,
            undersampling_num_negatives: None,
            seed: 0,
        }
    }
}

impl NnTrainConfig {
    fn validate(&self) -> Result<(), NnError> {
        if self.hidden_layer_size < 1 || self.hidden_layers < 1 {
            return Err(NnError::Training(
                "need at least one hidden unit and layer".into(),
            ));
        }
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return Err(NnError::Training("pos_weight must be positive".into()));
        }
        if self.epochs < 1 {
            return Err(NnError::Training("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Training("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NnTrainReport {
    /// Training loss evaluated at the start of each epoch.
    pub losses: Vec<f64>,
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-mean[w y log s(z) + (1 - y) log(1 - s(z))]` over logits `z`.
pub fn bce_loss(logits: &[f64], labels: &[u8], pos_weight: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            if y == 1 {
                pos_weight * softplus(-z)
            } else {
                softplus(z)
            }
        })
        .sum();
    total / logits.len() as f64
}

fn check_batch(model: &NnModel, inputs: &[Vec<f64>], labels: &[u8]) -> Result<(), NnError> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(NnError::Shape(format!(
            "{} inputs with {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if let Some(x) = inputs.iter().find(|x| x.len() != model.input_dim()) {
        return Err(NnError::Shape(format!(
            "input has {} values, model expects {}",
            x.len(),
            model.input_dim()
        )));
    }
    Ok(())
}

/// Loss and its gradient in [`NnModel::parameters`] order, by backpropagation.
pub fn loss_and_gradient(
    model: &NnModel,
    inputs: &[Vec<f64>],
    labels: &[u8],
    pos_weight: f64,
) -> Result<(f64, Vec<f64>), NnError> {
    check_batch(model, inputs, labels)?;
    let layers = model.layers();
    let mut grads: Vec<Dense> = layers
        .iter()
        .map(|l| Dense::zeros(l.outputs, l.inputs))
        .collect();
    let n = inputs.len() as f64;
    let mut loss = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        // activations[k] feeds layer k; pre[k] is layer k's affine output
        let mut activations = vec![x.clone()];
        let mut pre = Vec::with_capacity(layers.len());
        for (k, layer) in layers.iter().enumerate() {
            let z = layer.apply(&activations[k]);
            if k + 1 < layers.len() {
                activations.push(z.iter().map(|v| v * v).collect());
            }
            pre.push(z);
        }
        let logit = pre.last().expect("output layer")[0];
        let (sample_loss, dlogit) = if y == 1 {
            (
                pos_weight * softplus(-logit),
                pos_weight * (sigmoid(logit) - 1.0),
            )
        } else {
            (softplus(logit), sigmoid(logit))
        };
        loss += sample_loss;
        let mut delta = vec![dlogit / n];
        for k in (0..layers.len()).rev() {
            let (layer, grad, a) = (&layers[k], &mut grads[k], &activations[k]);
            for (i, &d) in delta.iter().enumerate() {
                grad.bias[i] += d;
                let row = &mut grad.weights[i * layer.inputs..(i + 1) * layer.inputs];
                row.iter_mut().zip(a).for_each(|(g, v)| *g += d * v);
            }
            if k > 0 {
                // through W^T, then the square at layer k - 1
                delta = (0..layer.inputs)
                    .map(|j| {
                        let back: f64 = delta
                            .iter()
                            .enumerate()
                            .map(|(i, d)| d * layer.weight(i, j))
                            .sum();
                        back * 2.0 * pre[k - 1][j]
                    })
                    .collect();
            }
        }
    }
    let flat = grads
        .iter()
        .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
        .collect();
    Ok((loss / n, flat))
}

/// Seeded initialization uniform in `±1/sqrt(fan_in)`.
fn initial_model(widths: &[usize], seed: u64) -> NnModel {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let layers = widths
        .windows(2)
        .map(|w| {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let mut draw = |k: usize| {
                (0..k)
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect::<Vec<f64>>()
            };
            let weights = draw(w[0] * w[1]);
            Dense {
                outputs: w[1],
                inputs: w[0],
                weights,
                bias: draw(w[1]),
            }
        })
        .collect();
    NnModel::from_layers(layers).expect("widths are consistent")
}

pub fn train_nn(records: &[TransactionRecord], cfg: &NnTrainConfig) -> Result<NnModel, NnError> {
    train_nn_with_report(records, cfg).map(|(m, _)| m)
}

/// Trains on standardized features, then folds the standardization into the
/// first layer so the returned model takes raw feature vectors.
pub fn train_nn_with_report(
    records: &[TransactionRecord],
    cfg: &NnTrainConfig,
) -> Result<(NnModel, NnTrainReport), NnError> {
    cfg.validate()?;
    let sampled;
    let records = match cfg.undersampling_num_negatives {
        Some(k) => {
            sampled = data::undersample(records, k, cfg.seed)
                .map_err(|e| NnError::Training(e.to_string()))?;
            &sampled[..]
        }
        None => records,
    };
    let (neg, pos) = data::class_counts(records);
    if neg == 0 || pos == 0 {
        return Err(NnError::Training(
            "training data must contain both classes".into(),
        ));
    }
    let (names, columns) =
        data::feature_columns(records).map_err(|e| NnError::Training(e.to_string()))?;
    let d = names.len();
    let stats: Vec<(f64, f64)> = columns
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64;
            let sd = var.sqrt();
            (mean, if sd > 0.0 { sd } else { 1.0 })
        })
        .collect();
    let inputs: Vec<Vec<f64>> = (0..records.len())
        .map(|r| {
            columns
                .iter()
                .zip(&stats)
                .map(|(c, (m, s))| (c[r] - m) / s)
                .collect()
        })
        .collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();

    let mut widths = vec![d];
    widths.extend(std::iter::repeat_n(cfg.hidden_layer_size, cfg.hidden_layers));
    widths.push(1);
    let mut model = initial_model(&widths, cfg.seed);
    let mut params = model.parameters();
    let mut report = NnTrainReport::default();
    for epoch in 0..cfg.epochs {
        let (loss, grad) = loss_and_gradient(&model, &inputs, &labels, cfg.pos_weight)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(NnError::Divergence { epoch });
        }
        report.losses.push(loss);
        params
            .iter_mut()
            .zip(&grad)
            .for_each(|(p, g)| *p -= cfg.learning_rate * g);
        model.set_parameters(&params)?;
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(NnError::Divergence { epoch: cfg.epochs });
    }
    Ok((
        fold_standardization(model, &stats).with_feature_names(names)?,
        report,
    ))
}

/// `W (x - m) / s + b = (W / s) x + (b - W m / s)`.
fn fold_standardization(model: NnModel, stats: &[(f64, f64)]) -> NnModel {
    let mut layers = model.layers().to_vec();
    let first = &mut layers[0];
    for i in 0..first.outputs {
        let row = &mut first.weights[i * first.inputs..(i + 1) * first.inputs];
        for (w, (m, s)) in row.iter_mut().zip(stats) {
            *w /= s;
            first.bias[i] -= *w * m;
        }
    }
    NnModel::from_layers(layers).expect("shapes unchanged")
}
