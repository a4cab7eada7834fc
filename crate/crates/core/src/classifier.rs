//! The deployed decision model: a small ReLU network over z-scored features.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::sigmoid;
use crate::dataset::{Dataset, NormStats, Split};
use crate::nn::{Activations, Adam, Mlp};
use crate::scm::{FeatureVector, N_FEATURES};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training split contains a single class")]
    SingleClass,
    #[error("training split is empty")]
    Empty,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model file is inconsistent: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            epochs: 500,
            batch: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the predictions made during the epoch, before each update.
    pub running_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    mlp: Mlp,
    norm: NormStats,
    seed: u64,
}

/// On-disk form.
#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    norm_stats: NormStats,
    seed: u64,
}

const PROBA_FLOOR: f64 = 1e-15;

/// Anything that issues a binary decision on a feature vector.
pub trait Decision {
    fn decide(&self, x: &FeatureVector) -> u8;
}

impl Decision for Classifier {
    fn decide(&self, x: &FeatureVector) -> u8 {
        self.predict(x)
    }
}

impl Classifier {
    pub fn train(dataset: &Dataset, config: &ClassifierConfig) -> Result<(Self, TrainReport), ClassifierError> {
        let train = dataset.indices(Split::Train);
        if train.is_empty() {
            return Err(ClassifierError::Empty);
        }
        let positives = train.iter().filter(|&&i| dataset.individuals[i].label == 1).count();
        if positives == 0 || positives == train.len() {
            return Err(ClassifierError::SingleClass);
        }
        let norm = dataset.norm.clone();
        let inputs: Vec<[f64; N_FEATURES]> = dataset
            .individuals
            .iter()
            .map(|ind| norm.normalize(&ind.x.0))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut sizes = vec![N_FEATURES];
        sizes.extend(&config.hidden);
        sizes.push(1);
        let mut mlp = Mlp::new(&sizes, &mut rng);
        let mut opt = Adam::new(mlp.params().len(), config.lr);
        let mut grads = vec![0.0; mlp.params().len()];
        let mut acts = Activations::default();
        let mut order = train.clone();
        let mut history = Vec::with_capacity(config.epochs);

        for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for batch in order.chunks(config.batch.max(1)) {
                grads.iter_mut().for_each(|g| *g = 0.0);
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let y = f64::from(dataset.individuals[i].label);
                    let z = mlp.forward_cached(&inputs[i], &mut acts)[0];
                    loss_sum += softplus(z) - y * z;
                    correct += usize::from((z >= 0.0) == (y == 1.0));
                    let dz = (sigmoid(z) - y) * scale;
                    mlp.backward(&acts, &[dz], &mut grads);
                }
                opt.step(mlp.params_mut(), &grads);
            }
            history.push(EpochStats {
                epoch,
                mean_loss: loss_sum / train.len() as f64,
                running_accuracy: correct as f64 / train.len() as f64,
            });
        }

        let model = Self {
            mlp,
            norm,
            seed: config.seed,
        };
        let report = TrainReport {
            train_accuracy: model.accuracy(dataset, Split::Train),
            val_accuracy: model.accuracy(dataset, Split::Val),
            history,
        };
        Ok((model, report))
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn logit(&self, x: &FeatureVector) -> f64 {
        self.mlp.forward(&self.norm.normalize(&x.0))[0]
    }

    /// Positive-class probability, strictly inside `(0, 1)`.
    pub fn predict_proba(&self, x: &FeatureVector) -> f64 {
        sigmoid(self.logit(x)).clamp(PROBA_FLOOR, 1.0 - PROBA_FLOOR)
    }

    pub fn predict(&self, x: &FeatureVector) -> u8 {
        u8::from(self.logit(x) >= 0.0)
    }

    /// Probability and its gradient with respect to the raw features.
    pub fn proba_with_gradient(&self, x: &FeatureVector, acts: &mut Activations) -> (f64, [f64; N_FEATURES]) {
        let (z, dz) = self.logit_with_gradient(x, acts);
        let p = sigmoid(z);
        let grad = dz.map(|g| g * p * (1.0 - p));
        (p.clamp(PROBA_FLOOR, 1.0 - PROBA_FLOOR), grad)
    }

    /// Logit and its gradient with respect to the raw features.
    pub fn logit_with_gradient(&self, x: &FeatureVector, acts: &mut Activations) -> (f64, [f64; N_FEATURES]) {
        let z = self.mlp.forward_cached(&self.norm.normalize(&x.0), acts)[0];
        let mut scratch = vec![0.0; self.mlp.params().len()];
        let gin = self.mlp.backward(acts, &[1.0], &mut scratch);
        (z, std::array::from_fn(|i| gin[i] / self.norm.std[i]))
    }

    pub fn accuracy(&self, dataset: &Dataset, split: Split) -> f64 {
        let idx = dataset.indices(split);
        if idx.is_empty() {
            return f64::NAN;
        }
        let correct = idx
            .iter()
            .filter(|&&i| {
                let ind = &dataset.individuals[i];
                self.predict(&ind.x) == ind.label
            })
            .count();
        correct as f64 / idx.len() as f64
    }

    /// Deployment-split individuals the classifier rejects.
    pub fn deployment_pool(&self, dataset: &Dataset) -> Vec<usize> {
        self.negatives(dataset, Split::Deploy)
    }

    pub fn negatives(&self, dataset: &Dataset, split: Split) -> Vec<usize> {
        dataset
            .indices(split)
            .into_iter()
            .filter(|&i| self.predict(&dataset.individuals[i].x) == 0)
            .collect()
    }

    pub fn to_json(&self) -> String {
        let n_layers = self.mlp.sizes().len() - 1;
        let (weights, biases) = (0..n_layers)
            .map(|l| {
                let (w, b) = self.mlp.layer(l);
                (w.to_vec(), b.to_vec())
            })
            .unzip();
        let file = ClassifierFile {
            layer_sizes: self.mlp.sizes().to_vec(),
            weights,
            biases,
            norm_stats: self.norm.clone(),
            seed: self.seed,
        };
        serde_json::to_string_pretty(&file).expect("classifier serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, ClassifierError> {
        let file: ClassifierFile = serde_json::from_str(json)?;
        if file.weights.len() + 1 != file.layer_sizes.len() || file.biases.len() != file.weights.len() {
            return Err(ClassifierError::Shape("layer count mismatch".into()));
        }
        let params = file
            .weights
            .into_iter()
            .zip(file.biases)
            .flat_map(|(w, b)| w.into_iter().chain(b))
            .collect();
        let mlp = Mlp::from_parts(file.layer_sizes, params)
            .ok_or_else(|| ClassifierError::Shape("parameter count mismatch".into()))?;
        if mlp.inputs() != N_FEATURES || mlp.outputs() != 1 {
            return Err(ClassifierError::Shape("expected 7 inputs and 1 output".into()));
        }
        Ok(Self {
            mlp,
            norm: file.norm_stats,
            seed: file.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
