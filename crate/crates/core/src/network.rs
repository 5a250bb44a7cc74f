//! Two-part classifier `f(x) = C(F(x))`.
//!
//! `F` is `input → hidden` (relu, dropout) `→ feature`, `C` is a linear head
//! `feature → K` followed by a softmax.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Mode, Tape, Tensor, Var};
use crate::seed;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint tensor `{tensor}`: {message}")]
    Tensor { tensor: String, message: String },
    #[error("checkpoint parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub init_seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_dim: 32,
            feature_dim: 16,
            num_classes: 2,
            dropout_rate: 0.5,
            init_seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(NetworkError::Config("all dimensions must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(NetworkError::Config(format!(
                "need at least two classes, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NetworkError::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Tensor names and shapes in checkpoint order.
    pub fn tensor_shapes(&self) -> [(&'static str, Vec<usize>); 6] {
        [
            ("f.w1", vec![self.input_dim, self.hidden_dim]),
            ("f.b1", vec![self.hidden_dim]),
            ("f.w2", vec![self.hidden_dim, self.feature_dim]),
            ("f.b2", vec![self.feature_dim]),
            ("c.w", vec![self.feature_dim, self.num_classes]),
            ("c.b", vec![self.num_classes]),
        ]
    }
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    count: usize,
    rng: &mut R,
) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..count).map(|_| rng.random_range(-a..a)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: MlpConfig,
    tensors: [Tensor; 6],
}

/// Tape handles for one recording of [`ModelParams`].
#[derive(Debug, Clone, Copy)]
pub struct ParamVars(pub [Var; 6]);

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
    pub log_probs: Var,
    pub probs: Var,
}

impl ModelParams {
    pub fn init(config: &MlpConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = seed::rng(config.init_seed, seed::TAG_INIT);
        let tensors = config.tensor_shapes().map(|(_, shape)| {
            let values = if shape.len() == 2 {
                glorot_uniform(shape[0], shape[1], shape[0] * shape[1], &mut rng)
            } else {
                vec![0.0; shape[0]]
            };
            Tensor::new(shape, values).expect("shape product matches")
        });
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<(), NetworkError> {
        let mut cfg = self.config.clone();
        cfg.dropout_rate = rate;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor; 6] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor; 6] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        self.config
            .tensor_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.tensors.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Zeroes the classifier head so every prediction is uniform.
    pub fn zero_classifier_head(&mut self) {
        for t in &mut self.tensors[4..] {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn record(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(std::array::from_fn(|i| tape.parameter(&self.tensors[i])))
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NetworkError> {
        if x.shape().len() != 2 || x.shape()[1] != self.config.input_dim {
            return Err(AutodiffError::Shape {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.input_dim],
            }
            .into());
        }
        Ok(())
    }

    /// Applies `F` only.
    pub fn features_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, AutodiffError> {
        let [w1, b1, w2, b2, _, _] = vars.0;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, self.config.dropout_rate, mode, rng)?;
        let f = tape.matmul(h, w2)?;
        tape.add_row(f, b2)
    }

    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardVars, AutodiffError> {
        let features = self.features_on_tape(tape, vars, x, mode, rng)?;
        let [_, _, _, _, cw, cb] = vars.0;
        let logits = tape.matmul(features, cw)?;
        let logits = tape.add_row(logits, cb)?;
        let log_probs = tape.log_softmax(logits)?;
        let probs = tape.exp(log_probs)?;
        Ok(ForwardVars {
            features,
            logits,
            log_probs,
            probs,
        })
    }
}

/// Class probabilities, one row per sample.
pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    x: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor, NetworkError> {
    params.check_input(x)?;
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let xv = tape.constant(x);
    let out = params.forward_on_tape(&mut tape, &vars, xv, mode, rng)?;
    Ok(tape.tensor(out.probs))
}

/// Eval-mode probabilities.
pub fn predict_proba(params: &ModelParams, x: &Tensor) -> Result<Tensor, NetworkError> {
    // eval-mode dropout never draws from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward(params, x, Mode::Eval, &mut rng)
}

/// Eval-mode output of the feature extractor `F`.
pub fn extract_features(params: &ModelParams, x: &Tensor) -> Result<Tensor, NetworkError> {
    params.check_input(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let xv = tape.constant(x);
    let f = params.features_on_tape(&mut tape, &vars, xv, Mode::Eval, &mut rng)?;
    Ok(tape.tensor(f))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncodedTensor {
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    config: MlpConfig,
    tensors: BTreeMap<String, EncodedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(name: &str, data: &str) -> Result<Vec<f64>, NetworkError> {
    let bytes = B64.decode(data).map_err(|e| NetworkError::Tensor {
        tensor: name.into(),
        message: format!("bad base64: {e}"),
    })?;
    if bytes.len() % 8 != 0 {
        return Err(NetworkError::Tensor {
            tensor: name.into(),
            message: format!("{} bytes is not a whole number of f64 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Parameters plus optional free-form run metadata as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let tensors = self
            .params
            .named()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    EncodedTensor {
                        shape: t.shape().to_vec(),
                        data: encode(t.values()),
                    },
                )
            })
            .collect();
        let doc = CheckpointDoc {
            config: self.params.config.clone(),
            tensors,
            meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
    }

    /// Parses a checkpoint, checking every tensor's shape against the stored config.
    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        doc.config.validate()?;
        let mut tensors = Vec::with_capacity(6);
        for (name, shape) in doc.config.tensor_shapes() {
            let enc = doc.tensors.get(name).ok_or_else(|| NetworkError::Tensor {
                tensor: name.into(),
                message: "missing".into(),
            })?;
            if enc.shape != shape {
                return Err(NetworkError::Tensor {
                    tensor: name.into(),
                    message: format!("shape {:?} does not match config shape {:?}", enc.shape, shape),
                });
            }
            let values = decode(name, &enc.data)?;
            let t = Tensor::new(shape, values).map_err(|e| NetworkError::Tensor {
                tensor: name.into(),
                message: e.to_string(),
            })?;
            if !t.is_finite() {
                return Err(NetworkError::Tensor {
                    tensor: name.into(),
                    message: "non-finite values".into(),
                });
            }
            tensors.push(t);
        }
        if let Some(extra) = doc.tensors.keys().find(|k| {
            !doc.config.tensor_shapes().iter().any(|(n, _)| n == k)
        }) {
            return Err(NetworkError::Tensor {
                tensor: extra.clone(),
                message: "unexpected tensor".into(),
            });
        }
        let tensors: [Tensor; 6] = tensors.try_into().expect("six tensors");
        Ok(Self {
            params: ModelParams {
                config: doc.config,
                tensors,
            },
            meta: doc.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
