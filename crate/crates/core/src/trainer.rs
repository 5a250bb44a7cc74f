//! Mini-batch Adam training of the entropy/diversity objective.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Mode, Tape, Tensor};
use crate::data::{self, DataError, DomainPairDataset, Sample};
use crate::losses::{self, LossBreakdown, LossError, ObjectiveWeights};
use crate::network::{self, MlpConfig, ModelParams, NetworkError};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss")]
    Diverged { epoch: usize, batch: usize },
    #[error("parameter/gradient shape mismatch on tensor {index}: {params} vs {grads}")]
    Shape {
        index: usize,
        params: usize,
        grads: usize,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Network(NetworkError::Autodiff(e))
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    100
}
fn default_dropout() -> f64 {
    0.5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            beta: 0.0,
            lr: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            dropout_rate: default_dropout(),
            seed: 0,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        ObjectiveWeights::new(self.lambda, self.beta)?;
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam decay rates must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamOptions {
        AdamOptions {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamOptions {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over a list of tensors.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    opts: &AdamOptions,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Shape {
            index: 0,
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(TrainError::Shape {
                index: i,
                params: p.len(),
                grads: g.len(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opts.beta1.powi(t);
    let bc2 = 1.0 - opts.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.values_mut().iter_mut().enumerate() {
            m[j] = opts.beta1 * m[j] + (1.0 - opts.beta1) * g[j];
            v[j] = opts.beta2 * v[j] + (1.0 - opts.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= opts.lr * m_hat / (v_hat.sqrt() + opts.eps);
        }
    }
    Ok(())
}

/// Per-epoch record; serialized as one line of the JSONL training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub target_entropy_estimate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub config: HyperConfig,
    /// Eval-mode mean prediction entropy over the full target set after the last epoch.
    pub final_target_entropy: f64,
    pub loss_history: Vec<EpochLog>,
    pub wall_time: Duration,
}

impl TrainedModel {
    pub fn write_log(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in &self.loss_history {
            serde_json::to_writer(&mut f, rec).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Eval-mode mean prediction entropy over `samples`.
pub fn evaluate_target_entropy(params: &ModelParams, samples: &[Sample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let probs = network::predict_proba(params, &data::features_tensor(&refs))?;
    Ok(losses::mean_row_entropy(&probs))
}

/// Network config actually used for a run: dropout comes from the
/// hyperparameters and the init seed is mixed with the run seed.
pub fn effective_network(net: &MlpConfig, cfg: &HyperConfig) -> MlpConfig {
    MlpConfig {
        dropout_rate: cfg.dropout_rate,
        init_seed: seed::derive_seed(net.init_seed, cfg.seed),
        ..net.clone()
    }
}

/// Trains on the source-train split and the unlabeled target set.
pub fn train_model(
    cfg: &HyperConfig,
    ds: &DomainPairDataset,
    net: &MlpConfig,
) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    if net.input_dim != ds.feature_dim() || net.num_classes != ds.num_classes() {
        return Err(TrainError::Config(format!(
            "network expects {} features and {} classes, dataset has {} and {}",
            net.input_dim,
            net.num_classes,
            ds.feature_dim(),
            ds.num_classes()
        )));
    }
    let start = Instant::now();
    let weights = ObjectiveWeights::new(cfg.lambda, cfg.beta)?;
    let mut params = ModelParams::init(&effective_network(net, cfg))?;
    let mut state = AdamState::new(params.tensors().iter().map(Tensor::len));
    let opts = cfg.adam();
    let mut dropout_rng = seed::rng(cfg.seed, seed::TAG_DROPOUT);
    let batch_seed = seed::derive_seed(cfg.seed, seed::TAG_BATCHES);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let batches = data::epoch_batches(ds, cfg.batch_size, batch_seed, epoch as u64)?;
        let mut sum = LossBreakdown::default();
        for (b, pair) in batches.iter().enumerate() {
            let (xs, ys) = ds.source_train_batch(&pair.source);
            let xt = ds.target_batch(&pair.target);
            let mut tape = Tape::new();
            let vars = params.record(&mut tape);
            let xs = tape.constant(&xs);
            let xt = tape.constant(&xt);
            let diverged = || TrainError::Diverged { epoch, batch: b };
            let src = params
                .forward_on_tape(&mut tape, &vars, xs, Mode::Train, &mut dropout_rng)
                .map_err(|_| diverged())?;
            let tgt = params
                .forward_on_tape(&mut tape, &vars, xt, Mode::Train, &mut dropout_rng)
                .map_err(|_| diverged())?;
            let (total, br) = losses::medm_objective(&mut tape, weights, src.probs, &ys, tgt.probs)
                .map_err(|e| match e {
                    LossError::Autodiff(_) => diverged(),
                    other => other.into(),
                })?;
            if !br.total.is_finite() {
                return Err(diverged());
            }
            let grads = tape.backward(total)?;
            let owned: Vec<Vec<f64>> = vars
                .0
                .iter()
                .zip(params.tensors())
                .map(|(v, t)| grads.get_or_zeros(*v, t.len()))
                .collect();
            let grad_refs: Vec<&[f64]> = owned.iter().map(Vec::as_slice).collect();
            let mut tensors: Vec<&mut Tensor> = params.tensors_mut().iter_mut().collect();
            adam_step(&mut tensors, &grad_refs, &mut state, &opts)?;
            if !params.is_finite() {
                return Err(diverged());
            }
            sum.supervised += br.supervised;
            sum.entropy += br.entropy;
            sum.diversity += br.diversity;
            sum.total += br.total;
        }
        let n = batches.len() as f64;
        let mean = LossBreakdown {
            supervised: sum.supervised / n,
            entropy: sum.entropy / n,
            diversity: sum.diversity / n,
            total: sum.total / n,
        };
        let estimate = evaluate_target_entropy(&params, ds.target())?;
        log::debug!(
            "epoch {epoch}: L_s={:.4} L_e={:.4} L_d={:.4} total={:.4} target_H={estimate:.4}",
            mean.supervised,
            mean.entropy,
            mean.diversity,
            mean.total
        );
        history.push(EpochLog {
            epoch,
            losses: mean,
            target_entropy_estimate: estimate,
        });
    }

    let final_target_entropy = evaluate_target_entropy(&params, ds.target())?;
    Ok(TrainedModel {
        params,
        config: cfg.clone(),
        final_target_entropy,
        loss_history: history,
        wall_time: start.elapsed(),
    })
}

/// Fraction of source-train samples the model classifies correctly (eval mode).
pub fn source_train_accuracy(params: &ModelParams, ds: &DomainPairDataset) -> Result<f64, TrainError> {
    accuracy_on(params, &ds.source_train())
}

pub fn accuracy_on(params: &ModelParams, samples: &[&Sample]) -> Result<f64, TrainError> {
    let probs = network::predict_proba(params, &data::features_tensor(samples))?;
    let correct = samples
        .iter()
        .enumerate()
        .filter(|(i, s)| Some(argmax(probs.row(*i))) == s.label)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
