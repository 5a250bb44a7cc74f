//! Two-phase hyperparameter search and label-free model ranking.
//!
//! Phase 1 walks the entropy weights in ascending order and keeps the first
//! one whose trained model drives the target entropy under `epsilon`. Phase 2
//! sweeps the diversity weight at that entropy weight and ranks the resulting
//! models by an importance-weighted validation risk.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::data::{self, DomainPairDataset, Sample};
use crate::evalreport::{self, EvalError};
use crate::network::{self, Checkpoint, MlpConfig, ModelParams, NetworkError};
use crate::seed;
use crate::trainer::{self, adam_step, AdamOptions, AdamState, EpochLog, HyperConfig, TrainError, TrainedModel};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("invalid sweep grid: {0}")]
    Grid(String),
    #[error("every phase-{phase} run diverged")]
    AllDiverged { phase: u8 },
    #[error("source validation set is empty")]
    EmptyValidation,
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("run store i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run store record {path}: {source}")]
    Record {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

type Result<T> = std::result::Result<T, SelectionError>;

fn default_lambdas() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}
fn default_betas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}
fn default_epsilon() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            lambdas: default_lambdas(),
            betas: default_betas(),
            epsilon: default_epsilon(),
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.betas.is_empty() {
            return Err(SelectionError::Grid("lambdas and betas must be non-empty".into()));
        }
        if self.lambdas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(SelectionError::Grid("lambdas must be strictly ascending".into()));
        }
        if self.lambdas.iter().chain(&self.betas).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SelectionError::Grid("weights must be finite and non-negative".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(SelectionError::Grid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub risk: f64,
    pub weight_mean: f64,
    pub control_coefficient: f64,
    pub discriminator_accuracy: f64,
    /// Set when the discriminator output was constant and the plain validation risk was used.
    #[serde(default)]
    pub degenerate: bool,
}

/// Estimates target risk of a model from labeled source-validation samples
/// and unlabeled target samples.
pub trait RiskEstimator: Send + Sync {
    fn name(&self) -> &'static str;
    fn estimate(
        &self,
        params: &ModelParams,
        source_val: &[&Sample],
        target: &[Sample],
        seed: u64,
    ) -> Result<RiskEstimate>;
}

/// `mean(wℓ) + η·mean(w) − η` with `η = −Cov(wℓ, w)/Var(w)`. Returns `(risk, η)`.
pub fn dev_risk_from_weights(weights: &[f64], losses: &[f64]) -> (f64, f64) {
    let n = weights.len() as f64;
    let wl: Vec<f64> = weights.iter().zip(losses).map(|(w, l)| w * l).collect();
    let mean_w = weights.iter().sum::<f64>() / n;
    let mean_wl = wl.iter().sum::<f64>() / n;
    let var_w = weights.iter().map(|w| (w - mean_w).powi(2)).sum::<f64>() / n;
    let cov = wl
        .iter()
        .zip(weights)
        .map(|(a, w)| (a - mean_wl) * (w - mean_w))
        .sum::<f64>()
        / n;
    let eta = if var_w < 1e-12 { 0.0 } else { -cov / var_w };
    (mean_wl + eta * mean_w - eta, eta)
}

pub const WEIGHT_MIN: f64 = 1e-3;
pub const WEIGHT_MAX: f64 = 1e3;

/// Importance-weighted validation risk with a control variate, weights from a
/// logistic domain discriminator on the model's features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevRisk {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub control_variate: bool,
}

impl Default for DevRisk {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            control_variate: true,
        }
    }
}

impl DevRisk {
    /// Same weights, no control variate.
    pub fn importance_weighted() -> Self {
        Self {
            control_variate: false,
            ..Self::default()
        }
    }
}

/// Plain mean 0/1 error on the source validation set.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SourceRisk;

fn zero_one_losses(params: &ModelParams, source_val: &[&Sample]) -> Result<Vec<f64>> {
    let probs = network::predict_proba(params, &data::features_tensor(source_val))?;
    Ok(source_val
        .iter()
        .enumerate()
        .map(|(i, s)| if Some(trainer::argmax(probs.row(i))) == s.label { 0.0 } else { 1.0 })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl RiskEstimator for SourceRisk {
    fn name(&self) -> &'static str {
        "source"
    }

    fn estimate(&self, params: &ModelParams, source_val: &[&Sample], _: &[Sample], _: u64) -> Result<RiskEstimate> {
        if source_val.is_empty() {
            return Err(SelectionError::EmptyValidation);
        }
        Ok(RiskEstimate {
            risk: mean(&zero_one_losses(params, source_val)?),
            weight_mean: 1.0,
            control_coefficient: 0.0,
            discriminator_accuracy: 0.5,
            degenerate: false,
        })
    }
}

impl RiskEstimator for DevRisk {
    fn name(&self) -> &'static str {
        if self.control_variate {
            "dev"
        } else {
            "iwcv"
        }
    }

    fn estimate(
        &self,
        params: &ModelParams,
        source_val: &[&Sample],
        target: &[Sample],
        seed: u64,
    ) -> Result<RiskEstimate> {
        if source_val.is_empty() {
            return Err(SelectionError::EmptyValidation);
        }
        let losses = zero_one_losses(params, source_val)?;
        let f_val = network::extract_features(params, &data::features_tensor(source_val))?;
        let t_refs: Vec<&Sample> = target.iter().collect();
        let f_tgt = network::extract_features(params, &data::features_tensor(&t_refs))?;
        let (d_val, accuracy) = self.discriminate(&f_val, &f_tgt, seed)?;

        let spread = d_val.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            - d_val.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if spread < 1e-12 {
            log::warn!("domain discriminator is constant; using unweighted validation risk");
            return Ok(RiskEstimate {
                risk: mean(&losses),
                weight_mean: 1.0,
                control_coefficient: 0.0,
                discriminator_accuracy: accuracy,
                degenerate: true,
            });
        }
        let ratio = source_val.len() as f64 / target.len() as f64;
        let weights: Vec<f64> = d_val
            .iter()
            .map(|&d| (ratio * d / (1.0 - d)).clamp(WEIGHT_MIN, WEIGHT_MAX))
            .collect();
        let (risk, eta) = if self.control_variate {
            dev_risk_from_weights(&weights, &losses)
        } else {
            (mean(&weights.iter().zip(&losses).map(|(w, l)| w * l).collect::<Vec<_>>()), 0.0)
        };
        Ok(RiskEstimate {
            risk,
            weight_mean: mean(&weights),
            control_coefficient: eta,
            discriminator_accuracy: accuracy,
            degenerate: false,
        })
    }
}

impl DevRisk {
    /// Trains the discriminator and returns `P(target | f)` for each source
    /// validation row plus its accuracy on the pooled training set.
    fn discriminate(&self, f_val: &Tensor, f_tgt: &Tensor, seed: u64) -> Result<(Vec<f64>, f64)> {
        let dim = f_val.cols();
        let (n_v, n_t) = (f_val.rows(), f_tgt.rows());
        let n = n_v + n_t;
        let mut mu = vec![0.0; dim];
        let mut sd = vec![0.0; dim];
        for t in [f_val, f_tgt] {
            for r in 0..t.rows() {
                t.row(r).iter().zip(&mut mu).for_each(|(x, m)| *m += x / n as f64);
            }
        }
        for t in [f_val, f_tgt] {
            for r in 0..t.rows() {
                t.row(r)
                    .iter()
                    .zip(&mu)
                    .zip(&mut sd)
                    .for_each(|((x, m), s)| *s += (x - m).powi(2) / n as f64);
            }
        }
        sd.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
        let mut x = Vec::with_capacity(n * dim);
        for t in [f_val, f_tgt] {
            for r in 0..t.rows() {
                x.extend(t.row(r).iter().zip(&mu).zip(&sd).map(|((v, m), s)| (v - m) / s));
            }
        }
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n_v)).collect();

        let mut rng = seed::rng(seed, seed::TAG_DISCRIMINATOR);
        let mut params = [
            network::glorot_uniform(dim, self.hidden, dim * self.hidden, &mut rng),
            vec![0.0; self.hidden],
            network::glorot_uniform(self.hidden, 2, self.hidden * 2, &mut rng),
            vec![0.0; 2],
        ];
        let shapes = [vec![dim, self.hidden], vec![self.hidden], vec![self.hidden, 2], vec![2]];
        let mut tensors: Vec<Tensor> = params
            .iter_mut()
            .zip(&shapes)
            .map(|(p, s)| Tensor::new(s.clone(), std::mem::take(p)).expect("discriminator shape"))
            .collect();
        let mut state = AdamState::new(tensors.iter().map(Tensor::len));
        let opts = AdamOptions {
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let rows = |idx: &[usize]| -> Tensor {
            let mut v = Vec::with_capacity(idx.len() * dim);
            idx.iter().for_each(|&i| v.extend_from_slice(&x[i * dim..(i + 1) * dim]));
            Tensor::new(vec![idx.len(), dim], v).expect("batch shape")
        };
        let forward = |tape: &mut Tape, ts: &[Tensor], xb: &Tensor| -> std::result::Result<_, crate::autodiff::AutodiffError> {
            let vars: Vec<_> = ts.iter().map(|t| tape.parameter(t)).collect();
            let xv = tape.constant(xb);
            let h = tape.matmul(xv, vars[0])?;
            let h = tape.add_row(h, vars[1])?;
            let h = tape.relu(h)?;
            let z = tape.matmul(h, vars[2])?;
            let z = tape.add_row(z, vars[3])?;
            Ok((vars, tape.log_softmax(z)?))
        };

        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..self.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.batch_size) {
                let mut tape = Tape::new();
                let (vars, logp) = forward(&mut tape, &tensors, &rows(chunk)).map_err(TrainError::from)?;
                let mut mask = vec![0.0; chunk.len() * 2];
                for (r, &i) in chunk.iter().enumerate() {
                    mask[r * 2 + labels[i]] = -1.0 / chunk.len() as f64;
                }
                let m = tape.constant(&Tensor::new(vec![chunk.len(), 2], mask).expect("mask"));
                let nll = tape.mul(logp, m).map_err(TrainError::from)?;
                let loss = tape.sum(nll, None).map_err(TrainError::from)?;
                let g = tape.backward(loss).map_err(TrainError::from)?;
                let grads: Vec<Vec<f64>> = vars
                    .iter()
                    .zip(&tensors)
                    .map(|(v, t)| g.get_or_zeros(*v, t.len()))
                    .collect();
                let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
                let mut ts: Vec<&mut Tensor> = tensors.iter_mut().collect();
                adam_step(&mut ts, &refs, &mut state, &opts)?;
            }
        }

        let all: Vec<usize> = (0..n).collect();
        let mut tape = Tape::new();
        let (_, logp) = forward(&mut tape, &tensors, &rows(&all)).map_err(TrainError::from)?;
        let lp = tape.value(logp);
        let p_target: Vec<f64> = (0..n).map(|i| lp[i * 2 + 1].exp()).collect();
        let correct = p_target
            .iter()
            .zip(&labels)
            .filter(|(p, &y)| usize::from(**p > 0.5) == y)
            .count();
        Ok((p_target[..n_v].to_vec(), correct as f64 / n as f64))
    }
}

/// Convenience wrapper for the default estimator.
pub fn dev_get_risk(
    params: &ModelParams,
    source_val: &[&Sample],
    target: &[Sample],
    seed: u64,
) -> Result<RiskEstimate> {
    DevRisk::default().estimate(params, source_val, target, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Lambda,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed { final_target_entropy: f64 },
    Diverged { message: String },
}

/// Manifest entry for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub phase: Phase,
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
    pub config_hash: String,
    #[serde(flatten)]
    pub status: RunStatus,
    pub log_path: Option<String>,
    pub checkpoint_path: Option<String>,
    pub risk: Option<RiskEstimate>,
    /// Reporting only; never consulted by selection.
    pub target_accuracy: Option<f64>,
}

impl RunRecord {
    pub fn final_target_entropy(&self) -> Option<f64> {
        match self.status {
            RunStatus::Completed { final_target_entropy } => Some(final_target_entropy),
            RunStatus::Diverged { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub estimator: String,
    pub grid: SweepGrid,
    pub dataset_fingerprint: String,
    pub lambda_star: f64,
    /// No grid value met the entropy threshold; `lambda_star` is the argmin instead.
    pub lambda_fallback: bool,
    pub phase1: Vec<RunRecord>,
    pub phase2: Vec<RunRecord>,
    pub selected_beta: f64,
    pub selected_config_hash: String,
    pub selected_checkpoint: Option<String>,
}

impl SweepResult {
    pub fn selected(&self) -> &RunRecord {
        self.phase2
            .iter()
            .find(|r| r.config_hash == self.selected_config_hash)
            .expect("selected run is in phase 2")
    }

    pub fn training_count(&self) -> usize {
        self.phase1.len() + self.phase2.len()
    }

    pub fn to_manifest_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest_json()).map_err(|source| SelectionError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| SelectionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| SelectionError::Record {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Index of the first entropy `≤ epsilon` scanning in order, evaluating lazily.
/// Falls back to the argmin over all finite entropies with `fallback = true`.
pub fn first_qualifying_lambda(
    count: usize,
    epsilon: f64,
    mut entropy_at: impl FnMut(usize) -> Option<f64>,
) -> Option<(usize, bool)> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..count {
        let Some(h) = entropy_at(i) else { continue };
        if h <= epsilon {
            return Some((i, false));
        }
        if best.is_none_or(|(_, b)| h < b) {
            best = Some((i, h));
        }
    }
    best.map(|(i, _)| (i, true))
}

/// Index of the smallest risk, ties going to the smaller β.
pub fn argmin_risk(candidates: &[(f64, f64)]) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .map(|(i, _)| i)
}

/// Filesystem layout `runs/<config-hash>/{checkpoint.json, log.jsonl, run.json}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStore {
    root: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredRun {
    config: HyperConfig,
    network: MlpConfig,
    status: RunStatus,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn relative_dir(hash: &str) -> String {
        format!("runs/{hash}")
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SelectionError + '_ {
        move |source| SelectionError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn save(&self, hash: &str, net: &MlpConfig, outcome: &std::result::Result<TrainedModel, String>, cfg: &HyperConfig) -> Result<()> {
        let dir = self.root.join(Self::relative_dir(hash));
        fs::create_dir_all(&dir).map_err(Self::io(&dir))?;
        let status = match outcome {
            Ok(m) => {
                m.write_log(&dir.join("log.jsonl"))?;
                Checkpoint {
                    params: m.params.clone(),
                    meta: Some(serde_json::json!({
                        "config": cfg,
                        "final_target_entropy": m.final_target_entropy,
                    })),
                }
                .save(&dir.join("checkpoint.json"))?;
                RunStatus::Completed {
                    final_target_entropy: m.final_target_entropy,
                }
            }
            Err(msg) => RunStatus::Diverged { message: msg.clone() },
        };
        let rec = StoredRun {
            config: cfg.clone(),
            network: net.clone(),
            status,
        };
        let path = dir.join("run.json");
        fs::write(&path, serde_json::to_string_pretty(&rec).expect("run record serializes"))
            .map_err(Self::io(&path))
    }

    fn load(&self, hash: &str) -> Result<Option<std::result::Result<TrainedModel, String>>> {
        let dir = self.root.join(Self::relative_dir(hash));
        let path = dir.join("run.json");
        let Ok(text) = fs::read_to_string(&path) else {
            return Ok(None);
        };
        let rec: StoredRun = serde_json::from_str(&text).map_err(|source| SelectionError::Record {
            path: path.display().to_string(),
            source,
        })?;
        match rec.status {
            RunStatus::Diverged { message } => Ok(Some(Err(message))),
            RunStatus::Completed { final_target_entropy } => {
                let ckpt = Checkpoint::load(&dir.join("checkpoint.json"))?;
                let log_path = dir.join("log.jsonl");
                let log = fs::read_to_string(&log_path).map_err(Self::io(&log_path))?;
                let loss_history = log
                    .lines()
                    .map(serde_json::from_str::<EpochLog>)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|source| SelectionError::Record {
                        path: log_path.display().to_string(),
                        source,
                    })?;
                Ok(Some(Ok(TrainedModel {
                    params: ckpt.params,
                    config: rec.config,
                    final_target_entropy,
                    loss_history,
                    wall_time: Default::default(),
                })))
            }
        }
    }
}

/// Content hash of everything that determines a run's outcome.
pub fn config_hash(cfg: &HyperConfig, net: &MlpConfig, dataset_fingerprint: &str) -> String {
    let doc = serde_json::json!({
        "hyper": cfg,
        "network": net,
        "dataset": dataset_fingerprint,
    });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    hex::encode(digest)[..16].to_string()
}

/// Orchestrates the search over one dataset.
pub struct Sweep<'a> {
    pub grid: SweepGrid,
    pub network: MlpConfig,
    pub base: HyperConfig,
    pub workers: usize,
    pub store: Option<RunStore>,
    pub resume: bool,
    pub estimator: Arc<dyn RiskEstimator>,
    ds: &'a DomainPairDataset,
    fingerprint: String,
}

struct RunOutcome {
    record: RunRecord,
    model: Option<TrainedModel>,
}

impl<'a> Sweep<'a> {
    pub fn new(ds: &'a DomainPairDataset, grid: SweepGrid, network: MlpConfig, base: HyperConfig) -> Self {
        Self {
            grid,
            network,
            base,
            workers: 1,
            store: None,
            resume: false,
            estimator: Arc::new(DevRisk::default()),
            ds,
            fingerprint: ds.fingerprint(),
        }
    }

    fn run_one(&self, phase: Phase, lambda: f64, beta: f64, seed: u64) -> Result<RunOutcome> {
        let cfg = HyperConfig {
            lambda,
            beta,
            seed,
            ..self.base.clone()
        };
        let hash = config_hash(&cfg, &self.network, &self.fingerprint);
        let stored = match (&self.store, self.resume) {
            (Some(store), true) => store.load(&hash)?,
            _ => None,
        };
        let outcome = match stored {
            Some(o) => {
                log::info!("resuming {hash} (lambda={lambda}, beta={beta})");
                o
            }
            None => {
                log::info!("training lambda={lambda} beta={beta} seed={seed}");
                let o = match trainer::train_model(&cfg, self.ds, &self.network) {
                    Ok(m) => Ok(m),
                    Err(e @ TrainError::Diverged { .. }) => {
                        log::warn!("run {hash} diverged: {e}");
                        Err(e.to_string())
                    }
                    Err(e) => return Err(e.into()),
                };
                if let Some(store) = &self.store {
                    store.save(&hash, &self.network, &o, &cfg)?;
                }
                o
            }
        };
        let dir = RunStore::relative_dir(&hash);
        let (status, model) = match outcome {
            Ok(m) => (
                RunStatus::Completed {
                    final_target_entropy: m.final_target_entropy,
                },
                Some(m),
            ),
            Err(message) => (RunStatus::Diverged { message }, None),
        };
        let persisted = self.store.is_some() && model.is_some();
        Ok(RunOutcome {
            record: RunRecord {
                phase,
                lambda,
                beta,
                seed,
                config_hash: hash,
                status,
                log_path: persisted.then(|| format!("{dir}/log.jsonl")),
                checkpoint_path: persisted.then(|| format!("{dir}/checkpoint.json")),
                risk: None,
                target_accuracy: None,
            },
            model,
        })
    }

    fn accuracy(&self, params: &ModelParams) -> Result<Option<f64>> {
        if !self.ds.has_target_truth() {
            return Ok(None);
        }
        Ok(Some(evalreport::evaluate(params, self.ds)?.overall_accuracy))
    }

    /// Phase 1. Returns `(lambda_star, fallback, records)`.
    pub fn select_lambda(&self) -> Result<(f64, bool, Vec<RunRecord>)> {
        self.grid.validate()?;
        let mut records = Vec::new();
        let mut failure = None;
        let pick = first_qualifying_lambda(self.grid.lambdas.len(), self.grid.epsilon, |i| {
            if failure.is_some() {
                return None;
            }
            match self.run_one(Phase::Lambda, self.grid.lambdas[i], 0.0, self.base.seed) {
                Ok(mut out) => {
                    if let Some(m) = &out.model {
                        match self.accuracy(&m.params) {
                            Ok(a) => out.record.target_accuracy = a,
                            Err(e) => failure = Some(e),
                        }
                    }
                    let h = out.record.final_target_entropy();
                    records.push(out.record);
                    h
                }
                Err(e) => {
                    failure = Some(e);
                    None
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let (i, fallback) = pick.ok_or(SelectionError::AllDiverged { phase: 1 })?;
        if fallback {
            log::warn!(
                "no lambda reached target entropy <= {}; using argmin lambda={}",
                self.grid.epsilon,
                self.grid.lambdas[i]
            );
        }
        Ok((self.grid.lambdas[i], fallback, records))
    }

    /// Phase 2 plus risk estimation; models come back in grid order.
    fn sweep_beta(&self, lambda_star: f64) -> Result<Vec<(RunRecord, Option<TrainedModel>)>> {
        let source_val = self.ds.source_val();
        let job = |&beta: &f64| -> Result<(RunRecord, Option<TrainedModel>)> {
            let seed = seed::seed_for_value(self.base.seed, beta);
            let mut out = self.run_one(Phase::Beta, lambda_star, beta, seed)?;
            if let Some(m) = &out.model {
                out.record.risk = Some(self.estimator.estimate(&m.params, &source_val, self.ds.target(), seed)?);
                out.record.target_accuracy = self.accuracy(&m.params)?;
            }
            Ok((out.record, out.model))
        };
        if self.workers <= 1 {
            return self.grid.betas.iter().map(job).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| SelectionError::Pool(e.to_string()))?;
        pool.install(|| self.grid.betas.par_iter().map(job).collect())
    }

    /// Full search. The selected model's parameters are returned alongside the manifest.
    pub fn run(&self) -> Result<(SweepResult, TrainedModel)> {
        self.grid.validate()?;
        let (lambda_star, lambda_fallback, phase1) = self.select_lambda()?;
        let runs = self.sweep_beta(lambda_star)?;
        let candidates: Vec<(usize, (f64, f64))> = runs
            .iter()
            .enumerate()
            .filter_map(|(i, (r, _))| r.risk.map(|k| (i, (r.beta, k.risk))))
            .collect();
        let scores: Vec<(f64, f64)> = candidates.iter().map(|c| c.1).collect();
        let best = argmin_risk(&scores).ok_or(SelectionError::AllDiverged { phase: 2 })?;
        let (records, mut models): (Vec<RunRecord>, Vec<Option<TrainedModel>>) = runs.into_iter().unzip();
        let winner = candidates[best].0;
        let model = models[winner].take().expect("ranked runs have models");
        let selected = &records[winner];
        Ok((
            SweepResult {
                estimator: self.estimator.name().to_string(),
                grid: self.grid.clone(),
                dataset_fingerprint: self.fingerprint.clone(),
                lambda_star,
                lambda_fallback,
                selected_beta: selected.beta,
                selected_config_hash: selected.config_hash.clone(),
                selected_checkpoint: selected.checkpoint_path.clone(),
                phase1,
                phase2: records,
            },
            model,
        ))
    }
}

/// Runs the full search with default options (single worker, no store).
pub fn run_algorithm1(
    grid: &SweepGrid,
    ds: &DomainPairDataset,
    net: &MlpConfig,
    base: &HyperConfig,
) -> Result<SweepResult> {
    Ok(Sweep::new(ds, grid.clone(), net.clone(), base.clone()).run()?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_qualifier_rule() {
        let h = [0.5, 0.3, 0.19, 0.01];
        assert_eq!(first_qualifying_lambda(4, 0.2, |i| Some(h[i])), Some((2, false)));
    }

    #[test]
    fn early_break_evaluates_once() {
        let mut calls = 0;
        let r = first_qualifying_lambda(10, 0.2, |_| {
            calls += 1;
            Some(0.05)
        });
        assert_eq!(r, Some((0, false)));
        assert_eq!(calls, 1);
    }

    #[test]
    fn fallback_is_flagged_argmin_and_skips_diverged() {
        let h = [Some(0.9), None, Some(0.4), Some(0.6)];
        assert_eq!(first_qualifying_lambda(4, 0.2, |i| h[i]), Some((2, true)));
        assert_eq!(first_qualifying_lambda(2, 0.2, |_| None), None);
    }

    #[test]
    fn risk_ties_go_to_smaller_beta_regardless_of_order() {
        let a = [(0.4, 0.1), (0.2, 0.1), (0.0, 0.3)];
        assert_eq!(a[argmin_risk(&a).unwrap()].0, 0.2);
        let b = [(0.0, 0.3), (0.2, 0.1), (0.4, 0.1)];
        assert_eq!(b[argmin_risk(&b).unwrap()].0, 0.2);
    }

    #[test]
    fn unit_weights_reduce_to_plain_risk() {
        let l = [0.0, 1.0, 1.0, 0.0, 1.0];
        let (r, eta) = dev_risk_from_weights(&[1.0; 5], &l);
        assert_eq!(eta, 0.0);
        assert!((r - 0.6).abs() < 1e-15);
    }

    #[test]
    fn constant_loss_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let w: Vec<f64> = (0..40).map(|_| rng.random_range(1e-3..50.0)).collect();
            let c = rng.random_range(0.0..2.0);
            let (r, eta) = dev_risk_from_weights(&w, &vec![c; 40]);
            assert!((r - c).abs() < 1e-10, "{r} vs {c}");
            assert!((eta + c).abs() < 1e-9);
        }
    }

    #[test]
    fn control_variate_matches_hand_computation() {
        // w = [1, 3], ℓ = [0, 1]: wℓ = [0, 3], Cov = 1.5, Var = 1, η = −1.5
        let (r, eta) = dev_risk_from_weights(&[1.0, 3.0], &[0.0, 1.0]);
        assert_eq!(eta, -1.5);
        assert!((r - (1.5 - 1.5 * 2.0 + 1.5)).abs() < 1e-15);
    }

    #[test]
    fn grid_validation() {
        assert!(SweepGrid::default().validate().is_ok());
        assert_eq!(SweepGrid::default().lambdas.len(), 10);
        assert_eq!(SweepGrid::default().betas.len(), 11);
        let bad = SweepGrid {
            lambdas: vec![0.2, 0.1],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SweepGrid {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn tiny() -> (DomainPairDataset, MlpConfig, HyperConfig) {
        let mut spec = GeneratorSpec::blobs(3, 150, 0.6, 5);
        spec.rotation_deg = 15.0;
        let ds = generate(&spec).unwrap();
        let net = MlpConfig {
            input_dim: 2,
            hidden_dim: 16,
            feature_dim: 8,
            num_classes: 3,
            dropout_rate: 0.0,
            init_seed: 0,
        };
        let base = HyperConfig {
            lr: 5e-3,
            epochs: 4,
            seed: 1,
            dropout_rate: 0.0,
            ..Default::default()
        };
        (ds, net, base)
    }

    #[test]
    fn single_point_grid_trains_twice() {
        let (ds, net, base) = tiny();
        let grid = SweepGrid {
            lambdas: vec![0.5],
            betas: vec![0.0],
            epsilon: 0.2,
        };
        let r = run_algorithm1(&grid, &ds, &net, &base).unwrap();
        assert_eq!(r.training_count(), 2);
        assert_eq!(r.lambda_star, 0.5);
        assert_eq!(r.selected_beta, 0.0);
        assert!(r.phase2.iter().all(|p| p.lambda == r.lambda_star));
        assert_ne!(r.phase1[0].seed, r.phase2[0].seed);
    }

    #[test]
    fn selection_is_invariant_to_beta_order() {
        let (ds, net, base) = tiny();
        let mk = |betas: Vec<f64>| SweepGrid {
            lambdas: vec![0.3],
            betas,
            epsilon: 0.2,
        };
        let a = run_algorithm1(&mk(vec![0.0, 0.5, 1.0]), &ds, &net, &base).unwrap();
        let b = run_algorithm1(&mk(vec![1.0, 0.0, 0.5]), &ds, &net, &base).unwrap();
        assert_eq!(a.selected_beta, b.selected_beta);
        let risks = |r: &SweepResult| {
            let mut v: Vec<(u64, u64)> = r
                .phase2
                .iter()
                .map(|p| (p.beta.to_bits(), p.risk.unwrap().risk.to_bits()))
                .collect();
            v.sort();
            v
        };
        assert_eq!(risks(&a), risks(&b));
    }

    #[test]
    fn workers_do_not_change_results_and_resume_skips_training() {
        let (ds, net, base) = tiny();
        let grid = SweepGrid {
            lambdas: vec![0.1, 0.2],
            betas: vec![0.0, 0.3, 0.6, 0.9],
            epsilon: 0.2,
        };
        let dir = tempfile::tempdir().unwrap();
        let mut s = Sweep::new(&ds, grid.clone(), net.clone(), base.clone());
        s.store = Some(RunStore::new(dir.path()));
        let (a, _) = s.run().unwrap();
        s.workers = 4;
        s.store = None;
        let (b, _) = s.run().unwrap();
        let strip = |r: &SweepResult| {
            let mut r = r.clone();
            for p in r.phase1.iter_mut().chain(r.phase2.iter_mut()) {
                p.log_path = None;
                p.checkpoint_path = None;
            }
            r.selected_checkpoint = None;
            r
        };
        assert_eq!(strip(&a), strip(&b));

        // poison the stored phase-1 model's entropy; resume must read it back instead of retraining
        let hash = &a.phase1[0].config_hash;
        let run_json = dir.path().join(format!("runs/{hash}/run.json"));
        let text = fs::read_to_string(&run_json).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["status"]["final_target_entropy"] = serde_json::json!(0.0);
        fs::write(&run_json, v.to_string()).unwrap();
        let mut s = Sweep::new(&ds, grid, net, base);
        s.store = Some(RunStore::new(dir.path()));
        s.resume = true;
        let (c, _) = s.run().unwrap();
        assert_eq!(c.phase1.len(), 1);
        assert_eq!(c.phase1[0].final_target_entropy(), Some(0.0));
        assert_eq!(c.lambda_star, 0.1);
    }

    #[test]
    fn stored_paths_are_relative() {
        let (ds, net, base) = tiny();
        let grid = SweepGrid {
            lambdas: vec![1.0],
            betas: vec![0.2],
            epsilon: 0.2,
        };
        let dir = tempfile::tempdir().unwrap();
        let mut s = Sweep::new(&ds, grid, net, base);
        s.store = Some(RunStore::new(dir.path()));
        let (r, _) = s.run().unwrap();
        let ck = r.selected_checkpoint.as_deref().unwrap();
        assert!(ck.starts_with("runs/"));
        assert!(dir.path().join(ck).exists());
        assert!(dir.path().join(r.phase2[0].log_path.as_deref().unwrap()).exists());
    }

    #[test]
    fn degenerate_discriminator_falls_back() {
        let (ds, net, _) = tiny();
        let mut p = ModelParams::init(&net).unwrap();
        // zero first layer: every feature vector equals relu(b1)·w2 + b2 = b2 → identical outputs
        p.tensors_mut()[0].values_mut().iter_mut().for_each(|v| *v = 0.0);
        let val = ds.source_val();
        let r = dev_get_risk(&p, &val, ds.target(), 0).unwrap();
        assert!(r.degenerate);
        let plain = SourceRisk.estimate(&p, &val, ds.target(), 0).unwrap();
        assert_eq!(r.risk, plain.risk);
    }

    #[test]
    fn estimators_report_names() {
        assert_eq!(DevRisk::default().name(), "dev");
        assert_eq!(DevRisk::importance_weighted().name(), "iwcv");
        assert_eq!(SourceRisk.name(), "source");
    }

    #[test]
    fn config_hash_depends_on_every_input() {
        let (ds, net, base) = tiny();
        let fp = ds.fingerprint();
        let h = config_hash(&base, &net, &fp);
        assert_eq!(h, config_hash(&base, &net, &fp));
        let other = HyperConfig { beta: 0.1, ..base.clone() };
        assert_ne!(h, config_hash(&other, &net, &fp));
        assert_ne!(h, config_hash(&base, &net, "x"));
    }

    #[test]
    fn truth_is_not_reachable_from_training_or_selection() {
        for (name, src) in [
            ("trainer", include_str!("trainer.rs")),
            ("selection", include_str!("selection.rs")),
        ] {
            let needles = [concat!(".target", "_truth("), concat!(".rev", "eal(")];
            for n in needles {
                assert!(!src.contains(n), "{name} touches {n}");
            }
        }
    }
}
