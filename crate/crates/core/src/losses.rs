//! Loss algebra for entropy minimization with diversity maximization.
//!
//! All logarithms are natural. Probabilities are clamped to [`LOG_FLOOR`]
//! before any logarithm so saturated softmax rows yield finite entropies.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

pub const LOG_FLOOR: f64 = 1e-12;

/// Target-domain class counts of the VisDA-2017 validation split.
pub const VISDA_TARGET_COUNTS: [u64; 12] = [
    3646, 3475, 4690, 10401, 4691, 2075, 5796, 4000, 4549, 2281, 4236, 5548,
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("label {label} at position {position} is outside [0, {classes})")]
    Label {
        position: usize,
        label: usize,
        classes: usize,
    },
    #[error("{0} rows of probabilities but {1} labels")]
    LabelCount(usize, usize),
    #[error("weighting factor {name} must be non-negative, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("class counts must be positive, got {0} at index {1}")]
    Count(u64, usize),
    #[error("not a probability distribution: {0}")]
    NotSimplex(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CategoryDistribution(Vec<f64>);

impl CategoryDistribution {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(LossError::NotSimplex("empty".into()));
        }
        if let Some(v) = q.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(LossError::NotSimplex(format!("entry {v}")));
        }
        let s: f64 = q.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(LossError::NotSimplex(format!("entries sum to {s}")));
        }
        Ok(Self(q))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(LossError::Count(c, i));
            }
        }
        let n: u64 = counts.iter().sum();
        Self::new(counts.iter().map(|&c| c as f64 / n as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.0)
    }

    pub fn max_share(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<f64>> for CategoryDistribution {
    type Error = LossError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CategoryDistribution> for Vec<f64> {
    fn from(q: CategoryDistribution) -> Self {
        q.0
    }
}

/// Per-term values of the objective for one batch (or an average of batches).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_s")]
    pub supervised: f64,
    #[serde(rename = "L_e")]
    pub entropy: f64,
    #[serde(rename = "L_d")]
    pub diversity: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl ObjectiveWeights {
    pub fn new(lambda: f64, beta: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(LossError::NegativeWeight {
                name: "lambda",
                value: lambda,
            });
        }
        if !(beta >= 0.0) {
            return Err(LossError::NegativeWeight {
                name: "beta",
                value: beta,
            });
        }
        Ok(Self { lambda, beta })
    }
}

/// Shannon entropy of a probability vector with clamped logarithms.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.max(LOG_FLOOR).ln()).sum::<f64>()
}

/// Mean row entropy of a `B × K` probability matrix.
pub fn mean_row_entropy(probs: &Tensor) -> f64 {
    let b = probs.rows();
    (0..b).map(|r| entropy(probs.row(r))).sum::<f64>() / b as f64
}

/// Column means of a `B × K` probability matrix.
pub fn column_means(probs: &Tensor) -> Vec<f64> {
    let (b, k) = (probs.rows(), probs.cols());
    let mut q = vec![0.0; k];
    for r in 0..b {
        q.iter_mut().zip(probs.row(r)).for_each(|(q, p)| *q += p);
    }
    q.iter_mut().for_each(|q| *q /= b as f64);
    q
}

fn dims(tape: &Tape, probs: Var) -> Result<(usize, usize)> {
    match tape.shape(probs) {
        [b, k] => Ok((*b, *k)),
        s => Err(AutodiffError::Shape {
            op: "loss",
            lhs: s.to_vec(),
            rhs: vec![],
        }
        .into()),
    }
}

/// Mean cross-entropy of `probs` against integer labels.
pub fn supervised_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = dims(tape, probs)?;
    if labels.len() != b {
        return Err(LossError::LabelCount(b, labels.len()));
    }
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(LossError::Label {
                position: i,
                label: y,
                classes: k,
            });
        }
        onehot[i * k + y] = 1.0;
    }
    let mask = tape.constant(&Tensor::new(vec![b, k], onehot)?);
    let logp = tape.log_clamped(probs, LOG_FLOOR)?;
    let picked = tape.mul(logp, mask)?;
    let s = tape.sum(picked, None)?;
    Ok(tape.scale(s, -1.0 / b as f64)?)
}

/// Mean per-row prediction entropy.
pub fn entropy_loss(tape: &mut Tape, probs: Var) -> Result<Var> {
    let (b, _) = dims(tape, probs)?;
    let logp = tape.log_clamped(probs, LOG_FLOOR)?;
    let plogp = tape.mul(probs, logp)?;
    let s = tape.sum(plogp, None)?;
    Ok(tape.scale(s, -1.0 / b as f64)?)
}

/// Batch-mean prediction vector, shape `[K]`.
pub fn category_distribution(tape: &mut Tape, probs: Var) -> Result<Var> {
    dims(tape, probs)?;
    Ok(tape.mean(probs, Some(0))?)
}

/// Entropy of the batch-mean prediction vector.
pub fn diversity_loss(tape: &mut Tape, probs: Var) -> Result<Var> {
    let q = category_distribution(tape, probs)?;
    let logq = tape.log_clamped(q, LOG_FLOOR)?;
    let qlogq = tape.mul(q, logq)?;
    let s = tape.sum(qlogq, None)?;
    Ok(tape.scale(s, -1.0)?)
}

/// `L_s + λ·L_e − β·L_d`. With `β = 0` this is the entropy-minimization-only objective.
///
/// Terms whose weight is zero are evaluated for the breakdown but kept out of
/// the returned graph, so they contribute nothing to any gradient.
pub fn medm_objective(
    tape: &mut Tape,
    weights: ObjectiveWeights,
    source_probs: Var,
    source_labels: &[usize],
    target_probs: Var,
) -> Result<(Var, LossBreakdown)> {
    let weights = ObjectiveWeights::new(weights.lambda, weights.beta)?;
    let ls = supervised_loss(tape, source_probs, source_labels)?;
    let le = entropy_loss(tape, target_probs)?;
    let ld = diversity_loss(tape, target_probs)?;

    let mut total = ls;
    if weights.lambda > 0.0 {
        let t = tape.scale(le, weights.lambda)?;
        total = tape.add(total, t)?;
    }
    if weights.beta > 0.0 {
        let t = tape.scale(ld, -weights.beta)?;
        total = tape.add(total, t)?;
    }
    let breakdown = LossBreakdown {
        supervised: tape.scalar_value(ls),
        entropy: tape.scalar_value(le),
        diversity: tape.scalar_value(ld),
        total: tape.scalar_value(total),
    };
    Ok((total, breakdown))
}

/// Natural-log entropy of the distribution given by positive class counts.
pub fn distribution_entropy(counts: &[u64]) -> Result<f64> {
    Ok(CategoryDistribution::from_counts(counts)?.entropy())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub batches: usize,
}

/// Monte-Carlo estimate of the expected batch diversity `E_T[H(q̂(T))]` over
/// batches of `batch_size` rows drawn uniformly without replacement.
pub fn expected_batch_diversity<R: Rng + ?Sized>(
    probs: &Tensor,
    batch_size: usize,
    batches: usize,
    rng: &mut R,
) -> MonteCarloEstimate {
    let n = probs.rows();
    let k = probs.cols();
    let b = batch_size.clamp(1, n);
    let mut values = Vec::with_capacity(batches);
    let mut q = vec![0.0; k];
    for _ in 0..batches {
        q.iter_mut().for_each(|v| *v = 0.0);
        for i in index::sample(rng, n, b) {
            q.iter_mut().zip(probs.row(i)).for_each(|(q, p)| *q += p);
        }
        q.iter_mut().for_each(|v| *v /= b as f64);
        values.push(entropy(&q));
    }
    summarize(&values)
}

pub(crate) fn summarize(values: &[f64]) -> MonteCarloEstimate {
    let m = values.len();
    if m == 0 {
        return MonteCarloEstimate {
            mean: 0.0,
            std_error: 0.0,
            batches: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    let var = if m > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    MonteCarloEstimate {
        mean,
        std_error: (var / m as f64).sqrt(),
        batches: m,
    }
}
