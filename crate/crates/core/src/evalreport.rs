//! Label-aware evaluation and report files.
//!
//! This is the only module that reads target ground truth.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::DomainPairDataset;
use crate::losses::{self, CategoryDistribution, LossError};
use crate::network::{self, ModelParams, NetworkError};
use crate::seed;
use crate::selection::{RiskEstimate, SweepResult};
use crate::trainer::{argmax, HyperConfig};

pub const DIVERSITY_BATCHES: usize = 500;
pub const DIVERSITY_BATCH_SIZE: usize = 32;
const DIVERSITY_SEED: u64 = 0x5EED;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("target truth required")]
    MissingTruth,
    #[error("model expects {expected} features/{classes} classes, dataset has {found}/{found_classes}")]
    Mismatch {
        expected: usize,
        classes: usize,
        found: usize,
        found_classes: usize,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("report i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    /// Zero for classes absent from the target truth.
    pub per_class_accuracy: Vec<f64>,
    pub class_support: Vec<usize>,
    /// Mean over classes present in the target truth.
    pub mean_class_accuracy: f64,
    pub inferred_q_star: CategoryDistribution,
    pub inferred_entropy: f64,
    pub max_class_share: f64,
    pub expected_batch_diversity: f64,
    pub expected_batch_diversity_std_error: f64,
    pub true_class_distribution: CategoryDistribution,
}

/// Eval-mode predictions on the full target set scored against the sealed truth.
pub fn evaluate(params: &ModelParams, ds: &DomainPairDataset) -> Result<EvalReport, EvalError> {
    let truth = ds.target_truth().ok_or(EvalError::MissingTruth)?;
    let cfg = params.config();
    if cfg.input_dim != ds.feature_dim() || cfg.num_classes != ds.num_classes() {
        return Err(EvalError::Mismatch {
            expected: cfg.input_dim,
            classes: cfg.num_classes,
            found: ds.feature_dim(),
            found_classes: ds.num_classes(),
        });
    }
    let probs = network::predict_proba(params, &ds.target_features())?;
    report_from_probs(&probs, truth)
}

pub(crate) fn report_from_probs(probs: &Tensor, truth: &[usize]) -> Result<EvalReport, EvalError> {
    let k = probs.cols();
    let n = truth.len();
    let mut support = vec![0usize; k];
    let mut hits = vec![0usize; k];
    for (i, &y) in truth.iter().enumerate() {
        support[y] += 1;
        if argmax(probs.row(i)) == y {
            hits[y] += 1;
        }
    }
    let per_class: Vec<f64> = hits
        .iter()
        .zip(&support)
        .map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 })
        .collect();
    let present: Vec<f64> = per_class
        .iter()
        .zip(&support)
        .filter(|(_, &s)| s > 0)
        .map(|(&a, _)| a)
        .collect();
    let q_star = CategoryDistribution::new(losses::column_means(probs))?;
    let truth_dist =
        CategoryDistribution::new(support.iter().map(|&s| s as f64 / n as f64).collect())?;
    let mut rng = seed::rng(DIVERSITY_SEED, seed::TAG_DIVERSITY);
    let div = losses::expected_batch_diversity(probs, DIVERSITY_BATCH_SIZE, DIVERSITY_BATCHES, &mut rng);
    Ok(EvalReport {
        overall_accuracy: hits.iter().sum::<usize>() as f64 / n as f64,
        mean_class_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        per_class_accuracy: per_class,
        class_support: support,
        inferred_entropy: q_star.entropy(),
        max_class_share: q_star.max_share(),
        inferred_q_star: q_star,
        expected_batch_diversity: div.mean,
        expected_batch_diversity_std_error: div.std_error,
        true_class_distribution: truth_dist,
    })
}

/// One evaluated model as it appears in the report files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub label: String,
    pub config: Option<HyperConfig>,
    pub final_target_entropy: Option<f64>,
    pub report: EvalReport,
    pub risk: Option<RiskEstimate>,
}

/// Row of `lambda_table.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow {
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub final_entropy: Option<f64>,
    pub accuracy: f64,
}

impl LambdaRow {
    pub fn from_entry(e: &ReportEntry) -> Self {
        Self {
            lambda: e.config.as_ref().map(|c| c.lambda),
            beta: e.config.as_ref().map(|c| c.beta),
            final_entropy: e.final_target_entropy,
            accuracy: e.report.overall_accuracy,
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    reports: &'a [ReportEntry],
    sweep: Option<&'a SweepResult>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, EvalError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(f))
}

/// Writes `summary.json`, `lambda_table.csv`, `beta_table.csv` and `qhat_bar.csv` into `dir`.
pub fn emit_report(
    entries: &[ReportEntry],
    sweep: Option<&SweepResult>,
    dir: &Path,
) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let summary = serde_json::to_string_pretty(&Summary {
        reports: entries,
        sweep,
    })
    .expect("summary serializes");
    let path = dir.join("summary.json");
    fs::write(&path, summary + "\n").map_err(io_err(&path))?;

    let path = dir.join("lambda_table.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["lambda", "beta", "final_L_e", "accuracy"])?;
    for row in entries.iter().map(LambdaRow::from_entry) {
        w.write_record([
            opt(row.lambda),
            opt(row.beta),
            opt(row.final_entropy),
            row.accuracy.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;

    let k = entries.first().map_or(0, |e| e.report.per_class_accuracy.len());
    let path = dir.join("beta_table.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["beta".to_string()];
    header.extend((0..k).map(|c| format!("class_{c}")));
    header.extend(["mean".to_string(), "diversity".to_string()]);
    w.write_record(&header)?;
    for e in entries {
        if e.report.per_class_accuracy.len() != k {
            return Err(EvalError::Table(format!(
                "entry `{}` has {} classes, expected {k}",
                e.label,
                e.report.per_class_accuracy.len()
            )));
        }
        let mut rec = vec![opt(e.config.as_ref().map(|c| c.beta))];
        rec.extend(e.report.per_class_accuracy.iter().map(f64::to_string));
        rec.push(e.report.mean_class_accuracy.to_string());
        rec.push(e.report.expected_batch_diversity.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("qhat_bar.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["series", "class", "predicted_mass", "true_mass"])?;
    for e in entries {
        let pred = e.report.inferred_q_star.as_slice();
        let truth = e.report.true_class_distribution.as_slice();
        for (c, (p, t)) in pred.iter().zip(truth).enumerate() {
            w.write_record([e.label.clone(), c.to_string(), p.to_string(), t.to_string()])?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

pub fn read_lambda_table(path: &Path) -> Result<Vec<LambdaRow>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    let parse = |s: &str| -> Result<Option<f64>, EvalError> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|_| EvalError::Table(format!("bad number `{s}`")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(EvalError::Table(format!("expected 4 columns, got {}", rec.len())));
        }
        rows.push(LambdaRow {
            lambda: parse(&rec[0])?,
            beta: parse(&rec[1])?,
            final_entropy: parse(&rec[2])?,
            accuracy: parse(&rec[3])?.ok_or_else(|| EvalError::Table("missing accuracy".into()))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorSpec, Sample};
    use crate::network::MlpConfig;

    fn one_hot(labels: &[usize], k: usize, sharp: f64) -> Tensor {
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| {
                let mut r = vec![(1.0 - sharp) / (k - 1) as f64; k];
                r[y] = sharp;
                r
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn perfect_predictor_on_balanced_pair() {
        let truth: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let r = report_from_probs(&one_hot(&truth, 2, 1.0), &truth).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        assert_eq!(r.inferred_q_star.as_slice(), &[0.5, 0.5]);
        assert_eq!(r.max_class_share, 0.5);
        assert_eq!(r.mean_class_accuracy, 1.0);
    }

    #[test]
    fn constant_predictor_collapses() {
        let truth: Vec<usize> = (0..90).map(|i| i % 3).collect();
        let preds = vec![0; 90];
        let r = report_from_probs(&one_hot(&preds, 3, 1.0 - 1e-9), &truth).unwrap();
        assert_eq!(r.per_class_accuracy, vec![1.0, 0.0, 0.0]);
        assert!(r.max_class_share > 1.0 - 1e-8);
        assert!(r.expected_batch_diversity < 1e-6);
    }

    #[test]
    fn accuracy_matches_naive_recount() {
        let truth: Vec<usize> = (0..57).map(|i| (i * 7) % 4).collect();
        let preds: Vec<usize> = (0..57).map(|i| (i * 3) % 4).collect();
        let r = report_from_probs(&one_hot(&preds, 4, 0.7), &truth).unwrap();
        let naive = truth.iter().zip(&preds).filter(|(a, b)| a == b).count() as f64 / 57.0;
        assert_eq!(r.overall_accuracy, naive);
        let m = r.per_class_accuracy.iter().sum::<f64>() / 4.0;
        assert!((r.mean_class_accuracy - m).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded_from_mean() {
        let truth = vec![0, 0, 1, 1];
        let preds = vec![0, 0, 0, 1];
        let r = report_from_probs(&one_hot(&preds, 3, 0.9), &truth).unwrap();
        assert_eq!(r.class_support, vec![2, 2, 0]);
        assert_eq!(r.per_class_accuracy, vec![1.0, 0.5, 0.0]);
        assert_eq!(r.mean_class_accuracy, 0.75);
    }

    #[test]
    fn one_hot_batch_diversity_matches_count_oracle() {
        use rand::seq::index;
        use rand::SeedableRng;
        // independent oracle: entropy of label counts in random size-32 subsets
        let q = [0.5, 0.3, 0.2];
        let truth: Vec<usize> = (0..1000)
            .map(|i| if i < 500 { 0 } else if i < 800 { 1 } else { 2 })
            .collect();
        let r = report_from_probs(&one_hot(&truth, 3, 1.0), &truth).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let m = 20_000;
        let vals: Vec<f64> = (0..m)
            .map(|_| {
                let mut c = [0.0f64; 3];
                for i in index::sample(&mut rng, 1000, 32) {
                    c[truth[i]] += 1.0;
                }
                -c.iter().filter(|&&x| x > 0.0).map(|&x| x / 32.0 * (x / 32.0).ln()).sum::<f64>()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / m as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
        let se = (r.expected_batch_diversity_std_error.powi(2) + sd * sd / m as f64).sqrt();
        assert!((r.expected_batch_diversity - mean).abs() < 3.0 * se);
        let h: f64 = -q.iter().map(|p: &f64| p * p.ln()).sum::<f64>();
        assert!(r.expected_batch_diversity < h);
    }

    #[test]
    fn missing_truth_is_an_error() {
        let ds = generate(&GeneratorSpec::blobs(2, 50, 0.5, 1)).unwrap();
        let n = ds.target().len();
        let ds = ds.replace_target(vec![Sample::target(vec![0.0, 0.0]); n]).unwrap();
        let p = ModelParams::init(&MlpConfig::default()).unwrap();
        assert!(matches!(evaluate(&p, &ds), Err(EvalError::MissingTruth)));
        assert_eq!(EvalError::MissingTruth.to_string(), "target truth required");
    }

    #[test]
    fn evaluate_leaves_inputs_untouched() {
        let ds = generate(&GeneratorSpec::blobs(2, 80, 0.5, 3)).unwrap();
        let p = ModelParams::init(&MlpConfig::default()).unwrap();
        let (p0, f0) = (p.clone(), ds.fingerprint());
        let a = evaluate(&p, &ds).unwrap();
        assert_eq!(a, evaluate(&p, &ds).unwrap());
        assert_eq!(p, p0);
        assert_eq!(ds.fingerprint(), f0);
    }

    fn entry(label: &str, lambda: f64, beta: f64, acc: f64) -> ReportEntry {
        let truth: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let mut report = report_from_probs(&one_hot(&truth, 3, 0.8), &truth).unwrap();
        report.overall_accuracy = acc;
        ReportEntry {
            label: label.into(),
            config: Some(HyperConfig {
                lambda,
                beta,
                ..Default::default()
            }),
            final_target_entropy: Some(0.1 * lambda + 1.0 / 3.0),
            report,
            risk: None,
        }
    }

    #[test]
    fn empty_report_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&[], None, dir.path()).unwrap();
        let read = |n: &str| fs::read_to_string(dir.path().join(n)).unwrap();
        assert_eq!(read("lambda_table.csv"), "lambda,beta,final_L_e,accuracy\n");
        assert_eq!(read("beta_table.csv"), "beta,mean,diversity\n");
        assert_eq!(read("qhat_bar.csv"), "series,class,predicted_mass,true_mass\n");
        let v: serde_json::Value = serde_json::from_str(&read("summary.json")).unwrap();
        assert_eq!(v["reports"].as_array().unwrap().len(), 0);
    }

    #[test]
    fn lambda_table_round_trips_exactly() {
        let entries = vec![
            entry("a", 0.1, 0.0, 0.123456789012345),
            entry("b", 0.7000000000000001, 0.4, 2.0 / 3.0),
        ];
        let mut no_cfg = entry("c", 0.0, 0.0, 0.5);
        no_cfg.config = None;
        no_cfg.final_target_entropy = None;
        let entries = [entries, vec![no_cfg]].concat();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&entries, None, dir.path()).unwrap();
        let rows = read_lambda_table(&dir.path().join("lambda_table.csv")).unwrap();
        let expect: Vec<LambdaRow> = entries.iter().map(LambdaRow::from_entry).collect();
        assert_eq!(rows, expect);
    }

    #[test]
    fn qhat_true_mass_sums_to_one() {
        let entries = vec![entry("emo", 1.0, 0.0, 0.4), entry("medm", 1.0, 0.4, 0.9)];
        let dir = tempfile::tempdir().unwrap();
        emit_report(&entries, None, dir.path()).unwrap();
        let mut r = csv::Reader::from_path(dir.path().join("qhat_bar.csv")).unwrap();
        let mut sums = std::collections::BTreeMap::new();
        for rec in r.records() {
            let rec = rec.unwrap();
            *sums.entry(rec[0].to_string()).or_insert(0.0) += rec[3].parse::<f64>().unwrap();
        }
        assert_eq!(sums.len(), 2);
        assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-9));
        let beta = fs::read_to_string(dir.path().join("beta_table.csv")).unwrap();
        assert!(beta.starts_with("beta,class_0,class_1,class_2,mean,diversity\n"));
        assert!(!beta.contains('\r'));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        fs::write(&file, "x").unwrap();
        assert!(matches!(
            emit_report(&[], None, &file.join("sub")),
            Err(EvalError::Io { .. })
        ));
    }
}
