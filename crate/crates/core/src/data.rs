//! Synthetic domain-shift datasets, source train/validation splitting, paired
//! batch sampling and CSV persistence.
//!
//! Target ground truth is carried in a [`SealedLabels`] value that only the
//! evaluation code inside this crate can open.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::seed;

/// Radius of the circle that carries the blob means.
pub const BLOB_RADIUS: f64 = 4.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Contract(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("header mismatch: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("target domain empty")]
    EmptyTarget,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Option<usize>,
    pub domain: Domain,
}

impl Sample {
    pub fn source(features: Vec<f64>, label: usize) -> Self {
        Self {
            features,
            label: Some(label),
            domain: Domain::Source,
        }
    }

    pub fn target(features: Vec<f64>) -> Self {
        Self {
            features,
            label: None,
            domain: Domain::Target,
        }
    }
}

/// Target labels that only evaluation may read.
#[derive(Debug, Clone, PartialEq)]
pub struct SealedLabels(Vec<usize>);

impl SealedLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn reveal(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated(GeneratorSpec),
    File(PathBuf),
    InMemory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPairDataset {
    source: Vec<Sample>,
    train: Vec<usize>,
    val: Vec<usize>,
    target: Vec<Sample>,
    target_truth: Option<SealedLabels>,
    num_classes: usize,
    feature_dim: usize,
    split: SplitConfig,
    provenance: Provenance,
}

impl DomainPairDataset {
    /// Validates the samples and performs the stratified source split.
    pub fn new(
        source: Vec<Sample>,
        target: Vec<Sample>,
        target_truth: Option<Vec<usize>>,
        num_classes: usize,
        split: SplitConfig,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(DataError::Contract(format!(
                "need at least two classes, got {num_classes}"
            )));
        }
        if target.is_empty() {
            return Err(DataError::EmptyTarget);
        }
        let feature_dim = source
            .first()
            .map(|s| s.features.len())
            .ok_or_else(|| DataError::Contract("source domain empty".into()))?;
        if feature_dim == 0 {
            return Err(DataError::Contract("samples have no features".into()));
        }
        for (i, s) in source.iter().chain(&target).enumerate() {
            if s.features.len() != feature_dim {
                return Err(DataError::Contract(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Contract(format!("sample {i} has non-finite features")));
            }
        }
        for (i, s) in source.iter().enumerate() {
            match s.label {
                Some(y) if y < num_classes && s.domain == Domain::Source => {}
                Some(y) if y >= num_classes => {
                    return Err(DataError::Contract(format!(
                        "source sample {i} has label {y} outside [0, {num_classes})"
                    )))
                }
                _ => {
                    return Err(DataError::Contract(format!(
                        "source sample {i} must be a labeled source-domain sample"
                    )))
                }
            }
        }
        if target.iter().any(|s| s.label.is_some() || s.domain != Domain::Target) {
            return Err(DataError::Contract(
                "target samples must be unlabeled target-domain samples".into(),
            ));
        }
        if let Some(truth) = &target_truth {
            if truth.len() != target.len() {
                return Err(DataError::Contract(format!(
                    "{} truth labels for {} target samples",
                    truth.len(),
                    target.len()
                )));
            }
            if let Some(y) = truth.iter().find(|&&y| y >= num_classes) {
                return Err(DataError::Contract(format!(
                    "truth label {y} outside [0, {num_classes})"
                )));
            }
        }
        let (train, val) = split_source(&source, split.val_fraction, split.seed)?;
        Ok(Self {
            source,
            train,
            val,
            target,
            target_truth: target_truth.map(SealedLabels),
            num_classes,
            feature_dim,
            split,
            provenance: Provenance::InMemory,
        })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Re-runs the stratified split with a different configuration.
    pub fn resplit(mut self, split: SplitConfig) -> Result<Self> {
        let (train, val) = split_source(&self.source, split.val_fraction, split.seed)?;
        self.train = train;
        self.val = val;
        self.split = split;
        Ok(self)
    }

    /// Swaps in a different unlabeled target set; any ground truth is dropped.
    pub fn replace_target(mut self, target: Vec<Sample>) -> Result<Self> {
        if target.is_empty() {
            return Err(DataError::EmptyTarget);
        }
        if target
            .iter()
            .any(|s| s.features.len() != self.feature_dim || s.label.is_some())
        {
            return Err(DataError::Contract("replacement target does not match".into()));
        }
        self.target = target;
        self.target_truth = None;
        Ok(self)
    }

    pub fn source(&self) -> &[Sample] {
        &self.source
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    pub fn source_train(&self) -> Vec<&Sample> {
        self.train.iter().map(|&i| &self.source[i]).collect()
    }

    pub fn source_val(&self) -> Vec<&Sample> {
        self.val.iter().map(|&i| &self.source[i]).collect()
    }

    pub fn target(&self) -> &[Sample] {
        &self.target
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn split(&self) -> SplitConfig {
        self.split
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn has_target_truth(&self) -> bool {
        self.target_truth.is_some()
    }

    pub(crate) fn target_truth(&self) -> Option<&[usize]> {
        self.target_truth.as_ref().map(SealedLabels::reveal)
    }

    /// Features and labels of source-train samples at the given positions of the train list.
    pub fn source_train_batch(&self, positions: &[usize]) -> (Tensor, Vec<usize>) {
        let samples: Vec<&Sample> = positions.iter().map(|&p| &self.source[self.train[p]]).collect();
        let labels = samples.iter().map(|s| s.label.expect("source is labeled")).collect();
        (features_tensor(&samples), labels)
    }

    pub fn target_batch(&self, positions: &[usize]) -> Tensor {
        let samples: Vec<&Sample> = positions.iter().map(|&p| &self.target[p]).collect();
        features_tensor(&samples)
    }

    pub fn target_features(&self) -> Tensor {
        let samples: Vec<&Sample> = self.target.iter().collect();
        features_tensor(&samples)
    }

    /// Content hash over samples and split, excluding target ground truth.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in self.source.iter().chain(&self.target) {
            h.update([s.domain as u8]);
            h.update(s.label.map_or(u64::MAX, |y| y as u64).to_le_bytes());
            for v in &s.features {
                h.update(v.to_le_bytes());
            }
        }
        for i in self.train.iter().chain(&self.val) {
            h.update((*i as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Stacks sample features into a `rows × d` matrix.
pub fn features_tensor(samples: &[&Sample]) -> Tensor {
    let d = samples[0].features.len();
    let values = samples.iter().flat_map(|s| s.features.iter().copied()).collect();
    Tensor::new(vec![samples.len(), d], values).expect("uniform feature width")
}

/// Stratified split of labeled samples into (train, val) index lists.
///
/// Each class with `n` samples contributes `round(n · val_fraction)` clamped
/// to `[1, n − 1]` validation samples. Both lists are sorted.
pub fn split_source(
    source: &[Sample],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::Contract(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let k = source.iter().filter_map(|s| s.label).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, s) in source.iter().enumerate() {
        let y = s
            .label
            .ok_or_else(|| DataError::Contract(format!("source sample {i} is unlabeled")))?;
        by_class[y].push(i);
    }
    let mut rng = seed::rng(seed, seed::TAG_SPLIT);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(DataError::Contract(format!(
                "class {class} has {} sample(s); at least 2 are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// One step's worth of sample positions: `source` indexes the source-train
/// list, `target` the target list. Both have the same length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

fn stream_batches<R: Rng>(n: usize, batch: usize, count: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(count);
    let mut perm: Vec<usize> = (0..n).collect();
    while out.len() < count {
        perm.shuffle(rng);
        for chunk in perm.chunks_exact(batch) {
            out.push(chunk.to_vec());
            if out.len() == count {
                break;
            }
        }
    }
    out
}

/// Shuffled full batches for one epoch over streams of `n_source` and
/// `n_target` items. The epoch length is set by the longer stream; the
/// shorter one is reshuffled and cycled.
pub fn paired_batches(
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    seed: u64,
    epoch_index: u64,
) -> Result<Vec<BatchPair>> {
    if batch_size == 0 {
        return Err(DataError::Contract("batch size must be positive".into()));
    }
    if batch_size > n_source.min(n_target) {
        return Err(DataError::Contract(format!(
            "batch size {batch_size} exceeds stream sizes ({n_source} source, {n_target} target)"
        )));
    }
    let count = (n_source / batch_size).max(n_target / batch_size);
    let mut rs = seed::rng(seed, seed::TAG_SOURCE);
    rs.set_stream(epoch_index);
    let mut rt = seed::rng(seed, seed::TAG_TARGET);
    rt.set_stream(epoch_index);
    let s = stream_batches(n_source, batch_size, count, &mut rs);
    let t = stream_batches(n_target, batch_size, count, &mut rt);
    Ok(s
        .into_iter()
        .zip(t)
        .map(|(source, target)| BatchPair { source, target })
        .collect())
}

pub fn epoch_batches(
    ds: &DomainPairDataset,
    batch_size: usize,
    seed: u64,
    epoch_index: u64,
) -> Result<Vec<BatchPair>> {
    paired_batches(ds.train.len(), ds.target.len(), batch_size, seed, epoch_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Blobs,
    Moons,
}

fn default_feature_dim() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub num_classes: usize,
    pub samples_per_domain: usize,
    pub target_class_proportions: Vec<f64>,
    #[serde(default)]
    pub shift: Vec<f64>,
    #[serde(default)]
    pub rotation_deg: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

impl GeneratorSpec {
    pub fn blobs(num_classes: usize, samples_per_domain: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            kind: GeneratorKind::Blobs,
            num_classes,
            samples_per_domain,
            target_class_proportions: vec![1.0 / num_classes as f64; num_classes],
            shift: vec![0.0, 0.0],
            rotation_deg: 0.0,
            noise_sigma,
            seed,
            feature_dim: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Contract(m));
        if self.num_classes < 2 {
            return bad(format!("need at least two classes, got {}", self.num_classes));
        }
        if self.kind == GeneratorKind::Moons && self.num_classes != 2 {
            return bad("moons generate exactly two classes".into());
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2".into());
        }
        if self.target_class_proportions.len() != self.num_classes {
            return bad(format!(
                "{} target proportions for {} classes",
                self.target_class_proportions.len(),
                self.num_classes
            ));
        }
        let sum: f64 = self.target_class_proportions.iter().sum();
        if self
            .target_class_proportions
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0)
            || (sum - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "target proportions {:?} are not a probability distribution",
                self.target_class_proportions
            ));
        }
        if self.shift.len() > self.feature_dim {
            return bad(format!(
                "shift has {} entries for {} features",
                self.shift.len(),
                self.feature_dim
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.samples_per_domain < 2 * self.num_classes {
            return bad("too few samples per domain".into());
        }
        Ok(())
    }
}

/// Integer counts summing to `n` that follow `proportions` by largest remainder
/// (ties go to the lower class index).
pub fn largest_remainder(proportions: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn draw_point<R: Rng>(spec: &GeneratorSpec, class: usize, rng: &mut R) -> Vec<f64> {
    let mut x = vec![0.0; spec.feature_dim];
    match spec.kind {
        GeneratorKind::Blobs => {
            let angle = 2.0 * PI * class as f64 / spec.num_classes as f64;
            x[0] = BLOB_RADIUS * angle.cos();
            x[1] = BLOB_RADIUS * angle.sin();
        }
        GeneratorKind::Moons => {
            let t = rng.random_range(0.0..PI);
            if class == 0 {
                x[0] = t.cos();
                x[1] = t.sin();
            } else {
                x[0] = 1.0 - t.cos();
                x[1] = 0.5 - t.sin();
            }
        }
    }
    for v in &mut x {
        let z: f64 = rng.sample(StandardNormal);
        *v += spec.noise_sigma * z;
    }
    x
}

fn draw_domain<R: Rng>(
    spec: &GeneratorSpec,
    counts: &[usize],
    rng: &mut R,
) -> Vec<(Vec<f64>, usize)> {
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (class, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            out.push((draw_point(spec, class, rng), class));
        }
    }
    out.shuffle(rng);
    out
}

/// Rotates the first two coordinates about the origin, then translates.
fn shift_point(spec: &GeneratorSpec, x: &mut [f64]) {
    let (s, c) = spec.rotation_deg.to_radians().sin_cos();
    let (a, b) = (x[0], x[1]);
    x[0] = c * a - s * b;
    x[1] = s * a + c * b;
    for (v, d) in x.iter_mut().zip(&spec.shift) {
        *v += d;
    }
}

pub fn generate(spec: &GeneratorSpec) -> Result<DomainPairDataset> {
    generate_with_split(
        spec,
        SplitConfig {
            val_fraction: SplitConfig::default().val_fraction,
            seed: spec.seed,
        },
    )
}

pub fn generate_with_split(spec: &GeneratorSpec, split: SplitConfig) -> Result<DomainPairDataset> {
    spec.validate()?;
    let uniform = vec![1.0 / spec.num_classes as f64; spec.num_classes];
    let source_counts = largest_remainder(&uniform, spec.samples_per_domain);
    let target_counts = largest_remainder(&spec.target_class_proportions, spec.samples_per_domain);

    let mut rs = seed::rng(spec.seed, seed::TAG_SOURCE);
    let mut rt = seed::rng(spec.seed, seed::TAG_TARGET);
    let source = draw_domain(spec, &source_counts, &mut rs)
        .into_iter()
        .map(|(x, y)| Sample::source(x, y))
        .collect();
    let (target, truth): (Vec<Sample>, Vec<usize>) = draw_domain(spec, &target_counts, &mut rt)
        .into_iter()
        .map(|(mut x, y)| {
            shift_point(spec, &mut x);
            (Sample::target(x), y)
        })
        .unzip();
    Ok(
        DomainPairDataset::new(source, target, Some(truth), spec.num_classes, split)?
            .with_provenance(Provenance::Generated(spec.clone())),
    )
}

fn header(d: usize) -> Vec<String> {
    let mut h = vec!["domain".to_string(), "label".to_string()];
    h.extend((0..d).map(|i| format!("f{i}")));
    h
}

/// `<dir>/<stem>.truth.csv` next to `path`.
pub fn truth_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    path.with_file_name(format!("{stem}.truth.csv"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DataError::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Writes the dataset CSV and, when ground truth is present, the truth sidecar.
pub fn save_csv(ds: &DomainPairDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    w.write_record(header(ds.feature_dim)).map_err(|e| csv_err(path, e))?;
    for s in ds.source.iter().chain(&ds.target) {
        let mut rec = vec![
            s.domain.as_str().to_string(),
            s.label.map_or_else(|| "?".to_string(), |y| y.to_string()),
        ];
        rec.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))?;

    if let Some(truth) = ds.target_truth() {
        let tp = truth_path(path);
        let mut f = BufWriter::new(File::create(&tp).map_err(io_err(&tp))?);
        writeln!(f, "index,label").map_err(io_err(&tp))?;
        for (i, y) in truth.iter().enumerate() {
            writeln!(f, "{i},{y}").map_err(io_err(&tp))?;
        }
        f.flush().map_err(io_err(&tp))?;
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(line: u64, what: &str, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| DataError::Parse {
        line,
        message: format!("cannot parse {what} `{s}`"),
    })
}

fn read_truth(path: &Path, n_target: usize) -> Result<Vec<usize>> {
    let mut r = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let found = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().collect::<Vec<_>>() != ["index", "label"] {
        return Err(DataError::Header {
            expected: "index,label".into(),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut truth = vec![None; n_target];
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let i: usize = parse_field(line, "index", &rec[0])?;
        let y: usize = parse_field(line, "label", &rec[1])?;
        let slot = truth.get_mut(i).ok_or_else(|| DataError::Parse {
            line,
            message: format!("index {i} out of range for {n_target} target rows"),
        })?;
        *slot = Some(y);
    }
    truth
        .into_iter()
        .enumerate()
        .map(|(i, y)| {
            y.ok_or_else(|| DataError::Contract(format!("truth sidecar misses target index {i}")))
        })
        .collect()
}

/// Loads a dataset CSV (plus its truth sidecar, if present) with the default split.
pub fn load_csv(path: &Path) -> Result<DomainPairDataset> {
    load_csv_with_split(path, SplitConfig::default())
}

pub fn load_csv_with_split(path: &Path, split: SplitConfig) -> Result<DomainPairDataset> {
    let mut r = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let found: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let d = found.len().saturating_sub(2);
    let expected = header(d.max(1));
    if found != expected {
        return Err(DataError::Header {
            expected: expected.join(","),
            found: found.join(","),
        });
    }

    let (mut source, mut target, mut inline_truth) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let features = rec
            .iter()
            .skip(2)
            .map(|f| parse_field::<f64>(line, "feature", f))
            .collect::<Result<Vec<_>>>()?;
        let label = match rec[1].trim() {
            "?" => None,
            s => Some(parse_field::<usize>(line, "label", s)?),
        };
        match &rec[0] {
            "source" => {
                let y = label.ok_or_else(|| DataError::Parse {
                    line,
                    message: "source rows need a label".into(),
                })?;
                source.push(Sample::source(features, y));
            }
            "target" => {
                target.push(Sample::target(features));
                inline_truth.push(label);
            }
            other => {
                return Err(DataError::Parse {
                    line,
                    message: format!("unknown domain tag `{other}`"),
                })
            }
        }
    }
    if target.is_empty() {
        return Err(DataError::EmptyTarget);
    }

    let sidecar = truth_path(path);
    let truth = if sidecar.exists() {
        Some(read_truth(&sidecar, target.len())?)
    } else if inline_truth.iter().all(Option::is_some) {
        Some(inline_truth.into_iter().flatten().collect())
    } else if inline_truth.iter().all(Option::is_none) {
        None
    } else {
        return Err(DataError::Contract(
            "target rows mix labeled and unlabeled entries".into(),
        ));
    };

    let k = source
        .iter()
        .filter_map(|s| s.label)
        .chain(truth.iter().flatten().copied())
        .max()
        .map_or(0, |m| m + 1);
    Ok(
        DomainPairDataset::new(source, target, truth, k.max(2), split)?
            .with_provenance(Provenance::File(path.to_path_buf())),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shifted_spec() -> GeneratorSpec {
        GeneratorSpec {
            kind: GeneratorKind::Blobs,
            num_classes: 4,
            samples_per_domain: 400,
            target_class_proportions: vec![0.4, 0.3, 0.2, 0.1],
            shift: vec![3.0, 0.0],
            rotation_deg: 40.0,
            noise_sigma: 0.5,
            seed: 3,
            feature_dim: 2,
        }
    }

    fn class_counts(labels: &[usize], k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        labels.iter().for_each(|&y| c[y] += 1);
        c
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[0.4, 0.3, 0.2, 0.1], 400), vec![160, 120, 80, 40]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.5, 0.5], 7).iter().sum::<usize>(), 7);
    }

    #[test]
    fn generated_truth_matches_proportions_exactly() {
        let spec = shifted_spec();
        let ds = generate(&spec).unwrap();
        let truth = ds.target_truth().unwrap();
        assert_eq!(
            class_counts(truth, 4),
            largest_remainder(&spec.target_class_proportions, 400)
        );
        let src: Vec<usize> = ds.source().iter().map(|s| s.label.unwrap()).collect();
        assert_eq!(class_counts(&src, 4), vec![100; 4]);
    }

    #[test]
    fn degenerate_proportions_give_single_class_target() {
        let mut spec = GeneratorSpec::blobs(2, 100, 0.3, 1);
        spec.target_class_proportions = vec![1.0, 0.0];
        let ds = generate(&spec).unwrap();
        assert!(ds.target_truth().unwrap().iter().all(|&y| y == 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&shifted_spec()).unwrap();
        let b = generate(&shifted_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = shifted_spec();
        other.seed = 4;
        assert_ne!(a, generate(&other).unwrap());
    }

    #[test]
    fn unshifted_domains_share_class_means() {
        let spec = GeneratorSpec::blobs(3, 10_000, 1.0, 8);
        let ds = generate(&spec).unwrap();
        let truth = ds.target_truth().unwrap();
        for class in 0..3 {
            let mean = |pts: Vec<&Vec<f64>>| {
                let n = pts.len() as f64;
                let mut m = [0.0; 2];
                for p in pts {
                    m[0] += p[0] / n;
                    m[1] += p[1] / n;
                }
                m
            };
            let ms = mean(
                ds.source()
                    .iter()
                    .filter(|s| s.label == Some(class))
                    .map(|s| &s.features)
                    .collect(),
            );
            let mt = mean(
                ds.target()
                    .iter()
                    .zip(truth)
                    .filter(|(_, &y)| y == class)
                    .map(|(s, _)| &s.features)
                    .collect(),
            );
            // per-coordinate sd of each mean is 1/sqrt(3333) ≈ 0.017
            assert!((ms[0] - mt[0]).abs() < 0.1 && (ms[1] - mt[1]).abs() < 0.1);
        }
    }

    #[test]
    fn rotation_and_shift_move_target_means() {
        let mut spec = GeneratorSpec::blobs(4, 4000, 0.2, 2);
        spec.rotation_deg = 90.0;
        spec.shift = vec![1.0, 0.0];
        let ds = generate(&spec).unwrap();
        let truth = ds.target_truth().unwrap();
        // class 0 sits at (4, 0); rotated by 90° it lands on (0, 4), then shifts to (1, 4)
        let pts: Vec<&Sample> = ds
            .target()
            .iter()
            .zip(truth)
            .filter(|(_, &y)| y == 0)
            .map(|(s, _)| s)
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|s| s.features[0]).sum::<f64>() / n;
        let my = pts.iter().map(|s| s.features[1]).sum::<f64>() / n;
        assert!((mx - 1.0).abs() < 0.05 && (my - 4.0).abs() < 0.05, "{mx} {my}");
    }

    #[test]
    fn moons_and_invalid_specs() {
        let mut spec = GeneratorSpec::blobs(2, 200, 0.1, 0);
        spec.kind = GeneratorKind::Moons;
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.feature_dim(), 2);

        let mut bad = spec.clone();
        bad.num_classes = 3;
        bad.target_class_proportions = vec![1.0 / 3.0; 3];
        assert!(generate(&bad).is_err());

        let mut bad = shifted_spec();
        bad.target_class_proportions = vec![0.5, 0.5, 0.5, 0.0];
        assert!(matches!(generate(&bad), Err(DataError::Contract(_))));
    }

    #[test]
    fn higher_dimensional_blobs() {
        let mut spec = shifted_spec();
        spec.feature_dim = 5;
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.feature_dim(), 5);
        assert_eq!(ds.target()[0].features.len(), 5);
    }

    #[test]
    fn split_examples() {
        let source: Vec<Sample> = (0..30).map(|i| Sample::source(vec![i as f64], i % 3)).collect();
        let (train, val) = split_source(&source, 0.5, 1).unwrap();
        let labels = |idx: &[usize]| class_counts(&idx.iter().map(|&i| i % 3).collect::<Vec<_>>(), 3);
        assert_eq!(labels(&train), vec![5, 5, 5]);
        assert_eq!(labels(&val), vec![5, 5, 5]);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!(split_source(&source, 0.5, 1).unwrap(), (train, val));
    }

    #[test]
    fn split_fraction_per_class() {
        let sizes = [13usize, 37, 50, 91];
        let mut source = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            source.extend((0..n).map(|i| Sample::source(vec![i as f64], c)));
        }
        let (_, val) = split_source(&source, 0.2, 5).unwrap();
        for (c, &n) in sizes.iter().enumerate() {
            let v = val.iter().filter(|&&i| source[i].label == Some(c)).count();
            assert!((v as f64 / n as f64 - 0.2).abs() <= 1.0 / n as f64);
        }
    }

    #[test]
    fn split_rejects_singleton_class() {
        let source = vec![
            Sample::source(vec![0.0], 0),
            Sample::source(vec![1.0], 0),
            Sample::source(vec![2.0], 1),
        ];
        assert!(split_source(&source, 0.5, 0).is_err());
        assert!(split_source(&source[..2], 1.0, 0).is_err());
    }

    #[test]
    fn batches_cover_target_once_per_pass() {
        let batches = paired_batches(96, 64, 16, 7, 0).unwrap();
        assert_eq!(batches.len(), 6);
        assert!(batches.iter().all(|b| b.source.len() == 16 && b.target.len() == 16));
        let mut first_pass: Vec<usize> =
            batches[..4].iter().flat_map(|b| b.target.iter().copied()).collect();
        first_pass.sort_unstable();
        assert_eq!(first_pass, (0..64).collect::<Vec<_>>());
        let mut src: Vec<usize> = batches.iter().flat_map(|b| b.source.iter().copied()).collect();
        src.sort_unstable();
        assert_eq!(src, (0..96).collect::<Vec<_>>());
    }

    #[test]
    fn batches_depend_on_epoch_and_replay() {
        let a = paired_batches(64, 64, 8, 1, 0).unwrap();
        let b = paired_batches(64, 64, 8, 1, 1).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, paired_batches(64, 64, 8, 1, 0).unwrap());
    }

    #[test]
    fn batch_of_whole_dataset() {
        let b = paired_batches(10, 10, 10, 0, 0).unwrap();
        assert_eq!(b.len(), 1);
        let mut s = b[0].source.clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_size_errors() {
        assert!(paired_batches(10, 10, 0, 0, 0).is_err());
        assert!(paired_batches(10, 5, 6, 0, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.csv");
        let ds = generate(&shifted_spec()).unwrap();
        save_csv(&ds, &path).unwrap();
        assert!(truth_path(&path).exists());
        let back = load_csv_with_split(&path, ds.split()).unwrap();
        assert_eq!(back.source(), ds.source());
        assert_eq!(back.target(), ds.target());
        assert_eq!(back.target_truth(), ds.target_truth());
        assert_eq!(back.train_indices(), ds.train_indices());
        assert_eq!(back.fingerprint(), ds.fingerprint());
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");

        std::fs::write(&p, "domain,label,f0\nsource,0,1.0\nsource,0,2.0\nsource,1,3.0\nsource,1,4.0\n")
            .unwrap();
        assert!(matches!(load_csv(&p), Err(DataError::EmptyTarget)));

        std::fs::write(&p, "domain,lbl,f0\nsource,0,1.0\n").unwrap();
        match load_csv(&p) {
            Err(DataError::Header { expected, .. }) => assert_eq!(expected, "domain,label,f0"),
            other => panic!("{other:?}"),
        }

        std::fs::write(&p, "domain,label,f0\nsource,0,1.0\nsource,0,abc\n").unwrap();
        match load_csv(&p) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }

        std::fs::write(&p, "domain,label,f0\nsource,0,1.0\nmoon,?,2.0\n").unwrap();
        let err = load_csv(&p).unwrap_err();
        assert!(err.to_string().contains("moon"), "{err}");
    }
}
