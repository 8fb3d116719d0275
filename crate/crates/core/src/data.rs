//! Synthetic domain pairs, feature CSV ingestion, and deterministic batching.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Recorded in run metadata so a log can be matched to its generator.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng(rand_chacha 0.9, seed_from_u64)";

/// Radius of the circle the source class means sit on.
pub const CLASS_RADIUS: f64 = 3.0;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `d x n`, one sample per column.
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
    pub domain: Domain,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>, class_count: usize, domain: Domain) -> Result<Self> {
        if let Some(labels) = &labels {
            if class_count < 2 {
                return Err(Error::Data(format!(
                    "labelled data needs at least 2 classes, got {class_count}"
                )));
            }
            if labels.len() != features.cols() {
                return Err(Error::Data(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    features.cols()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
                return Err(Error::Data(format!(
                    "label {bad} out of range for {class_count} classes"
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    /// Per-class sample counts; empty when unlabelled.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.class_count];
        for &y in self.labels.iter().flatten() {
            hist[y] += 1;
        }
        hist
    }

    pub fn with_labels(mut self, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        self.labels = Some(labels);
        self.class_count = class_count;
        Dataset::new(self.features, self.labels, self.class_count, self.domain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class_source: usize,
    pub n_per_class_target: usize,
    pub rotation_degrees: f64,
    /// Translation of the target domain; shorter vectors are zero-padded.
    pub shift: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            classes: 3,
            dim: 16,
            n_per_class_source: 500,
            n_per_class_target: 500,
            rotation_degrees: 45.0,
            shift: vec![0.5],
            noise_sigma: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedPair {
    pub source: Dataset,
    /// Unlabelled; the true labels are kept aside in `target_labels`.
    pub target: Dataset,
    pub target_labels: Vec<usize>,
}

impl GeneratedPair {
    pub fn labelled_target(&self) -> Dataset {
        let mut t = self.target.clone();
        t.labels = Some(self.target_labels.clone());
        t
    }
}

/// Source class means evenly spaced on a circle of radius 3 in the first two
/// coordinates.
pub fn class_means(classes: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / classes as f64;
            let mut m = vec![0.0; dim];
            m[0] = CLASS_RADIUS * angle.cos();
            m[1] = CLASS_RADIUS * angle.sin();
            m
        })
        .collect()
}

/// Isotropic Gaussian classes around [`class_means`]; the target domain is
/// the same distribution rotated by `rotation_degrees` in the first two
/// coordinates and then translated by `shift`.
pub fn gen_rotated_gaussians(p: &GenParams) -> Result<GeneratedPair> {
    if p.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", p.classes)));
    }
    if p.dim < 2 {
        return Err(Error::Config(format!("need dim >= 2, got {}", p.dim)));
    }
    if p.n_per_class_source == 0 || p.n_per_class_target == 0 {
        return Err(Error::Config("per-class sample counts must be positive".into()));
    }
    if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) || !p.rotation_degrees.is_finite() {
        return Err(Error::Config(
            "noise must be finite and non-negative, rotation finite".into(),
        ));
    }
    if p.shift.len() > p.dim || p.shift.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!(
            "shift must have at most {} finite entries",
            p.dim
        )));
    }
    let mut shift = p.shift.clone();
    shift.resize(p.dim, 0.0);

    let means = class_means(p.classes, p.dim);
    let mut rng = rng_from_seed(p.seed);
    let sample = |n: usize, rng: &mut ChaCha8Rng| {
        let mut cols = Vec::with_capacity(n * p.classes);
        let mut labels = Vec::with_capacity(n * p.classes);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..n {
                let x: Vec<f64> = mean
                    .iter()
                    .map(|m| m + p.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                cols.push(x);
                labels.push(c);
            }
        }
        (cols, labels)
    };

    let (src_cols, src_labels) = sample(p.n_per_class_source, &mut rng);
    let (mut tgt_cols, tgt_labels) = sample(p.n_per_class_target, &mut rng);
    let theta = p.rotation_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    for x in &mut tgt_cols {
        let (a, b) = (x[0], x[1]);
        x[0] = cos * a - sin * b;
        x[1] = sin * a + cos * b;
        for (v, s) in x.iter_mut().zip(&shift) {
            *v += s;
        }
    }

    let source = Dataset::new(
        Matrix::from_columns(&src_cols)?,
        Some(src_labels),
        p.classes,
        Domain::Source,
    )?;
    let target = Dataset::new(Matrix::from_columns(&tgt_cols)?, None, p.classes, Domain::Target)?;
    Ok(GeneratedPair {
        source,
        target,
        target_labels: tgt_labels,
    })
}

/// `spectrum.len() + 1` samples in `dim` dimensions whose sample covariance
/// is exactly `diag(spectrum, 0, ...)` up to rounding. Used to plant a known
/// eigen-gap.
pub fn gen_planted_spectrum(dim: usize, spectrum: &[f64], seed: u64) -> Result<Matrix> {
    let r = spectrum.len();
    if r == 0 || r > dim || spectrum.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::Config(
            "planted spectrum needs 1..=dim non-negative values".into(),
        ));
    }
    let n = r + 1;
    let mut rng = rng_from_seed(seed);
    // Orthonormal vectors in R^n orthogonal to the all-ones vector.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    let ones = vec![1.0 / (n as f64).sqrt(); n];
    while basis.len() < r {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for _ in 0..2 {
            for q in basis.iter().chain(std::iter::once(&ones)) {
                let proj = crate::numerics::dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = crate::numerics::norm(&v);
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    let scale = (n - 1) as f64;
    Ok(Matrix::from_fn(dim, n, |i, j| {
        if i < r {
            (scale * spectrum[i]).sqrt() * basis[i][j]
        } else {
            0.0
        }
    }))
}

/// Reads one-sample-per-row CSV features. With `has_labels` the last column
/// is an integer class label.
pub fn load_csv(path: &Path, has_labels: bool, domain: Domain) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path, has_labels, domain)
}

pub fn parse_csv(text: &str, path: &Path, has_labels: bool, domain: Domain) -> Result<Dataset> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if has_labels {
            let raw = fields
                .pop()
                .filter(|_| !fields.is_empty())
                .ok_or_else(|| perr(line_no, "missing label".into()))?;
            let y: usize = raw.parse().map_err(|_| perr(line_no, format!("bad label {raw:?}")))?;
            labels.push(y);
        }
        if *width.get_or_insert(fields.len()) != fields.len() {
            return Err(perr(
                line_no,
                format!(
                    "expected {} feature columns, found {}",
                    width.unwrap_or(0),
                    fields.len()
                ),
            ));
        }
        let row = fields
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(perr(line_no, format!("bad number {f:?}"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        cols.push(row);
    }
    if cols.is_empty() || width == Some(0) {
        return Err(perr(1, "no samples".into()));
    }
    let features = Matrix::from_columns(&cols)?;
    if has_labels {
        let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        Dataset::new(features, Some(labels), classes, domain)
    } else {
        Dataset::new(features, None, 0, domain)
    }
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let f = &dataset.features;
    for j in 0..f.cols() {
        let row: Vec<String> = f.col(j).iter().map(|&v| crate::fmt_f64(v)).collect();
        out.push_str(&row.join(","));
        if let Some(labels) = &dataset.labels {
            out.push_str(&format!(",{}", labels[j]));
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn save_labels(labels: &[usize], path: &Path) -> Result<()> {
    let text: String = labels.iter().map(|y| format!("{y}\n")).collect();
    write_file(path, text.as_bytes())
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("bad label {l:?}"),
            })
        })
        .collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// One line of the dataset metadata sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub domain_tag: Domain,
    pub seed: u64,
    pub rng: String,
    pub generator_params: GenParams,
}

pub fn metadata_lines(pair: &GeneratedPair, params: &GenParams) -> Result<String> {
    let mut out = String::new();
    for ds in [&pair.source, &pair.target] {
        let meta = DatasetMeta {
            n: ds.len(),
            d: ds.dim(),
            c: params.classes,
            domain_tag: ds.domain,
            seed: params.seed,
            rng: RNG_ALGORITHM.into(),
            generator_params: params.clone(),
        };
        out.push_str(&serde_json::to_string(&meta).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Per-epoch batch index lists. Source batches are class-balanced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: Vec<Vec<Batch>>,
}

/// A queue of shuffled indices that reshuffles itself when exhausted.
struct Cycler {
    items: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(items: Vec<usize>) -> Self {
        let pos = items.len();
        Cycler { items, pos }
    }

    fn reshuffle(&mut self, rng: &mut ChaCha8Rng) {
        self.items.shuffle(rng);
        self.pos = 0;
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.items.len() {
            self.reshuffle(rng);
        }
        self.pos += 1;
        self.items[self.pos - 1]
    }
}

impl BatchPlan {
    /// Stratified plan: per-class queues filled round-robin for the source,
    /// a single shuffled queue for the target. Each epoch has
    /// `ceil(min(n_s, n_t) / b_s)` full batches; shorter queues cycle.
    pub fn new(source: &Dataset, target: &Dataset, batch_size: usize, epochs: usize, seed: u64) -> Result<Self> {
        let labels = source
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("source dataset must be labelled".into()))?;
        let c = source.class_count;
        if batch_size < 3 {
            return Err(Error::Config(format!(
                "batch size must be at least 3, got {batch_size}"
            )));
        }
        if batch_size < c {
            return Err(Error::Config(format!(
                "batch size {batch_size} cannot hold one sample of each of {c} classes"
            )));
        }
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); c];
        for (j, &y) in labels.iter().enumerate() {
            per_class[y].push(j);
        }
        if let Some(class) = per_class.iter().position(Vec::is_empty) {
            return Err(Error::MissingClass {
                class,
                context: "source dataset".into(),
            });
        }
        if target.is_empty() {
            return Err(Error::Data("target dataset is empty".into()));
        }

        let mut rng = rng_from_seed(seed);
        let mut class_queues: Vec<Cycler> = per_class.into_iter().map(Cycler::new).collect();
        let mut target_queue = Cycler::new((0..target.len()).collect());
        let per_epoch = source.len().min(target.len()).div_ceil(batch_size);

        let mut plan = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            for q in &mut class_queues {
                q.reshuffle(&mut rng);
            }
            target_queue.reshuffle(&mut rng);
            let mut next_class = 0;
            let mut batches = Vec::with_capacity(per_epoch);
            for _ in 0..per_epoch {
                let src = (0..batch_size)
                    .map(|_| {
                        let idx = class_queues[next_class].next(&mut rng);
                        next_class = (next_class + 1) % c;
                        idx
                    })
                    .collect();
                let tgt = (0..batch_size).map(|_| target_queue.next(&mut rng)).collect();
                batches.push(Batch {
                    source: src,
                    target: tgt,
                });
            }
            plan.push(batches);
        }
        Ok(BatchPlan {
            seed,
            batch_size,
            epochs: plan,
        })
    }
}

pub fn make_batch_plan(
    source: &Dataset,
    target: &Dataset,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<BatchPlan> {
    BatchPlan::new(source, target, batch_size, epochs, seed)
}

/// `size` distinct indices from `0..n`, uniformly at random.
pub fn random_batch(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, n, size).into_vec()
}
