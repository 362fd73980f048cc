//! Synthetic Gaussian-mixture tasks with an exact Bayes posterior, CSV
//! ingestion, and stratified splitting.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{argmax, Matrix};
use crate::selection::csv_err;

/// Class-conditional isotropic Gaussians with symmetric label noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    /// Per-class isotropic variance.
    pub variances: Vec<f64>,
    pub priors: Vec<f64>,
    /// Probability that a label is replaced by a uniformly drawn other class.
    pub label_noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
}

impl MixtureSpec {
    /// Eight unit-variance classes on a circle of radius 2.2 in the plane,
    /// 10% label noise, 8000/2000/4000 samples.
    pub fn blobs8(seed: u64) -> Self {
        let c = 8;
        let means = (0..c)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
                vec![2.2 * a.cos(), 2.2 * a.sin()]
            })
            .collect();
        MixtureSpec {
            n_classes: c,
            dim: 2,
            means,
            variances: vec![1.0; c],
            priors: vec![1.0 / c as f64; c],
            label_noise: 0.1,
            n_train: 8000,
            n_val: 2000,
            n_test: 4000,
            seed,
        }
    }

    /// Two unit-variance classes whose means are `separation` apart, no noise.
    pub fn separable(separation: f64, seed: u64) -> Self {
        MixtureSpec {
            n_classes: 2,
            dim: 2,
            means: vec![vec![-separation / 2.0, 0.0], vec![separation / 2.0, 0.0]],
            variances: vec![1.0, 1.0],
            priors: vec![0.5, 0.5],
            label_noise: 0.0,
            n_train: 1000,
            n_val: 200,
            n_test: 1000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes;
        if c < 2 || self.dim == 0 {
            return Err(Error::config("mixture needs at least 2 classes and 1 feature"));
        }
        if self.means.len() != c || self.variances.len() != c || self.priors.len() != c {
            return Err(Error::config("means, variances and priors must have one entry per class"));
        }
        if self.means.iter().any(|m| m.len() != self.dim || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::config("every mean must be a finite vector of length dim"));
        }
        if self.variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("variances must be positive"));
        }
        if self.priors.iter().any(|p| !(*p >= 0.0)) || (self.priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("priors must be non-negative and sum to 1"));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::config("label_noise must lie in [0, 0.5)"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("n_train and n_test must be positive"));
        }
        if self.n_train < c {
            return Err(Error::config(format!(
                "n_train={} is too small for {c} classes",
                self.n_train
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: String,
    pub fingerprint: String,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize, split: impl Into<String>) -> Result<Self> {
        if features.rows != labels.len() {
            return Err(Error::config("feature rows and labels differ in count"));
        }
        if let Some(i) = labels.iter().position(|&y| y >= n_classes) {
            return Err(Error::config(format!("label {} at row {i} out of range", labels[i])));
        }
        let fingerprint = content_hash(&features, &labels);
        Ok(Dataset {
            features,
            labels,
            n_classes,
            split: split.into(),
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    pub fn subset(&self, idx: &[usize], split: impl Into<String>) -> Result<Dataset> {
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.features.select_rows(idx), labels, self.n_classes, split)
    }

    pub fn with_split(mut self, split: impl Into<String>) -> Self {
        self.split = split.into();
        self
    }
}

/// SHA-256 over dimensions, feature bits and labels. The split tag is not hashed.
fn content_hash(features: &Matrix, labels: &[usize]) -> String {
    let mut h = Sha256::new();
    h.update((features.rows as u64).to_le_bytes());
    h.update((features.cols as u64).to_le_bytes());
    for v in &features.data {
        h.update(v.to_bits().to_le_bytes());
    }
    for &y in labels {
        h.update((y as u64).to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// A generated split plus the pre-noise class of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDraw {
    pub dataset: Dataset,
    pub latent: Vec<usize>,
}

fn draw(spec: &MixtureSpec, n: usize, rng: &mut ChaCha8Rng, split: &str) -> Result<LabeledDraw> {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    let c = spec.n_classes;
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = c - 1;
        for (j, p) in spec.priors.iter().enumerate() {
            acc += p;
            if u < acc {
                k = j;
                break;
            }
        }
        let sd = spec.variances[k].sqrt();
        for mu in &spec.means[k] {
            data.push(mu + sd * std_normal.sample(rng));
        }
        let y = if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
            let r = rng.random_range(0..c - 1);
            if r >= k {
                r + 1
            } else {
                r
            }
        } else {
            k
        };
        labels.push(y);
        latent.push(k);
    }
    let features = Matrix::from_vec(n, spec.dim, data)?;
    Ok(LabeledDraw {
        dataset: Dataset::new(features, labels, c, split)?,
        latent,
    })
}

pub fn generate_mixture(spec: &MixtureSpec) -> Result<Splits> {
    let [train, val, test] = generate_mixture_detailed(spec)?;
    Ok(Splits {
        train: train.dataset,
        val: val.dataset,
        test: test.dataset,
    })
}

/// Train, val and test draws with their latent classes.
pub fn generate_mixture_detailed(spec: &MixtureSpec) -> Result<[LabeledDraw; 3]> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = draw(spec, spec.n_train, &mut rng, "train")?;
    let val = draw(spec, spec.n_val, &mut rng, "val")?;
    let test = draw(spec, spec.n_test, &mut rng, "test")?;
    Ok([train, val, test])
}

/// Exact class posterior of the observed (noisy) label at `x`.
pub fn bayes_posterior(spec: &MixtureSpec, x: &[f64]) -> Vec<f64> {
    let c = spec.n_classes;
    let logs: Vec<f64> = (0..c)
        .map(|k| {
            let var = spec.variances[k];
            let sq: f64 = x.iter().zip(&spec.means[k]).map(|(a, m)| (a - m).powi(2)).sum();
            spec.priors[k].ln() - 0.5 * spec.dim as f64 * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    let eta = spec.label_noise;
    w.iter()
        .map(|v| {
            let p = v / s;
            (1.0 - eta) * p + eta * (1.0 - p) / (c - 1) as f64
        })
        .collect()
}

/// Accuracy of the Bayes classifier on a dataset drawn from `spec`.
pub fn bayes_accuracy(spec: &MixtureSpec, data: &Dataset) -> f64 {
    let hits = (0..data.len())
        .filter(|&i| argmax(&bayes_posterior(spec, data.features.row(i))) == data.labels[i])
        .count();
    hits as f64 / data.len().max(1) as f64
}

/// Reads `f0,...,f{d-1},label`. With `n_classes = None` the class count is
/// one more than the largest label.
pub fn load_csv_dataset(path: &Path, n_classes: Option<usize>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let d = headers.len().saturating_sub(1);
    let expected: Vec<String> = (0..d).map(|i| format!("f{i}")).chain(["label".to_string()]).collect();
    if d == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be {}", expected.join(",")),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if rec.len() != d + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        for (j, cell) in rec.iter().take(d).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("feature f{j} is not numeric: '{cell}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("feature f{j} is not finite") });
            }
            data.push(v);
        }
        let cell = &rec[d];
        let y: usize = cell.trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("label is not a non-negative integer: '{cell}'"),
        })?;
        if let Some(c) = n_classes {
            if y >= c {
                return Err(Error::Parse {
                    line,
                    msg: format!("label {y} out of range for {c} classes"),
                });
            }
        }
        labels.push(y);
    }
    let c = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let n = labels.len();
    Dataset::new(Matrix::from_vec(n, d, data)?, labels, c, "csv")
}

pub fn save_csv_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let d = data.dim();
    let header: Vec<String> = (0..d).map(|i| format!("f{i}")).chain(["label".to_string()]).collect();
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.labels[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-feature affine map fitted on one split and reused on the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    /// Mean and population standard deviation per feature; constant
    /// features get unit scale.
    pub fn fit(data: &Dataset) -> Self {
        let (n, d) = (data.len(), data.dim());
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(data.features.row(i)) {
                *m += v / n as f64;
            }
        }
        for i in 0..n {
            for ((s, m), v) in sd.iter_mut().zip(&mean).zip(data.features.row(i)) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        sd.iter_mut().for_each(|s| *s = if *s > 0.0 { s.sqrt() } else { 1.0 });
        Standardization { mean, sd }
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        if data.dim() != self.mean.len() {
            return Err(Error::config(format!(
                "standardization fitted on {} features, data has {}",
                self.mean.len(),
                data.dim()
            )));
        }
        for i in 0..data.len() {
            for ((v, m), s) in data.features.row_mut(i).iter_mut().zip(&self.mean).zip(&self.sd) {
                *v = (*v - m) / s;
            }
        }
        data.fingerprint = content_hash(&data.features, &data.labels);
        Ok(())
    }
}

/// Fits a [`Standardization`] on `data` and applies it in place.
pub fn standardize(data: &mut Dataset) -> Standardization {
    let st = Standardization::fit(data);
    st.apply(data).expect("fitted on the same data");
    st
}

/// Stratified, seeded split. Each class is shuffled and cut at
/// `round(cumulative_fraction * n_class)`, so per-class counts are within
/// one of the exact fraction. Rows keep their original relative order.
pub fn split_dataset(data: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::config("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::config("split fractions sum to more than 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for class in 0..data.n_classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < fractions.len() {
            return Err(Error::config(format!(
                "class {class} has {} samples, fewer than {} split parts",
                idx.len(),
                fractions.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let mut cum = 0.0;
        let mut start = 0usize;
        for (j, f) in fractions.iter().enumerate() {
            cum += f;
            let end = ((cum.min(1.0) * n).round() as usize).min(idx.len());
            parts[j].extend_from_slice(&idx[start..end.max(start)]);
            start = end.max(start);
        }
    }
    parts
        .into_iter()
        .enumerate()
        .map(|(j, mut p)| {
            p.sort_unstable();
            data.subset(&p, format!("{}.{j}", data.split))
        })
        .collect()
}
