//! Datasets: CSV ingestion, min-max scaling, splitting and synthetic
//! generators.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labeled samples with their Euclidean norm bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: Vec<String>,
    norm_bound: f64,
}

fn euclidean(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl Dataset {
    /// `classes[c]` names class index `c`. The norm bound is always recomputed.
    pub fn new(samples: Vec<Vec<f64>>, labels: Vec<usize>, classes: Vec<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidDataset("no samples".into()));
        }
        if samples.len() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        let n = samples[0].len();
        if n == 0 {
            return Err(Error::InvalidDataset("samples have no features".into()));
        }
        if let Some(i) = samples.iter().position(|x| x.len() != n) {
            return Err(Error::InvalidDataset(format!(
                "sample {i} has {} features, expected {n}",
                samples[i].len()
            )));
        }
        if let Some(i) = samples.iter().position(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidDataset(format!("sample {i} has a non-finite value")));
        }
        if let Some(i) = labels.iter().position(|&y| y >= classes.len()) {
            return Err(Error::InvalidDataset(format!(
                "label {} of sample {i} exceeds the {} classes",
                labels[i],
                classes.len()
            )));
        }
        let norm_bound = samples.iter().map(|x| euclidean(x)).fold(0.0, f64::max);
        Ok(Dataset {
            samples,
            labels,
            classes,
            norm_bound,
        })
    }

    /// Classes named `"0"`, `"1"`, ... up to `num_classes - 1`.
    pub fn with_numbered_classes(
        samples: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        Self::new(samples, labels, (0..num_classes).map(|c| c.to_string()).collect())
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// `r = max_i ||x^i||_2`.
    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    /// Rows at `indices`, in that order, sharing the label mapping.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "index {i} out of range for {} samples",
                self.len()
            )));
        }
        Dataset::new(
            indices.iter().map(|&i| self.samples[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes.clone(),
        )
    }

    /// Writes a CSV with header `x0,...,x{n-1},label`, labels as class names.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        writer.write_record(&header).map_err(|e| csv_io(path, e))?;
        for (x, &y) in self.samples.iter().zip(&self.labels) {
            let mut record: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            record.push(self.classes[y].clone());
            writer.write_record(&record).map_err(|e| csv_io(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, err: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row: err.position().map_or(0, |p| p.line() as usize),
        message: err.to_string(),
    }
}

/// How CSV label strings are turned into class indices.
enum LabelMap<'a> {
    FirstAppearance(HashMap<String, usize>, Vec<String>),
    Fixed(&'a [String]),
}

/// Reads a CSV of numeric features and one label column.
///
/// `label_column` defaults to the last column. Labels are numbered in order of
/// first appearance.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<usize>, has_header: bool) -> Result<Dataset> {
    read_csv(
        path.as_ref(),
        label_column,
        has_header,
        LabelMap::FirstAppearance(HashMap::new(), Vec::new()),
    )
}

/// Like [`load_csv`], but maps labels through a known class list (as saved
/// with trained parameters). Unknown labels are an error.
pub fn load_csv_with_classes(
    path: impl AsRef<Path>,
    label_column: Option<usize>,
    has_header: bool,
    classes: &[String],
) -> Result<Dataset> {
    read_csv(path.as_ref(), label_column, has_header, LabelMap::Fixed(classes))
}

fn read_csv(
    path: &Path,
    label_column: Option<usize>,
    has_header: bool,
    mut labels_map: LabelMap<'_>,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| csv_io(path, e))?;
        let row = record.position().map_or(samples.len() + 1, |p| p.line() as usize);
        let err = |message: String| Error::Csv {
            path: path.to_path_buf(),
            row,
            message,
        };
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(err(format!("expected {expected} fields, found {}", record.len())));
        }
        if expected < 2 {
            return Err(err("need at least one feature and a label".into()));
        }
        let label_idx = label_column.unwrap_or(expected - 1);
        if label_idx >= expected {
            return Err(err(format!("label column {label_idx} out of range")));
        }
        let mut x = Vec::with_capacity(expected - 1);
        for (j, field) in record.iter().enumerate() {
            if field.is_empty() {
                return Err(err(format!("missing value in column {j}")));
            }
            if j == label_idx {
                continue;
            }
            let v: f64 = field
                .parse()
                .map_err(|_| err(format!("non-numeric value {field:?} in column {j}")))?;
            x.push(v);
        }
        let label = &record[label_idx];
        let y = match &mut labels_map {
            LabelMap::FirstAppearance(map, names) => *map.entry(label.to_string()).or_insert_with(|| {
                names.push(label.to_string());
                names.len() - 1
            }),
            LabelMap::Fixed(names) => names
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| err(format!("unknown label {label:?}")))?,
        };
        samples.push(x);
        labels.push(y);
    }
    if samples.is_empty() {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            row: 0,
            message: "file contains no data rows".into(),
        });
    }
    let classes = match labels_map {
        LabelMap::FirstAppearance(_, names) => names,
        LabelMap::Fixed(names) => names.to_vec(),
    };
    Dataset::new(samples, labels, classes)
}

/// Per-attribute affine map onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(dataset: &Dataset) -> Self {
        let n = dataset.dim();
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for x in dataset.samples() {
            for j in 0..n {
                min[j] = min[j].min(x[j]);
                max[j] = max[j].max(x[j]);
            }
        }
        MinMaxScaler { min, max }
    }

    /// Constant attributes map to 0.
    pub fn transform_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                let range = self.max[j] - self.min[j];
                if range > 0.0 {
                    (v - self.min[j]) / range
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn inverse_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| self.min[j] + v * (self.max[j] - self.min[j]))
            .collect()
    }

    pub fn transform(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.dim() != self.min.len() {
            return Err(Error::DimensionMismatch {
                expected: self.min.len(),
                got: dataset.dim(),
            });
        }
        Dataset::new(
            dataset.samples().iter().map(|x| self.transform_row(x)).collect(),
            dataset.labels().to_vec(),
            dataset.classes().to_vec(),
        )
    }
}

/// Fits a scaler on `dataset` and applies it.
pub fn minmax_scale(dataset: &Dataset) -> Result<(Dataset, MinMaxScaler)> {
    let scaler = MinMaxScaler::fit(dataset);
    Ok((scaler.transform(dataset)?, scaler))
}

/// Three-part random dataset: a third with entries in `[0, 10]` labeled 1, a
/// third in `[-10, 0]` labeled 0, and the rest in `[-1, 1]` with random
/// labels. The remainder of `m_total / 3` goes to the noisy part.
pub fn synthetic_random(m_total: usize, n: usize, seed: u64) -> Result<Dataset> {
    if m_total == 0 || n == 0 {
        return Err(Error::InvalidArgument("need m_total >= 1 and n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let third = m_total / 3;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(m_total);
    for _ in 0..third {
        rows.push(((0..n).map(|_| rng.random_range(0.0..=10.0)).collect(), 1));
    }
    for _ in 0..third {
        rows.push(((0..n).map(|_| rng.random_range(-10.0..=0.0)).collect(), 0));
    }
    for _ in 0..m_total - 2 * third {
        let x = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        rows.push((x, rng.random_range(0..2)));
    }
    rows.shuffle(&mut rng);
    let (samples, labels) = rows.into_iter().unzip();
    Dataset::with_numbered_classes(samples, labels, 2)
}

/// Two spherical Gaussian clusters with unit variance centered at
/// `±separation/2` along the diagonal; labels alternate 0, 1, 0, ...
pub fn gaussian_blobs(m: usize, n: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("need m >= 1 and n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let offset = separation / 2.0 / (n as f64).sqrt();
    let mut samples = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let y = i % 2;
        let center = if y == 1 { offset } else { -offset };
        samples.push((0..n).map(|_| center + normal.sample(&mut rng)).collect());
        labels.push(y);
    }
    Dataset::with_numbered_classes(samples, labels, 2)
}

/// Train/validation/test fractions and the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train,
            val,
            test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must lie in [0, 1], got {parts:?}"
            )));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Part sizes by largest remainder; ties go to the earlier part.
    pub fn sizes(&self, m: usize) -> [usize; 3] {
        let fractions = [self.train, self.val, self.test];
        let exact: Vec<f64> = fractions.iter().map(|f| f * m as f64).collect();
        let mut sizes = [0usize; 3];
        for (s, e) in sizes.iter_mut().zip(&exact) {
            *s = (e + 1e-9).floor() as usize;
        }
        let mut left = m.saturating_sub(sizes.iter().sum());
        let mut order: Vec<usize> = (0..3).filter(|&i| fractions[i] > 0.0).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - sizes[a] as f64;
            let rb = exact[b] - sizes[b] as f64;
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        sizes
    }
}

/// Shuffled, disjoint, covering split. Empty parts are returned as `None`.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Option<Dataset>, Option<Dataset>)> {
    spec.validate()?;
    let sizes = spec.sizes(dataset.len());
    let fractions = [spec.train, spec.val, spec.test];
    for (i, name) in ["train", "validation", "test"].iter().enumerate() {
        if fractions[i] > 0.0 && sizes[i] == 0 {
            return Err(Error::InvalidArgument(format!(
                "{name} fraction {} of {} samples rounds to an empty part",
                fractions[i],
                dataset.len()
            )));
        }
    }
    if sizes[0] == 0 {
        return Err(Error::InvalidArgument("training part is empty".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (train_idx, rest) = order.split_at(sizes[0]);
    let (val_idx, test_idx) = rest.split_at(sizes[1]);
    let part = |idx: &[usize]| -> Result<Option<Dataset>> {
        if idx.is_empty() {
            Ok(None)
        } else {
            dataset.subset(idx).map(Some)
        }
    };
    Ok((dataset.subset(train_idx)?, part(val_idx)?, part(test_idx)?))
}
