//! Dataset loading: synthetic generators, IDX image files and labelled CSV.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: truncated IDX payload, expected {expected} bytes after the header but found {actual}")]
    IdxTruncated { path: PathBuf, expected: usize, actual: usize },
    #[error("{path}: byte {offset}: {detail}")]
    IdxFormat { path: PathBuf, offset: usize, detail: String },
    #[error("{path}: line {line}, byte {offset}: {detail}")]
    Csv { path: PathBuf, line: u64, offset: u64, detail: String },
    #[error("bad data source `{0}`: {1}")]
    Source(String, String),
    #[error("label {label} at sample {index} is out of range for {classes} classes")]
    Label { index: usize, label: usize, classes: usize },
    #[error("dataset has {0} samples; need at least one training and one test sample")]
    TooSmall(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Labelled samples; `x` has shape `[n, ...sample_shape]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if x.rows() != labels.len() {
            return Err(DataError::Source(
                "in-memory".into(),
                format!("{} rows but {} labels", x.rows(), labels.len()),
            ));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::Label { index, label, classes });
        }
        Ok(Self { x, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        Ok(Dataset {
            x: self.x.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// Reinterprets each sample with `shape`, which must hold the same number
    /// of features.
    pub fn reshape_samples(&self, shape: &[usize]) -> Result<Dataset, DataError> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        Ok(Dataset {
            x: self.x.reshape(&full)?,
            labels: self.labels.clone(),
            classes: self.classes,
        })
    }
}

/// Train/test split with a seeded per-epoch shuffle of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStream {
    pub train: Dataset,
    pub test: Dataset,
    pub seed: u64,
}

impl DatasetStream {
    pub fn new(train: Dataset, test: Dataset, seed: u64) -> Self {
        Self { train, test, seed }
    }

    /// Full steps per epoch; a trailing partial batch is dropped.
    pub fn steps_per_epoch(&self, batch: usize) -> usize {
        self.train.len().checked_div(batch).unwrap_or(0)
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Rows `[offset, offset + len)` of batch `step` (of size `batch`) in the
    /// shuffled order of `epoch`, as inputs plus one-hot labels.
    pub fn batch(
        &self,
        order: &[usize],
        step: usize,
        batch: usize,
        offset: usize,
        len: usize,
    ) -> Result<(Tensor, Tensor, Vec<usize>), DataError> {
        let start = step * batch + offset;
        let idx = &order[start..start + len];
        let labels: Vec<usize> = idx.iter().map(|&i| self.train.labels[i]).collect();
        Ok((
            self.train.x.select_rows(idx)?,
            Tensor::one_hot(&labels, self.train.classes)?,
            labels,
        ))
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs { samples: usize, classes: usize, dims: usize, spread: f64 },
    Spiral { samples: usize, classes: usize, noise: f64 },
    /// Images and labels; with `test` absent a fraction is held out.
    Idx { images: PathBuf, labels: PathBuf, test: Option<(PathBuf, PathBuf)> },
    Csv { path: PathBuf },
}

/// Parses `blobs[:k=v,...]`, `spiral[:k=v,...]`, `idx:IMAGES,LABELS[,TEST_IMAGES,TEST_LABELS]`
/// or `csv:PATH`.
impl FromStr for DataSource {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| DataError::Source(s.to_string(), m);
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let kv = || -> Result<Vec<(&str, &str)>, DataError> {
            rest.split(',')
                .filter(|p| !p.is_empty())
                .map(|p| p.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{p}`"))))
                .collect()
        };
        let num = |k: &str, v: &str| -> Result<f64, DataError> { v.parse().map_err(|_| bad(format!("{k}: not a number: `{v}`"))) };
        match kind {
            "blobs" => {
                let mut src = DataSource::Blobs {
                    samples: 512,
                    classes: 2,
                    dims: 4,
                    spread: 0.5,
                };
                if let DataSource::Blobs { samples, classes, dims, spread } = &mut src {
                    for (k, v) in kv()? {
                        match k {
                            "n" | "samples" => *samples = num(k, v)? as usize,
                            "classes" => *classes = num(k, v)? as usize,
                            "dims" => *dims = num(k, v)? as usize,
                            "spread" => *spread = num(k, v)?,
                            _ => return Err(bad(format!("unknown key `{k}`"))),
                        }
                    }
                }
                Ok(src)
            }
            "spiral" => {
                let mut src = DataSource::Spiral {
                    samples: 600,
                    classes: 3,
                    noise: 0.1,
                };
                if let DataSource::Spiral { samples, classes, noise } = &mut src {
                    for (k, v) in kv()? {
                        match k {
                            "n" | "samples" => *samples = num(k, v)? as usize,
                            "classes" => *classes = num(k, v)? as usize,
                            "noise" => *noise = num(k, v)?,
                            _ => return Err(bad(format!("unknown key `{k}`"))),
                        }
                    }
                }
                Ok(src)
            }
            "idx" => {
                let parts: Vec<&str> = rest.split(',').collect();
                match parts.as_slice() {
                    [i, l] => Ok(DataSource::Idx {
                        images: i.into(),
                        labels: l.into(),
                        test: None,
                    }),
                    [i, l, ti, tl] => Ok(DataSource::Idx {
                        images: i.into(),
                        labels: l.into(),
                        test: Some((ti.into(), tl.into())),
                    }),
                    _ => Err(bad("expected idx:IMAGES,LABELS[,TEST_IMAGES,TEST_LABELS]".into())),
                }
            }
            "csv" if !rest.is_empty() => Ok(DataSource::Csv { path: rest.into() }),
            _ => Err(bad("expected blobs, spiral, idx:... or csv:PATH".into())),
        }
    }
}

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Loads `source`, shuffles it with `seed` and holds out `test_fraction` of
/// the samples unless the source names its own test files.
pub fn load_dataset(source: &DataSource, seed: u64, test_fraction: f64) -> Result<DatasetStream, DataError> {
    let all = match source {
        DataSource::Blobs { samples, classes, dims, spread } => blobs(*samples, *classes, *dims, *spread, seed)?,
        DataSource::Spiral { samples, classes, noise } => spiral(*samples, *classes, *noise, seed)?,
        DataSource::Idx { images, labels, test: Some((ti, tl)) } => {
            let train = read_idx_pair(images, labels)?;
            let test = read_idx_pair(ti, tl)?;
            let classes = train.classes.max(test.classes);
            return Ok(DatasetStream::new(
                Dataset { classes, ..train },
                Dataset { classes, ..test },
                seed,
            ));
        }
        DataSource::Idx { images, labels, test: None } => read_idx_pair(images, labels)?,
        DataSource::Csv { path } => read_csv(path)?,
    };
    split(all, seed, test_fraction)
}

fn split(all: Dataset, seed: u64, test_fraction: f64) -> Result<DatasetStream, DataError> {
    let n = all.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n < 2 || n_test == 0 || n_test >= n {
        return Err(DataError::TooSmall(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test_idx, train_idx) = order.split_at(n_test);
    Ok(DatasetStream::new(all.subset(train_idx)?, all.subset(test_idx)?, seed))
}

/// Gaussian blobs around class centres drawn uniformly from `[-3, 3]^dims`.
pub fn blobs(samples: usize, classes: usize, dims: usize, spread: f64, seed: u64) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dims).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    let mut data = Vec::with_capacity(samples * dims);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        for &m in &centres[c] {
            data.push(m + spread * gaussian(&mut rng));
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![samples, dims], data)?, labels, classes)
}

/// Interleaved 2-D spiral arms, one per class.
pub fn spiral(samples: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = samples.div_ceil(classes.max(1));
    let mut data = Vec::with_capacity(samples * 2);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        let j = i / classes;
        let r = (j as f64 + 0.5) / per_class as f64;
        let theta = c as f64 * std::f64::consts::TAU / classes as f64 + 4.0 * r + noise * gaussian(&mut rng);
        data.push(r * theta.sin());
        data.push(r * theta.cos());
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![samples, 2], data)?, labels, classes)
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses an IDX file with unsigned-byte elements; returns the dimensions and
/// the raw payload.
pub fn parse_idx(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let fmt = |offset: usize, detail: String| DataError::IdxFormat {
        path: path.to_path_buf(),
        offset,
        detail,
    };
    let word = |off: usize| -> Result<u32, DataError> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| fmt(off, format!("header ends after {} bytes", bytes.len())))
    };
    let got = word(0)?;
    if got != magic {
        return Err(fmt(0, format!("magic {got:#010x}, expected {magic:#010x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..ndims).map(|d| word(4 + 4 * d).map(|v| v as usize)).collect::<Result<_, _>>()?;
    let header = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let actual = bytes.len() - header;
    if actual < expected {
        return Err(DataError::IdxTruncated {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(fmt(header + expected, format!("{} trailing bytes", actual - expected)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Images scaled to `[0, 1]`, sample shape `[rows, cols]`.
pub fn read_idx_pair(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let (idims, pixels) = parse_idx(images, &read_file(images)?, IDX_IMAGES_MAGIC)?;
    let (ldims, raw_labels) = parse_idx(labels, &read_file(labels)?, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(DataError::IdxFormat {
            path: labels.to_path_buf(),
            offset: 4,
            detail: format!("{} labels for {} images", ldims[0], idims[0]),
        });
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let x = Tensor::new(idims, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Dataset::new(x, labels, classes)
}

/// CSV with header `label,f0,f1,...`.
pub fn read_csv(path: &Path) -> Result<Dataset, DataError> {
    let text = read_file(path)?;
    parse_csv(path, &text)
}

pub fn parse_csv(path: &Path, text: &[u8]) -> Result<Dataset, DataError> {
    let err = |pos: Option<&csv::Position>, detail: String| DataError::Csv {
        path: path.to_path_buf(),
        line: pos.map_or(0, |p| p.line()),
        offset: pos.map_or(0, |p| p.byte()),
        detail,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text);
    let header = reader.headers().map_err(|e| err(e.position(), e.to_string()))?.clone();
    let features = header.len().saturating_sub(1);
    if header.get(0) != Some("label") || features == 0 {
        return Err(err(None, "header must be `label,f0,f1,...`".into()));
    }
    for (i, h) in header.iter().skip(1).enumerate() {
        if h != format!("f{i}") {
            return Err(err(None, format!("column {} is `{h}`, expected `f{i}`", i + 1)));
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| err(e.position(), e.to_string()))?;
        let pos = rec.position();
        let label: usize = rec[0]
            .parse()
            .map_err(|_| err(pos, format!("label `{}` is not a non-negative integer", &rec[0])))?;
        labels.push(label);
        for field in rec.iter().skip(1) {
            data.push(field.parse::<f64>().map_err(|_| err(pos, format!("`{field}` is not a number")))?);
        }
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![labels.len(), features], data)?, labels, classes)
}
