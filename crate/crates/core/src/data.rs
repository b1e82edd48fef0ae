//! Dataset loaders (IDX, CIFAR-10 binary, CSV) and constant-norm preprocessing.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TARGET_ON: f64 = 0.9;
pub const TARGET_OFF: f64 = -0.1;
pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_RECORD: usize = 1 + 3072;
pub const NUM_CLASSES: usize = 10;

/// Rows already within this relative distance of the target norm are left untouched, which
/// makes normalization exactly idempotent.
const NORM_TOLERANCE: f64 = 1e-12;

/// Inputs (one row per point) with integer class labels, before preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl RawDataset {
    pub fn new(inputs: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Input(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(RawDataset { inputs, labels })
    }

    pub fn empty() -> Self {
        RawDataset {
            inputs: DMatrix::zeros(0, 0),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reads a whole file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, kind: &'static str, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            kind,
            offset: offset as u64,
            msg: format!("truncated header while reading {what}"),
        })
}

/// Parses an IDX image file: magic 2051, count, rows, cols, then bytes. Pixels are scaled
/// to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<DMatrix<f64>> {
    const KIND: &str = "IDX image";
    let magic = be_u32(bytes, 0, KIND, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            kind: KIND,
            offset: 0,
            msg: format!("magic {magic}, expected {IDX_IMAGES_MAGIC}"),
        });
    }
    let n = be_u32(bytes, 4, KIND, "image count")? as usize;
    let rows = be_u32(bytes, 8, KIND, "row count")? as usize;
    let cols = be_u32(bytes, 12, KIND, "column count")? as usize;
    let d = rows * cols;
    let payload = &bytes[16..];
    if payload.len() != n * d {
        return Err(Error::Format {
            kind: KIND,
            offset: 16 + payload.len().min(n * d) as u64,
            msg: format!(
                "payload has {} bytes, header promises {n} images of {rows}x{cols}",
                payload.len()
            ),
        });
    }
    Ok(DMatrix::from_row_iterator(
        n,
        d,
        payload.iter().map(|&b| b as f64 / 255.0),
    ))
}

/// Parses an IDX label file: magic 2049, count, then one byte per label (< 10).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    const KIND: &str = "IDX label";
    let magic = be_u32(bytes, 0, KIND, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            kind: KIND,
            offset: 0,
            msg: format!("magic {magic}, expected {IDX_LABELS_MAGIC}"),
        });
    }
    let n = be_u32(bytes, 4, KIND, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format {
            kind: KIND,
            offset: 8 + payload.len().min(n) as u64,
            msg: format!("payload has {} bytes, header promises {n}", payload.len()),
        });
    }
    payload
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < NUM_CLASSES {
                Ok(b as usize)
            } else {
                Err(Error::Format {
                    kind: KIND,
                    offset: 8 + i as u64,
                    msg: format!("label {b} is not below {NUM_CLASSES}"),
                })
            }
        })
        .collect()
}

/// Loads an MNIST-style image/label pair; either file may be gzipped.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<RawDataset> {
    let x = parse_idx_images(&read_maybe_gz(images)?)?;
    let y = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if x.nrows() != y.len() {
        return Err(Error::Data(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            x.nrows(),
            labels.display(),
            y.len()
        )));
    }
    RawDataset::new(x, y)
}

/// Parses CIFAR-10 binary records: one label byte followed by 3072 pixel bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<RawDataset> {
    const KIND: &str = "CIFAR-10";
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            kind: KIND,
            offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            msg: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if record[0] as usize >= NUM_CLASSES {
            return Err(Error::Format {
                kind: KIND,
                offset: (i * CIFAR_RECORD) as u64,
                msg: format!("label {} is not below {NUM_CLASSES}", record[0]),
            });
        }
        labels.push(record[0] as usize);
    }
    let inputs = DMatrix::from_row_iterator(
        n,
        CIFAR_RECORD - 1,
        bytes
            .chunks_exact(CIFAR_RECORD)
            .flat_map(|r| r[1..].iter().map(|&b| b as f64 / 255.0)),
    );
    RawDataset::new(inputs, labels)
}

pub fn load_cifar10_binary(path: &Path) -> Result<RawDataset> {
    parse_cifar10(&read_maybe_gz(path)?)
}

/// Loads a headered CSV with a `label` column; every other column is a feature. Rows and
/// columns in parse errors are 1-based and count the header as row 1.
pub fn load_csv(path: &Path) -> Result<RawDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Ok(RawDataset::empty());
    }
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Data(format!("{}: no 'label' column", path.display())))?;
    let d = headers.len() - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 2;
        let parse_err = |column: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: column + 1,
            msg,
        };
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if c == label_col {
                let label: usize = cell
                    .parse()
                    .map_err(|_| parse_err(c, format!("label {cell:?} is not a class index")))?;
                labels.push(label);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(c, format!("{cell:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(c, format!("{cell:?} is not finite")));
                }
                values.push(v);
            }
        }
    }
    RawDataset::new(
        DMatrix::from_row_iterator(labels.len(), d, values),
        labels,
    )
}

/// Sizes of the train, validation and test partitions, taken in that order from the
/// shuffled points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, validation: usize, test: usize) -> Self {
        SplitSizes {
            train,
            validation,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// A contiguous selection of a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// Row indices into the original dataset.
    pub ids: Vec<usize>,
}

impl Subset {
    /// Normalizes and encodes `raw` in file order, without shuffling or splitting.
    pub fn from_raw(raw: &RawDataset, d_out: usize) -> Result<Subset> {
        let mut inputs = raw.inputs.clone();
        normalize_rows(&mut inputs)?;
        Ok(Subset {
            inputs,
            targets: encode_targets(&raw.labels, d_out)?,
            labels: raw.labels.clone(),
            ids: (0..raw.len()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The first `n` points.
    pub fn head(&self, n: usize) -> Subset {
        let n = n.min(self.len());
        Subset {
            inputs: self.inputs.rows(0, n).into_owned(),
            targets: self.targets.rows(0, n).into_owned(),
            labels: self.labels[..n].to_vec(),
            ids: self.ids[..n].to_vec(),
        }
    }
}

/// `n` Gaussian random points in `d` dimensions rescaled to `|x|^2 = d`.
pub fn random_constant_norm_points(n: usize, d: usize, seed: u64) -> Result<DMatrix<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    normalize_rows(&mut x)?;
    Ok(x)
}

/// Normalized inputs in their original order with encoded targets and a seeded split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// Enforced value of `|x|^2`, equal to the input dimension.
    pub norm_constant: f64,
    pub train_ids: Vec<usize>,
    pub validation_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl Dataset {
    pub fn d_in(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.targets.ncols()
    }

    pub fn split(&self) -> SplitSizes {
        SplitSizes::new(
            self.train_ids.len(),
            self.validation_ids.len(),
            self.test_ids.len(),
        )
    }

    pub fn select(&self, ids: &[usize]) -> Subset {
        Subset {
            inputs: self.inputs.select_rows(ids),
            targets: self.targets.select_rows(ids),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            ids: ids.to_vec(),
        }
    }

    pub fn train(&self) -> Subset {
        self.select(&self.train_ids)
    }

    pub fn validation(&self) -> Subset {
        self.select(&self.validation_ids)
    }

    pub fn test(&self) -> Subset {
        self.select(&self.test_ids)
    }

    /// The normalized inputs and labels, suitable for feeding back into [`preprocess`].
    pub fn to_raw(&self) -> RawDataset {
        RawDataset {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// One-hot rows with [`TARGET_ON`] at the label and [`TARGET_OFF`] elsewhere.
pub fn encode_targets(labels: &[usize], d_out: usize) -> Result<DMatrix<f64>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= d_out) {
        return Err(Error::Data(format!("label {bad} does not fit {d_out} classes")));
    }
    Ok(DMatrix::from_fn(labels.len(), d_out, |i, j| {
        if labels[i] == j {
            TARGET_ON
        } else {
            TARGET_OFF
        }
    }))
}

/// Rescales every row to `|x|^2 = d_in`. Zero rows are rejected by index.
pub fn normalize_rows(inputs: &mut DMatrix<f64>) -> Result<()> {
    let d = inputs.ncols() as f64;
    for (i, mut row) in inputs.row_iter_mut().enumerate() {
        let sq = row.norm_squared();
        if !(sq > 0.0) || !sq.is_finite() {
            return Err(Error::Data(format!(
                "row {i} has squared norm {sq}; cannot rescale to a common norm"
            )));
        }
        if (sq - d).abs() > NORM_TOLERANCE * d {
            row *= (d / sq).sqrt();
        }
    }
    Ok(())
}

/// Normalizes inputs, encodes targets, then shuffles point indices with `seed` and cuts
/// them into consecutive train, validation and test partitions.
pub fn preprocess(raw: &RawDataset, d_out: usize, split: SplitSizes, seed: u64) -> Result<Dataset> {
    if raw.inputs.nrows() != raw.labels.len() {
        return Err(Error::Input("input rows and labels differ in count".into()));
    }
    let n = raw.len();
    if split.total() > n {
        return Err(Error::Data(format!(
            "split {}+{}+{} exceeds the {n} available points",
            split.train, split.validation, split.test
        )));
    }
    if raw.inputs.ncols() == 0 && n > 0 {
        return Err(Error::Data("inputs have dimension 0".into()));
    }
    let mut inputs = raw.inputs.clone();
    normalize_rows(&mut inputs)?;
    let targets = encode_targets(&raw.labels, d_out)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, rest) = order.split_at(split.train);
    let (validation, rest) = rest.split_at(split.validation);
    let test = &rest[..split.test];

    Ok(Dataset {
        norm_constant: inputs.ncols() as f64,
        inputs,
        targets,
        labels: raw.labels.clone(),
        train_ids: train.to_vec(),
        validation_ids: validation.to_vec(),
        test_ids: test.to_vec(),
    })
}
