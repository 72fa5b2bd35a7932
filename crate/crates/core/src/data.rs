//! Classifier outputs: ingestion, persistence, softmax and seeded splits.
//!
//! Logits are stored as `f32` because the canonical binary format carries
//! IEEE-754 binary32 values; every derived quantity is computed in `f64`.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, Role};

/// Magic bytes opening a binary dataset.
pub const MAGIC: [u8; 4] = *b"CPL1";
/// Current binary format version.
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

/// Row-major `n × k` matrix of pre-softmax classifier outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    n: usize,
    k: usize,
    values: Vec<f32>,
}

impl LogitMatrix {
    pub fn new(n: usize, k: usize, values: Vec<f32>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("logits", "need at least one example"));
        }
        if k < 2 {
            return Err(Error::invalid("logits", format!("need at least 2 classes, got {k}")));
        }
        if values.len() != n * k {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: n * k,
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: (pos / k) as u64 + 1,
                column: pos % k + 1,
            });
        }
        Ok(Self { n, k, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.k)
    }
}

/// Row-major `n × k` matrix of class probabilities; every row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

/// Tolerance on row sums of a probability matrix.
pub const ROW_SUM_TOL: f64 = 1e-6;

impl ProbabilityMatrix {
    pub fn new(n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::invalid("probabilities", "empty matrix"));
        }
        if values.len() != n * k {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: n * k,
            });
        }
        for (i, row) in values.chunks_exact(k).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid("probabilities", format!("row {i} has an entry outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid("probabilities", format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { n, k, values })
    }

    /// Builds a matrix from rows, validating each.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let k = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * k);
        for r in rows {
            let r = r.as_ref();
            if r.len() != k {
                return Err(Error::LengthMismatch { left: r.len(), right: k });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), k, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.k)
    }

    /// Keeps only the listed rows, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.k);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            n: indices.len(),
            k: self.k,
            values,
        }
    }
}

/// Logits paired with ground-truth class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    logits: LogitMatrix,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(logits: LogitMatrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != logits.n() {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: logits.n(),
            });
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= logits.k()) {
            return Err(Error::LabelRange {
                row: i as u64 + 1,
                label: y as i64,
                k: logits.k(),
            });
        }
        Ok(Self { logits, labels })
    }

    pub fn logits(&self) -> &LogitMatrix {
        &self.logits
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.logits.n()
    }

    pub fn k(&self) -> usize {
        self.logits.k()
    }

    /// Keeps only the listed examples, in the listed order. Indices must be
    /// in range and the result non-empty.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let k = self.k();
        let mut values = Vec::with_capacity(indices.len() * k);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.logits.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(LogitMatrix::new(indices.len(), k, values)?, labels)
    }
}

// ---------------------------------------------------------------------------
// CSV

/// Reads a labeled CSV file: `k` logits followed by an integer label per row.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    parse_csv(BufReader::new(File::open(path)?))
}

/// Reads a CSV file whose rows hold logits only (no label column).
pub fn load_csv_unlabeled(path: impl AsRef<Path>) -> Result<LogitMatrix> {
    let (logits, _) = parse_csv_rows(BufReader::new(File::open(path)?), false)?;
    Ok(logits)
}

/// Parses labeled CSV from any reader. Row numbers in errors are 1-based
/// physical line numbers.
pub fn parse_csv(reader: impl Read) -> Result<LabeledDataset> {
    let (logits, labels) = parse_csv_rows(reader, true)?;
    LabeledDataset::new(logits, labels)
}

fn parse_csv_rows(reader: impl Read, labeled: bool) -> Result<(LogitMatrix, Vec<usize>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let extra = usize::from(labeled);
    let mut width: Option<usize> = None;
    let mut values: Vec<f32> = Vec::new();
    let mut labels = Vec::new();
    let mut first = true;
    let mut record = csv::StringRecord::new();

    while rdr.read_record(&mut record)? {
        let row = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        if first {
            first = false;
            let head = record.get(0).unwrap_or("");
            if head.parse::<f64>().is_err() {
                continue;
            }
        }
        let fields = record.len();
        let expected = *width.get_or_insert(fields);
        if fields != expected {
            return Err(Error::RaggedRow { row, expected, found: fields });
        }
        let k = expected.saturating_sub(extra);
        if k < 2 {
            return Err(Error::invalid("csv", format!("row {row}: need at least 2 logit columns")));
        }
        for (c, tok) in record.iter().take(k).enumerate() {
            let v: f32 = tok.parse().map_err(|_| Error::BadNumber {
                row,
                column: c + 1,
                token: tok.to_owned(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, column: c + 1 });
            }
            values.push(v);
        }
        if labeled {
            let tok = &record[k];
            let label: i64 = tok.parse().map_err(|_| Error::BadNumber {
                row,
                column: k + 1,
                token: tok.to_owned(),
            })?;
            if label < 0 || label as u64 >= k as u64 {
                return Err(Error::LabelRange { row, label, k });
            }
            labels.push(label as usize);
        }
    }

    let Some(width) = width else {
        return Err(Error::EmptyInput);
    };
    let k = width - extra;
    let n = values.len() / k;
    Ok((LogitMatrix::new(n, k, values)?, labels))
}

// ---------------------------------------------------------------------------
// Binary

/// Encodes a dataset in the canonical binary format: magic `CPL1`, then
/// little-endian `u32` version, `u64` n, `u32` k, `n·k` binary32 logits
/// row-major and `n` `u32` labels.
pub fn save_binary(dataset: &LabeledDataset) -> Vec<u8> {
    let (n, k) = (dataset.n(), dataset.k());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * (k + 1));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    for v in dataset.logits().values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in dataset.labels() {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    out
}

/// Decodes the binary format written by [`save_binary`].
pub fn load_binary(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let k = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as u64;

    let payload = n
        .checked_mul(k)
        .and_then(|nk| nk.checked_add(n))
        .and_then(|cells| cells.checked_mul(4))
        .ok_or_else(|| Error::invalid("binary header", "dimensions overflow"))?;
    let expected = HEADER_LEN as u64 + payload;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::TrailingBytes(actual - expected));
    }

    let (n, k) = (n as usize, k as usize);
    let body = &bytes[HEADER_LEN..];
    let (logit_bytes, label_bytes) = body.split_at(4 * n * k);
    let values = logit_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = label_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    LabeledDataset::new(LogitMatrix::new(n, k, values)?, labels)
}

/// Writes a dataset to disk in the binary format.
pub fn write_binary(path: impl AsRef<Path>, dataset: &LabeledDataset) -> Result<()> {
    std::fs::write(path, save_binary(dataset))?;
    Ok(())
}

/// Loads a dataset, choosing CSV for `.csv` files and the binary format otherwise.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    if is_csv(path) {
        load_csv(path)
    } else {
        load_binary(&std::fs::read(path)?)
    }
}

/// Whether `path` has a `.csv` extension.
pub fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

// ---------------------------------------------------------------------------
// Softmax

/// Temperature-scaled softmax of one row, written into `out`.
pub fn softmax_row(logits: &[f32], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z as f64 - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Applies a temperature-scaled softmax to every row.
pub fn softmax(logits: &LogitMatrix, temperature: f64) -> Result<ProbabilityMatrix> {
    check_temperature(temperature)?;
    let k = logits.k();
    let mut values = vec![0.0; logits.values().len()];
    values
        .par_chunks_mut(k)
        .zip(logits.values().par_chunks(k))
        .for_each(|(out, row)| softmax_row(row, temperature, out));
    Ok(ProbabilityMatrix {
        n: logits.n(),
        k,
        values,
    })
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("temperature", format!("must be positive and finite, got {t}")))
    }
}

// ---------------------------------------------------------------------------
// Split

/// Two disjoint parts of a dataset.
#[derive(Debug, Clone)]
pub struct SplitResult {
    pub part_a: LabeledDataset,
    pub part_b: LabeledDataset,
    /// Source indices of `part_a`, in shuffled order.
    pub indices_a: Vec<usize>,
    /// Source indices of `part_b`, in shuffled order.
    pub indices_b: Vec<usize>,
    pub seed: u64,
    pub fraction_a: f64,
}

/// Number of examples that go to the first part: `fraction·n` rounded half
/// up, then clamped to `[1, n − 1]`.
pub fn split_size(n: usize, fraction_a: f64) -> usize {
    let raw = (fraction_a * n as f64 + 0.5).floor();
    (raw as usize).clamp(1, n - 1)
}

/// Seeded index permutation of `0..n` (Fisher–Yates on the split stream).
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, Role::Split, 0);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Shuffles with `seed` and sends the first `split_size(n, fraction_a)`
/// examples to `part_a`.
pub fn split(dataset: &LabeledDataset, fraction_a: f64, seed: u64) -> Result<SplitResult> {
    let n = dataset.n();
    if n < 2 {
        return Err(Error::invalid("split", format!("need at least 2 examples, got {n}")));
    }
    if !(fraction_a > 0.0 && fraction_a < 1.0) {
        return Err(Error::invalid("split fraction", format!("{fraction_a} not in (0, 1)")));
    }
    let mut idx = shuffled_indices(n, seed);
    let indices_b = idx.split_off(split_size(n, fraction_a));
    let indices_a = idx;
    Ok(SplitResult {
        part_a: dataset.subset(&indices_a)?,
        part_b: dataset.subset(&indices_b)?,
        indices_a,
        indices_b,
        seed,
        fraction_a,
    })
}
