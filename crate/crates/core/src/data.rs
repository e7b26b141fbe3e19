//! Datasets: generators, CSV and IDX ingestion, standardization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Name of the optional integer label column in CSV files.
pub const LABEL_COLUMN: &str = "label";

/// Rows of `d`-dimensional features with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub columns: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Option<Vec<usize>>, provenance: impl Into<String>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.nrows() {
                return Err(Error::dim("label count", features.nrows(), l.len()));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        let columns = (0..features.ncols()).map(|i| format!("x{i}")).collect();
        Ok(Self {
            features,
            labels,
            columns,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let start = i * self.dim();
        &self.features.as_slice().expect("standard layout")[start..start + self.dim()]
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    /// Number of classes, `max label + 1`.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Rows carrying the given label.
    pub fn subset_with_label(&self, label: usize) -> Result<Dataset> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Invalid("dataset has no labels".into()))?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| labels[i] == label).collect();
        let mut out = self.select(&idx);
        out.provenance = format!("{} [label == {label}]", self.provenance);
        Ok(out)
    }

    /// Rows at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            columns: self.columns.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// The first `n` rows.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }
}

/// Two interleaved half circles.
///
/// `⌈n/2⌉` outer points `(cos t, sin t)` and `⌊n/2⌋` inner points
/// `(1 − cos t, 0.5 − sin t)` with `t` evenly spaced on `[0, π]`, plus
/// isotropic Gaussian noise. Outer points get label 0, inner points label 1.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Invalid(format!("two moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Invalid(format!("noise must be non-negative, got {noise}")));
    }
    let n_outer = n.div_ceil(2);
    let n_inner = n / 2;
    let angle = |i: usize, count: usize| {
        if count == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = angle(i, n_outer);
        features[[i, 0]] = t.cos();
        features[[i, 1]] = t.sin();
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = angle(i, n_inner);
        features[[n_outer + i, 0]] = 1.0 - t.cos();
        features[[n_outer + i, 1]] = 0.5 - t.sin();
        labels.push(1);
    }
    if noise > 0.0 {
        let mut rng = Rng::new(seed);
        features.mapv_inplace(|v| v + noise * rng.normal());
    }
    let mut ds = Dataset::new(features, Some(labels), format!("two_moons(n={n}, noise={noise}, seed={seed})"))?;
    ds.columns = vec!["x0".into(), "x1".into()];
    Ok(ds)
}

/// Axis-aligned box `[low, high]` used for uniform sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl SampleBox {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() {
            return Err(Error::dim("box bounds", low.len(), high.len()));
        }
        if low.is_empty() {
            return Err(Error::Invalid("box has no dimensions".into()));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::Invalid("box needs low < high in every dimension".into()));
        }
        Ok(Self { low, high })
    }

    /// The cube `[low, high]^dim`.
    pub fn cube(dim: usize, low: f64, high: f64) -> Result<Self> {
        Self::new(vec![low; dim], vec![high; dim])
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.low.iter().zip(&self.high)).all(|(v, (l, h))| l <= v && v <= h)
    }

    /// `count` i.i.d. uniform rows.
    pub fn sample(&self, count: usize, rng: &mut Rng) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((count, d));
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rng.uniform_in(self.low[j], self.high[j]);
            }
        }
        out
    }
}

pub fn sample_box(count: usize, low: &[f64], high: &[f64], seed: u64) -> Result<Dataset> {
    let bounds = SampleBox::new(low.to_vec(), high.to_vec())?;
    let mut rng = Rng::new(seed);
    Dataset::new(
        bounds.sample(count, &mut rng),
        None,
        format!("uniform box (count={count}, seed={seed})"),
    )
}

/// A parsed CSV file and how many rows were dropped for non-finite values.
#[derive(Debug, Clone)]
pub struct CsvImport {
    pub dataset: Dataset,
    pub rejected_rows: usize,
}

/// Reads a headed CSV. Every column except `label` is a feature.
pub fn read_csv(path: impl AsRef<Path>) -> Result<CsvImport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(BufReader::new(file));
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Format(format!("{}: missing header row", path.display())));
    }
    let label_col = headers.iter().position(|h| h == LABEL_COLUMN);
    let columns: Vec<String> = headers.iter().filter(|h| h.as_str() != LABEL_COLUMN).cloned().collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rejected = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => {
                Error::Format(format!("{}: ragged row {}", path.display(), i + 2))
            }
            _ => Error::Csv(e),
        })?;
        let mut row = Vec::with_capacity(columns.len());
        let mut label = None;
        for (j, cell) in record.iter().enumerate() {
            if Some(j) == label_col {
                let parsed = cell.parse::<usize>().map_err(|_| {
                    Error::Format(format!("{}: row {}: malformed label `{cell}`", path.display(), i + 2))
                })?;
                label = Some(parsed);
            } else {
                let v = cell.parse::<f64>().map_err(|_| {
                    Error::Format(format!(
                        "{}: row {}, column `{}`: not a number `{cell}`",
                        path.display(),
                        i + 2,
                        headers[j]
                    ))
                })?;
                row.push(v);
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            rejected += 1;
            continue;
        }
        values.extend(row);
        labels.extend(label);
    }
    let n = values.len() / columns.len().max(1);
    let features = Array2::from_shape_vec((n, columns.len()), values).expect("rectangular rows");
    let labels = label_col.map(|_| labels);
    let mut dataset = Dataset::new(features, labels, format!("csv:{}", path.display()))?;
    dataset.columns = columns;
    Ok(CsvImport {
        dataset,
        rejected_rows: rejected,
    })
}

/// Shortest decimal that parses back to exactly `v`, switching to exponent
/// notation for very large or small magnitudes.
pub fn format_real(v: f64) -> String {
    format!("{v:?}")
}

/// Writes features (shortest round-trip decimals) and the label column if present.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let mut header: Vec<&str> = dataset.columns.iter().map(String::as_str).collect();
    if dataset.labels.is_some() {
        header.push(LABEL_COLUMN);
    }
    writer.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..dataset.len() {
        record.clear();
        record.extend(dataset.row(i).iter().copied().map(format_real));
        if let Some(labels) = &dataset.labels {
            record.push(labels[i].to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated IDX header ({what})")))
}

/// Decodes an IDX3 `u8` image file into rows of `rows·cols` values in `[0, 1]`.
pub fn decode_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES {
        return Err(Error::IdxMagic(magic));
    }
    let count = be_u32(bytes, 4, "count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    let d = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < count * d {
        return Err(Error::Format(format!(
            "truncated IDX payload: expected {} bytes, found {}",
            count * d,
            payload.len()
        )));
    }
    Ok(Array2::from_shape_fn((count, d), |(i, j)| payload[i * d + j] as f64 / 255.0))
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS {
        return Err(Error::IdxMagic(magic));
    }
    let count = be_u32(bytes, 4, "count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "truncated IDX payload: expected {count} labels, found {}",
            payload.len()
        )));
    }
    Ok(payload[..count].iter().map(|&b| b as usize).collect())
}

/// Reads an IDX image file and, optionally, its label file.
pub fn read_idx(images: impl AsRef<Path>, labels: Option<&Path>) -> Result<Dataset> {
    let images = images.as_ref();
    let features = decode_idx_images(&read_all(images)?)?;
    let labels = match labels {
        Some(p) => {
            let l = decode_idx_labels(&read_all(p)?)?;
            if l.len() != features.nrows() {
                return Err(Error::dim("IDX label count", features.nrows(), l.len()));
            }
            Some(l)
        }
        None => None,
    };
    Dataset::new(features, labels, format!("idx:{}", images.display()))
}

/// Encodes `u8` images as an IDX3 file (used by fixtures and `convert-idx` tests).
pub fn encode_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES, images.len() as u32, rows as u32, cols as u32] {
        out.extend(v.to_be_bytes());
    }
    for img in images {
        out.extend(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    out
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

/// Lower bound applied to per-column standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }
}

/// Per-column zero mean and unit (population) standard deviation.
pub fn standardize(dataset: &Dataset) -> Result<(Dataset, StandardizationStats)> {
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot standardize an empty dataset".into()));
    }
    let mean: Array1<f64> = dataset.features.mean_axis(Axis(0)).expect("non-empty");
    let std = dataset.features.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
    let stats = StandardizationStats {
        mean: mean.to_vec(),
        std: std.to_vec(),
    };
    Ok((apply_stats(dataset, &stats)?, stats))
}

pub fn apply_stats(dataset: &Dataset, stats: &StandardizationStats) -> Result<Dataset> {
    if stats.mean.len() != dataset.dim() || stats.std.len() != dataset.dim() {
        return Err(Error::dim("standardization stats", dataset.dim(), stats.mean.len()));
    }
    let mean = Array1::from(stats.mean.clone());
    let std = Array1::from(stats.std.clone());
    let mut out = dataset.clone();
    out.features = (&dataset.features - &mean) / &std;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_endpoints() {
        let ds = gen_two_moons(4, 0.0, 0).unwrap();
        let close = |i: usize, x: f64, y: f64| {
            let r = ds.row(i);
            (r[0] - x).abs() < 1e-12 && (r[1] - y).abs() < 1e-12
        };
        assert!(close(0, 1.0, 0.0) && close(1, -1.0, 0.0));
        assert!(close(2, 0.0, 0.5) && close(3, 2.0, 0.5));
        assert_eq!(ds.labels.as_deref(), Some(&[0, 0, 1, 1][..]));
    }

    #[test]
    fn noiseless_outer_moon_on_unit_circle() {
        let ds = gen_two_moons(101, 0.0, 0).unwrap();
        let labels = ds.labels.clone().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 51);
        for i in 0..ds.len() {
            if labels[i] == 0 {
                let r = ds.row(i);
                assert!((r[0].hypot(r[1]) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moons_are_deterministic() {
        assert_eq!(gen_two_moons(50, 0.2, 9).unwrap(), gen_two_moons(50, 0.2, 9).unwrap());
        assert_ne!(gen_two_moons(50, 0.2, 9).unwrap(), gen_two_moons(50, 0.2, 10).unwrap());
        assert!(gen_two_moons(50, -0.1, 9).is_err());
        assert!(gen_two_moons(1, 0.0, 9).is_err());
    }

    #[test]
    fn box_samples_in_range() {
        let ds = sample_box(1000, &[-5.0, 0.0], &[5.0, 0.5], 3).unwrap();
        let b = SampleBox::new(vec![-5.0, 0.0], vec![5.0, 0.5]).unwrap();
        assert!((0..ds.len()).all(|i| b.contains(ds.row(i))));
        assert!(sample_box(0, &[0.0], &[1.0], 3).unwrap().is_empty());
        assert!(sample_box(3, &[1.0], &[1.0], 3).is_err());
    }

    #[test]
    fn box_mean_law_of_large_numbers() {
        let ds = sample_box(100_000, &[-5.0, -5.0], &[5.0, 5.0], 17).unwrap();
        let mean = ds.features.mean_axis(Axis(0)).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 0.1), "{mean}");
    }

    #[test]
    fn idx_header_and_scaling() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 51, 102, 255];
        let x = decode_idx_images(&bytes).unwrap();
        assert_eq!(x.dim(), (1, 4));
        assert_eq!(x[[0, 3]], 1.0);
        assert_eq!(x[[0, 1]], 0.2);

        let mut wrong = bytes;
        wrong[3] = 2;
        let err = decode_idx_images(&wrong).unwrap_err();
        assert!(err.to_string().contains("unsupported IDX type"), "{err}");
        assert!(decode_idx_images(&bytes[..18]).is_err());
    }

    #[test]
    fn standardize_columns() {
        let features = ndarray::array![[1.0, 5.0, 2.0], [2.0, 5.0, 4.0], [6.0, 5.0, 9.0]];
        let ds = Dataset::new(features, None, "test").unwrap();
        let (out, stats) = standardize(&ds).unwrap();
        for j in [0, 2] {
            let col = out.features.column(j);
            assert!(col.mean().unwrap().abs() < 1e-10);
            assert!((col.std(0.0) - 1.0).abs() < 1e-10);
        }
        assert_eq!(stats.std[1], STD_FLOOR);
        assert!(out.features.column(1).iter().all(|&v| v == 0.0));
        let same = apply_stats(&ds, &StandardizationStats::identity(3)).unwrap();
        assert_eq!(same.features, ds.features);
    }
}
