//! Desk-scale datasets: synthetic Gaussian mixtures, IDX image files, CSV
//! and PGM exchange, and quantization onto the 256-level grid.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::forward::{grid_index, grid_value, GRID_LEVELS};
use crate::io::format_f64;
use crate::numerics::{RngStream, Tensor};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
/// Refuse IDX payloads above this many bytes rather than attempting the allocation.
const IDX_MAX_BYTES: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("a mixture needs at least one center")]
    NoCenters,
    #[error("mixture centers must share one dimension")]
    RaggedCenters,
    #[error("sigma must be finite and non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("bad IDX magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("file is truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("IDX dimensions overflow the supported size")]
    DimensionOverflow,
    #[error("{labels} labels for {samples} samples")]
    LabelMismatch { labels: usize, samples: usize },
    #[error("value {0} lies outside [-1, 1]")]
    OutOfRange(f64),
    #[error("sample {index} has {found} values, expected {expected}")]
    RaggedSamples { index: usize, expected: usize, found: usize },
    #[error("data source exhausted after {0} samples")]
    DataExhausted(usize),
    #[error("dataset is empty")]
    Empty,
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Samples of a common dimension (stored row-major), with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<usize>>,
    num_classes: Option<usize>,
    /// `(rows, cols)` when every sample is an image.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, dim: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if dim == 0 || data.is_empty() {
            return Err(DataError::Empty);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(DataError::RaggedSamples {
                index: data.len() / dim,
                expected: dim,
                found: data.len() % dim,
            });
        }
        if let Some(&bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(DataError::Malformed(format!("non-finite value {bad}")));
        }
        Ok(Self {
            name: name.into(),
            dim,
            data,
            labels: None,
            num_classes: None,
            image_shape: None,
        })
    }

    pub fn from_rows(name: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self, DataError> {
        let dim = rows.first().ok_or(DataError::Empty)?.len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (index, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(DataError::RaggedSamples { index, expected: dim, found: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(name, dim, data)
    }

    /// Attaches labels; the class count is `max(label) + 1` unless given.
    pub fn with_labels(mut self, labels: Vec<usize>, num_classes: Option<usize>) -> Result<Self, DataError> {
        if labels.len() != self.len() {
            return Err(DataError::LabelMismatch { labels: labels.len(), samples: self.len() });
        }
        let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        if labels.iter().any(|&l| l >= c) {
            return Err(DataError::Malformed(format!("label out of range for {c} classes")));
        }
        self.labels = Some(labels);
        self.num_classes = Some(c);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    /// All samples as an `n x d` matrix.
    pub fn to_matrix(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.data.clone()).expect("non-empty")
    }

    /// Writes `x0,…,x{d-1}[,label]` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header)?;
        for (i, s) in self.samples().enumerate() {
            let mut rec: Vec<String> = s.iter().map(|&v| format_f64(v)).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`Dataset::write_csv`]; a trailing
    /// `label` column is optional.
    pub fn read_csv<R: Read>(name: impl Into<String>, input: R) -> Result<Self, DataError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let has_label = header.iter().next_back() == Some("label");
        let dim = header.len() - usize::from(has_label);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for field in rec.iter().take(dim) {
                data.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| DataError::Malformed(format!("{field:?}: {e}")))?,
                );
            }
            if has_label {
                let field = rec.get(dim).unwrap_or("");
                labels.push(
                    field
                        .trim()
                        .parse::<usize>()
                        .map_err(|e| DataError::Malformed(format!("label {field:?}: {e}")))?,
                );
            }
        }
        let ds = Self::new(name, dim, data)?;
        if has_label {
            ds.with_labels(labels, None)
        } else {
            Ok(ds)
        }
    }
}

/// `n` draws from an equal-weight isotropic mixture; labels are center indices.
///
/// `sigma = 0` is accepted and yields the centers themselves.
pub fn make_gaussian_mixture(centers: &[Vec<f64>], sigma: f64, n: usize, rng: &mut RngStream) -> Result<Dataset, DataError> {
    let dim = check_centers(centers, sigma)?;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = draw_mixture(centers, sigma, rng, &mut data);
        labels.push(c);
    }
    Dataset::new("gaussian_mixture", dim, data)?.with_labels(labels, Some(centers.len()))
}

fn check_centers(centers: &[Vec<f64>], sigma: f64) -> Result<usize, DataError> {
    let dim = centers.first().ok_or(DataError::NoCenters)?.len();
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(DataError::RaggedCenters);
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DataError::InvalidSigma(sigma));
    }
    Ok(dim)
}

fn draw_mixture(centers: &[Vec<f64>], sigma: f64, rng: &mut RngStream, out: &mut Vec<f64>) -> usize {
    let c = rng.uniform_int(0, centers.len() - 1);
    for &m in &centers[c] {
        out.push(m + sigma * rng.standard_normal());
    }
    c
}

/// `k` points evenly spaced on a circle of the given radius.
pub fn circle_centers(k: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / k as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// A minibatch: an `J x d` matrix and, for labeled sources, the class of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
}

/// Supplier of training minibatches.
pub trait DataSource {
    fn dim(&self) -> usize;
    fn num_classes(&self) -> Option<usize>;
    fn next_batch(&mut self, size: usize, rng: &mut RngStream) -> Result<Batch, DataError>;
}

/// Infinite i.i.d. stream from a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct MixtureSource {
    centers: Vec<Vec<f64>>,
    sigma: f64,
    dim: usize,
}

impl MixtureSource {
    pub fn new(centers: Vec<Vec<f64>>, sigma: f64) -> Result<Self, DataError> {
        let dim = check_centers(&centers, sigma)?;
        Ok(Self { centers, sigma, dim })
    }
}

impl DataSource for MixtureSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_classes(&self) -> Option<usize> {
        Some(self.centers.len())
    }

    fn next_batch(&mut self, size: usize, rng: &mut RngStream) -> Result<Batch, DataError> {
        let mut data = Vec::with_capacity(size * self.dim);
        let labels = (0..size).map(|_| draw_mixture(&self.centers, self.sigma, rng, &mut data)).collect();
        Ok(Batch {
            x: Tensor::matrix(size, self.dim, data).map_err(|e| DataError::Malformed(e.to_string()))?,
            labels: Some(labels),
        })
    }
}

/// Draws uniformly with replacement from a finite dataset.
#[derive(Debug, Clone)]
pub struct ResampleSource {
    dataset: Dataset,
}

impl ResampleSource {
    pub fn new(dataset: Dataset) -> Self {
        Self { dataset }
    }
}

impl DataSource for ResampleSource {
    fn dim(&self) -> usize {
        self.dataset.dim()
    }

    fn num_classes(&self) -> Option<usize> {
        self.dataset.num_classes()
    }

    fn next_batch(&mut self, size: usize, rng: &mut RngStream) -> Result<Batch, DataError> {
        let idx: Vec<usize> = (0..size).map(|_| rng.uniform_int(0, self.dataset.len() - 1)).collect();
        Ok(gather(&self.dataset, &idx))
    }
}

/// Walks a finite dataset once, in order.
#[derive(Debug, Clone)]
pub struct SequentialSource {
    dataset: Dataset,
    pos: usize,
}

impl SequentialSource {
    pub fn new(dataset: Dataset) -> Self {
        Self { dataset, pos: 0 }
    }
}

impl DataSource for SequentialSource {
    fn dim(&self) -> usize {
        self.dataset.dim()
    }

    fn num_classes(&self) -> Option<usize> {
        self.dataset.num_classes()
    }

    fn next_batch(&mut self, size: usize, _rng: &mut RngStream) -> Result<Batch, DataError> {
        if self.pos + size > self.dataset.len() {
            return Err(DataError::DataExhausted(self.dataset.len()));
        }
        let idx: Vec<usize> = (self.pos..self.pos + size).collect();
        self.pos += size;
        Ok(gather(&self.dataset, &idx))
    }
}

fn gather(ds: &Dataset, idx: &[usize]) -> Batch {
    let mut data = Vec::with_capacity(idx.len() * ds.dim());
    for &i in idx {
        data.extend_from_slice(ds.sample(i));
    }
    Batch {
        x: Tensor::matrix(idx.len(), ds.dim(), data).expect("non-empty batch"),
        labels: ds.labels().map(|l| idx.iter().map(|&i| l[i]).collect()),
    }
}

/// Nearest point of `{-1 + 2k/255 : k = 0..255}` for each entry.
pub fn quantize_to_grid(x: &Tensor) -> Result<Tensor, DataError> {
    if let Some(&bad) = x.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(DataError::OutOfRange(bad));
    }
    Ok(x.map(|v| grid_value(((v + 1.0) * 127.5).round() as usize)))
}

/// Pixel byte to data value, `2·(b/255) - 1`.
pub fn byte_to_unit(b: u8) -> f64 {
    grid_value(b as usize)
}

/// Data value to the nearest pixel byte, clamping to `[-1, 1]` first.
pub fn unit_to_byte(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// A raw unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<u32>,
    pub bytes: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }

    pub fn parse(raw: &[u8]) -> Result<Self, DataError> {
        if raw.len() < 4 {
            return Err(DataError::TruncatedFile { expected: 4, found: raw.len() as u64 });
        }
        let magic = u32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]);
        let ndim = (magic & 0xff) as usize;
        if magic & 0xffff_ff00 != 0x0000_0800 || ndim == 0 {
            return Err(DataError::BadMagic(magic));
        }
        let header = 4 + 4 * ndim as u64;
        if (raw.len() as u64) < header {
            return Err(DataError::TruncatedFile { expected: header, found: raw.len() as u64 });
        }
        let dims: Vec<u32> = (0..ndim)
            .map(|i| {
                let o = 4 + 4 * i;
                u32::from_be_bytes([raw[o], raw[o + 1], raw[o + 2], raw[o + 3]])
            })
            .collect();
        let mut count: u64 = 1;
        for &d in &dims {
            count = count.checked_mul(d as u64).ok_or(DataError::DimensionOverflow)?;
        }
        if count > IDX_MAX_BYTES {
            return Err(DataError::DimensionOverflow);
        }
        let expected = header + count;
        if (raw.len() as u64) < expected {
            return Err(DataError::TruncatedFile { expected, found: raw.len() as u64 });
        }
        Ok(Self {
            dims,
            bytes: raw[header as usize..expected as usize].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.bytes.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.bytes);
        out
    }
}

/// Loads an IDX image file (`0x00000803`) and, optionally, its label file
/// (`0x00000801`). Pixels land exactly on the 256-level grid.
pub fn idx_read(images: &Path, labels: Option<&Path>) -> Result<Dataset, DataError> {
    let img = IdxArray::parse(&std::fs::read(images)?)?;
    if img.magic() != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic(img.magic()));
    }
    let (n, rows, cols) = (img.dims[0] as usize, img.dims[1] as usize, img.dims[2] as usize);
    if n == 0 || rows * cols == 0 {
        return Err(DataError::Empty);
    }
    let data = img.bytes.iter().map(|&b| byte_to_unit(b)).collect();
    let name = images.file_stem().map_or("idx".into(), |s| s.to_string_lossy().into_owned());
    let mut ds = Dataset::new(name, rows * cols, data)?;
    ds.image_shape = Some((rows, cols));
    if let Some(path) = labels {
        let lab = IdxArray::parse(&std::fs::read(path)?)?;
        if lab.magic() != IDX_LABEL_MAGIC {
            return Err(DataError::BadMagic(lab.magic()));
        }
        ds = ds.with_labels(lab.bytes.iter().map(|&b| b as usize).collect(), None)?;
    }
    Ok(ds)
}

/// Writes a dataset of grid-valued images back as IDX (and labels, if present).
pub fn idx_write(ds: &Dataset, images: &Path, labels: Option<&Path>) -> Result<(), DataError> {
    let (rows, cols) = ds.image_shape.unwrap_or((1, ds.dim()));
    let mut bytes = Vec::with_capacity(ds.data().len());
    for &v in ds.data() {
        let k = grid_index(v).ok_or(DataError::OutOfRange(v))?;
        bytes.push(k as u8);
    }
    let img = IdxArray {
        dims: vec![ds.len() as u32, rows as u32, cols as u32],
        bytes,
    };
    std::fs::write(images, img.to_bytes())?;
    if let (Some(path), Some(l)) = (labels, ds.labels()) {
        let lab = IdxArray {
            dims: vec![l.len() as u32],
            bytes: l.iter().map(|&c| c as u8).collect(),
        };
        std::fs::write(path, lab.to_bytes())?;
    }
    Ok(())
}

/// Encodes a grid of `[-1, 1]` values as binary PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pixel count must match the image size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| unit_to_byte(v)));
    out
}

/// Decodes a binary PGM with maxval 255 into `(width, height, values in [-1, 1])`.
pub fn decode_pgm(raw: &[u8]) -> Result<(usize, usize, Vec<f64>), DataError> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Malformed("incomplete PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(DataError::Malformed(format!("not a binary PGM ({})", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| DataError::Malformed(format!("{s:?}: {e}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != GRID_LEVELS - 1 {
        return Err(DataError::Malformed(format!("unsupported maxval {maxval}")));
    }
    pos += 1;
    let need = w * h;
    let body = raw.get(pos..).unwrap_or(&[]);
    if body.len() < need {
        return Err(DataError::TruncatedFile { expected: (pos + need) as u64, found: raw.len() as u64 });
    }
    Ok((w, h, body[..need].iter().map(|&b| byte_to_unit(b)).collect()))
}
