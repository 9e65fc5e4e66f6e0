//! Datasets: EMBD embedding files, IDX image files, CSV import, the frozen
//! random-projection extractor, synthetic Gaussian mixtures and splitting.
//!
//! EMBD layout (little-endian):
//!
//! ```text
//! "EMBD"  version u32 = 1  n_samples u32  dim u32  n_classes u32
//! n_samples × [dim × f32, label u16]
//! ```

use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{DeeError, Result};
use crate::rng::{seeded_rng, standard_normal, DeeRng};
use crate::types::{EmbeddingVector, LabeledExample};

pub const EMBD_MAGIC: &[u8; 4] = b"EMBD";
pub const EMBD_VERSION: u32 = 1;
const EMBD_HEADER_LEN: usize = 20;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled embeddings of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedDataset {
    pub examples: Vec<LabeledExample>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub name: String,
}

impl EmbeddedDataset {
    /// Checks dimensions and label range. Declared classes without examples only log a warning.
    pub fn new(
        examples: Vec<LabeledExample>,
        embedding_dim: usize,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if let Some((i, ex)) = examples.iter().enumerate().find(|(_, e)| e.embedding.dim() != embedding_dim) {
            return Err(DeeError::shape(format!(
                "example {i} has dimension {}, dataset declares {embedding_dim}",
                ex.embedding.dim()
            )));
        }
        if let Some((i, ex)) = examples.iter().enumerate().find(|(_, e)| e.label >= num_classes) {
            return Err(DeeError::config(format!(
                "example {i} has label {} but only {num_classes} classes are declared",
                ex.label
            )));
        }
        let ds = Self {
            examples,
            embedding_dim,
            num_classes,
            name: name.into(),
        };
        ds.warn_empty_classes();
        Ok(ds)
    }

    fn warn_empty_classes(&self) {
        let counts = self.class_counts();
        for (k, &c) in counts.iter().enumerate() {
            if c == 0 {
                log::warn!("dataset `{}`: class {k} has no examples", self.name);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    /// Same metadata with a different example list.
    pub fn with_examples(&self, examples: Vec<LabeledExample>, name: impl Into<String>) -> Self {
        Self {
            examples,
            embedding_dim: self.embedding_dim,
            num_classes: self.num_classes,
            name: name.into(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| DeeError::config(format!("{what} = {v} does not fit the EMBD header")))
}

/// Serializes `ds`. Values are stored as f32, so only f32-representable embeddings round-trip exactly.
pub fn encode_embd(ds: &EmbeddedDataset) -> Result<Vec<u8>> {
    if ds.num_classes > u16::MAX as usize + 1 {
        return Err(DeeError::config(format!("{} classes exceed the u16 label range", ds.num_classes)));
    }
    let mut out = Vec::with_capacity(EMBD_HEADER_LEN + ds.len() * (4 * ds.embedding_dim + 2));
    out.extend_from_slice(EMBD_MAGIC);
    put_u32(&mut out, EMBD_VERSION);
    put_u32(&mut out, to_u32(ds.len(), "n_samples")?);
    put_u32(&mut out, to_u32(ds.embedding_dim, "dim")?);
    put_u32(&mut out, to_u32(ds.num_classes, "n_classes")?);
    for ex in &ds.examples {
        for &v in ex.embedding.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(ex.label as u16).to_le_bytes());
    }
    Ok(out)
}

fn read_u32_le(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn decode_embd(bytes: &[u8], name: impl Into<String>) -> Result<EmbeddedDataset> {
    if bytes.len() < 4 || &bytes[..4] != EMBD_MAGIC {
        return Err(DeeError::format(0, "missing EMBD magic"));
    }
    if bytes.len() < EMBD_HEADER_LEN {
        return Err(DeeError::format(
            bytes.len() as u64,
            format!("truncated header: expected {EMBD_HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    let version = read_u32_le(bytes, 4);
    if version != EMBD_VERSION {
        return Err(DeeError::format(4, format!("unsupported EMBD version {version}")));
    }
    let n = read_u32_le(bytes, 8) as usize;
    let dim = read_u32_le(bytes, 12) as usize;
    let k = read_u32_le(bytes, 16) as usize;
    let record = 4 * dim + 2;
    let expected = EMBD_HEADER_LEN as u64 + n as u64 * record as u64;
    if bytes.len() as u64 != expected {
        let offset = (bytes.len() as u64).min(expected);
        return Err(DeeError::format(
            offset,
            format!("expected {expected} bytes for {n} records of dimension {dim}, found {}", bytes.len()),
        ));
    }
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let start = EMBD_HEADER_LEN + i * record;
        let values: Vec<f64> = bytes[start..start + 4 * dim]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let label_at = start + 4 * dim;
        let label = u16::from_le_bytes([bytes[label_at], bytes[label_at + 1]]) as usize;
        if label >= k {
            return Err(DeeError::format(
                label_at as u64,
                format!("record {i} has label {label}, header declares {k} classes"),
            ));
        }
        let embedding = EmbeddingVector::new(Array1::from(values))
            .map_err(|e| DeeError::format(start as u64, format!("record {i}: {e}")))?;
        examples.push(LabeledExample::new(embedding, label));
    }
    EmbeddedDataset::new(examples, dim, k, name)
}

pub fn write_embd(path: impl AsRef<Path>, ds: &EmbeddedDataset) -> Result<()> {
    fs::write(path, encode_embd(ds)?)?;
    Ok(())
}

pub fn read_embd(path: impl AsRef<Path>) -> Result<EmbeddedDataset> {
    let path = path.as_ref();
    let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    decode_embd(&fs::read(path)?, name)
}

/// `label,f0,f1,...` with a header row; labels must be non-negative integers.
pub fn import_csv(path: impl AsRef<Path>) -> Result<EmbeddedDataset> {
    let path = path.as_ref();
    let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    if headers.get(0).map(str::trim) != Some("label") || headers.len() < 2 {
        return Err(DeeError::format(0, "CSV header must be `label,f0,f1,...`"));
    }
    let dim = headers.len() - 1;
    let mut examples = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_error)?;
        let offset = row.position().map_or(0, |p| p.byte());
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != dim + 1 {
            return Err(DeeError::format(offset, format!("line {line}: {} fields, expected {}", row.len(), dim + 1)));
        }
        let label: usize = row[0]
            .trim()
            .parse()
            .map_err(|_| DeeError::format(offset, format!("line {line}: bad label `{}`", &row[0])))?;
        let values = row
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| DeeError::format(offset, format!("line {line}: {e}")))?;
        let embedding = EmbeddingVector::new(Array1::from(values))
            .map_err(|e| DeeError::format(offset, format!("line {line}: {e}")))?;
        examples.push(LabeledExample::new(embedding, label));
    }
    let k = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
    EmbeddedDataset::new(examples, dim, k, name)
}

fn csv_error(e: csv::Error) -> DeeError {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DeeError::Io(io),
        other => DeeError::format(offset, format!("{other:?}")),
    }
}

/// Grayscale images with labels, as stored in IDX files.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImageDataset {
    pub rows: usize,
    pub cols: usize,
    /// One `rows × cols` row-major buffer per image.
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
}

impl RawImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }
}

/// Reads a whole file, transparently gunzipping when it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DeeError::format(offset as u64, "truncated IDX header"))
}

pub fn decode_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DeeError::format(0, format!("image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let px = rows * cols;
    let expected = 16 + n * px;
    if bytes.len() != expected {
        return Err(DeeError::format(
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes for {n} images of {rows}×{cols}, found {}", bytes.len()),
        ));
    }
    let images = if px == 0 {
        vec![Vec::new(); n]
    } else {
        bytes[16..].chunks_exact(px).map(<[u8]>::to_vec).collect()
    };
    Ok((rows, cols, images))
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DeeError::format(0, format!("label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(DeeError::format(
            bytes.len().min(8 + n) as u64,
            format!("expected {} bytes for {n} labels, found {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

/// Reads an IDX image file and its label file; `.gz` compressed files are accepted.
pub fn read_idx_images(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<RawImageDataset> {
    let (rows, cols, imgs) = decode_idx_images(&read_maybe_gz(images.as_ref())?)?;
    let labels = decode_idx_labels(&read_maybe_gz(labels.as_ref())?)?;
    if imgs.len() != labels.len() {
        return Err(DeeError::format(
            4,
            format!("{} images but {} labels", imgs.len(), labels.len()),
        ));
    }
    Ok(RawImageDataset {
        rows,
        cols,
        images: imgs,
        labels,
    })
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(labels);
    out
}

/// Frozen linear map `z = P x` with `P ~ N(0, 1) / √D`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomProjectionExtractor {
    projection: Array2<f64>,
    seed: u64,
}

impl RandomProjectionExtractor {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(DeeError::config("projection dimensions must be positive"));
        }
        let mut rng = seeded_rng(seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((output_dim, input_dim), || scale * standard_normal(&mut rng));
        Ok(Self { projection, seed })
    }

    pub fn input_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    /// Hex SHA-256 over the bits of `P`.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.projection {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// `P x` for a raw input of length `D`.
    pub fn extract(&self, raw: &[f64]) -> Result<EmbeddingVector> {
        if raw.len() != self.input_dim() {
            return Err(DeeError::shape(format!(
                "input has length {}, extractor expects {}",
                raw.len(),
                self.input_dim()
            )));
        }
        EmbeddingVector::new(self.projection.dot(&ndarray::ArrayView1::from(raw)))
    }

    /// Scales pixels to `[0, 1]` and projects.
    pub fn extract_pixels(&self, pixels: &[u8]) -> Result<EmbeddingVector> {
        let x: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
        self.extract(&x)
    }
}

/// Projects every image; labels become dense class indices `0..=max`.
pub fn embed_images(raw: &RawImageDataset, extractor: &RandomProjectionExtractor, name: &str) -> Result<EmbeddedDataset> {
    let examples = raw
        .images
        .par_iter()
        .zip(raw.labels.par_iter())
        .map(|(img, &label)| Ok(LabeledExample::new(extractor.extract_pixels(img)?, label as usize)))
        .collect::<Result<Vec<_>>>()?;
    let k = raw.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    EmbeddedDataset::new(examples, extractor.output_dim(), k, name)
}

/// Random orthogonal `m × m` matrix (Gram-Schmidt on Gaussian columns).
fn random_rotation(m: usize, rng: &mut DeeRng) -> Array2<f64> {
    loop {
        let mut q = Array2::from_shape_simple_fn((m, m), || standard_normal(rng));
        let mut ok = true;
        for j in 0..m {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let ci = q.column(i).to_owned();
                q.column_mut(j).scaled_add(-proj, &ci);
            }
            let norm = q.column(j).dot(&q.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return q;
        }
    }
}

/// Class means used by [`gaussian_mixture`]: `separation · u_k` with orthonormal `u_k`
/// inside each block of `M` classes; blocks after the first are randomly rotated.
pub fn mixture_means(num_classes: usize, dim: usize, separation: f64, rng: &mut DeeRng) -> Array2<f64> {
    let mut means = Array2::zeros((num_classes, dim));
    let mut rotation: Option<Array2<f64>> = None;
    for k in 0..num_classes {
        let (block, axis) = (k / dim, k % dim);
        if axis == 0 && block > 0 {
            rotation = Some(random_rotation(dim, rng));
        }
        match &rotation {
            None => means[[k, axis]] = separation,
            Some(r) => means.row_mut(k).assign(&(r.column(axis).to_owned() * separation)),
        }
    }
    means
}

/// Balanced isotropic mixture; values are rounded to f32 so the dataset survives EMBD exactly.
pub fn gaussian_mixture(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    rng: &mut DeeRng,
) -> Result<EmbeddedDataset> {
    if num_classes < 2 {
        return Err(DeeError::config("a mixture needs at least 2 classes"));
    }
    if dim == 0 {
        return Err(DeeError::config("mixture dimension must be positive"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(DeeError::config(format!("separation must be non-negative, got {separation}")));
    }
    let means = mixture_means(num_classes, dim, separation, rng);
    let mut examples = Vec::with_capacity(num_classes * per_class);
    for k in 0..num_classes {
        for _ in 0..per_class {
            let v = Array1::from_shape_fn(dim, |j| (means[[k, j]] + standard_normal(rng)) as f32 as f64);
            examples.push(LabeledExample::new(EmbeddingVector::new(v)?, k));
        }
    }
    EmbeddedDataset::new(examples, dim, num_classes, format!("mixture-k{num_classes}-m{dim}-s{separation}"))
}

/// Per-class split with `round(n · test_fraction)` (clamped to `[1, n-1]`) test examples per class.
/// Both parts keep the original relative order.
pub fn stratified_split(
    data: &EmbeddedDataset,
    test_fraction: f64,
    rng: &mut DeeRng,
) -> Result<(EmbeddedDataset, EmbeddedDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DeeError::config(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, ex) in data.examples.iter().enumerate() {
        by_class[ex.label].push(i);
    }
    let mut is_test = vec![false; data.len()];
    for (k, idx) in by_class.iter_mut().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(DeeError::config(format!("class {k} has {} example(s); at least 2 are needed to split", idx.len())));
        }
        let n = idx.len();
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        idx.shuffle(rng);
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (ex, t) in data.examples.iter().zip(is_test) {
        if t {
            test.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((
        data.with_examples(train, format!("{}-train", data.name)),
        data.with_examples(test, format!("{}-test", data.name)),
    ))
}
