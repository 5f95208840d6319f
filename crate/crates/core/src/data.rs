//! Labeled datasets: synthetic Gaussian blobs, CSV files, and MNIST IDX pairs.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// SHA-256 of a dataset's canonical byte serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Input(format!("bad fingerprint hex: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Input("fingerprint must be 32 bytes".into()))?;
        Ok(Fingerprint(arr))
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Inputs `[M x D]` (row-major) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::Input("dataset dimension and class count must be positive".into()));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::Input(format!(
                "{} input values cannot hold {} samples of dimension {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn y(&self, i: usize) -> Vec<f64> {
        one_hot(self.labels[i], self.classes)
    }

    /// One-hot label matrix `[M x K]`.
    pub fn one_hot(&self) -> Vec<f64> {
        self.labels.iter().flat_map(|&c| one_hot(c, self.classes)).collect()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        h.update(b"epk-dataset-v1");
        for n in [self.len(), self.dim, self.classes] {
            h.update((n as u64).to_le_bytes());
        }
        for v in &self.inputs {
            h.update(v.to_le_bytes());
        }
        for &c in &self.labels {
            h.update((c as u64).to_le_bytes());
        }
        Fingerprint(h.finalize().into())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("index {i} out of range for {} samples", self.len())));
            }
            inputs.extend_from_slice(self.x(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset::new(inputs, labels, self.dim, self.classes)
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for j in 0..self.dim {
            out.push_str(&format!("x{j},"));
        }
        out.push_str("label\n");
        for i in 0..self.len() {
            for v in self.x(i) {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", self.labels[i]));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads `x0..x{D-1},label`. The class count defaults to the largest
    /// label plus one.
    pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Self> {
        let (dim, rows, labels) = read_points(path)?;
        let labels = labels.ok_or_else(|| {
            Error::Input(format!("{}: dataset CSV needs a label column", path.display()))
        })?;
        let k = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        LabeledDataset::new(rows, labels, dim, k)
    }
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    y[class] = 1.0;
    y
}

/// Reads a CSV whose header names input columns `x0, x1, ...` and optionally a
/// `label` column. Returns `(dim, row-major values, labels)`.
pub fn read_points(path: &Path) -> Result<(usize, Vec<f64>, Option<Vec<usize>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    })?;
    let headers = rdr.headers()?.clone();
    let mut x_cols = Vec::new();
    let mut label_col = None;
    for (c, name) in headers.iter().enumerate() {
        let name = name.trim();
        if name == "label" {
            label_col = Some(c);
        } else if let Some(idx) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
            x_cols.push((idx, c));
        }
    }
    x_cols.sort();
    if x_cols.is_empty() || x_cols.iter().enumerate().any(|(j, &(idx, _))| idx != j) {
        return Err(Error::Input(format!(
            "{}: header must name input columns x0..x{{D-1}}",
            path.display()
        )));
    }
    let dim = x_cols.len();
    let mut values = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for &(_, c) in &x_cols {
            let field = rec.get(c).unwrap_or("");
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Input(format!("{}: row {}: bad number {field:?}", path.display(), line + 1))
            })?;
            values.push(v);
        }
        if let (Some(c), Some(ls)) = (label_col, labels.as_mut()) {
            let field = rec.get(c).unwrap_or("");
            let l: usize = field.trim().parse().map_err(|_| {
                Error::Input(format!("{}: row {}: bad label {field:?}", path.display(), line + 1))
            })?;
            ls.push(l);
        }
    }
    Ok((dim, values, labels))
}

/// Isotropic Gaussian classes, one per mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    /// Class means; each is zero-padded to `dim`.
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub per_class_count: usize,
    pub dim: usize,
    pub seed: u64,
}

impl BlobSpec {
    /// Three classes centred at (1,4,0,...), (4,1,0,...), (5,5,0,...) in 100
    /// dimensions, unit deviation, 1000 points each.
    pub fn toy(seed: u64) -> Self {
        BlobSpec {
            means: vec![vec![1.0, 4.0], vec![4.0, 1.0], vec![5.0, 5.0]],
            std: 1.0,
            per_class_count: 1000,
            dim: 100,
            seed,
        }
    }
}

/// Samples class by class: all points of class 0, then class 1, and so on.
pub fn gen_blobs(spec: &BlobSpec) -> Result<LabeledDataset> {
    if spec.means.is_empty() {
        return Err(Error::Config("blob spec needs at least one mean".into()));
    }
    if let Some(m) = spec.means.iter().find(|m| m.len() > spec.dim) {
        return Err(Error::Config(format!(
            "mean of length {} does not fit dimension {}",
            m.len(),
            spec.dim
        )));
    }
    if !(spec.std >= 0.0) || !spec.std.is_finite() {
        return Err(Error::Config(format!("invalid standard deviation {}", spec.std)));
    }
    let mut g = rng::generator(spec.seed, rng::DEFAULT_STREAM);
    let k = spec.means.len();
    let mut inputs = Vec::with_capacity(k * spec.per_class_count * spec.dim);
    let mut labels = Vec::with_capacity(k * spec.per_class_count);
    for (c, mean) in spec.means.iter().enumerate() {
        for _ in 0..spec.per_class_count {
            for j in 0..spec.dim {
                let mu = mean.get(j).copied().unwrap_or(0.0);
                inputs.push(mu + spec.std * rng::standard_normal(&mut g));
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(inputs, labels, spec.dim, k)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(offset as u64, "truncated IDX header"))
}

/// Raw IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(8, format!("invalid image shape {rows}x{cols}")));
    }
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("IDX image payload truncated: need {need} bytes"),
        ));
    }
    Ok((n, rows, cols, &bytes[16..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::format(bytes.len() as u64, "IDX label payload truncated"));
    }
    Ok(&bytes[8..8 + n])
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Average-pools a `side_in x side_in` image down to `side_out x side_out`.
pub fn downsample(image: &[f64], side_in: usize, side_out: usize) -> Result<Vec<f64>> {
    if side_out == 0 || side_in % side_out != 0 {
        return Err(Error::Config(format!(
            "cannot pool {side_in}x{side_in} images to {side_out}x{side_out}"
        )));
    }
    let f = side_in / side_out;
    let area = (f * f) as f64;
    let mut out = Vec::with_capacity(side_out * side_out);
    for r in 0..side_out {
        for c in 0..side_out {
            let mut acc = 0.0;
            for dr in 0..f {
                for dc in 0..f {
                    acc += image[(r * f + dr) * side_in + c * f + dc];
                }
            }
            out.push(acc / area);
        }
    }
    Ok(out)
}

/// Loads an IDX image/label pair, keeps the first `per_class` examples of
/// each digit in file order, scales pixels to `[0, 1]` and optionally
/// average-pools to `downsample_to x downsample_to`.
pub fn load_mnist(
    images_path: &Path,
    labels_path: &Path,
    per_class: usize,
    downsample_to: Option<usize>,
) -> Result<LabeledDataset> {
    load_mnist_slice(images_path, labels_path, 0, per_class, downsample_to)
}

/// As [`load_mnist`], after skipping the first `skip_per_class` examples of
/// each digit. Used to draw held-out points disjoint from a training subset.
pub fn load_mnist_slice(
    images_path: &Path,
    labels_path: &Path,
    skip_per_class: usize,
    per_class: usize,
    downsample_to: Option<usize>,
) -> Result<LabeledDataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::format(4, format!("{n} images but {} labels", labels.len())));
    }
    if rows != cols {
        return Err(Error::format(8, format!("expected square images, got {rows}x{cols}")));
    }
    let classes = 10;
    let side = downsample_to.unwrap_or(rows);
    let mut counts = [0usize; 10];
    let mut seen = [0usize; 10];
    let mut inputs = Vec::new();
    let mut out_labels = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::format(8 + i as u64, format!("label {l} is not a digit")));
        }
        if seen[l] < skip_per_class {
            seen[l] += 1;
            continue;
        }
        if counts[l] >= per_class {
            continue;
        }
        counts[l] += 1;
        let img: Vec<f64> = pixels[i * rows * cols..(i + 1) * rows * cols]
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect();
        let img = if side == rows { img } else { downsample(&img, rows, side)? };
        inputs.extend(img);
        out_labels.push(l);
        if counts.iter().all(|&c| c == per_class) {
            break;
        }
    }
    if let Some((digit, &have)) = counts.iter().enumerate().find(|(_, &c)| c < per_class) {
        return Err(Error::Input(format!(
            "only {have} examples of digit {digit}, {per_class} requested"
        )));
    }
    LabeledDataset::new(inputs, out_labels, side * side, classes)
}
