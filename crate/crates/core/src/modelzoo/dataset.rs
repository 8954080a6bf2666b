//! Image datasets and their on-disk formats.
//!
//! Two formats are supported:
//!
//! * IDX (the classic MNIST container): images with magic `0x00000803`,
//!   labels with magic `0x00000801`, big-endian dimension sizes, unsigned
//!   byte payload. Pixels are scaled to `[0, 1]` by dividing by 255.
//! * Raw: `data.bin` of little-endian f64 values, a one-line `data.meta`
//!   header `shape=B,C,H,W`, and an optional `labels.bin` of little-endian
//!   i32 labels.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const RAW_DATA: &str = "data.bin";
pub const RAW_META: &str = "data.meta";
pub const RAW_LABELS: &str = "labels.bin";

/// A batch of `[N, C, H, W]` images with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    images: Tensor<S>,
    labels: Option<Vec<u32>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(images: Tensor<S>, labels: Option<Vec<u32>>) -> Result<Self> {
        let (n, ..) = images.dims4()?;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::shape(format!("{} labels for {n} images", l.len())));
            }
        }
        Ok(Dataset { images, labels })
    }

    pub fn images(&self) -> &Tensor<S> {
        &self.images
    }

    pub fn labels(&self) -> Result<&[u32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::invalid("dataset has no labels"))
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Samples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Dataset {
            images: self.images.slice_batch(start, end)?,
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        })
    }

    /// `(x - mean) / std` applied to every pixel.
    pub fn standardize(&self, mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::invalid(format!("cannot standardize with mean {mean} std {std}")));
        }
        let (m, s) = (S::of(mean), S::of(std));
        Ok(Dataset {
            images: self.images.map(|v| (v - m) / s)?,
            labels: self.labels.clone(),
        })
    }

    /// Checks every label is below `classes`.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        if let Some(bad) = self.labels()?.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(format!("{}: truncated IDX header", path.display())))
}

/// Parses an IDX file, returning its dimension sizes and payload.
fn parse_idx<'b>(bytes: &'b [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'b [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::format(format!(
            "{}: IDX magic {found:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != count {
        return Err(Error::format(format!(
            "{}: IDX payload has {} bytes, header implies {count}",
            path.display(),
            payload.len()
        )));
    }
    Ok((dims, payload))
}

/// Loads an IDX image file and, optionally, its IDX label file.
pub fn load_idx<S: Scalar>(images: &Path, labels: Option<&Path>) -> Result<Dataset<S>> {
    let bytes = read(images)?;
    let (dims, payload) = parse_idx(&bytes, IDX_IMAGES_MAGIC, images)?;
    let scale = S::of(255.0);
    let data = payload.iter().map(|&p| S::of(p as f64) / scale).collect();
    let tensor = Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)?;
    let labels = match labels {
        Some(path) => {
            let lb = read(path)?;
            let (ldims, lp) = parse_idx(&lb, IDX_LABELS_MAGIC, path)?;
            if ldims[0] != dims[0] {
                return Err(Error::format(format!(
                    "{} labels for {} images",
                    ldims[0], dims[0]
                )));
            }
            Some(lp.iter().map(|&v| v as u32).collect())
        }
        None => None,
    };
    Dataset::new(tensor, labels)
}

/// Writes a single-channel dataset as IDX; pixel values are clamped to
/// `[0, 1]` and rounded to bytes.
pub fn save_idx<S: Scalar>(ds: &Dataset<S>, images: &Path, labels: Option<&Path>) -> Result<()> {
    let (n, c, h, w) = ds.images().dims4()?;
    if c != 1 {
        return Err(Error::invalid("IDX export needs single-channel images"));
    }
    let mut out = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(ds.images().data().iter().map(|v| {
        let p = v.to_f64_lossy().clamp(0.0, 1.0) * 255.0;
        p.round() as u8
    }));
    write(images, &out)?;
    if let Some(path) = labels {
        let mut out = Vec::with_capacity(8 + n);
        for v in [IDX_LABELS_MAGIC, n as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        for &y in ds.labels()? {
            let y = u8::try_from(y).map_err(|_| Error::invalid("IDX labels must fit in a byte"))?;
            out.push(y);
        }
        write(path, &out)?;
    }
    Ok(())
}

/// Writes `data.bin`, `data.meta` and (when labeled) `labels.bin` into `dir`.
pub fn save_raw<S: Scalar>(ds: &Dataset<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_raw_tensor(ds.images(), dir)?;
    if let Some(labels) = &ds.labels {
        let mut bytes = Vec::with_capacity(labels.len() * 4);
        for &y in labels {
            let y = i32::try_from(y).map_err(|_| Error::invalid("label exceeds i32"))?;
            bytes.extend_from_slice(&y.to_le_bytes());
        }
        write(&dir.join(RAW_LABELS), &bytes)?;
    }
    Ok(())
}

/// Writes a 4-D tensor as `data.bin` + `data.meta` into `dir`.
pub fn write_raw_tensor<S: Scalar>(t: &Tensor<S>, dir: &Path) -> Result<()> {
    let (b, c, h, w) = t.dims4()?;
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    write(&dir.join(RAW_DATA), &bytes)?;
    write(&dir.join(RAW_META), format!("shape={b},{c},{h},{w}\n").as_bytes())
}

/// Loads a raw-format dataset directory; `labels.bin` is optional.
pub fn load_raw<S: Scalar>(dir: &Path) -> Result<Dataset<S>> {
    let meta_path = dir.join(RAW_META);
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let shape = parse_meta(meta.trim(), &meta_path)?;
    let data_path = dir.join(RAW_DATA);
    let bytes = read(&data_path)?;
    let count: usize = shape.iter().product();
    if bytes.len() != count * 8 {
        return Err(Error::format(format!(
            "{}: {} bytes, shape {shape:?} needs {}",
            data_path.display(),
            bytes.len(),
            count * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    let images = Tensor::new(shape.clone(), data)?;
    let labels_path = dir.join(RAW_LABELS);
    let labels = if labels_path.exists() {
        let lb = read(&labels_path)?;
        if lb.len() != shape[0] * 4 {
            return Err(Error::format(format!(
                "{}: {} bytes for {} labels",
                labels_path.display(),
                lb.len(),
                shape[0]
            )));
        }
        let labels = lb
            .chunks_exact(4)
            .map(|c| {
                let v = i32::from_le_bytes(c.try_into().expect("4 bytes"));
                u32::try_from(v).map_err(|_| Error::format(format!("negative label {v}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(labels)
    } else {
        None
    };
    Dataset::new(images, labels)
}

fn parse_meta(line: &str, path: &Path) -> Result<Vec<usize>> {
    let bad = || Error::format(format!("{}: expected `shape=B,C,H,W`, got {line:?}", path.display()));
    let dims = line.strip_prefix("shape=").ok_or_else(bad)?;
    let shape = dims
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    if shape.len() != 4 || shape.contains(&0) {
        return Err(bad());
    }
    Ok(shape)
}

/// Loads a dataset from a path: a raw-format directory (has `data.meta`),
/// or an IDX image file whose label file is found by replacing `images`
/// with `labels` and `idx3` with `idx1` in the file name.
pub fn load_any<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    if path.is_dir() {
        return load_raw(path);
    }
    let labels = idx_label_path(path).filter(|p| p.exists());
    load_idx(path, labels.as_deref())
}

fn idx_label_path(images: &Path) -> Option<PathBuf> {
    let name = images.file_name()?.to_str()?;
    if !name.contains("images") {
        return None;
    }
    let lname = name.replace("images", "labels").replace("idx3", "idx1");
    Some(images.with_file_name(lname))
}
