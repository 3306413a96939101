//! IDX (MNIST) file parsing. Files must be uncompressed.

use std::path::Path;

use crate::error::{FatError, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn parse_err(field: &str, detail: impl Into<String>) -> FatError {
    FatError::Parse {
        field: field.to_string(),
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(field, format!("file ends before byte {}", offset + 4)))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(parse_err("magic", format!("expected {IMAGES_MAGIC:#010x}, found {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    let want = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| parse_err("count", "image dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != want {
        return Err(parse_err(
            "pixel data",
            format!("expected {want} bytes for {count} images of {rows}x{cols}, found {}", body.len()),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(parse_err("magic", format!("expected {LABELS_MAGIC:#010x}, found {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "count")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(parse_err(
            "label data",
            format!("expected {count} bytes, found {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let per = rows * cols;
    let count = if per == 0 { 0 } else { pixels.len() / per };
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| FatError::io(path, e))
}

/// Images as rows scaled to `[0, 1]` (pixel / 255) and their labels.
pub fn load_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(DenseMatrix<T>, Vec<usize>)> {
    let images = parse_idx_images(&read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?)?;
    if images.count != labels.len() {
        return Err(parse_err(
            "count",
            format!("{} images but {} labels", images.count, labels.len()),
        ));
    }
    let d = images.rows * images.cols;
    let x = DenseMatrix::new(
        images.count,
        d,
        images.pixels.iter().map(|&p| T::lit(p as f64 / 255.0)).collect(),
    )?;
    Ok((x, labels.into_iter().map(usize::from).collect()))
}

#[derive(Clone, Debug)]
pub struct MnistSplits<T> {
    pub train_x: DenseMatrix<T>,
    pub train_y: Vec<usize>,
    pub test_x: DenseMatrix<T>,
    pub test_y: Vec<usize>,
}

/// Loads the four standard uncompressed MNIST files from `dir`.
pub fn load_mnist<T: Scalar>(dir: impl AsRef<Path>) -> Result<MnistSplits<T>> {
    let dir = dir.as_ref();
    let (train_x, train_y) = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?;
    let (test_x, test_y) = load_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok(MnistSplits {
        train_x,
        train_y,
        test_x,
        test_y,
    })
}
