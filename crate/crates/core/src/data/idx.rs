//! Big-endian IDX decoding (the MNIST file layout).
//!
//! Header: 2 zero bytes, a type byte (0x08 = unsigned byte), a dimension
//! count, then one big-endian `u32` per dimension, then the payload.

use std::path::Path;

use super::Dataset;
use crate::linalg::DenseMatrix;
use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded image file: `count` images of `rows * cols` raw bytes each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated header at byte {offset}")))
}

fn payload<'a>(bytes: &'a [u8], header: usize, dims: &[usize]) -> Result<&'a [u8]> {
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dimensions {dims:?} overflow")))?;
    let body = &bytes[header..];
    if body.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: {expected} bytes declared, {} present",
            body.len()
        )));
    }
    if body.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after {expected}-byte payload",
            body.len() - expected
        )));
    }
    Ok(body)
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::Format(format!(
            "bad magic 0x{magic:08x}, expected 0x{want:08x}"
        )));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let body = payload(bytes, 16, &[count, rows, cols])?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, &[count])?.to_vec())
}

/// Joins decoded images and labels into a dataset; pixels scale to `[0, 1]`.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let dim = images.rows * images.cols;
    let features = DenseMatrix::new(
        images.count,
        dim,
        images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let classes = labels.iter().map(|&l| usize::from(l) + 1).max().unwrap_or(0);
    Dataset::new(features, labels.iter().map(|&l| usize::from(l)).collect(), classes)
}

/// Parses an IDX image/label file pair from disk.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let label_bytes = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let images = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    dataset_from_idx(&images, &labels)
}
