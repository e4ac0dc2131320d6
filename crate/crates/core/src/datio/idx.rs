//! The big-endian IDX container used by MNIST-style corpora (unsigned-byte payloads only).

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

use super::{FeatureKind, LabeledDataset};

const TYPE_U8: u8 = 0x08;

/// Raw contents of an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Decodes an unsigned-byte IDX payload. `path` only labels errors.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let fail = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 4 {
        return Err(fail(bytes.len(), "file shorter than the 4-byte magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        let at = if bytes[0] != 0 { 0 } else { 1 };
        return Err(fail(at, format!("bad magic byte 0x{:02x}", bytes[at])));
    }
    if bytes[2] != TYPE_U8 {
        return Err(fail(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(fail(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(fail(bytes.len(), format!("header truncated, {ndims} dimension sizes expected")));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(4, "dimension product overflows".into()))?;
    let payload = &bytes[header..];
    if payload.len() != count {
        let at = header + payload.len().min(count);
        return Err(fail(at, format!("expected {count} data bytes, found {}", payload.len())));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

/// Encodes unsigned bytes as an IDX file.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, TYPE_U8, dims.len() as u8];
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Images scaled by 1/255 and flattened row-major, with optional labels.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<LabeledDataset> {
    let images = parse_idx(&std::fs::read(images_path)?, images_path)?;
    if images.dims.len() < 2 {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            offset: 3,
            reason: "image file needs at least two dimensions".into(),
        });
    }
    let n = images.dims[0];
    let d: usize = images.dims[1..].iter().product();
    let data = images.data.iter().map(|&b| b as f64 / 255.0).collect();
    let features = Tensor::matrix(n, d, data)?;
    let labels = match labels_path {
        None => None,
        Some(p) => {
            let arr = parse_idx(&std::fs::read(p)?, p)?;
            if arr.dims.len() != 1 || arr.dims[0] != n {
                return Err(Error::Format {
                    path: p.to_path_buf(),
                    offset: 4,
                    reason: format!("label dimensions {:?} do not match {n} images", arr.dims),
                });
            }
            Some(arr.data.iter().map(|&b| b as usize).collect())
        }
    };
    let name = images_path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    LabeledDataset::new(features, labels, FeatureKind::BinaryScaled, name)
}
