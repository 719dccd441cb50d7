//! Reader for the big-endian IDX container used by MNIST.
//!
//! Layout: two zero bytes, a type byte (0x08 = unsigned byte), a dimension
//! count, one big-endian `u32` per dimension, then the raw row-major data.

use std::path::Path;

use super::Dataset;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let b = bytes.get(offset..offset + 4).ok_or_else(|| Error::Format {
        offset: bytes.len(),
        detail: format!("truncated {what}: need 4 bytes at offset {offset}"),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an unsigned-byte IDX file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let magic = be_u32(bytes, 0, "header")?;
    if magic != LABELS_MAGIC && magic != IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic 0x{magic:08x}; expected 0x{LABELS_MAGIC:08x} or 0x{IMAGES_MAGIC:08x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i, "dimension").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let len: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < len {
        return Err(Error::Format {
            offset: bytes.len(),
            detail: format!("truncated data: dims {dims:?} need {len} bytes, found {have}"),
        });
    }
    if have > len {
        return Err(Error::Format {
            offset: start + len,
            detail: format!("{} trailing bytes after data", have - len),
        });
    }
    Ok(IdxArray {
        magic,
        dims,
        data: bytes[start..].to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&std::fs::read(path)?)
}

/// Image/label file pair as a dataset of `[n, 1, h, w]` images in `[0, 1]`.
pub fn load_idx<T: Element>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if img.magic != IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("{} holds labels, not images", images.display()),
        });
    }
    if lab.magic != LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("{} holds images, not labels", labels.display()),
        });
    }
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(Error::shape("load_idx", format!("{n} images but {} labels", lab.dims[0])));
    }
    let pixels: Vec<T> = img.data.iter().map(|&b| T::from_f64_lossy(b as f64 / 255.0)).collect();
    let ids: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let name = images.file_name().map_or("idx".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, Tensor::new(vec![n, 1, h, w], pixels)?, Tensor::from_ids(&[n], &ids)?, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend(d.to_be_bytes());
        }
        b
    }

    #[test]
    fn two_two_by_two_images_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGES_MAGIC, &[2, 2, 2]);
        img.extend([0u8, 255, 51, 102, 204, 0, 0, 255]);
        let mut lab = header(LABELS_MAGIC, &[2]);
        lab.extend([7u8, 3]);
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        let d: Dataset<f64> = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.inputs.shape(), &[2, 1, 2, 2]);
        assert_eq!(d.inputs.data(), &[0.0, 1.0, 0.2, 0.4, 0.8, 0.0, 0.0, 1.0]);
        assert_eq!(d.labels.data(), &[7.0, 3.0]);
    }

    #[test]
    fn bad_magic_is_reported_at_offset_zero() {
        let mut b = header(0x0000_0802, &[1]);
        b.push(0);
        assert!(matches!(parse_idx(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_the_offset() {
        let mut b = header(LABELS_MAGIC, &[4]);
        b.extend([1u8, 2]);
        assert!(matches!(parse_idx(&b), Err(Error::Format { offset: 10, .. })));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Format { offset: 3, .. })));
        let short_dims = &header(IMAGES_MAGIC, &[2, 2])[..];
        assert!(matches!(parse_idx(short_dims), Err(Error::Format { .. })));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut b = header(LABELS_MAGIC, &[1]);
        b.extend([1u8, 2]);
        assert!(matches!(parse_idx(&b), Err(Error::Format { offset: 9, .. })));
    }

    /// Set `PEGRAD_MNIST_DIR` to a directory holding the uncompressed
    /// training files to run this.
    #[test]
    #[ignore = "needs the MNIST training files"]
    fn real_mnist_training_set() {
        let dir = std::path::PathBuf::from(std::env::var("PEGRAD_MNIST_DIR").unwrap());
        let d: Dataset<f32> = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
        assert_eq!(d.inputs.shape(), &[60_000, 1, 28, 28]);
    }
}
