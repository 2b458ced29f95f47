//! IDX image/label files (the MNIST container format).
//!
//! Header: two zero bytes, a type byte (`0x08` = unsigned byte), a dimension
//! count, then one big-endian `u32` per dimension. Images use magic
//! `0x00000803` (n × rows × cols), labels `0x00000801` (n).

use std::fs;
use std::path::Path;

use twins_core::data::{DomainDataset, Split};
use twins_core::Tensor;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Pixels of an image file, scaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

fn be_u32(bytes: &[u8], at: usize, source: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(source, format!("truncated header at byte {at}")))
}

fn header(bytes: &[u8], magic: u32, source: &str) -> Result<Vec<usize>> {
    let found = be_u32(bytes, 0, source)?;
    if found != magic {
        return Err(Error::format(source, format!("bad magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i, source).map(|d| d as usize)).collect()
}

fn body<'a>(bytes: &'a [u8], dims: &[usize], source: &str) -> Result<&'a [u8]> {
    let start = 4 + 4 * dims.len();
    let len = dims.iter().product::<usize>();
    bytes.get(start..start + len).ok_or_else(|| {
        Error::format(
            source,
            format!("truncated body: expected {len} bytes, found {}", bytes.len().saturating_sub(start)),
        )
    })
}

pub fn parse_images(bytes: &[u8], source: &str) -> Result<IdxImages> {
    let dims = header(bytes, IMAGE_MAGIC, source)?;
    let data = body(bytes, &dims, source)?;
    Ok(IdxImages {
        count: dims[0],
        rows: dims[1],
        cols: dims[2],
        pixels: data.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn parse_labels(bytes: &[u8], source: &str) -> Result<Vec<usize>> {
    let dims = header(bytes, LABEL_MAGIC, source)?;
    Ok(body(bytes, &dims, source)?.iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Builds a dataset from in-memory image and label files, keeping only rows
/// whose label is in `keep_classes` (all rows when `None`). Labels are kept
/// as they are, so a target subset still indexes the full class universe.
pub fn dataset_from_bytes(
    images: &[u8],
    labels: &[u8],
    keep_classes: Option<&[usize]>,
    class_universe: usize,
    split: Split,
) -> Result<DomainDataset> {
    let img = parse_images(images, "images")?;
    let lab = parse_labels(labels, "labels")?;
    if img.count != lab.len() {
        return Err(twins_core::Error::Data(format!("{} images but {} labels", img.count, lab.len())).into());
    }
    let d = img.rows * img.cols;
    let keep: Vec<usize> = (0..img.count).filter(|&i| keep_classes.is_none_or(|k| k.contains(&lab[i]))).collect();
    if keep.is_empty() {
        return Err(twins_core::Error::Data("no images left after class filtering".into()).into());
    }
    let mut x = Vec::with_capacity(keep.len() * d);
    for &i in &keep {
        x.extend_from_slice(&img.pixels[i * d..(i + 1) * d]);
    }
    let y = keep.iter().map(|&i| lab[i]).collect();
    Ok(DomainDataset::new(Tensor::new(vec![keep.len(), d], x)?, Some(y), class_universe, split)?)
}

/// [`dataset_from_bytes`] on files.
pub fn load_idx(
    images: &Path,
    labels: &Path,
    keep_classes: Option<&[usize]>,
    class_universe: usize,
    split: Split,
) -> Result<DomainDataset> {
    let ib = read(images)?;
    let lb = read(labels)?;
    dataset_from_bytes(&ib, &lb, keep_classes, class_universe, split).map_err(|e| match e {
        Error::Format { path, message } => {
            let file = if path == "images" { images } else { labels };
            Error::format(file.display().to_string(), message)
        }
        other => other,
    })
}

/// Encodes images and labels as IDX files; pixels are given as raw bytes.
pub fn encode(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut ib = IMAGE_MAGIC.to_be_bytes().to_vec();
    for d in [images.len(), rows, cols] {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.iter().for_each(|im| ib.extend_from_slice(im));
    let mut lb = LABEL_MAGIC.to_be_bytes().to_vec();
    lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lb.extend_from_slice(labels);
    (ib, lb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let a: Vec<u8> = (0..9).collect();
        let b = vec![255u8; 9];
        encode(&[a, b], 3, 3, &[7, 2])
    }

    #[test]
    fn two_image_fixture() {
        let (ib, lb) = fixture();
        let ds = dataset_from_bytes(&ib, &lb, None, 10, Split::Train).unwrap();
        assert_eq!(ds.features().shape(), &[2, 9]);
        assert_eq!(ds.features().row(0)[8], 8.0 / 255.0);
        assert!(ds.features().row(1).iter().all(|&v| v == 1.0));
        assert_eq!(ds.labels().unwrap(), &[7, 2]);
    }

    #[test]
    fn filtering_keeps_original_labels() {
        let (ib, lb) = fixture();
        let ds = dataset_from_bytes(&ib, &lb, Some(&[2]), 10, Split::Test).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels().unwrap(), &[2]);
        assert_eq!(ds.features().row(0)[0], 1.0);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let (mut ib, lb) = fixture();
        let short = ib[..ib.len() - 1].to_vec();
        assert!(matches!(dataset_from_bytes(&short, &lb, None, 10, Split::Train), Err(Error::Format { .. })));
        assert!(matches!(dataset_from_bytes(&ib[..6], &lb, None, 10, Split::Train), Err(Error::Format { .. })));
        ib[3] = 0x01;
        assert!(matches!(dataset_from_bytes(&ib, &lb, None, 10, Split::Train), Err(Error::Format { .. })));
        assert!(matches!(dataset_from_bytes(&lb, &lb, None, 10, Split::Train), Err(Error::Format { .. })));
    }

    #[test]
    fn count_mismatch_is_data_error() {
        let (ib, _) = fixture();
        let (_, lb) = encode(&[], 3, 3, &[1]);
        let r = dataset_from_bytes(&ib, &lb, None, 10, Split::Train);
        assert!(matches!(r, Err(Error::Core(twins_core::Error::Data(_)))));
    }

    #[test]
    fn label_outside_universe_is_rejected() {
        let (ib, lb) = fixture();
        assert!(dataset_from_bytes(&ib, &lb, None, 5, Split::Train).is_err());
    }
}
