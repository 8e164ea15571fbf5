//! IDX container reading and writing (the MNIST distribution format).
//!
//! Images: magic `0x00000803`, then big-endian `u32` count, rows, cols, then
//! `count*rows*cols` unsigned bytes. Labels: magic `0x00000801`, count, bytes.
//! Gzipped files are detected by their header and decompressed transparently.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::ndiff::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an image file into `n x 1 x rows x cols`, scaled by 1/255.
pub fn parse_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let len = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(Error::Format(format!(
            "truncated IDX image data: expected {len} bytes, found {}",
            body.len()
        )));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format("IDX image file with an empty dimension".into()));
    }
    let data = body[..len].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!(
            "truncated IDX label data: expected {n} bytes, found {}",
            body.len()
        )));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads images and, optionally, labels. Labels must match the image count.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let imgs = parse_images(&read_file(images)?)?;
    let labels = labels.map(|p| read_file(p).and_then(|b| parse_labels(&b))).transpose()?;
    if let Some(l) = &labels {
        if l.len() != imgs.batch() {
            return Err(Error::Format(format!(
                "count mismatch: {} images but {} labels",
                imgs.batch(),
                l.len()
            )));
        }
    }
    Dataset::new(imgs, labels)
}

/// Encodes single-channel images as IDX bytes; values are rounded to the nearest 1/255.
pub fn encode_images(images: &Tensor) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::invalid(format!("IDX images must be n x 1 x h x w, got {s:?}")));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend(v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit a byte")))?);
    }
    Ok(out)
}

/// Writes uncompressed IDX files.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: Option<&Path>) -> Result<()> {
    fs::File::create(images)?.write_all(&encode_images(&dataset.images)?)?;
    if let (Some(path), Some(l)) = (labels, &dataset.labels) {
        fs::File::create(path)?.write_all(&encode_labels(l)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v
    }

    #[test]
    fn handcrafted_fixture() {
        let mut bytes = header(IMAGES_MAGIC, &[4, 2, 2]);
        bytes.extend([0u8, 255, 51, 102, 1, 2, 3, 4, 10, 20, 30, 40, 255, 255, 0, 0]);
        let t = parse_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[4, 1, 2, 2]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[2], 0.2);
        assert_eq!(t.data()[3], 0.4);
        assert_eq!(t.data()[12], 1.0);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = header(IMAGES_MAGIC, &[1]);
        bytes.push(3);
        let err = parse_labels(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = header(IMAGES_MAGIC, &[2, 2, 2]);
        bytes.extend([1u8; 7]);
        assert!(matches!(parse_images(&bytes), Err(Error::Format(_))));
        assert!(matches!(parse_images(&bytes[..10]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn encode_parse_round_trip(pixels in prop::collection::vec(any::<u8>(), 12), labels in prop::collection::vec(0usize..10, 3)) {
            let t = Tensor::new(vec![3, 1, 2, 2], pixels.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
            let bytes = encode_images(&t).unwrap();
            prop_assert_eq!(&bytes[16..], &pixels[..]);
            let back = parse_images(&bytes).unwrap();
            prop_assert_eq!(back.data(), t.data());
            prop_assert_eq!(parse_labels(&encode_labels(&labels).unwrap()).unwrap(), labels);
        }
    }
}
