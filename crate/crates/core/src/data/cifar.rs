//! CIFAR-10 binary record layout: one label byte followed by the pixel
//! bytes of each channel plane in row-major order. The same layout, with
//! the record length derived from the image shape, is used to export the
//! synthetic benchmark.

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const CIFAR_CLASSES: usize = 10;

/// Parse records of shape `shape` with labels in `[0, classes)`.
pub fn parse_cifar_records(bytes: &[u8], shape: [usize; 3], classes: usize, split: Split) -> Result<Dataset> {
    let pixels: usize = shape.iter().product();
    let record = pixels + 1;
    if bytes.len() % record != 0 {
        return Err(Error::Data(format!(
            "file length {} is not a multiple of the {record}-byte record size",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * pixels);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        if rec[0] as usize >= classes {
            return Err(Error::Data(format!("record {i}: label byte {} > {}", rec[0], classes - 1)));
        }
        labels.push(rec[0]);
        images.extend(rec[1..].iter().map(|&b| b as Real / 255.0));
    }
    Dataset::new(shape, classes, images, labels, split)
}

/// Load a CIFAR-10 binary batch file.
pub fn load_cifar_binary(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes, CIFAR_SHAPE, CIFAR_CLASSES, split)
}

/// Serialize a dataset to the record layout (pixels quantized to bytes).
pub fn encode_records(ds: &Dataset) -> Vec<u8> {
    let pixels: usize = ds.image_shape().iter().product();
    let mut out = Vec::with_capacity(ds.len() * (pixels + 1));
    for (i, &label) in ds.raw_labels().iter().enumerate() {
        out.push(label);
        out.extend(
            ds.raw_images()[i * pixels..(i + 1) * pixels]
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    out
}

pub fn write_records(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_records(ds)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_255_is_all_ones() {
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat(255u8).take(3072));
        let ds = parse_cifar_records(&rec, CIFAR_SHAPE, CIFAR_CLASSES, Split::Test).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.image(0).iter().all(|&v| v == 1.0));
        assert_eq!(ds.labels(&[0]), vec![3]);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = parse_cifar_records(&[], CIFAR_SHAPE, CIFAR_CLASSES, Split::Train).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn malformed_length_and_label_rejected() {
        assert!(parse_cifar_records(&[0u8; 3072], CIFAR_SHAPE, CIFAR_CLASSES, Split::Train).is_err());
        let mut rec = vec![10u8];
        rec.extend(std::iter::repeat(0u8).take(3072));
        let err = parse_cifar_records(&rec, CIFAR_SHAPE, CIFAR_CLASSES, Split::Train).unwrap_err();
        assert!(err.to_string().contains("label byte"));
    }
}
