//! IDX binary parsing and serialization (the MNIST container format).
//!
//! Layout is big-endian throughout: a u32 magic (0x00000803 for image
//! files with dims count x rows x cols, 0x00000801 for label files with a
//! single count dim), the dimension header, then the raw u8 payload.

use super::{DatasetSplit, DomainTag, ImageSample, Truth};
use crate::error::{DegiaError, Result};
use byteorder::{BigEndian, ByteOrder};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    if bytes.len() < offset + 4 {
        return Err(DegiaError::Length(format!(
            "{what}: need 4 bytes at offset {offset}, file has {}",
            bytes.len()
        )));
    }
    Ok(BigEndian::read_u32(&bytes[offset..offset + 4]))
}

/// Parse paired IDX image and label streams into one split of grayscale
/// samples with pixels scaled from `[0, 255]` to `[0, 1]`.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<DatasetSplit> {
    let magic = read_u32(image_bytes, 0, "image header")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DegiaError::Format(format!(
            "image file magic {magic:#010x} at byte offset 0, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_u32(image_bytes, 4, "image count")? as usize;
    let rows = read_u32(image_bytes, 8, "image rows")? as usize;
    let cols = read_u32(image_bytes, 12, "image cols")? as usize;
    let expected = 16 + count * rows * cols;
    if image_bytes.len() < expected {
        return Err(DegiaError::Length(format!(
            "image payload truncated: header promises {expected} bytes, file has {}",
            image_bytes.len()
        )));
    }

    let lmagic = read_u32(label_bytes, 0, "label header")?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(DegiaError::Format(format!(
            "label file magic {lmagic:#010x} at byte offset 0, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let lcount = read_u32(label_bytes, 4, "label count")? as usize;
    if label_bytes.len() < 8 + lcount {
        return Err(DegiaError::Length(format!(
            "label payload truncated: header promises {} bytes, file has {}",
            8 + lcount,
            label_bytes.len()
        )));
    }
    if lcount != count {
        return Err(DegiaError::Consistency(format!(
            "image count {count} != label count {lcount}"
        )));
    }

    let mut split = DatasetSplit::new("idx", 0);
    split.samples.reserve(count);
    for i in 0..count {
        let base = 16 + i * rows * cols;
        let pixels = image_bytes[base..base + rows * cols]
            .iter()
            .map(|&b| f32::from(b) / 255.0)
            .collect();
        split.samples.push(ImageSample {
            height: rows,
            width: cols,
            channels: 1,
            pixels,
            truth: Truth::Class(label_bytes[8 + i] as usize),
            domain: DomainTag::MnistGray,
        });
    }
    Ok(split)
}

/// Serialize a grayscale class-labelled split back to IDX bytes. Inverse
/// of `parse_idx` for byte streams that originated there.
pub fn serialize_idx(split: &DatasetSplit) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = match split.samples.first() {
        Some(s) => (s.height, s.width),
        None => (0, 0),
    };
    let mut images = Vec::with_capacity(16 + split.len() * rows * cols);
    let mut labels = Vec::with_capacity(8 + split.len());
    images.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&(split.len() as u32).to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(split.len() as u32).to_be_bytes());

    for sample in &split.samples {
        if sample.channels != 1 || sample.height != rows || sample.width != cols {
            return Err(DegiaError::Consistency(
                "IDX serialization requires uniform grayscale samples".to_string(),
            ));
        }
        let label = match sample.truth {
            Truth::Class(c) => c,
            Truth::Landmarks(_) => {
                return Err(DegiaError::Consistency(
                    "IDX serialization requires class labels".to_string(),
                ))
            }
        };
        if label > u8::MAX as usize {
            return Err(DegiaError::Consistency(format!("label {label} exceeds u8")));
        }
        images.extend(sample.pixels.iter().map(|&p| (p * 255.0).round() as u8));
        labels.push(label as u8);
    }
    Ok((images, labels))
}
