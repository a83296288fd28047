//! IDX container parsing (the MNIST-family format): big-endian header with a
//! fixed magic, then raw u8 payload. Byte counts are enforced exactly, so any
//! header corruption surfaces as an error.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// A parsed dataset: one tensor per sample plus dense labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub input_shape: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("{what}: file truncated before offset {end}"),
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an images/labels pair; pixels scale to [0,1], each image becomes a
/// [1, h, w] tensor.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    if images.is_empty() || labels.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "empty IDX file",
        )));
    }

    let magic = read_u32_be(&images, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images magic {magic:#010x} at offset 0, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&images, 4, "images")? as usize;
    let h = read_u32_be(&images, 8, "images")? as usize;
    let w = read_u32_be(&images, 12, "images")? as usize;
    let expected = 16 + count * h * w;
    if images.len() < expected {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("images payload truncated: {} bytes, header wants {}", images.len(), expected),
        )));
    }
    if images.len() > expected {
        return Err(Error::Format(format!(
            "images file has {} trailing bytes",
            images.len() - expected
        )));
    }

    let lmagic = read_u32_be(&labels, 0, "labels")?;
    if lmagic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels magic {lmagic:#010x} at offset 0, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let lcount = read_u32_be(&labels, 4, "labels")? as usize;
    let lexpected = 8 + lcount;
    if labels.len() < lexpected {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("labels payload truncated: {} bytes, header wants {}", labels.len(), lexpected),
        )));
    }
    if labels.len() > lexpected {
        return Err(Error::Format(format!(
            "labels file has {} trailing bytes",
            labels.len() - lexpected
        )));
    }
    if count != lcount {
        return Err(Error::Consistency(format!(
            "{count} images vs {lcount} labels"
        )));
    }

    let mut inputs = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * h * w;
        let values: Vec<f64> = images[start..start + h * w]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        inputs.push(Tensor::new(vec![1, h, w], values)?);
    }
    let label_vals: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let n_classes = label_vals.iter().max().map_or(0, |m| m + 1);
    Ok(LabeledDataset {
        inputs,
        labels: label_vals,
        n_classes,
        input_shape: vec![1, h, w],
    })
}
