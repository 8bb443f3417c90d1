//! Big-endian IDX files as distributed with MNIST.

use std::fs;
use std::path::Path;

use super::DataError;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const DIGIT_SIDE: usize = 28;
pub const DIGIT_PIXELS: usize = DIGIT_SIDE * DIGIT_SIDE;

/// A set of 28x28 grayscale digits with their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mnist {
    /// `len() * 784` bytes, one row-major image after another.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Mnist {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * DIGIT_PIXELS..(i + 1) * DIGIT_PIXELS]
    }

    /// Image indices grouped by label.
    pub fn by_class(&self) -> [Vec<usize>; 10] {
        let mut out: [Vec<usize>; 10] = Default::default();
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    /// Load `{prefix}-images-idx3-ubyte` and `{prefix}-labels-idx1-ubyte`
    /// from `dir`, where prefix is `train` or `t10k`.
    pub fn load_dir(dir: &Path, split: Split) -> Result<Self, DataError> {
        let prefix = split.prefix();
        load_idx(
            &dir.join(format!("{prefix}-images-idx3-ubyte")),
            &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" | "t10k" => Ok(Split::Test),
            other => Err(format!("unknown MNIST split '{other}' (expected train or test)")),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated(format!("{what}: header ends at byte {}", bytes.len())))
}

/// Parse an IDX image file (`28x28` u8 images).
pub fn parse_images(bytes: &[u8]) -> Result<(usize, Vec<u8>), DataError> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            what: "IDX images",
            expected: format!("{IMAGES_MAGIC:#010x}"),
            actual: format!("{magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    if rows != DIGIT_SIDE || cols != DIGIT_SIDE {
        return Err(DataError::Format(format!(
            "expected {DIGIT_SIDE}x{DIGIT_SIDE} images, got {rows}x{cols}"
        )));
    }
    let body = &bytes[16..];
    let need = count * DIGIT_PIXELS;
    if body.len() < need {
        return Err(DataError::Truncated(format!(
            "images: {count} images need {need} bytes, found {}",
            body.len()
        )));
    }
    Ok((count, body[..need].to_vec()))
}

/// Parse an IDX label file.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            what: "IDX labels",
            expected: format!("{LABELS_MAGIC:#010x}"),
            actual: format!("{magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(DataError::Truncated(format!(
            "labels: expected {count}, found {}",
            body.len()
        )));
    }
    let labels = body[..count].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(DataError::Format(format!("label {bad} outside 0..9")));
    }
    Ok(labels)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Mnist, DataError> {
    let read = |p: &Path| fs::read(p).map_err(|e| DataError::io(p, e));
    let (count, pixels) = parse_images(&read(images)?)?;
    let labels = parse_labels(&read(labels)?)?;
    if labels.len() != count {
        return Err(DataError::Format(format!(
            "count mismatch: {count} images but {} labels",
            labels.len()
        )));
    }
    Ok(Mnist { pixels, labels })
}

#[cfg(test)]
pub(crate) fn encode_images(images: &[u8], count: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(DIGIT_SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(DIGIT_SIDE as u32).to_be_bytes());
    out.extend_from_slice(images);
    out
}

#[cfg(test)]
pub(crate) fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
