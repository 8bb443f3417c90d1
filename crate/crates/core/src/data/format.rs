//! Native little-endian dataset file.
//!
//! ```text
//! "MMNIST01"  u32 version  u32 n  u16 H  u16 W  u8 rows  u8 cols  u8 family  u64 seed
//! n records: H*W u8 pixels, rows*cols u8 labels, rows*cols (u16 row, u16 col) centers,
//!            and for by_ref: u8 ref_digit, u8 answer
//! ```

use std::fs;
use std::path::Path;

use super::mmnist::{Family, Grid, Header, MultiMnistDataset, RefInfo, Sample};
use super::DataError;

pub const MAGIC: &[u8; 8] = b"MMNIST01";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 8 + 4 + 4 + 2 + 2 + 1 + 1 + 1 + 8;

/// Bytes per sample record.
pub fn record_bytes(header: &Header) -> usize {
    let cells = header.grid.cells();
    let extra = match header.family {
        Family::ByLoc => 0,
        Family::ByRef => 2,
    };
    header.height * header.width + cells + 4 * cells + extra
}

pub fn to_bytes(ds: &MultiMnistDataset) -> Vec<u8> {
    let h = &ds.header;
    let mut out = Vec::with_capacity(HEADER_BYTES + ds.len() * record_bytes(h));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(h.height as u16).to_le_bytes());
    out.extend_from_slice(&(h.width as u16).to_le_bytes());
    out.push(h.grid.rows as u8);
    out.push(h.grid.cols as u8);
    out.push(h.family.code());
    out.extend_from_slice(&h.seed.to_le_bytes());
    for s in &ds.samples {
        out.extend_from_slice(&s.pixels);
        out.extend_from_slice(&s.cell_labels);
        for &(r, c) in &s.centers {
            out.extend_from_slice(&r.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        if h.family == Family::ByRef {
            let r = s.reference.expect("by_ref sample without reference");
            out.push(r.ref_digit);
            out.push(r.answer);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self.pos + n;
        let out = self.bytes.get(self.pos..end).ok_or_else(|| {
            DataError::Truncated(format!(
                "{what} needs bytes {}..{end}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DataError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<MultiMnistDataset, DataError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(DataError::BadMagic {
            what: "dataset",
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            actual: String::from_utf8_lossy(magic).escape_debug().to_string(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(DataError::Version {
            what: "dataset",
            expected: VERSION,
            actual: version,
        });
    }
    let n = r.u32("sample count")? as usize;
    let height = r.u16("height")? as usize;
    let width = r.u16("width")? as usize;
    let grid = Grid::new(r.u8("rows")? as usize, r.u8("cols")? as usize);
    let family_code = r.u8("family")?;
    let family = Family::from_code(family_code)
        .ok_or_else(|| DataError::Format(format!("unknown task family code {family_code}")))?;
    let seed = r.u64("seed")?;
    if grid.rows == 0 || grid.cols == 0 || height != grid.canvas_height() || width != grid.canvas_width() {
        return Err(DataError::Format(format!(
            "canvas {height}x{width} inconsistent with grid {grid}"
        )));
    }
    let header = Header {
        grid,
        height,
        width,
        family,
        seed,
    };
    let expected = HEADER_BYTES + n * record_bytes(&header);
    if bytes.len() < expected {
        return Err(DataError::Truncated(format!(
            "{n} samples need {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(DataError::Format(format!(
            "{} trailing bytes after {n} samples",
            bytes.len() - expected
        )));
    }
    let cells = grid.cells();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let pixels = r.take(height * width, "pixels")?.to_vec();
        let cell_labels = r.take(cells, "labels")?.to_vec();
        if let Some(bad) = cell_labels.iter().find(|&&l| l > 9) {
            return Err(DataError::Format(format!("cell label {bad} outside 0..9")));
        }
        let mut centers = Vec::with_capacity(cells);
        for _ in 0..cells {
            let (cr, cc) = (r.u16("center")?, r.u16("center")?);
            if cr as usize >= height || cc as usize >= width {
                return Err(DataError::Format(format!("center ({cr},{cc}) outside canvas")));
            }
            centers.push((cr, cc));
        }
        let reference = match family {
            Family::ByLoc => None,
            Family::ByRef => Some(RefInfo {
                ref_digit: r.u8("ref digit")?,
                answer: r.u8("answer")?,
            }),
        };
        samples.push(Sample {
            pixels,
            cell_labels,
            centers,
            reference,
        });
    }
    Ok(MultiMnistDataset { header, samples })
}

pub fn write_dataset(ds: &MultiMnistDataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, to_bytes(ds)).map_err(|e| DataError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<MultiMnistDataset, DataError> {
    from_bytes(&fs::read(path).map_err(|e| DataError::io(path, e))?)
}
