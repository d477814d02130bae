//! Binary interchange formats.
//!
//! WRDESC (little-endian):
//!
//! ```text
//! magic    8 bytes  "WRDESC1\0"
//! version  u32      1
//! dim      u32
//! count    u64
//! rows     count * dim * f32
//! sidecar  u64 byte length, then UTF-8 text: one "label x y" line per row
//! ```
//!
//! WRPATCH uses the same layout with magic `"WRPATCH\0"`, `dim` holding the
//! patch side (32) and each row stored as `side*side` bits packed row-major,
//! most significant bit first.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sampling::{Patch, PATCH_SIDE};

pub const WRDESC_MAGIC: &[u8; 8] = b"WRDESC1\0";
pub const WRPATCH_MAGIC: &[u8; 8] = b"WRPATCH\0";
pub const VERSION: u32 = 1;

/// Sidecar row label: `label x y`. The label is usually an entity id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLabel {
    pub label: String,
    pub x: i64,
    pub y: i64,
}

impl RowLabel {
    pub fn new(label: impl Into<String>, x: i64, y: i64) -> Self {
        Self {
            label: label.into(),
            x,
            y,
        }
    }
}

/// In-memory WRDESC payload.
#[derive(Debug, Clone, PartialEq)]
pub struct WrDesc {
    pub dim: usize,
    pub rows: Vec<f32>,
    pub labels: Vec<RowLabel>,
}

impl WrDesc {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f32], label: RowLabel) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        if label.label.is_empty() || label.label.contains(char::is_whitespace) {
            return Err(Error::Format(format!("row label {:?} must be a single token", label.label)));
        }
        self.rows.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, WRDESC_MAGIC, self.dim, self.count())?;
        let mut buf = Vec::with_capacity(self.rows.len() * 4);
        for v in &self.rows {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        write_sidecar(w, &self.labels)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (dim, count) = read_header(r, WRDESC_MAGIC)?;
        let n = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("row block size overflows".into()))?;
        let bytes = read_exact_vec(r, n, "row block")?;
        let rows = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = read_sidecar(r, count)?;
        Ok(Self { dim, rows, labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let d = Self::read_from(&mut f)?;
        let mut rest = [0u8; 1];
        if f.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after WRDESC payload".into()));
        }
        Ok(d)
    }
}

fn write_header<W: Write>(w: &mut W, magic: &[u8; 8], dim: usize, count: usize) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let dim = u32::try_from(dim).map_err(|_| Error::Format("dim exceeds u32".into()))?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(count as u64).to_le_bytes())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<(usize, usize)> {
    let head = read_exact_vec(r, 24, "header")?;
    if &head[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head[..8]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(head[16..24].try_into().expect("8 bytes"));
    let count = usize::try_from(count).map_err(|_| Error::Format("count exceeds usize".into()))?;
    if dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    Ok((dim, count))
}

fn write_sidecar<W: Write>(w: &mut W, labels: &[RowLabel]) -> Result<()> {
    let mut text = String::new();
    for l in labels {
        text.push_str(&format!("{} {} {}\n", l.label, l.x, l.y));
    }
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

fn read_sidecar<R: Read>(r: &mut R, count: usize) -> Result<Vec<RowLabel>> {
    let len = read_exact_vec(r, 8, "sidecar length")?;
    let len = u64::from_le_bytes(len[..].try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("sidecar length exceeds usize".into()))?;
    let text = read_exact_vec(r, len, "sidecar")?;
    let text = String::from_utf8(text).map_err(|_| Error::Format("sidecar is not UTF-8".into()))?;
    let mut labels = Vec::with_capacity(count);
    for (i, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split(' ').collect();
        let bad = || Error::Format(format!("sidecar line {}: {line:?}", i + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        let x = parts[1].parse().map_err(|_| bad())?;
        let y = parts[2].parse().map_err(|_| bad())?;
        labels.push(RowLabel::new(parts[0], x, y));
    }
    if labels.len() != count {
        return Err(Error::Format(format!(
            "sidecar has {} lines for {count} rows",
            labels.len()
        )));
    }
    Ok(labels)
}

fn read_exact_vec<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format(format!("truncated {what}: {} of {n} bytes", buf.len())));
    }
    Ok(buf)
}

/// Writes a WRPATCH dump of 32×32 masks with `entity x y` sidecar lines.
pub fn write_patches<W: Write>(w: &mut W, patches: &[(String, Patch)]) -> Result<()> {
    write_header(w, WRPATCH_MAGIC, PATCH_SIDE, patches.len())?;
    let mut labels = Vec::with_capacity(patches.len());
    for (label, p) in patches {
        let mut bytes = [0u8; PATCH_SIDE * PATCH_SIDE / 8];
        for (i, &b) in p.mask().iter().enumerate() {
            if b {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        w.write_all(&bytes)?;
        let c = p.center();
        labels.push(RowLabel::new(label.clone(), c.x as i64, c.y as i64));
    }
    write_sidecar(w, &labels)
}

/// Reads a WRPATCH dump back as (label, mask) rows.
pub fn read_patches<R: Read>(r: &mut R) -> Result<Vec<(RowLabel, Vec<bool>)>> {
    let (side, count) = read_header(r, WRPATCH_MAGIC)?;
    let row_bytes = (side * side).div_ceil(8);
    let data = read_exact_vec(r, row_bytes * count, "patch rows")?;
    let labels = read_sidecar(r, count)?;
    Ok(labels
        .into_iter()
        .zip(data.chunks_exact(row_bytes))
        .map(|(l, bytes)| {
            let mask = (0..side * side).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
            (l, mask)
        })
        .collect())
}
