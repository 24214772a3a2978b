//! Fixed-width binary dump of `(image, label, domain)` records.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 8    | magic `CTADATA\0`              |
//! | 8      | 4    | version (u32, currently 1)     |
//! | 12     | 4    | image side (u32)               |
//! | 16     | 4    | classes (u32)                  |
//! | 20     | 8    | record count (u64)             |
//! | 28     | …    | records                        |
//!
//! Each record is `8 + 8·side²` bytes: label (u32), domain id (u32), then
//! `side²` pixels as f64 in row-major order.

use std::io::{Read, Write};

use crate::error::{CtaError, Result};

pub const DUMP_MAGIC: &[u8; 8] = b"CTADATA\0";
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub label: u32,
    pub domain: u32,
    pub pixels: Vec<f64>,
}

pub fn write_dataset<W: Write>(mut w: W, side: usize, classes: usize, records: &[DumpRecord]) -> Result<()> {
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| CtaError::InvalidArgument(format!("{v} exceeds u32")));
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&to_u32(side)?.to_le_bytes())?;
    w.write_all(&to_u32(classes)?.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        if r.pixels.len() != side * side {
            return Err(CtaError::Shape(format!("record with {} pixels for side {side}", r.pixels.len())));
        }
        w.write_all(&r.label.to_le_bytes())?;
        w.write_all(&r.domain.to_le_bytes())?;
        for p in &r.pixels {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns `(side, classes, records)`.
pub fn read_dataset<R: Read>(mut r: R) -> Result<(usize, usize, Vec<DumpRecord>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(CtaError::InvalidArgument("not a dataset dump".into()));
    }
    let mut b4 = [0u8; 4];
    let mut u32_at = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4))
    };
    let version = u32_at(&mut r)?;
    if version != DUMP_VERSION {
        return Err(CtaError::InvalidArgument(format!("unsupported dump version {version}")));
    }
    let side = u32_at(&mut r)? as usize;
    let classes = u32_at(&mut r)? as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let label = u32_at(&mut r)?;
        let domain = u32_at(&mut r)?;
        let mut pixels = Vec::with_capacity(side * side);
        for _ in 0..side * side {
            r.read_exact(&mut b8)?;
            pixels.push(f64::from_le_bytes(b8));
        }
        records.push(DumpRecord { label, domain, pixels });
    }
    Ok((side, classes, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let recs = vec![
            DumpRecord { label: 3, domain: 0, pixels: vec![0.25; 4] },
            DumpRecord { label: 1, domain: 5, pixels: vec![1.0, 0.0, 0.5, 0.125] },
        ];
        let mut buf = Vec::new();
        write_dataset(&mut buf, 2, 10, &recs).unwrap();
        assert_eq!(buf.len(), 28 + 2 * (8 + 8 * 4));
        assert_eq!(&buf[..8], DUMP_MAGIC);
        assert_eq!(u32::from_le_bytes(buf[28..32].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[68..72].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[72..76].try_into().unwrap()), 5);
        let (side, classes, back) = read_dataset(&buf[..]).unwrap();
        assert_eq!((side, classes), (2, 10));
        assert_eq!(back, recs);
    }
}
