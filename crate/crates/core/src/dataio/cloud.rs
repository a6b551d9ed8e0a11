//! The "PCAM" binary cloud format.
//!
//! Little-endian throughout:
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `PCAM`                            |
//! | 2     | version (`u16`, 1 or 2)                 |
//! | 4     | point count `n` (`u32`)                 |
//! | 12n   | `n` points as `x, y, z` `f32`           |
//! | n     | version 2 only: one `u8` mask id/point  |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

pub const MAGIC: &[u8; 4] = b"PCAM";
const HEADER: usize = 10;

pub fn encode_cloud(points: &[Point], ids: Option<&[u8]>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER + points.len() * 13);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(if ids.is_some() { 2u16 } else { 1u16 }).to_le_bytes());
    buf.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(ids) = ids {
        assert_eq!(ids.len(), points.len(), "one mask id per point");
        buf.extend_from_slice(ids);
    }
    buf
}

/// Decode either version; mask ids are returned for version 2.
pub fn decode_cloud(bytes: &[u8]) -> Result<(Vec<Point>, Option<Vec<u8>>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"PCAM\""));
    }
    if bytes.len() < HEADER {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != 1 && version != 2 {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let per_point = if version == 2 { 13 } else { 12 };
    let expected = HEADER + count * per_point;
    if bytes.len() < expected {
        let present = (bytes.len() - HEADER) / per_point;
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: count field {count} but {present} points present"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            expected as u64,
            format!("{} trailing bytes after {count} points", bytes.len() - expected),
        ));
    }
    let mut points = Vec::with_capacity(count);
    let coords = &bytes[HEADER..HEADER + count * 12];
    for chunk in coords.chunks_exact(12) {
        let f = |i: usize| f32::from_le_bytes(chunk[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
        points.push([f(0), f(1), f(2)]);
    }
    let ids = (version == 2).then(|| bytes[HEADER + count * 12..].to_vec());
    Ok((points, ids))
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_cloud(&cloud.points, None))?;
    Ok(())
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let (points, _) = decode_cloud(&fs::read(path)?)?;
    PointCloud::new(points)
}

/// Version 2: points plus a per-point mask id. An empty point list is
/// allowed here.
pub fn write_labeled_points(path: impl AsRef<Path>, points: &[Point], ids: &[u8]) -> Result<()> {
    if points.len() != ids.len() {
        return Err(Error::arg("one mask id per point"));
    }
    fs::write(path, encode_cloud(points, Some(ids)))?;
    Ok(())
}

/// Version 1 without the non-empty requirement of [`PointCloud`].
pub fn write_points(path: impl AsRef<Path>, points: &[Point]) -> Result<()> {
    fs::write(path, encode_cloud(points, None))?;
    Ok(())
}

pub fn read_points(path: impl AsRef<Path>) -> Result<(Vec<Point>, Option<Vec<u8>>)> {
    decode_cloud(&fs::read(path)?)
}
