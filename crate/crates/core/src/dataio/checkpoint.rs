//! Self-describing checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PCKP" | version u16 = 1 | header_len u32 | header (UTF-8) | blobs
//! ```
//!
//! The header is line oriented:
//!
//! ```text
//! meta <key> <value>
//! tensor <name> f32 <d0>x<d1>x.. <offset> <nbytes>
//! ```
//!
//! Offsets are relative to the start of the blob region, which holds the
//! raw `f32` data back to back. Two reserved meta keys guard integrity:
//! `tensor_count`, and `fnv64` on the last header line (FNV-1a over the
//! header bytes before it followed by the blob region).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"PCKP";
const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

/// FNV-1a over the concatenation of `parts`.
fn fnv64(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in parts.iter().flat_map(|p| p.iter()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const CHECKSUM_KEY: &str = "meta fnv64 ";

/// Name filter: exact match, or a prefix when the pattern ends in `*`.
pub fn name_matches(pattern: &str, name: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => name.starts_with(prefix),
        None => pattern == name,
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        let mut blobs = Vec::new();
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::arg(format!("tensor name {name:?} must be non-empty without whitespace")));
            }
            let dims = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            };
            let offset = blobs.len();
            for v in t.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
            header.push_str(&format!("tensor {name} f32 {dims} {offset} {}\n", blobs.len() - offset));
        }
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') || k == "tensor_count" || k == "fnv64" {
                return Err(Error::arg(format!("invalid meta entry {k:?}")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        header.push_str(&format!("meta tensor_count {}\n", self.tensors.len()));
        // The checksum line comes last and covers every header byte before it.
        let sum = fnv64(&[header.as_bytes(), &blobs]);
        header.push_str(&format!("{CHECKSUM_KEY}{sum:016x}\n"));

        let mut out = Vec::with_capacity(10 + header.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    /// Decode, keeping only tensors whose names match `filter` (all when
    /// `None`).
    pub fn decode(bytes: &[u8], filter: Option<&str>) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let blob_start = 10 + header_len;
        if bytes.len() < blob_start {
            return Err(Error::format(bytes.len() as u64, "truncated checkpoint header"));
        }
        let header = std::str::from_utf8(&bytes[10..blob_start])
            .map_err(|e| Error::format(10, format!("header is not UTF-8: {e}")))?;
        let blobs = &bytes[blob_start..];
        let body_len = header
            .rfind(CHECKSUM_KEY)
            .filter(|&i| i == 0 || header.as_bytes()[i - 1] == b'\n')
            .ok_or_else(|| Error::Integrity("missing checksum".into()))?;
        let stored = header[body_len + CHECKSUM_KEY.len()..].trim_end();
        if stored != format!("{:016x}", fnv64(&[header[..body_len].as_bytes(), blobs])) {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let header = &header[..body_len];

        let mut meta = BTreeMap::new();
        let mut table = Vec::new();
        for line in header.lines() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| Error::format(10, "meta line without key"))?;
                    let value = line
                        .trim_start()
                        .strip_prefix("meta")
                        .and_then(|r| r.trim_start().strip_prefix(key))
                        .map(str::trim)
                        .unwrap_or("");
                    meta.insert(key.to_string(), value.to_string());
                }
                Some("tensor") => {
                    let fields: Vec<&str> = parts.collect();
                    if fields.len() != 5 || fields[1] != "f32" {
                        return Err(Error::format(10, format!("bad tensor line {line:?}")));
                    }
                    let shape: Vec<usize> = if fields[2] == "scalar" {
                        vec![]
                    } else {
                        fields[2]
                            .split('x')
                            .map(|d| d.parse().map_err(|_| Error::format(10, format!("bad shape in {line:?}"))))
                            .collect::<Result<_>>()?
                    };
                    let offset: usize = fields[3].parse().map_err(|_| Error::format(10, "bad offset"))?;
                    let nbytes: usize = fields[4].parse().map_err(|_| Error::format(10, "bad byte count"))?;
                    table.push((fields[0].to_string(), shape, offset, nbytes));
                }
                None => {}
                Some(other) => return Err(Error::format(10, format!("unknown header record {other:?}"))),
            }
        }

        let count: usize = meta
            .remove("tensor_count")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Integrity("missing tensor_count".into()))?;
        if count != table.len() {
            return Err(Error::Integrity(format!(
                "header declares {count} tensors but lists {}",
                table.len()
            )));
        }
        let expected_total: usize = table.iter().map(|t| t.3).sum();
        if blobs.len() != expected_total {
            return Err(Error::Integrity(format!(
                "blob region is {} bytes, table expects {expected_total}",
                blobs.len()
            )));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape, offset, nbytes) in table {
            let numel: usize = shape.iter().product();
            if nbytes != numel * 4 || offset + nbytes > blobs.len() {
                return Err(Error::Integrity(format!(
                    "{name}: {nbytes} bytes at {offset} do not hold shape {shape:?}"
                )));
            }
            if filter.is_some_and(|f| !name_matches(f, &name)) {
                continue;
            }
            let data = blobs[offset..offset + nbytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.encode()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, filter: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Missing {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::decode(&bytes, filter)
    }
}
