//! Dataset manifests.
//!
//! A manifest is a TOML file (`manifest.toml`) next to the cloud files:
//!
//! ```toml
//! class_names = ["sphere", "cube"]
//!
//! [[entries]]
//! path = "sphere_0000.pcam"
//! label = 0
//! split = "train"
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

use super::cloud::read_cloud;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
}

/// Train/val/test counts for `n` items: 70% / 10% by floor, test takes the
/// remainder.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::format(0, format!("manifest: {e}")))?;
        m.check_consistency()?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    /// Labels in range and no duplicate paths.
    pub fn check_consistency(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.label >= self.class_names.len() {
                return Err(Error::arg(format!(
                    "{}: label {} outside [0, {})",
                    e.path,
                    e.label,
                    self.class_names.len()
                )));
            }
            if !seen.insert(e.path.as_str()) {
                return Err(Error::arg(format!("duplicate manifest path {}", e.path)));
            }
        }
        Ok(())
    }

    /// Read `dir/manifest.toml` and verify every listed file exists.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Missing {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let m = Self::parse(&text)?;
        for e in &m.entries {
            let p = dir.join(&e.path);
            if !p.is_file() {
                return Err(Error::Missing {
                    path: p,
                    msg: "listed in manifest but absent".into(),
                });
            }
        }
        Ok(m)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }

    /// Load every cloud of a split (all splits when `None`), labeled.
    pub fn read_split(&self, dir: impl AsRef<Path>, split: Option<Split>) -> Result<Vec<PointCloud>> {
        self.entries
            .iter()
            .filter(|e| split.map_or(true, |s| e.split == s))
            .map(|e| Ok(read_cloud(dir.as_ref().join(&e.path))?.with_label(e.label)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &str, label: usize) -> ManifestEntry {
        ManifestEntry {
            path: path.into(),
            label,
            split: Split::Train,
        }
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_counts(40), (28, 4, 8));
        assert_eq!(split_counts(200), (140, 20, 40));
        assert_eq!(split_counts(7), (4, 0, 3));
    }

    #[test]
    fn parse_round_trip_and_whitespace() {
        let m = DatasetManifest {
            class_names: vec!["a".into(), "b".into()],
            entries: vec![entry("x.pcam", 1)],
        };
        let text = m
            .to_text()
            .lines()
            .map(|l| format!("{l}   "))
            .collect::<Vec<_>>()
            .join("\n");
        assert_eq!(DatasetManifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn rejects_label_out_of_range() {
        let m = DatasetManifest {
            class_names: vec!["a".into()],
            entries: vec![entry("x.pcam", 1)],
        };
        assert!(DatasetManifest::parse(&m.to_text()).is_err());
    }

    #[test]
    fn rejects_duplicate_paths() {
        let m = DatasetManifest {
            class_names: vec!["a".into()],
            entries: vec![entry("x.pcam", 0), entry("x.pcam", 0)],
        };
        assert!(DatasetManifest::parse(&m.to_text()).is_err());
    }

    #[test]
    fn load_requires_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            class_names: vec!["a".into()],
            entries: vec![entry("missing.pcam", 0)],
        };
        m.save(dir.path()).unwrap();
        assert!(matches!(DatasetManifest::load(dir.path()), Err(Error::Missing { .. })));
    }
}
