//! Case manifests: JSON lists of per-case volume paths, relative to the
//! manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub image: PathBuf,
    /// Anatomy labels (raw segmenter output before `prepare`, dense after).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anatomy: Option<PathBuf>,
    pub nodes: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<CaseEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut seen = std::collections::BTreeSet::new();
        for c in &m.cases {
            if !seen.insert(&c.id) {
                return Err(Error::Data(format!("{}: duplicate case id `{}`", path.display(), c.id)));
            }
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, root))
    }

    /// Loads `dir/manifest.json`, or `path` itself when it is a file.
    pub fn load_dir_or_file(path: &Path) -> Result<(Self, PathBuf)> {
        if path.is_dir() {
            Self::load(&path.join(MANIFEST_FILE))
        } else {
            Self::load(path)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() { p.to_path_buf() } else { root.join(p) }
}
