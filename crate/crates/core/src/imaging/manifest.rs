use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub labels: Vec<usize>,
    pub id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Check version, id uniqueness and label range.
    pub fn validate(&self, origin: &Path) -> Result<()> {
        let fail = |detail: String| Error::Load {
            path: origin.to_path_buf(),
            detail,
        };
        if self.version != MANIFEST_VERSION {
            return Err(fail(format!("unsupported manifest version {}", self.version)));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id) {
                return Err(fail(format!("duplicate id {} ({})", e.id, e.path)));
            }
            if let Some(&bad) = e.labels.iter().find(|&&l| l >= self.num_classes()) {
                return Err(fail(format!(
                    "entry {} ({}): label index {bad} out of range for {} classes",
                    e.id,
                    e.path,
                    self.num_classes()
                )));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let manifest: Self = serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            detail: format!("malformed manifest: {e}"),
        })?;
        manifest.validate(path)?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_matches_documented_layout() {
        let json = r#"{"version":1,"class_names":["a","b","c","d"],"entries":[{"path":"img/000001.ppm","labels":[0,3],"id":1}]}"#;
        let m: DatasetManifest = serde_json::from_str(json).unwrap();
        assert_eq!(m.entries[0].labels, vec![0, 3]);
        assert_eq!(serde_json::to_string(&m).unwrap(), json);
        m.validate(Path::new("m.json")).unwrap();
    }

    #[test]
    fn label_out_of_range_names_entry() {
        let json = r#"{"version":1,"class_names":["a","b"],"entries":[{"path":"img/000007.ppm","labels":[2],"id":7}]}"#;
        let m: DatasetManifest = serde_json::from_str(json).unwrap();
        let err = m.validate(Path::new("m.json")).unwrap_err().to_string();
        assert!(err.contains("img/000007.ppm") && err.contains("label index 2"), "{err}");
    }

    #[test]
    fn duplicate_ids_and_versions_rejected() {
        let mut m = DatasetManifest {
            version: 1,
            class_names: vec!["a".into()],
            entries: vec![
                ManifestEntry { path: "x".into(), labels: vec![0], id: 3 },
                ManifestEntry { path: "y".into(), labels: vec![0], id: 3 },
            ],
        };
        assert!(m.validate(Path::new("m")).is_err());
        m.entries.pop();
        m.version = 2;
        assert!(m.validate(Path::new("m")).is_err());
    }
}
