//! `dataset.json`: the list of items a stage hands to the next one. File
//! references are relative to the directory holding the manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use maseg_core::{Error, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub id: String,
    #[serde(default)]
    pub split: Split,
    /// Frame-stack directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack: Option<String>,
    /// Preprocessed `.f32` image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    /// Ground-truth mask PGM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Source image index; items sharing a group stay in one training fold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub augmented: bool,
}

impl Item {
    pub fn new(id: impl Into<String>, split: Split) -> Self {
        Item {
            id: id.into(),
            split,
            stack: None,
            image: None,
            mask: None,
            group: None,
            augmented: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub items: Vec<Item>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl Dataset {
    pub fn validate(&self, origin: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !valid_id(&item.id) {
                return Err(Error::format(
                    origin,
                    format!("invalid item id {:?}", item.id),
                ));
            }
            if !seen.insert(item.id.as_str()) {
                return Err(Error::format(
                    origin,
                    format!("duplicate item id {:?}", item.id),
                ));
            }
        }
        Ok(())
    }

    /// Reads `dir/dataset.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_FILE);
        let ds: Dataset = read_json(&path)?;
        ds.validate(&path)?;
        Ok(ds)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(DATASET_FILE), self)
    }

    pub fn with_split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.split == split)
    }
}

/// Resolves a reference from `item`, naming the missing field otherwise.
pub fn require<'a>(
    dir: &Path,
    item: &'a Item,
    field: &str,
    value: &'a Option<String>,
) -> Result<PathBuf> {
    match value {
        Some(rel) => Ok(dir.join(rel)),
        None => Err(Error::format(
            dir.join(DATASET_FILE),
            format!("item {:?} has no {field}", item.id),
        )),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn copy_file(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to)
        .map(|_| ())
        .map_err(|e| Error::io(from, e))
}

/// Stems of the `*.pgm` files in `dir`, sorted.
pub fn pgm_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
