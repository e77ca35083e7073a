//! Class catalog: the id ↔ name table every pipeline stage agrees on.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// One class entry. Ids are dense and zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
}

/// Ordered class table plus the label value excluded from every loss and
/// metric.
///
/// Invariants (checked in [`ClassCatalog::new`]): ids are exactly
/// `0..n_classes`, names are non-empty and unique, and `ignore_index` is not
/// a class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCatalog {
    classes: Vec<ClassEntry>,
    ignore_index: u8,
}

impl ClassCatalog {
    pub fn new(classes: Vec<ClassEntry>, ignore_index: u8) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Validation("catalog has no classes".into()));
        }
        for (i, entry) in classes.iter().enumerate() {
            if entry.id as usize != i {
                return Err(Error::Validation(format!(
                    "catalog ids must be dense and zero-based: position {i} has id {}",
                    entry.id
                )));
            }
            if entry.name.trim().is_empty() {
                return Err(Error::Validation(format!("class {i} has an empty name")));
            }
        }
        let mut names: Vec<&str> = classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("catalog class names must be unique".into()));
        }
        if (ignore_index as usize) < classes.len() {
            return Err(Error::Validation(format!(
                "ignore_index {ignore_index} collides with a class id"
            )));
        }
        Ok(Self {
            classes,
            ignore_index,
        })
    }

    /// Build from `(id, name)` pairs; ids must already be dense and ordered.
    pub fn from_names(names: &[&str], ignore_index: u8) -> Result<Self> {
        let classes = names
            .iter()
            .enumerate()
            .map(|(i, n)| ClassEntry {
                id: i as u8,
                name: (*n).to_string(),
            })
            .collect();
        Self::new(classes, ignore_index)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.classes.get(id as usize).map(|c| c.name.as_str())
    }

    /// True when `label` is a valid class id or the ignore value.
    pub fn is_known_label(&self, label: u8) -> bool {
        label == self.ignore_index || (label as usize) < self.classes.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: ClassCatalog = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        // Re-validate: serde only checks shape, not the catalog invariants.
        Self::new(raw.classes, raw.ignore_index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("catalog serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
