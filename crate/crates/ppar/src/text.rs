//! Text prototypes: per-class embedding anchors derived from class names.
//!
//! *Plain* prototypes embed the bare class name. *Visual* prototypes embed
//! the class name enriched with the dominant color and/or texture code mined
//! by [`crate::factors`], e.g. `"building with color #85775D with local
//! texture 241"`. Both kinds are frozen after construction: nothing in
//! training ever writes to them, they only serve as fixed alignment targets.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::catalog::ClassCatalog;
use crate::data::hex_string;
use crate::error::{Error, Result};
use crate::factors::VisualFactorTable;
use crate::provider::TextEmbeddingProvider;

pub const PROTOTYPE_SCHEMA: u32 = 1;
pub const COLOR_MARKER: &str = " with color ";
pub const TEXTURE_MARKER: &str = " with local texture ";

/// Which mined factors a visual prototype text includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSet {
    pub color: bool,
    pub texture: bool,
}

impl FactorSet {
    pub const NONE: FactorSet = FactorSet { color: false, texture: false };
    pub const ALL: FactorSet = FactorSet { color: true, texture: true };

    pub fn any(&self) -> bool {
        self.color || self.texture
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeKind {
    /// Bare class-name embeddings.
    Otp,
    /// Class name + mined visual factor strings.
    Vtp,
}

/// Render the prototype text for one class.
///
/// The color must be an uppercase `#RRGGBB` string and the texture a code in
/// `0..=255`; the fixed markers make the composition injective, so two
/// distinct `(name, color, texture)` triples never collide.
pub fn compose_visual_text(
    name: &str,
    color_hex: Option<&str>,
    texture: Option<u16>,
) -> Result<String> {
    if name.trim().is_empty() {
        return Err(Error::Validation("prototype text needs a class name".into()));
    }
    let mut out = name.to_string();
    if let Some(hex) = color_hex {
        let ok = hex.len() == 7
            && hex.starts_with('#')
            && hex[1..].chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_lowercase());
        if !ok {
            return Err(Error::Validation(format!(
                "malformed color '{hex}': expected uppercase #RRGGBB"
            )));
        }
        out.push_str(COLOR_MARKER);
        out.push_str(hex);
    }
    if let Some(code) = texture {
        if code > 255 {
            return Err(Error::Validation(format!(
                "texture code {code} out of range 0..=255"
            )));
        }
        out.push_str(TEXTURE_MARKER);
        out.push_str(&code.to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeRow {
    pub class_id: u8,
    pub name: String,
    pub text: String,
    pub vector: Array1<f64>,
}

/// A frozen set of per-class prototype vectors, unit-norm, ordered by class
/// id.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub kind: PrototypeKind,
    pub provider_id: String,
    pub dim: usize,
    pub rows: Vec<PrototypeRow>,
}

impl PrototypeSet {
    pub fn n_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn vector(&self, class_id: u8) -> Option<&Array1<f64>> {
        self.rows.get(class_id as usize).map(|r| &r.vector)
    }

    /// Reject sets whose rows do not line up with the active catalog.
    pub fn validate_against(&self, catalog: &ClassCatalog) -> Result<()> {
        if self.rows.len() != catalog.n_classes() {
            return Err(Error::ArtifactMismatch(format!(
                "prototype set has {} rows, catalog has {} classes",
                self.rows.len(),
                catalog.n_classes()
            )));
        }
        for row in &self.rows {
            match catalog.name(row.class_id) {
                Some(name) if name == row.name => {}
                _ => {
                    return Err(Error::ArtifactMismatch(format!(
                        "prototype row {} ('{}') does not match the catalog",
                        row.class_id, row.name
                    )))
                }
            }
        }
        Ok(())
    }

    fn check_invariants(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.class_id as usize != i {
                return Err(Error::Validation(format!(
                    "prototype rows must be ordered by class id; position {i} has id {}",
                    row.class_id
                )));
            }
            if row.vector.len() != self.dim {
                return Err(Error::Validation(format!(
                    "class {} vector has length {} != dim {}",
                    row.class_id,
                    row.vector.len(),
                    self.dim
                )));
            }
            let norm: f64 = row.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "class {} vector is not unit-norm (norm {norm})",
                    row.class_id
                )));
            }
        }
        Ok(())
    }
}

fn embed_class(
    provider: &dyn TextEmbeddingProvider,
    class_name: &str,
    text: &str,
) -> Result<Array1<f64>> {
    let matrix = provider.embed(&[text.to_string()]).map_err(|e| match e {
        // Attach the class so a flaky provider failure points at its input.
        Error::Provider { message, retryable, .. } => Error::Provider {
            message,
            class: Some(class_name.to_string()),
            retryable,
        },
        other => other,
    })?;
    if matrix.nrows() != 1 {
        return Err(Error::Provider {
            message: format!("provider returned {} rows for one text", matrix.nrows()),
            class: Some(class_name.to_string()),
            retryable: false,
        });
    }
    let mut vector = matrix.row(0).to_owned();
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Provider {
            message: "embedding contains non-finite components".into(),
            class: Some(class_name.to_string()),
            retryable: false,
        });
    }
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 {
        return Err(Error::Provider {
            message: "embedding has zero norm".into(),
            class: Some(class_name.to_string()),
            retryable: false,
        });
    }
    vector.mapv_inplace(|v| v / norm);
    Ok(vector)
}

/// Embed every bare class name.
pub fn build_otp(
    catalog: &ClassCatalog,
    provider: &dyn TextEmbeddingProvider,
) -> Result<PrototypeSet> {
    let rows = catalog
        .classes()
        .iter()
        .map(|class| {
            let vector = embed_class(provider, &class.name, &class.name)?;
            Ok(PrototypeRow {
                class_id: class.id,
                name: class.name.clone(),
                text: class.name.clone(),
                vector,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = PrototypeSet {
        kind: PrototypeKind::Otp,
        provider_id: provider.provider_id().to_string(),
        dim: provider.dim(),
        rows,
    };
    set.check_invariants()?;
    Ok(set)
}

/// Embed class names enriched with mined factors. With both factors disabled
/// the texts (and hence vectors) equal the plain prototypes'.
pub fn build_vtp(
    catalog: &ClassCatalog,
    factors: &VisualFactorTable,
    enabled: FactorSet,
    provider: &dyn TextEmbeddingProvider,
) -> Result<PrototypeSet> {
    let rows = catalog
        .classes()
        .iter()
        .map(|class| {
            // The table is only consulted for factors that are actually
            // enabled, so a factorless build needs no scan at all.
            let row = |class_name: &str| {
                factors.row(class.id).ok_or_else(|| {
                    Error::Validation(format!(
                        "factor table has no row for class {} ('{class_name}')",
                        class.id
                    ))
                })
            };
            let color_hex = if enabled.color {
                Some(row(&class.name)?.color_hex().ok_or_else(|| {
                    Error::Validation(format!(
                        "no mined color for class {} ('{}')",
                        class.id, class.name
                    ))
                })?)
            } else {
                None
            };
            let texture = if enabled.texture {
                Some(row(&class.name)?.texture.ok_or_else(|| {
                    Error::Validation(format!(
                        "no mined texture for class {} ('{}')",
                        class.id, class.name
                    ))
                })? as u16)
            } else {
                None
            };
            let text = compose_visual_text(&class.name, color_hex.as_deref(), texture)?;
            let vector = embed_class(provider, &class.name, &text)?;
            Ok(PrototypeRow {
                class_id: class.id,
                name: class.name.clone(),
                text,
                vector,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = PrototypeSet {
        kind: PrototypeKind::Vtp,
        provider_id: provider.provider_id().to_string(),
        dim: provider.dim(),
        rows,
    };
    set.check_invariants()?;
    Ok(set)
}

// ---------------------------------------------------------------------------
// Cache file format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrototypeRowFile {
    class_id: u8,
    name: String,
    text: String,
    vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrototypeFile {
    schema: u32,
    kind: PrototypeKind,
    provider_id: String,
    dim: usize,
    config_hash: String,
    rows: Vec<PrototypeRowFile>,
    checksum: String,
}

/// Canonical row serialization the checksum covers: for each row in order,
/// length-prefixed name and text plus the raw little-endian vector bytes.
/// This catches any tampering with ids, texts, or vector values.
fn rows_checksum(rows: &[PrototypeRowFile]) -> String {
    let mut hasher = Sha256::new();
    for row in rows {
        hasher.update([row.class_id]);
        hasher.update((row.name.len() as u64).to_le_bytes());
        hasher.update(row.name.as_bytes());
        hasher.update((row.text.len() as u64).to_le_bytes());
        hasher.update(row.text.as_bytes());
        for v in &row.vector {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_string(&hasher.finalize())
}

/// A loaded cache: the set plus the config hash it was built under.
#[derive(Debug, Clone)]
pub struct PrototypeCache {
    pub set: PrototypeSet,
    pub config_hash: String,
}

pub fn save_prototypes(set: &PrototypeSet, config_hash: &str, path: &Path) -> Result<()> {
    set.check_invariants()?;
    let rows: Vec<PrototypeRowFile> = set
        .rows
        .iter()
        .map(|r| PrototypeRowFile {
            class_id: r.class_id,
            name: r.name.clone(),
            text: r.text.clone(),
            vector: r.vector.to_vec(),
        })
        .collect();
    let file = PrototypeFile {
        schema: PROTOTYPE_SCHEMA,
        kind: set.kind,
        provider_id: set.provider_id.clone(),
        dim: set.dim,
        config_hash: config_hash.to_string(),
        checksum: rows_checksum(&rows),
        rows,
    };
    let text = serde_json::to_string_pretty(&file).expect("prototype cache serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_prototypes(path: &Path) -> Result<PrototypeCache> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PrototypeFile = serde_json::from_str(&text).map_err(|e| {
        if e.classify() == serde_json::error::Category::Eof {
            Error::Truncated(path.display().to_string())
        } else {
            Error::json(path.display().to_string(), e)
        }
    })?;
    if file.schema != PROTOTYPE_SCHEMA {
        return Err(Error::SchemaVersion {
            path: path.display().to_string(),
            found: file.schema,
            expected: PROTOTYPE_SCHEMA,
        });
    }
    if rows_checksum(&file.rows) != file.checksum {
        return Err(Error::Checksum(path.display().to_string()));
    }
    let rows = file
        .rows
        .into_iter()
        .map(|r| PrototypeRow {
            class_id: r.class_id,
            name: r.name,
            text: r.text,
            vector: Array1::from_vec(r.vector),
        })
        .collect();
    let set = PrototypeSet {
        kind: file.kind,
        provider_id: file.provider_id,
        dim: file.dim,
        rows,
    };
    set.check_invariants()?;
    Ok(PrototypeCache {
        set,
        config_hash: file.config_hash,
    })
}
