//! Dataset manifests: a TOML file naming the split, classes, instance
//! counts and image generator settings.
//!
//! ```toml
//! name = "desk-train"
//! split = "train"
//! classes = ["armadillo", "bear"]
//! instances = [10, 10]
//!
//! [image]
//! size = 16
//! seed = 0
//! ```

use std::path::Path;

use tutor_core::env::ConceptDataset;

use crate::error::{CliError, Result};

pub const PRESET_PREFIX: &str = "preset:";

/// Resolves a `preset:<name>` reference or reads a manifest file.
pub fn load(reference: &str) -> Result<ConceptDataset> {
    if let Some(name) = reference.strip_prefix(PRESET_PREFIX) {
        return preset(name).ok_or_else(|| CliError::Config(format!("unknown dataset preset `{name}`")));
    }
    read(Path::new(reference))
}

pub fn preset(name: &str) -> Option<ConceptDataset> {
    Some(match name {
        "animal" => ConceptDataset::animal(),
        "fruit" => ConceptDataset::fruit(),
        "desk-train" => ConceptDataset::desk_train(),
        "desk-test" => ConceptDataset::desk_test(),
        _ => return None,
    })
}

pub fn read(path: &Path) -> Result<ConceptDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("dataset manifest {}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("dataset manifest {}: {m}", path.display())),
        other => other,
    })
}

pub fn parse(text: &str) -> Result<ConceptDataset> {
    let ds: ConceptDataset = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
    ds.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(ds)
}

pub fn to_text(ds: &ConceptDataset) -> String {
    toml::to_string(ds).expect("dataset serializes")
}
