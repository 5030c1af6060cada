//! Reading and writing the versioned JSON documents.
//!
//! Reals go through serde_json's shortest round-trip formatting, so a value
//! read back is bit-identical to the one written.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fisherlens_core::files::{MaskFile, RankingFile, ScoreFile, FORMAT_VERSION};
use fisherlens_core::toynet::{Dataset, LayerAdapters, ToyNetwork};
use fisherlens_core::validate_scores;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Base network plus the adapters it was scored with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub network: ToyNetwork,
    #[serde(default)]
    pub adapters: Vec<LayerAdapters>,
}

impl ModelFile {
    pub fn new(network: ToyNetwork, adapters: Vec<LayerAdapters>) -> Self {
        Self { format_version: FORMAT_VERSION, network, adapters }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub format_version: u32,
    pub dataset: Dataset,
}

impl DatasetFile {
    pub fn new(dataset: Dataset) -> Self {
        Self { format_version: FORMAT_VERSION, dataset }
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn check_version(found: u32, path: &Path) -> Result<()> {
    if found != FORMAT_VERSION {
        bail!("{}: unsupported format_version {found} (expected {FORMAT_VERSION})", path.display());
    }
    Ok(())
}

pub fn read_score_file(path: &Path) -> Result<ScoreFile> {
    let f: ScoreFile = read_json(path)?;
    check_version(f.format_version, path)?;
    for layer in &f.layers {
        validate_scores(layer).with_context(|| format!("{}", path.display()))?;
    }
    Ok(f)
}

pub fn read_mask_file(path: &Path) -> Result<MaskFile> {
    let f: MaskFile = read_json(path)?;
    check_version(f.format_version, path)?;
    Ok(f)
}

pub fn read_ranking_file(path: &Path) -> Result<RankingFile> {
    let f: RankingFile = read_json(path)?;
    check_version(f.format_version, path)?;
    Ok(f)
}

pub fn read_model_file(path: &Path) -> Result<ModelFile> {
    let f: ModelFile = read_json(path)?;
    check_version(f.format_version, path)?;
    f.network.check_shapes().with_context(|| format!("{}", path.display()))?;
    Ok(f)
}

pub fn read_dataset_file(path: &Path) -> Result<DatasetFile> {
    let f: DatasetFile = read_json(path)?;
    check_version(f.format_version, path)?;
    f.dataset.check(None).with_context(|| format!("{}", path.display()))?;
    Ok(f)
}
