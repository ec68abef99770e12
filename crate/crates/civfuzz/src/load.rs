//! Reading interface specs and scenario files.

use std::path::{Path, PathBuf};

use civfuzz_core::iface::{InterfaceSpec, ValidationError};
use civfuzz_core::sim::Scenario;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed document: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("invalid document: {0}")]
    Validation(#[from] ValidationError),
}

pub fn load_interface_spec(text: &str) -> Result<InterfaceSpec, LoadError> {
    let spec: InterfaceSpec = serde_json::from_str(text)?;
    spec.validate()?;
    Ok(spec)
}

pub fn emit_interface_spec(spec: &InterfaceSpec) -> String {
    serde_json::to_string_pretty(spec).expect("spec serializes")
}

pub fn load_scenario(text: &str) -> Result<Scenario, LoadError> {
    let sc: Scenario = serde_json::from_str(text)?;
    sc.validate()?;
    Ok(sc)
}

fn read(path: &Path) -> Result<String, LoadError> {
    std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn read_interface_spec(path: &Path) -> Result<InterfaceSpec, LoadError> {
    load_interface_spec(&read(path)?)
}

pub fn read_scenario(path: &Path) -> Result<Scenario, LoadError> {
    load_scenario(&read(path)?)
}

/// Directory holding the scenarios shipped with the crate.
pub fn shipped_scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

/// Scenario files in `dir`, sorted by file name.
pub fn scenario_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}
