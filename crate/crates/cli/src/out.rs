//! Atomic output writing: every artifact is written to a temporary file
//! in the destination directory and renamed into place, so an
//! interrupted run never leaves a truncated CSV, JSON, or checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use flift_core::nn::{checkpoint, ParamStore};
use flift_core::{ArchitectureDescriptor, Error, Result};

fn temp_sibling(path: &Path) -> Result<PathBuf> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let mut tmp = name.to_os_string();
    tmp.push(format!(".tmp{}", std::process::id()));
    Ok(dir.join(tmp))
}

pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = temp_sibling(path)?;
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint_atomic(
    path: &Path,
    arch: &ArchitectureDescriptor,
    params: &ParamStore<f32>,
) -> Result<()> {
    let tmp = temp_sibling(path)?;
    checkpoint::save(&tmp, arch, params)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
