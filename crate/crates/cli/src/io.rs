//! Atomic output writes and content hashing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

fn parent_of(path: &Path) -> CliResult<&Path> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| CliError::failure(format!("cannot create {}: {e}", parent.display())))?;
    Ok(parent)
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(parent_of(path)?)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Fills a fresh temporary directory with `fill` and renames it to `dir`,
/// replacing any previous contents.
pub fn write_dir_atomic(dir: &Path, fill: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<()> {
    let tmp = tempfile::Builder::new().prefix(".tmp-").tempdir_in(parent_of(dir)?)?;
    fill(tmp.path())?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    let staged: PathBuf = tmp.keep();
    fs::rename(&staged, dir).map_err(|e| CliError::failure(format!("cannot move output into {}: {e}", dir.display())))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::failure(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
