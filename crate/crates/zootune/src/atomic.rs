//! All-or-nothing file output.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut out = Outputs::default();
    out.add(path, bytes.to_vec());
    out.commit()
}

/// Files produced by a command, written only once everything succeeded.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((path.into(), bytes));
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    /// Stages every file as a temporary, then renames them all. On error
    /// the staged temporaries are removed.
    pub fn commit(self) -> Result<()> {
        let mut staged = Vec::new();
        let cleanup = |staged: &[(PathBuf, &Path)]| {
            for (tmp, _) in staged {
                let _ = fs::remove_file(tmp);
            }
        };
        for (path, bytes) in &self.files {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                if let Err(e) = fs::create_dir_all(dir) {
                    cleanup(&staged);
                    return Err(Error::io(dir, e));
                }
            }
            let tmp = temp_path(path);
            if let Err(e) = fs::write(&tmp, bytes) {
                cleanup(&staged);
                return Err(Error::io(&tmp, e));
            }
            staged.push((tmp, path.as_path()));
        }
        for (i, (tmp, path)) in staged.iter().enumerate() {
            if let Err(e) = fs::rename(tmp, path) {
                cleanup(&staged[i..]);
                return Err(Error::io(*path, e));
            }
        }
        Ok(())
    }
}
