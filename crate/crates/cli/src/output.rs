//! Staged output files, written only when nothing conflicts.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

/// Header comment of every CSV the tool writes.
pub fn csv_comment(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash} seed={seed} format_version={FORMAT_VERSION}\n")
}

/// Files produced by one subcommand, relative to the output directory.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, rel: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((rel.into(), bytes.into()));
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    /// Writes every file under `root`. An existing file with different
    /// contents is a conflict unless `force` is set; identical files are
    /// left alone.
    pub fn commit(self, root: &Path, force: bool) -> Result<Vec<PathBuf>, CliError> {
        if !force {
            for (rel, bytes) in &self.files {
                let path = root.join(rel);
                if path.exists() && fs::read(&path)? != *bytes {
                    return Err(CliError::Config(format!(
                        "{} exists with different contents; pass --force to overwrite",
                        path.display()
                    )));
                }
            }
        }
        let mut written = Vec::new();
        for (rel, bytes) in self.files {
            let path = root.join(&rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&path, bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}
