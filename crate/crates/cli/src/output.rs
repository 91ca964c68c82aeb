use std::path::{Path, PathBuf};

use crate::error::CliError;

/// Single writer for a command's output directory. In check mode nothing is
/// written; every emitted file must already exist with identical bytes.
pub struct Sink {
    root: PathBuf,
    check: bool,
    emitted: Vec<PathBuf>,
}

impl Sink {
    pub fn new(root: PathBuf, check: bool) -> Result<Self, CliError> {
        if !check {
            std::fs::create_dir_all(&root).map_err(|e| vecplan::Error::Io {
                path: root.clone(),
                source: e,
            })?;
        }
        Ok(Self {
            root,
            check,
            emitted: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn emitted(&self) -> &[PathBuf] {
        &self.emitted
    }

    pub fn emit(&mut self, relative: impl AsRef<Path>, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(relative);
        let io = |e| vecplan::Error::Io {
            path: path.clone(),
            source: e,
        };
        if self.check {
            let existing = match std::fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(CliError::Drift(format!("{} is missing", path.display())))
                }
                Err(e) => return Err(io(e).into()),
            };
            if existing != bytes {
                return Err(CliError::Drift(format!(
                    "{} differs from the recomputed output",
                    path.display()
                )));
            }
        } else {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(io)?;
            }
            std::fs::write(&path, bytes).map_err(io)?;
        }
        self.emitted.push(path);
        Ok(())
    }
}
