//! Output directories are assembled next to their destination and renamed
//! into place, so a crashed run never leaves a half-written directory behind.

use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Present in every directory this tool created; only such directories are
/// replaced on a rerun.
const MARKER: &str = ".dlon-artifacts";

pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub struct Staging {
    dir: tempfile::TempDir,
    target: PathBuf,
}

impl Staging {
    pub fn new(target: &Path, seed: u64) -> Result<Self, CliError> {
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(io(&parent))?;
        if target.exists() && !target.join(MARKER).exists() {
            return Err(CliError::Io {
                path: target.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "exists and was not created by dlon"),
            });
        }
        let dir = tempfile::Builder::new().prefix(".dlon-partial-").tempdir_in(&parent).map_err(io(&parent))?;
        let s = Self { dir, target: target.to_path_buf() };
        s.write(MARKER, &format!("seed {seed}\n"))?;
        Ok(s)
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let p = self.dir.path().join(name);
        fs::write(&p, contents).map_err(io(&p))
    }

    pub fn commit(self) -> Result<PathBuf, CliError> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(io(&self.target))?;
        }
        let staged = self.dir.keep();
        fs::rename(&staged, &self.target).map_err(io(&self.target))?;
        Ok(self.target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_replaces_only_own_directories() {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("run");
        let s = Staging::new(&out, 3).unwrap();
        s.write("a.txt", "one").unwrap();
        s.commit().unwrap();
        assert_eq!(fs::read_to_string(out.join("a.txt")).unwrap(), "one");

        let s = Staging::new(&out, 3).unwrap();
        s.write("b.txt", "two").unwrap();
        s.commit().unwrap();
        assert!(!out.join("a.txt").exists());

        let foreign = root.path().join("mine");
        fs::create_dir(&foreign).unwrap();
        assert!(matches!(Staging::new(&foreign, 0), Err(CliError::Io { .. })));
    }

    #[test]
    fn abandoned_staging_leaves_nothing() {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("run");
        drop(Staging::new(&out, 0).unwrap());
        assert!(!out.exists());
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);
    }
}
