use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Output directory of one run. Files written through it are listed with
/// their SHA-256 in `SHA256SUMS`; wall-clock information goes to `run.log`
/// only, so every other file is reproducible.
pub struct Output {
    root: PathBuf,
    sums: Vec<(String, String)>,
    log: String,
    started: Instant,
}

impl Output {
    pub fn create(root: &Path, command: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let since_epoch = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Ok(Self {
            root: root.to_path_buf(),
            sums: Vec::new(),
            log: format!("command {command}\nstarted_unix {since_epoch}\n"),
            started: Instant::now(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.sums.push((rel.to_string(), hex::encode(Sha256::digest(bytes))));
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        self.write(rel, (text + "\n").as_bytes())
    }

    pub fn log(&mut self, line: impl AsRef<str>) {
        self.log.push_str(line.as_ref());
        self.log.push('\n');
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        let mut sums = String::new();
        self.sums.sort();
        for (name, digest) in &self.sums {
            let _ = writeln!(sums, "{digest}  {name}");
        }
        let path = self.root.join("SHA256SUMS");
        std::fs::write(&path, sums).map_err(|e| CliError::io(&path, e))?;
        let _ = writeln!(self.log, "elapsed_s {:.3}", self.started.elapsed().as_secs_f64());
        let path = self.root.join("run.log");
        std::fs::write(&path, &self.log).map_err(|e| CliError::io(&path, e))
    }
}
