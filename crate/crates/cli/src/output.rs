//! Output files: comment header with the effective configuration, and
//! atomic replacement of the target file.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::CliError;

pub const EFFECTIVE_CONFIG_MARKER: &str = "# effective config:";

/// `# `-prefixed header naming the command, the library version and the
/// configuration that produced the file.
pub fn header(command: &str, cfg: &RunConfig) -> String {
    let mut s = format!("# qbm {} {command}\n{EFFECTIVE_CONFIG_MARKER}\n", env!("CARGO_PKG_VERSION"));
    for line in cfg.to_toml().lines() {
        if line.is_empty() {
            s.push_str("#\n");
        } else {
            s.push_str("# ");
            s.push_str(line);
            s.push('\n');
        }
    }
    s
}

/// Re-parses the configuration block of a header written by [`header`].
pub fn parse_header(text: &str) -> Result<RunConfig, CliError> {
    let mut lines = text.lines().skip_while(|l| *l != EFFECTIVE_CONFIG_MARKER);
    if lines.next().is_none() {
        return Err(CliError::Config("no effective config block".into()));
    }
    let body: Vec<&str> = lines
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.strip_prefix("# ").unwrap_or(l.trim_start_matches('#')))
        .collect();
    RunConfig::from_toml(&body.join("\n"))
}

/// Collects a file in memory, then moves it into place in one rename.
pub struct Writer {
    dir: PathBuf,
    header: String,
    written: Vec<PathBuf>,
}

impl Writer {
    pub fn new(dir: &Path, header: String) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            header,
            written: Vec::new(),
        })
    }

    pub fn write<F>(&mut self, name: &str, body: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let path = self.dir.join(name);
        let io = |e| CliError::Io {
            path: path.clone(),
            source: e,
        };
        let mut buf = self.header.clone().into_bytes();
        body(&mut buf).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io)?;
        tmp.write_all(&buf).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(&path).map_err(|e| io(e.error))?;
        log::info!("wrote {}", path.display());
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}
