//! Run manifests.
//!
//! Metadata lines start with `#`, so a manifest is itself a valid config
//! file: passing it back through `--config` reproduces the run.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::{write_file, CliError};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub version: String,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Resolved settings in a stable order.
    pub settings: Vec<(String, String)>,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(
        command: &str,
        seed: u64,
        out_dir: &Path,
        settings: Vec<(String, String)>,
    ) -> Self {
        Self {
            command: command.to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            out_dir: out_dir.to_path_buf(),
            started_unix: now_unix(),
            finished_unix: None,
            settings,
        }
    }

    pub fn write_to(&self, out: &mut dyn Write) -> io::Result<()> {
        writeln!(out, "# command = {}", self.command)?;
        writeln!(out, "# seed = {}", self.seed)?;
        writeln!(out, "# version = {}", self.version)?;
        writeln!(out, "# out_dir = {}", self.out_dir.display())?;
        writeln!(out, "# started_unix = {}", self.started_unix)?;
        if let Some(t) = self.finished_unix {
            writeln!(out, "# finished_unix = {t}")?;
        }
        for (k, v) in &self.settings {
            writeln!(out, "{k} = {v}")?;
        }
        Ok(())
    }

    /// Writes `manifest.txt` into the run directory.
    pub fn save(&self) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(FILE_NAME);
        write_file(&path, |w| self.write_to(w))?;
        Ok(path)
    }

    /// Stamps the finish time and rewrites the file.
    pub fn finish(&mut self) -> Result<PathBuf, CliError> {
        self.finished_unix = Some(now_unix());
        self.save()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{materialize, resolve, Overrides};
    use unload_core::env::EnvKind;

    #[test]
    fn manifest_is_a_config_file() {
        let mut o = Overrides::new();
        o.set("learning_rate", "0.05").unwrap();
        o.set("total_steps", "77").unwrap();
        let run = resolve(EnvKind::Tuning, &o).unwrap();
        let settings = materialize(&run)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let mut m = RunManifest::start("train", 4, Path::new("out"), settings);
        m.finished_unix = Some(m.started_unix);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# command = train\n"));
        let back = resolve(EnvKind::Unload, &Overrides::parse_text(&text).unwrap()).unwrap();
        assert_eq!(back, run);
    }
}
