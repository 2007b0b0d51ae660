//! Output files. Each file embeds the resolved config; files written by a
//! command that fails are removed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub struct Outputs {
    dir: PathBuf,
    command: &'static str,
    config: RunConfig,
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new(dir: &Path, command: &'static str, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), command, config: config.clone(), written: Vec::new(), committed: false })
    }

    fn create(&mut self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok((path, BufWriter::new(f)))
    }

    /// CSV with the config as `#` comment lines above the column header.
    pub fn csv<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<PathBuf> {
        let header = self.header()?;
        let (path, mut w) = self.create(name)?;
        w.write_all(header.as_bytes())?;
        let mut cw = csv::Writer::from_writer(w);
        for r in rows {
            cw.serialize(r)?;
        }
        cw.flush()?;
        Ok(path)
    }

    /// JSON object `{command, seed, config, <key>: value}`.
    pub fn json<T: Serialize>(&mut self, name: &str, key: &str, value: &T) -> Result<PathBuf> {
        let mut doc = serde_json::Map::new();
        doc.insert("command".into(), self.command.into());
        doc.insert("seed".into(), self.config.seed.into());
        doc.insert("config".into(), serde_json::to_value(&self.config)?);
        doc.insert(key.into(), serde_json::to_value(value)?);
        let (path, mut w) = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &doc)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(path)
    }

    fn header(&self) -> Result<String> {
        let mut s = format!("# simreuse {} {}\n# seed = {}\n", env!("CARGO_PKG_VERSION"), self.command, self.config.seed);
        for line in self.config.to_toml()?.lines() {
            s.push_str("# ");
            s.push_str(line);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

/// Reader for CSV files written by [`Outputs::csv`].
pub fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(f))
}
