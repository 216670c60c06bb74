//! Output files. Every file starts with a `#` line carrying the command,
//! config hash and seed.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::CliError;

pub struct OutputDir {
    dir: PathBuf,
    header: String,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(dir: &Path, command: &str, cfg: &ExperimentConfig, seed: u64) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            header: format!("# ouu {command} config_sha256={} seed={seed}", cfg.hash()),
            written: Vec::new(),
        })
    }

    pub fn header(&self) -> &str {
        &self.header
    }

    pub fn write(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
    ) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{}", self.header)?;
        body(&mut w)?;
        w.flush()?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

/// Reads a CSV written by [`OutputDir::write`], skipping the header comment
/// and the column line.
pub fn read_numeric_csv(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let row: Result<Vec<f64>, _> = line.split(',').map(str::parse).collect();
        rows.push(row.map_err(|e| CliError::Io(format!("bad number in {}: {e}", path.display())))?);
    }
    Ok(rows)
}

/// Reads a CSV written by [`OutputDir::write`] into records keyed by column
/// name. Fields must not contain commas.
pub fn read_csv_records(path: &Path) -> Result<Vec<HashMap<String, String>>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let columns: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    lines
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() {
                return Err(CliError::Io(format!("ragged row in {}: {line}", path.display())));
            }
            Ok(columns
                .iter()
                .zip(cells)
                .map(|(c, v)| (c.to_string(), v.to_string()))
                .collect())
        })
        .collect()
}
