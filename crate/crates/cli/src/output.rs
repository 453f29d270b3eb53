//! Output layout: `logs/` for per-step CSVs, `summaries/` for run JSON,
//! `diagnostics/` for probe reports, `checkpoints/`, plus the shared
//! `all_runs.csv` block table at the root.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use ketlab_core::completion::BlockRow;
use serde::Serialize;

pub type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    /// `flag`, else `$KETLAB_OUT`, else `results`.
    pub fn resolve(flag: Option<&Path>) -> Self {
        let root = flag
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os("KETLAB_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("results"));
        Self { root }
    }

    pub fn dir(&self, sub: &str) -> CliResult<PathBuf> {
        let d = self.root.join(sub);
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    pub fn file(&self, sub: &str, name: &str) -> CliResult<PathBuf> {
        Ok(self.dir(sub)?.join(name))
    }

    pub fn all_runs(&self) -> PathBuf {
        self.root.join("all_runs.csv")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_block_rows(path: &Path, rows: &[BlockRow]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_block_rows(path: &Path) -> CliResult<Vec<BlockRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<BlockRow>, _>>()?)
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
