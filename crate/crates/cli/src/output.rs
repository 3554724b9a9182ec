use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use crate::config::{FullConfig, Loaded, SecularConfig};

/// Fixed-width scientific notation, so reruns give byte-identical files.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Collects the files written by one command.
pub struct OutDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn csv<I, R>(&mut self, name: &str, header: &[&str], rows: I) -> anyhow::Result<()>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Write `manifest.json` listing everything written so far.
    pub fn manifest(mut self, command: &str, cfg: &Loaded, extra: serde_json::Value) -> anyhow::Result<()> {
        self.written.sort();
        let m = Manifest {
            tool: "orbdist",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: &cfg.hash,
            horizon_years: cfg.horizon_years,
            tolerances: Tolerances {
                secular: &cfg.config.secular,
                full: &cfg.config.full,
                band_au: cfg.config.forecast.band_au,
            },
            outputs: &self.written,
            details: extra,
        };
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Tolerances<'a> {
    secular: &'a SecularConfig,
    full: &'a FullConfig,
    band_au: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: &'a str,
    horizon_years: f64,
    tolerances: Tolerances<'a>,
    outputs: &'a [String],
    details: serde_json::Value,
}
