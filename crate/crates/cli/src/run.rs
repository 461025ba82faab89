//! Run directory layout: `config.resolved`, `metrics.csv`, `plots/` and
//! `checkpoints/` under one root.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::CliResult;
use crate::svg::{line_chart, Series};

pub const RESOLVED: &str = "config.resolved";
pub const METRICS: &str = "metrics.csv";

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create the layout and write the resolved config.
    pub fn create(cfg: &RunConfig) -> CliResult<Self> {
        let root: PathBuf = cfg.get("run_dir")?;
        fs::create_dir_all(root.join("plots"))?;
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::write(root.join(RESOLVED), cfg.render())?;
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    /// Configured output path, or `default` under the run root.
    pub fn output(&self, cfg: &RunConfig, key: &str, default: &str) -> CliResult<PathBuf> {
        Ok(cfg.opt::<PathBuf>(key)?.unwrap_or_else(|| self.root.join(default)))
    }

    pub fn metrics(&self) -> CliResult<csv::Writer<File>> {
        Ok(csv::Writer::from_path(self.root.join(METRICS))?)
    }

    pub fn plot(&self, file: &str, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> CliResult<()> {
        fs::write(self.root.join("plots").join(file), line_chart(title, x_label, y_label, series))?;
        Ok(())
    }
}

/// Shortest round-trip text of a float, empty for `None`.
pub fn num(v: impl Into<Option<f64>>) -> String {
    v.into().map(|v| v.to_string()).unwrap_or_default()
}
