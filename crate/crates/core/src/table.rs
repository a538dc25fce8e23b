//! Parameter sweeps and the accuracy tables built from their outputs.
//!
//! A sweep file uses the same `key = value` format as an experiment config.
//! Its own keys are:
//!
//! ```text
//! results_dir = runs/noniid      # relative to the sweep file's directory
//! axis = p                       # p | snr_db
//! values = 1, 2, 5, 10
//! algorithms = charles, cotaf, fedavg
//! models = imperfect, perfect, no_fading
//! ```
//!
//! Every other key is an experiment setting shared by all cells. Cell
//! `(algorithm, model, value)` lives in `<results_dir>/<algorithm>-<model>-<axis><value>`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{parse_pairs, ExperimentConfig};
use crate::error::{Error, Result};
use crate::experiment::{self, Datasets, RunSummary, SUMMARY_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelModel {
    Imperfect,
    Perfect,
    NoFading,
}

impl ChannelModel {
    pub fn overrides(self) -> [(&'static str, &'static str); 2] {
        match self {
            Self::Imperfect => [("channel", "fading"), ("csi", "imperfect")],
            Self::Perfect => [("channel", "fading"), ("csi", "perfect")],
            Self::NoFading => [("channel", "no_fading"), ("csi", "perfect")],
        }
    }

    fn title(self) -> &'static str {
        match self {
            Self::Imperfect => "Imperfect",
            Self::Perfect => "Perfect",
            Self::NoFading => "No Fading",
        }
    }
}

impl FromStr for ChannelModel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "imperfect" => Ok(Self::Imperfect),
            "perfect" => Ok(Self::Perfect),
            "no_fading" => Ok(Self::NoFading),
            other => Err(format!("unknown channel model `{other}`")),
        }
    }
}

impl fmt::Display for ChannelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Imperfect => "imperfect",
            Self::Perfect => "perfect",
            Self::NoFading => "no_fading",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    P,
    SnrDb,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            Self::P => "p",
            Self::SnrDb => "snr_db",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub results_dir: PathBuf,
    pub axis: SweepAxis,
    /// Axis values exactly as written, used in cell names.
    pub values: Vec<String>,
    pub algorithms: Vec<String>,
    pub models: Vec<ChannelModel>,
    pub base: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub algorithm: String,
    pub model: ChannelModel,
    pub value: String,
    pub dir: PathBuf,
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl SweepConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base_dir)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        let mut take = |k: &str| pairs.remove(k);
        let results_dir =
            take("results_dir").ok_or_else(|| Error::config("results_dir", "missing"))?;
        let axis = match take("axis").as_deref() {
            Some("p") => SweepAxis::P,
            Some("snr_db") => SweepAxis::SnrDb,
            Some(other) => {
                return Err(Error::config(
                    "axis",
                    format!("expected p or snr_db, got `{other}`"),
                ))
            }
            None => return Err(Error::config("axis", "missing")),
        };
        let values = take("values").map(|v| list(&v)).unwrap_or_default();
        let algorithms = take("algorithms").map(|v| list(&v)).unwrap_or_default();
        let models = take("models")
            .map(|v| list(&v))
            .unwrap_or_default()
            .iter()
            .map(|m| m.parse().map_err(|e: String| Error::config("models", e)))
            .collect::<Result<Vec<ChannelModel>>>()?;
        for reserved in ["algorithm", "channel", "csi", axis.key()] {
            if pairs.contains_key(reserved) {
                return Err(Error::config(
                    reserved,
                    "set by the sweep; remove it from the shared settings",
                ));
            }
        }
        let sweep = Self {
            results_dir: base_dir.join(results_dir),
            axis,
            values,
            algorithms,
            models,
            base: pairs,
        };
        for cell in sweep.cells() {
            sweep.cell_config(&cell)?;
        }
        if sweep.cells().is_empty() {
            // Shared settings are still checked for typos.
            let mut cfg = ExperimentConfig::default();
            cfg.apply(&sweep.base)?;
        }
        Ok(sweep)
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for algorithm in &self.algorithms {
            for value in &self.values {
                for &model in &self.models {
                    let name = format!("{algorithm}-{model}-{}{value}", self.axis.key());
                    cells.push(Cell {
                        algorithm: algorithm.clone(),
                        model,
                        value: value.clone(),
                        dir: self.results_dir.join(name),
                    });
                }
            }
        }
        cells
    }

    pub fn cell_config(&self, cell: &Cell) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&self.base)?;
        cfg.set("algorithm", &cell.algorithm)?;
        for (k, v) in cell.model.overrides() {
            cfg.set(k, v)?;
        }
        cfg.set(self.axis.key(), &cell.value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs every cell in order, loading the data once per distinct data setting.
pub fn run_sweep(sweep: &SweepConfig, mut progress: impl FnMut(&Cell, &RunSummary)) -> Result<()> {
    let mut cached: Option<(ExperimentConfig, Datasets)> = None;
    for cell in sweep.cells() {
        let cfg = sweep.cell_config(&cell)?;
        let same_data = cached.as_ref().is_some_and(|(c, _)| {
            c.dataset == cfg.dataset
                && c.data_dir() == cfg.data_dir()
                && c.train_limit == cfg.train_limit
                && c.synthetic == cfg.synthetic
        });
        if !same_data {
            cached = Some((cfg.clone(), experiment::load_datasets(&cfg)?));
        }
        let data = &cached.as_ref().expect("loaded above").1;
        let out = experiment::run_with_data(&cfg, data, &cell.dir)?;
        progress(&cell, &out.summary);
    }
    Ok(())
}

/// Rendered table plus the cells whose outputs were not found.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub csv: String,
    pub text: String,
    pub missing: Vec<Cell>,
}

fn cell_text(summary: &RunSummary) -> String {
    if summary.majority_diverged() {
        "/".into()
    } else {
        format!("{:.2}", 100.0 * summary.mean_accuracy())
    }
}

/// Builds the algorithm-by-axis table with one accuracy column per channel
/// model. Cells where most seeds diverged show `/`.
pub fn build_table(sweep: &SweepConfig) -> Result<Table> {
    let mut header = vec!["algorithm".to_string(), sweep.axis.key().to_string()];
    header.extend(sweep.models.iter().map(|m| m.to_string()));
    let mut titles = vec!["Algorithm".to_string(), sweep.axis.key().to_string()];
    titles.extend(sweep.models.iter().map(|m| m.title().to_string()));

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut missing = Vec::new();
    let cells = sweep.cells();
    let mut it = cells.iter();
    for algorithm in &sweep.algorithms {
        for value in &sweep.values {
            let mut row = vec![algorithm.clone(), value.clone()];
            for _ in &sweep.models {
                let cell = it.next().expect("one cell per model");
                if !cell.dir.join(SUMMARY_FILE).is_file() {
                    missing.push(cell.clone());
                    row.push("?".into());
                    continue;
                }
                row.push(cell_text(&RunSummary::read(&cell.dir)?));
            }
            rows.push(row);
        }
    }

    let mut csv = header.join(",");
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.join(","));
        csv.push('\n');
    }

    let ncol = titles.len();
    let widths: Vec<usize> = (0..ncol)
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain(std::iter::once(titles[c].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cols: &[String]| -> String {
        let mut s = String::new();
        for (c, v) in cols.iter().enumerate() {
            if c > 0 {
                s.push_str("  ");
            }
            if c < 2 {
                let _ = write!(s, "{v:<w$}", w = widths[c]);
            } else {
                let _ = write!(s, "{v:>w$}", w = widths[c]);
            }
        }
        s.trim_end().to_string()
    };
    let mut text = line(&titles);
    text.push('\n');
    text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (ncol - 1)));
    text.push('\n');
    for r in &rows {
        text.push_str(&line(r));
        text.push('\n');
    }
    Ok(Table { csv, text, missing })
}
