//! On-disk dataset bundles, fold splits, checkpoints and run configs.
//!
//! A bundle is a directory holding `manifest.json` plus five CSV tables
//! (`spikes`, `gaussian`, `mask_s`, `mask_y`, `behavior`). Trials are stored
//! concatenated in manifest order.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_SCHEMA};
pub use config::{RunConfig, SingleScale};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Matrix;
use crate::model::{MaskedSequence, ModelError};
use crate::trainer::TrialSet;

pub const BUNDLE_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}: {msg}")]
    Table { file: String, msg: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid bundle: {0}")]
    Invalid(String),
    #[error("invalid fold {0:?}; expected k/N with 1 <= k <= N and N >= 2")]
    Fold(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |e| DataError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialInfo {
    pub id: String,
    #[serde(rename = "T")]
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    pub n_s: usize,
    pub n_y: usize,
    pub base_step_ms: f64,
    pub trials: Vec<TrialInfo>,
    pub seeds: Vec<u64>,
    pub behavior_dim: usize,
    pub timescale_ratio_y: usize,
}

impl Manifest {
    pub fn total_rows(&self) -> usize {
        self.trials.iter().map(|t| t.len).sum()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Manifest(m));
        if self.schema_version != BUNDLE_SCHEMA {
            return bad(format!("schema_version {} (supported: {BUNDLE_SCHEMA})", self.schema_version));
        }
        if self.trials.is_empty() {
            return bad("no trials".into());
        }
        if let Some(t) = self.trials.iter().find(|t| t.len == 0) {
            return bad(format!("trial {:?} is empty", t.id));
        }
        let mut ids: Vec<&str> = self.trials.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate trial ids".into());
        }
        if self.n_s == 0 || self.n_y == 0 {
            return bad("n_s and n_y must be positive".into());
        }
        if !(self.base_step_ms > 0.0) || self.timescale_ratio_y == 0 {
            return bad("base_step_ms and timescale_ratio_y must be positive".into());
        }
        Ok(())
    }
}

/// Both observation streams, their availability masks and a behavior
/// target, split per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub manifest: Manifest,
    pub spikes: Vec<Matrix>,
    pub gaussian: Vec<Matrix>,
    pub mask_s: Vec<Vec<bool>>,
    pub mask_y: Vec<Vec<bool>>,
    pub behavior: Vec<Matrix>,
}

fn check_stream(name: &str, values: &[Matrix], mask: Option<&[Vec<bool>]>, width: usize, lens: &[usize]) -> Result<()> {
    let bad = |m: String| Err(DataError::Invalid(format!("{name}: {m}")));
    if values.len() != lens.len() {
        return bad(format!("{} trials, manifest lists {}", values.len(), lens.len()));
    }
    for (i, (v, &len)) in values.iter().zip(lens).enumerate() {
        if v.rows != len || v.cols != width {
            return bad(format!("trial {i} is {}×{}, expected {len}×{width}", v.rows, v.cols));
        }
        let m = mask.map(|m| &m[i]);
        if let Some(m) = m {
            if m.len() != len {
                return bad(format!("trial {i} mask has {} rows, expected {len}", m.len()));
            }
        }
        for t in 0..len {
            let observed = m.is_none_or(|m| m[t]);
            let row = v.row(t);
            if observed && row.iter().any(|x| !x.is_finite()) {
                return bad(format!("non-finite value in observed row {t} of trial {i}"));
            }
            if !observed && row.iter().any(|x| x.is_infinite()) {
                return bad(format!("infinite value in row {t} of trial {i}"));
            }
        }
    }
    Ok(())
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.manifest.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.trials.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        let lens: Vec<usize> = m.trials.iter().map(|t| t.len).collect();
        if self.mask_s.len() != lens.len() || self.mask_y.len() != lens.len() {
            return Err(DataError::Invalid("mask trial count differs from manifest".into()));
        }
        check_stream("spikes", &self.spikes, Some(&self.mask_s), m.n_s, &lens)?;
        check_stream("gaussian", &self.gaussian, Some(&self.mask_y), m.n_y, &lens)?;
        check_stream("behavior", &self.behavior, None, m.behavior_dim, &lens)
    }

    /// Trials `idx` as model input. Masked rows become zeros, which the
    /// model never reads.
    pub fn trial_set(&self, idx: &[usize]) -> Result<TrialSet> {
        let seq = |values: &Matrix, mask: &Vec<bool>| {
            let mut v = values.clone();
            for (t, &m) in mask.iter().enumerate() {
                if !m {
                    v.data[t * v.cols..(t + 1) * v.cols].fill(0.0);
                }
            }
            MaskedSequence::new(v, mask.clone())
        };
        let mut set = TrialSet { s: Vec::with_capacity(idx.len()), y: Vec::with_capacity(idx.len()) };
        for &i in idx {
            if i >= self.len() {
                return Err(DataError::Invalid(format!("trial index {i} out of range")));
            }
            set.s.push(seq(&self.spikes[i], &self.mask_s[i])?);
            set.y.push(seq(&self.gaussian[i], &self.mask_y[i])?);
        }
        Ok(set)
    }

    pub fn targets(&self, idx: &[usize]) -> Vec<Matrix> {
        idx.iter().map(|&i| self.behavior[i].clone()).collect()
    }
}

const TABLES: [&str; 5] = ["spikes", "gaussian", "mask_s", "mask_y", "behavior"];

fn header(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("{prefix}{j}")).collect()
}

fn table_columns(file: &str, m: &Manifest) -> Vec<String> {
    match file {
        "spikes" => header("s", m.n_s),
        "gaussian" => header("y", m.n_y),
        "mask_s" | "mask_y" => vec!["mask".into()],
        _ => header("b", m.behavior_dim),
    }
}

fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.16e}")
    }
}

fn write_table(path: &Path, cols: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let csv_err = |e: csv::Error| DataError::Io { path: path.to_path_buf(), msg: e.to_string() };
    w.write_record(cols).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn read_table(dir: &Path, file: &str, cols: &[String], rows: usize) -> Result<Vec<f64>> {
    let path = dir.join(format!("{file}.csv"));
    if !path.exists() {
        return Err(DataError::MissingFile(path));
    }
    let bad = |msg: String| DataError::Table { file: format!("{file}.csv"), msg };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(&path).map_err(|e| bad(e.to_string()))?;
    let head = r.headers().map_err(|e| bad(e.to_string()))?;
    if head.iter().ne(cols.iter().map(String::as_str)) {
        return Err(bad(format!("header {:?}, expected {:?}", head.iter().collect::<Vec<_>>(), cols)));
    }
    let mut out = Vec::with_capacity(rows * cols.len());
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        for field in rec.iter() {
            out.push(field.trim().parse::<f64>().map_err(|_| bad(format!("row {n}: {field:?} is not a number")))?);
        }
        n += 1;
    }
    if n != rows {
        return Err(bad(format!("{n} rows, manifest implies {rows}")));
    }
    Ok(out)
}

fn split_rows(data: &[f64], cols: usize, lens: &[usize]) -> Vec<Matrix> {
    let mut at = 0;
    lens.iter()
        .map(|&len| {
            let m = Matrix::from_vec(len, cols, data[at * cols..(at + len) * cols].to_vec());
            at += len;
            m
        })
        .collect()
}

pub fn read_bundle(dir: &Path) -> Result<DatasetBundle> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(DataError::MissingFile(mpath));
    }
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    manifest.validate()?;
    let lens: Vec<usize> = manifest.trials.iter().map(|t| t.len).collect();
    let rows = manifest.total_rows();
    let table = |file: &str| read_table(dir, file, &table_columns(file, &manifest), rows);
    let mask = |file: &str| -> Result<Vec<Vec<bool>>> {
        let flat = table(file)?;
        if let Some((t, v)) = flat.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(DataError::Table { file: format!("{file}.csv"), msg: format!("row {t}: mask value {v} is not 0 or 1") });
        }
        Ok(split_rows(&flat, 1, &lens).into_iter().map(|m| m.data.iter().map(|&v| v == 1.0).collect()).collect())
    };
    let (mask_s, mask_y) = (mask("mask_s")?, mask("mask_y")?);
    let bundle = DatasetBundle {
        spikes: split_rows(&table("spikes")?, manifest.n_s, &lens),
        gaussian: split_rows(&table("gaussian")?, manifest.n_y, &lens),
        behavior: split_rows(&table("behavior")?, manifest.behavior_dim, &lens),
        mask_s,
        mask_y,
        manifest,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Sibling path used to stage a write before the final rename.
fn staging_path(target: &Path) -> PathBuf {
    let name = target.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
    target.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Writes the bundle into a staging directory and renames it over `dir`.
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    let stage = staging_path(dir);
    if stage.exists() {
        fs::remove_dir_all(&stage).map_err(io_err(&stage))?;
    }
    fs::create_dir_all(&stage).map_err(io_err(&stage))?;
    let m = &bundle.manifest;
    let json = serde_json::to_string_pretty(m).map_err(|e| DataError::Manifest(e.to_string()))?;
    let mpath = stage.join("manifest.json");
    fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    for file in TABLES {
        let path = stage.join(format!("{file}.csv"));
        let cols = table_columns(file, m);
        let rows: Box<dyn Iterator<Item = Vec<String>>> = match file {
            "spikes" | "gaussian" | "behavior" => {
                let src = match file {
                    "spikes" => &bundle.spikes,
                    "gaussian" => &bundle.gaussian,
                    _ => &bundle.behavior,
                };
                Box::new(src.iter().flat_map(|mat| (0..mat.rows).map(move |t| mat.row(t).iter().map(|&v| format_f64(v)).collect())))
            }
            _ => {
                let src = if file == "mask_s" { &bundle.mask_s } else { &bundle.mask_y };
                Box::new(src.iter().flatten().map(|&b| vec![if b { "1" } else { "0" }.to_string()]))
            }
        };
        write_table(&path, &cols, rows)?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&stage, dir).map_err(io_err(dir))
}

/// Writes `contents` to a sibling file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let stage = staging_path(path);
    let mut f = fs::File::create(&stage).map_err(io_err(&stage))?;
    f.write_all(contents).map_err(io_err(&stage))?;
    f.sync_all().map_err(io_err(&stage))?;
    fs::rename(&stage, path).map_err(io_err(path))
}

/// Cross-validation fold `k` of `n` (1-based), as `"k/n"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fold {
    pub k: usize,
    pub n: usize,
}

impl std::str::FromStr for Fold {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DataError::Fold(s.to_string());
        let (k, n) = s.split_once('/').ok_or_else(bad)?;
        let (k, n): (usize, usize) = (k.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?);
        if n < 2 || k == 0 || k > n {
            return Err(bad());
        }
        Ok(Fold { k, n })
    }
}

impl Fold {
    /// Contiguous test block `[⌊(k−1)·len/n⌋, ⌊k·len/n⌋)`; training gets the
    /// rest, in order.
    pub fn split(&self, len: usize) -> (Vec<usize>, Vec<usize>) {
        let lo = (self.k - 1) * len / self.n;
        let hi = self.k * len / self.n;
        let train = (0..lo).chain(hi..len).collect();
        (train, (lo..hi).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_arithmetic() {
        let f: Fold = "1/5".parse().unwrap();
        let (train, test) = f.split(750);
        assert_eq!((train.len(), test.len()), (600, 150));
        assert_eq!(test[0], 0);
        let (train, test) = "3/3".parse::<Fold>().unwrap().split(10);
        assert_eq!(test, vec![6, 7, 8, 9]);
        assert_eq!(train.len(), 6);
        for s in ["0/5", "6/5", "1/1", "x/2", "2"] {
            assert!(s.parse::<Fold>().is_err(), "{s}");
        }
    }
}
