use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::RunRecord;
use super::HarnessError;

/// One summary row per run. Wall-clock time is left out so identical runs
/// give identical rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: String,
    pub lambda: f64,
    pub seed: u64,
    pub tag: String,
    pub loss_total: f64,
    pub loss_sft: f64,
    pub loss_log: f64,
    pub loss_sha: f64,
    pub loss_deep: f64,
    pub assisted_acc: Option<f64>,
    pub faded_acc: f64,
    pub baseline_faded_acc: f64,
    pub flops_faded: u64,
    pub flops_assisted: Option<u64>,
    pub mem_ratio_analytic: f64,
    pub mem_ratio_measured: f64,
    pub freeze_intact: bool,
    pub config_hash: String,
}

impl From<&RunRecord> for SummaryRow {
    fn from(r: &RunRecord) -> Self {
        SummaryRow {
            mode: r.mode.to_string(),
            lambda: r.lambda,
            seed: r.seed,
            tag: r.tag.clone(),
            loss_total: r.final_loss.total,
            loss_sft: r.final_loss.sft,
            loss_log: r.final_loss.log,
            loss_sha: r.final_loss.sha_per_layer.iter().sum(),
            loss_deep: r.final_loss.deep_per_layer.iter().sum(),
            assisted_acc: r.assisted.as_ref().map(|a| a.accuracy),
            faded_acc: r.faded.accuracy,
            baseline_faded_acc: r.baseline_faded_accuracy,
            flops_faded: r.faded.flops,
            flops_assisted: r.assisted.as_ref().map(|a| a.flops),
            mem_ratio_analytic: r.mem_ratio_analytic,
            mem_ratio_measured: r.mem_ratio_measured,
            freeze_intact: r.freeze_intact,
            config_hash: r.config_hash.clone(),
        }
    }
}

/// `(records path, summary path)` for an output path: the same stem with
/// `.ndjson` and `.csv` extensions.
pub fn output_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.with_extension("ndjson"), out.with_extension("csv"))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io { path: path.display().to_string(), source: e }
}

/// Writes one JSON object per line.
pub fn write_ndjson<T: Serialize>(path: &Path, items: &[T]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| HarnessError::Io { path: path.display().to_string(), source: e.into() })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| HarnessError::Io { path: path.display().to_string(), source: e.into() })?);
    }
    Ok(out)
}

pub fn write_summary(path: &Path, records: &[RunRecord]) -> Result<(), HarnessError> {
    let csv_err = |e: csv::Error| HarnessError::Io { path: path.display().to_string(), source: e.into() };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(SummaryRow::from(r)).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    let csv_err = |e: csv::Error| HarnessError::Io { path: path.display().to_string(), source: e.into() };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Writes the records and their summary next to `out`.
pub fn persist(records: &[RunRecord], out: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    let (ndjson, csv) = output_paths(out);
    write_ndjson(&ndjson, records)?;
    write_summary(&csv, records)?;
    Ok((ndjson, csv))
}
