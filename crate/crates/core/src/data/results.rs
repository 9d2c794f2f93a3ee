use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One trained model evaluated on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub split_seed: u64,
    pub model_tag: String,
    pub flow: String,
    pub layers: usize,
    pub m_inducing: usize,
    pub iterations: usize,
    pub nll: f64,
    pub rmse: f64,
    pub elapsed_s: f64,
}

/// Mean and standard error (`std/√n`, population std) per dataset and model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub model_tag: String,
    pub nll_mean: f64,
    pub nll_err: f64,
    pub rmse_mean: f64,
    pub rmse_err: f64,
}

fn mean_err(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt() / n.sqrt())
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, &str), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.dataset, &r.model_tag)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, model_tag), rs)| {
            let (nll_mean, nll_err) = mean_err(&rs.iter().map(|r| r.nll).collect::<Vec<_>>());
            let (rmse_mean, rmse_err) = mean_err(&rs.iter().map(|r| r.rmse).collect::<Vec<_>>());
            SummaryRow {
                dataset: dataset.to_string(),
                model_tag: model_tag.to_string(),
                nll_mean,
                nll_err,
                rmse_mean,
                rmse_err,
            }
        })
        .collect()
}

/// `results.jsonl` → `results.summary.csv`.
pub fn summary_path(path: &Path) -> PathBuf {
    path.with_extension("summary.csv")
}

/// Writes one JSON object per row to `path` and the summary CSV next to it.
/// Returns the summary path.
pub fn write_results(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    if rows.is_empty() {
        return Err(Error::Contract("no result rows to write".into()));
    }
    let mut out = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let spath = summary_path(path);
    let mut w = csv::Writer::from_path(&spath)?;
    for s in summarize(rows) {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(spath)
}
