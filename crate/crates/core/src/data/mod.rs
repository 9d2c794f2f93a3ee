//! Datasets, standardization and train/test splits.

mod results;
mod toy;

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::Tensor;
use crate::error::{Error, Result};

pub use results::{summarize, summary_path, write_results, ResultRow, SummaryRow};
pub use toy::{gen_toy_step, step_level, DEFAULT_TOY_NOISE, DEFAULT_TOY_POINTS, TOY_EDGE};

pub const TEST_FRACTION: f64 = 0.1;
pub const MIN_SPLIT_ROWS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N×D` inputs.
    pub x: Tensor,
    pub y: Vec<f64>,
    pub feature_names: Option<Vec<String>>,
    pub target_name: Option<String>,
}

/// Which CSV column holds the regression target.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum TargetColumn {
    #[default]
    Last,
    Name(String),
    Index(usize),
}

impl std::str::FromStr for TargetColumn {
    type Err = std::convert::Infallible;

    /// A bare integer is a zero-based index, anything else a header name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => TargetColumn::Index(i),
            Err(_) => TargetColumn::Name(s.to_string()),
        })
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
        }
    }
}

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Reads a headed, comma-separated numeric file.
pub fn load_csv(path: impl AsRef<Path>, target: &TargetColumn) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| data_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 {
        return Err(data_err(
            path,
            format!("need at least 2 columns, found {}", header.len()),
        ));
    }
    let t = match target {
        TargetColumn::Last => header.len() - 1,
        TargetColumn::Index(i) if *i < header.len() => *i,
        TargetColumn::Index(i) => {
            return Err(data_err(
                path,
                format!("target index {i} out of range for {} columns", header.len()),
            ))
        }
        TargetColumn::Name(n) => header
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| data_err(path, format!("no column named '{n}'")))?,
    };
    let mut xs = Vec::new();
    let mut y = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| data_err(path, format!("line {line}: {e}")))?;
        if record.len() != header.len() {
            return Err(data_err(
                path,
                format!("line {line}: {} cells, header has {}", record.len(), header.len()),
            ));
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                data_err(
                    path,
                    format!("line {line}: non-numeric cell '{cell}' in column '{}'", header[c]),
                )
            })?;
            if c == t {
                y.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(data_err(path, "no data rows"));
    }
    let d = header.len() - 1;
    let mut names = header;
    let target_name = names.remove(t);
    Ok(Dataset {
        x: Tensor::from_vec(y.len(), d, xs)?,
        y,
        feature_names: Some(names),
        target_name: Some(target_name),
    })
}

/// Writes features then the target as the last column, full precision.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| data_err(path, e.to_string()))?;
    let mut header: Vec<String> = match &data.feature_names {
        Some(n) => n.clone(),
        None => (0..data.dim()).map(|j| format!("x{j}")).collect(),
    };
    header.push(data.target_name.clone().unwrap_or_else(|| "y".into()));
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", data.y[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Column means and standard deviations of the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean_x: Vec<f64>,
    pub std_x: Vec<f64>,
    pub mean_y: f64,
    pub std_y: f64,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone, what: &str) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 0.0 && sd.is_finite() {
        (mean, sd)
    } else {
        warn!("{what} is constant on the training rows; using unit scale");
        (mean, 1.0)
    }
}

impl NormStats {
    /// Statistics of the rows `train` of `data`.
    pub fn fit(data: &Dataset, train: &[usize]) -> Self {
        let (mean_x, std_x) = (0..data.dim())
            .map(|j| mean_std(train.iter().map(|&i| data.x.get(i, j)), &format!("feature {j}")))
            .unzip();
        let (mean_y, std_y) = mean_std(train.iter().map(|&i| data.y[i]), "the target");
        NormStats {
            mean_x,
            std_x,
            mean_y,
            std_y,
        }
    }

    pub fn standardize_x(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let d = x.cols();
        for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.mean_x[j]) / self.std_x[j];
        }
        out
    }

    pub fn unstandardize_x(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let d = x.cols();
        for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
            let j = k % d;
            *v = *v * self.std_x[j] + self.mean_x[j];
        }
        out
    }

    pub fn standardize_y(&self, y: f64) -> f64 {
        (y - self.mean_y) / self.std_y
    }

    pub fn unstandardize_y(&self, y: f64) -> f64 {
        y * self.std_y + self.mean_y
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// A seeded permutation of `0..n` whose first `round(fraction·n)` entries are
/// the test rows.
pub fn make_split_with_fraction(n: usize, seed: u64, fraction: f64) -> Result<SplitPlan> {
    if n < MIN_SPLIT_ROWS {
        return Err(Error::Contract(format!(
            "need at least {MIN_SPLIT_ROWS} rows to split, got {n}"
        )));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("test fraction {fraction} outside [0, 1)")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (fraction * n as f64).round() as usize;
    let train_idx = perm.split_off(n_test);
    Ok(SplitPlan {
        seed,
        train_idx,
        test_idx: perm,
    })
}

pub fn make_split(n: usize, seed: u64) -> Result<SplitPlan> {
    make_split_with_fraction(n, seed, TEST_FRACTION)
}

/// Standardized train and test arrays with the statistics that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSplit {
    pub x_train: Tensor,
    /// `N_train×1`.
    pub y_train: Tensor,
    pub x_test: Tensor,
    /// Test targets in original units.
    pub y_test: Vec<f64>,
    pub norm: NormStats,
}

impl PreparedSplit {
    pub fn new(data: &Dataset, plan: &SplitPlan) -> Self {
        let norm = NormStats::fit(data, &plan.train_idx);
        let train = data.select(&plan.train_idx);
        let test = data.select(&plan.test_idx);
        PreparedSplit {
            x_train: norm.standardize_x(&train.x),
            y_train: Tensor::column(train.y.iter().map(|&v| norm.standardize_y(v)).collect()),
            x_test: norm.standardize_x(&test.x),
            y_test: test.y,
            norm,
        }
    }

    pub fn n_train(&self) -> usize {
        self.x_train.rows()
    }
}
