//! CSV ingestion, train/test split and normalization.
//!
//! Feature statistics are fitted on the training split only (population std,
//! divisor `n`) and applied to both splits. Regression targets are divided by
//! the largest absolute target over train and test together.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Sample;
use crate::numerics::RngStream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: csv error: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: line {line}, column '{column}': cannot parse {value:?} as a number")]
    Parse {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
    },
    #[error("{path}: line {line}: class label {value} is not a nonnegative integer")]
    BadClass { path: PathBuf, line: u64, value: f64 },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("dataset is empty")]
    Empty,
    #[error("unsupported cache file: {0}")]
    Cache(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Which column is the target and which columns to ignore.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub target: String,
    pub drop: Vec<String>,
    pub task: TaskKind,
}

impl CsvSchema {
    pub fn regression(target: &str) -> Self {
        Self {
            target: target.to_string(),
            drop: Vec::new(),
            task: TaskKind::Regression,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDataset {
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub task: TaskKind,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    /// Rows skipped at load time because a used cell was empty.
    pub rows_with_missing: usize,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            task: self.task,
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            rows_with_missing: 0,
        }
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.features
            .iter()
            .zip(&self.targets)
            .map(|(x, &y)| match self.task {
                TaskKind::Regression => Sample::regression(x.clone(), y),
                TaskKind::Classification => Sample::classification(x.clone(), y as usize),
            })
            .collect()
    }

    /// Number of classes for classification (max label + 1).
    pub fn classes(&self) -> usize {
        self.targets.iter().fold(0.0f64, |m, &y| m.max(y)) as usize + 1
    }
}

/// Read a headered, comma-separated file. Rows with an empty cell in a used
/// column are skipped and counted; any other unparsable cell is an error.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<RawDataset, DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    for name in schema.drop.iter().chain(std::iter::once(&schema.target)) {
        if !header.contains(name) {
            return Err(DataError::Schema(format!("column '{name}' not found in header {header:?}")));
        }
    }
    let target_idx = header.iter().position(|h| *h == schema.target).unwrap();
    let feature_idx: Vec<usize> = (0..header.len())
        .filter(|&i| i != target_idx && !schema.drop.contains(&header[i]))
        .collect();

    let mut out = RawDataset {
        feature_names: feature_idx.iter().map(|&i| header[i].clone()).collect(),
        target_name: schema.target.clone(),
        task: schema.task,
        features: Vec::new(),
        targets: Vec::new(),
        rows_with_missing: 0,
    };
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(DataError::Schema(format!(
                "line {line}: expected {} fields, found {}",
                header.len(),
                record.len()
            )));
        }
        if feature_idx.iter().chain(std::iter::once(&target_idx)).any(|&i| record[i].is_empty()) {
            out.rows_with_missing += 1;
            continue;
        }
        let parse = |i: usize| -> Result<f64, DataError> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    path: path.to_path_buf(),
                    line,
                    column: header[i].clone(),
                    value: record[i].to_string(),
                })
        };
        let row = feature_idx.iter().map(|&i| parse(i)).collect::<Result<Vec<_>, _>>()?;
        let y = parse(target_idx)?;
        if schema.task == TaskKind::Classification && (y < 0.0 || y.fract() != 0.0) {
            return Err(DataError::BadClass {
                path: path.to_path_buf(),
                line,
                value: y,
            });
        }
        out.features.push(row);
        out.targets.push(y);
    }
    Ok(out)
}

/// Write a dataset in the layout [`load_csv`] reads (features, then target).
pub fn write_csv(path: &Path, data: &RawDataset) -> Result<(), DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = data.feature_names.clone();
    header.push(data.target_name.clone());
    w.write_record(&header).map_err(csv_err)?;
    for (x, y) in data.features.iter().zip(&data.targets) {
        let row: Vec<String> = x.iter().chain(std::iter::once(y)).map(|v| v.to_string()).collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Training-set size for a split fraction: `⌈fraction · n⌉`, guarded against
/// products like `0.8 · 20640` landing a hair above an integer.
pub fn train_size(n: usize, fraction: f64) -> usize {
    let exact = fraction * n as f64;
    let nearest = exact.round();
    if (exact - nearest).abs() <= 1e-9 * exact.max(1.0) {
        nearest as usize
    } else {
        exact.ceil() as usize
    }
    .min(n)
}

/// Random split with `⌈fraction · n⌉` training rows, row order given by a
/// stream-driven permutation.
pub fn train_test_split(data: &RawDataset, fraction: f64, stream: &RngStream) -> (RawDataset, RawDataset) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    stream.rng().shuffle(&mut order);
    let cut = train_size(data.len(), fraction);
    (data.subset(&order[..cut]), data.subset(&order[cut..]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub feature_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub dropped: Vec<String>,
    /// `max |y|` over train and test; `None` for classification.
    pub target_scale: Option<f64>,
}

pub fn fit_and_apply_normalization(
    train: &RawDataset,
    test: &RawDataset,
) -> Result<(RawDataset, RawDataset, NormalizationStats), DataError> {
    if train.is_empty() {
        return Err(DataError::Empty);
    }
    let n = train.len() as f64;
    let width = train.feature_names.len();
    let mut keep = Vec::new();
    let mut stats = NormalizationStats {
        feature_names: Vec::new(),
        means: Vec::new(),
        stds: Vec::new(),
        dropped: Vec::new(),
        target_scale: None,
    };
    for j in 0..width {
        let mean = train.features.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = train.features.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 0.0 {
            keep.push(j);
            stats.feature_names.push(train.feature_names[j].clone());
            stats.means.push(mean);
            stats.stds.push(std);
        } else {
            stats.dropped.push(train.feature_names[j].clone());
        }
    }
    if train.task == TaskKind::Regression {
        let scale = train
            .targets
            .iter()
            .chain(&test.targets)
            .fold(0.0f64, |m, y| m.max(y.abs()));
        stats.target_scale = Some(if scale > 0.0 { scale } else { 1.0 });
    }

    let apply = |d: &RawDataset| RawDataset {
        feature_names: stats.feature_names.clone(),
        target_name: d.target_name.clone(),
        task: d.task,
        features: d
            .features
            .iter()
            .map(|r| {
                keep.iter()
                    .enumerate()
                    .map(|(k, &j)| (r[j] - stats.means[k]) / stats.stds[k])
                    .collect()
            })
            .collect(),
        targets: match stats.target_scale {
            Some(s) => d.targets.iter().map(|y| y / s).collect(),
            None => d.targets.clone(),
        },
        rows_with_missing: d.rows_with_missing,
    };
    Ok((apply(train), apply(test), stats))
}

/// Split and normalize in one go, drawing the split from `stream`.
pub fn prepare(
    data: &RawDataset,
    fraction: f64,
    stream: &RngStream,
) -> Result<(RawDataset, RawDataset, NormalizationStats), DataError> {
    let (train, test) = train_test_split(data, fraction, stream);
    fit_and_apply_normalization(&train, &test)
}

/// First line of a normalized cache file.
pub const CACHE_MAGIC: &str = "# diff2 normalized cache v1";

/// Cache layout: the magic line, then a CSV with header
/// `split,<features...>,<target>` where `split` is `train` or `test`.
/// Values are written in shortest round-trip form.
pub fn write_normalized_cache(path: &Path, train: &RawDataset, test: &RawDataset) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = File::create(path).map_err(io)?;
    writeln!(file, "{CACHE_MAGIC}").map_err(io)?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut header = vec!["split".to_string()];
    header.extend(train.feature_names.iter().cloned());
    header.push(train.target_name.clone());
    w.write_record(&header).map_err(csv_err)?;
    for (label, d) in [("train", train), ("test", test)] {
        for (x, y) in d.features.iter().zip(&d.targets) {
            let mut row = vec![label.to_string()];
            row.extend(x.iter().chain(std::iter::once(y)).map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_normalized_cache(path: &Path, task: TaskKind) -> Result<(RawDataset, RawDataset), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = BufReader::new(File::open(path).map_err(io)?);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(io)?;
    if first.trim_end() != CACHE_MAGIC {
        return Err(DataError::Cache(format!("{}: bad header {:?}", path.display(), first.trim_end())));
    }
    let mut csv = csv::Reader::from_reader(reader);
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let header: Vec<String> = csv.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.len() < 2 || header[0] != "split" {
        return Err(DataError::Cache(format!("{}: unexpected columns {header:?}", path.display())));
    }
    let empty = RawDataset {
        feature_names: header[1..header.len() - 1].to_vec(),
        target_name: header[header.len() - 1].clone(),
        task,
        features: Vec::new(),
        targets: Vec::new(),
        rows_with_missing: 0,
    };
    let (mut train, mut test) = (empty.clone(), empty);
    for record in csv.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let values = record
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, v)| {
                v.parse::<f64>().map_err(|_| DataError::Parse {
                    path: path.to_path_buf(),
                    line,
                    column: header[i].clone(),
                    value: v.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let target = match &record[0] {
            "train" => &mut train,
            "test" => &mut test,
            other => return Err(DataError::Cache(format!("line {line}: unknown split {other:?}"))),
        };
        let (x, y) = values.split_at(values.len() - 1);
        target.features.push(x.to_vec());
        target.targets.push(y[0]);
    }
    Ok((train, test))
}
