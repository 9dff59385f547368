//! Dataset ingestion and batch formation.
//!
//! A dataset is described by a manifest CSV with reserved column names:
//! `id` and `split` are required, `imgpath` points at an image file relative
//! to the image root, `input_<name>` columns are tabular features,
//! `label_<name>` columns are model outputs, and `period` carries the
//! time-to-event for survival runs. Label semantics follow the task:
//! classification labels are non-negative integers (class count inferred as
//! one past the maximum seen anywhere in the file, minimum two), regression
//! labels are reals, and survival runs use exactly one 0/1 event label plus
//! a positive period.

pub mod augment;
pub mod batch;
pub mod image;
pub mod sampler;
pub mod stats;

use std::collections::HashSet;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::task::{LabelSpec, Split, Task};

pub use augment::{augment, Augmentation};
pub use batch::{make_batches, Batch, BatchSettings};
pub use image::{convert_channels, decode_image, decode_image_any, BitDepth, ImageError, ImageTensor};
pub use sampler::{build_sampler, SamplerMode, SamplerPlan};
pub use stats::{fit_tabular_stats, normalize_tabular, TabularStats};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("manifest is missing required column `{0}`")]
    MissingColumn(String),
    #[error("manifest declares column `{0}` more than once")]
    DuplicateColumn(String),
    #[error("manifest column `{0}` is not one of id, split, imgpath, input_*, label_*, period")]
    UnknownColumn(String),
    #[error("manifest must declare at least one label_* column")]
    NoLabels,
    #[error("survival task requires exactly one label column, found {0}")]
    SurvivalLabelCount(usize),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("record `{id}`: unknown split `{value}` (expected train, val, or test)")]
    BadSplit { id: String, value: String },
    #[error("record `{id}`: column `{column}` holds `{value}`, expected a finite number")]
    BadNumber { id: String, column: String, value: String },
    #[error("record `{id}`: column `{column}` is empty")]
    MissingValue { id: String, column: String },
    #[error("record `{id}`: label `{label}` value `{value}` is out of range for the task")]
    LabelOutOfRange { id: String, label: String, value: String },
    #[error("record `{id}`: period `{value}` must be a positive number")]
    BadPeriod { id: String, value: String },
    #[error("split `{0}` has no records")]
    EmptySplit(Split),
    #[error("record supplies {got} tabular features, statistics cover {expected}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("upsampling anchor `{0}` is not a classification label of this manifest")]
    AnchorLabel(String),
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("record `{id}` has no image path but the run needs images")]
    MissingImage { id: String },
    #[error("record `{id}`: image {detail}")]
    ImageShape { id: String, detail: String },
    #[error("cannot read image `{path}`")]
    ReadImage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot decode image `{path}`")]
    DecodeImage {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One manifest row.
///
/// `tabular` and `labels` are ordered like the manifest's
/// `tabular_feature_names` and `label_specs`.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub image_path: Option<String>,
    pub tabular: Vec<f64>,
    pub labels: Vec<f64>,
    pub period: Option<f64>,
}

/// Validated dataset description.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub label_specs: Vec<LabelSpec>,
    pub tabular_feature_names: Vec<String>,
    pub has_images: bool,
    pub task: Task,
}

impl Manifest {
    pub fn from_path(path: &Path, task: Task) -> Result<Manifest, DataError> {
        let text = std::fs::read_to_string(path)?;
        parse_manifest(&text, task)
    }

    /// Indices of records in the given split, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.label_specs.iter().position(|s| s.name == name)
    }
}

enum Column {
    Id,
    Split,
    ImgPath,
    Input(usize),
    Label(usize),
    Period,
}

/// Parses and fully validates a manifest CSV for the given task.
pub fn parse_manifest(csv_text: &str, task: Task) -> Result<Manifest, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let headers = reader.headers()?.clone();

    let mut seen = HashSet::new();
    let mut columns = Vec::with_capacity(headers.len());
    let mut feature_names = Vec::new();
    let mut label_names = Vec::new();
    let (mut has_id, mut has_split, mut has_img, mut has_period) = (false, false, false, false);
    for name in headers.iter() {
        if !seen.insert(name.to_string()) {
            return Err(DataError::DuplicateColumn(name.to_string()));
        }
        let column = match name {
            "id" => {
                has_id = true;
                Column::Id
            }
            "split" => {
                has_split = true;
                Column::Split
            }
            "imgpath" => {
                has_img = true;
                Column::ImgPath
            }
            "period" => {
                has_period = true;
                Column::Period
            }
            _ => {
                if let Some(feature) = name.strip_prefix("input_") {
                    feature_names.push(feature.to_string());
                    Column::Input(feature_names.len() - 1)
                } else if let Some(label) = name.strip_prefix("label_") {
                    label_names.push(label.to_string());
                    Column::Label(label_names.len() - 1)
                } else {
                    return Err(DataError::UnknownColumn(name.to_string()));
                }
            }
        };
        columns.push(column);
    }
    if !has_id {
        return Err(DataError::MissingColumn("id".into()));
    }
    if !has_split {
        return Err(DataError::MissingColumn("split".into()));
    }
    if label_names.is_empty() {
        return Err(DataError::NoLabels);
    }
    if task == Task::Deepsurv {
        if label_names.len() != 1 {
            return Err(DataError::SurvivalLabelCount(label_names.len()));
        }
        if !has_period {
            return Err(DataError::MissingColumn("period".into()));
        }
    }

    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for row in reader.records() {
        let row = row?;
        // First pass: locate the id so later cell errors can name the record.
        let mut id = String::new();
        for (column, cell) in columns.iter().zip(row.iter()) {
            if matches!(column, Column::Id) {
                id = cell.to_string();
            }
        }
        if id.is_empty() {
            return Err(DataError::MissingValue { id: format!("row {}", records.len() + 1), column: "id".into() });
        }
        if !ids.insert(id.clone()) {
            return Err(DataError::DuplicateId(id));
        }

        let mut split = None;
        let mut image_path = None;
        let mut tabular = vec![0f64; feature_names.len()];
        let mut labels = vec![0f64; label_names.len()];
        let mut period = None;
        for (column, cell) in columns.iter().zip(row.iter()) {
            match column {
                Column::Id => {}
                Column::Split => {
                    split = Some(Split::from_str(cell).map_err(|_| DataError::BadSplit {
                        id: id.clone(),
                        value: cell.to_string(),
                    })?);
                }
                Column::ImgPath => {
                    if cell.is_empty() {
                        return Err(DataError::MissingValue { id, column: "imgpath".into() });
                    }
                    image_path = Some(cell.to_string());
                }
                Column::Input(k) => {
                    tabular[*k] = parse_finite(cell, &id, &format!("input_{}", feature_names[*k]))?;
                }
                Column::Label(k) => {
                    let name = &label_names[*k];
                    let value = parse_finite(cell, &id, &format!("label_{name}"))?;
                    let valid = match task {
                        Task::Classification => value >= 0.0 && value.fract() == 0.0,
                        Task::Regression => true,
                        Task::Deepsurv => value == 0.0 || value == 1.0,
                    };
                    if !valid {
                        return Err(DataError::LabelOutOfRange {
                            id,
                            label: name.clone(),
                            value: cell.to_string(),
                        });
                    }
                    labels[*k] = value;
                }
                Column::Period => {
                    if cell.is_empty() {
                        if task == Task::Deepsurv {
                            return Err(DataError::MissingValue { id, column: "period".into() });
                        }
                        continue;
                    }
                    let value = parse_finite(cell, &id, "period")?;
                    if value <= 0.0 {
                        return Err(DataError::BadPeriod { id, value: cell.to_string() });
                    }
                    period = Some(value);
                }
            }
        }
        records.push(SampleRecord {
            id,
            split: split.expect("split column verified present"),
            image_path,
            tabular,
            labels,
            period,
        });
    }

    let label_specs = label_names
        .iter()
        .enumerate()
        .map(|(k, name)| match task {
            Task::Classification => {
                let max = records
                    .iter()
                    .map(|r| r.labels[k] as usize)
                    .max()
                    .unwrap_or(0);
                LabelSpec::classification(name.clone(), (max + 1).max(2))
            }
            Task::Regression => LabelSpec::regression(name.clone()),
            Task::Deepsurv => LabelSpec::survival(name.clone()),
        })
        .collect();

    Ok(Manifest {
        records,
        label_specs,
        tabular_feature_names: feature_names,
        has_images: has_img,
        task,
    })
}

fn parse_finite(cell: &str, id: &str, column: &str) -> Result<f64, DataError> {
    if cell.is_empty() {
        return Err(DataError::MissingValue { id: id.to_string(), column: column.to_string() });
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::BadNumber {
            id: id.to_string(),
            column: column.to_string(),
            value: cell.to_string(),
        }),
    }
}
