//! Shared vocabulary: tasks, dataset splits, and label declarations.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// What the run is trying to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
    Deepsurv,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "classification" => Ok(Task::Classification),
            "regression" => Ok(Task::Regression),
            "deepsurv" => Ok(Task::Deepsurv),
            other => Err(format!(
                "unknown task `{other}` (expected classification, regression, or deepsurv)"
            )),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
            Task::Deepsurv => "deepsurv",
        })
    }
}

/// Dataset partition a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val, or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// How a label's values are interpreted and scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Classification,
    Regression,
    Survival,
}

/// One declared output of the model.
///
/// `class_count` is at least 2 for classification heads and exactly 1 for
/// regression and survival heads (a single value or risk score).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    pub kind: LabelKind,
    pub class_count: usize,
}

impl LabelSpec {
    pub fn classification(name: impl Into<String>, class_count: usize) -> Self {
        LabelSpec { name: name.into(), kind: LabelKind::Classification, class_count }
    }

    pub fn regression(name: impl Into<String>) -> Self {
        LabelSpec { name: name.into(), kind: LabelKind::Regression, class_count: 1 }
    }

    pub fn survival(name: impl Into<String>) -> Self {
        LabelSpec { name: name.into(), kind: LabelKind::Survival, class_count: 1 }
    }
}
