//! Tabular feature normalization.
//!
//! Statistics are fit on the train split only and applied to every split, so
//! validation and test data never leak into the normalizer.

use super::{DataError, Manifest, SampleRecord};
use crate::task::Split;

const SIGMA_FLOOR: f64 = 1e-8;

/// Per-feature mean and standard deviation, ordered like the manifest's
/// feature names.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularStats {
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl TabularStats {
    pub fn feature_count(&self) -> usize {
        self.means.len()
    }
}

/// Computes mean and population standard deviation per feature over the
/// train split. Standard deviations are floored at 1e-8 so constant features
/// normalize to zero instead of dividing by zero.
pub fn fit_tabular_stats(manifest: &Manifest) -> Result<TabularStats, DataError> {
    let train: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .collect();
    if train.is_empty() {
        return Err(DataError::EmptySplit(Split::Train));
    }
    let k = manifest.tabular_feature_names.len();
    let n = train.len() as f64;
    let mut means = vec![0f64; k];
    for r in &train {
        for (m, x) in means.iter_mut().zip(&r.tabular) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut sigmas = vec![0f64; k];
    for r in &train {
        for ((s, m), x) in sigmas.iter_mut().zip(&means).zip(&r.tabular) {
            let d = x - m;
            *s += d * d;
        }
    }
    for s in &mut sigmas {
        *s = (*s / n).sqrt().max(SIGMA_FLOOR);
    }
    Ok(TabularStats { means, sigmas })
}

/// Z-scores a record's features in declared order.
pub fn normalize_tabular(stats: &TabularStats, record: &SampleRecord) -> Result<Vec<f32>, DataError> {
    if record.tabular.len() != stats.feature_count() {
        return Err(DataError::FeatureMismatch {
            expected: stats.feature_count(),
            got: record.tabular.len(),
        });
    }
    Ok(record
        .tabular
        .iter()
        .zip(stats.means.iter().zip(&stats.sigmas))
        .map(|(x, (m, s))| ((x - m) / s) as f32)
        .collect())
}
