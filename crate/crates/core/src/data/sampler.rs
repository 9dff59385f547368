//! Train-split sampling: sequential, shuffled, or imbalance-aware upsampling.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{DataError, Manifest};
use crate::task::{LabelKind, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Manifest order, each train record exactly once.
    Sequential,
    /// A fresh permutation of the train split per epoch.
    Shuffled,
    /// Weighted draws with replacement, inversely proportional to the anchor
    /// label's class frequency; epoch length equals the train-record count.
    Upsample,
}

/// Precomputed sampling plan over the train split.
#[derive(Debug, Clone)]
pub struct SamplerPlan {
    mode: SamplerMode,
    train_indices: Vec<usize>,
    weights: Option<Vec<f64>>,
}

impl SamplerPlan {
    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    /// Per-record draw weights (upsample mode only), parallel to the train
    /// split in manifest order.
    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Produces one epoch's record ordering as manifest indices.
    pub fn epoch_order<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        match self.mode {
            SamplerMode::Sequential => self.train_indices.clone(),
            SamplerMode::Shuffled => {
                let mut order = self.train_indices.clone();
                order.shuffle(rng);
                order
            }
            SamplerMode::Upsample => {
                let weights = self.weights.as_ref().expect("upsample plan has weights");
                let dist = WeightedIndex::new(weights).expect("weights are positive");
                (0..self.train_indices.len())
                    .map(|_| self.train_indices[dist.sample(rng)])
                    .collect()
            }
        }
    }
}

/// Builds the train-split sampling plan. Upsampling requires `anchor_label`
/// to name a classification label; draw weights are 1/count(class of the
/// record under that label).
pub fn build_sampler(
    manifest: &Manifest,
    mode: SamplerMode,
    anchor_label: Option<&str>,
) -> Result<SamplerPlan, DataError> {
    let train_indices = manifest.split_indices(Split::Train);
    let weights = if mode == SamplerMode::Upsample {
        let anchor = match anchor_label {
            Some(name) => name.to_string(),
            // Single sensible default: the first classification label.
            None => manifest
                .label_specs
                .iter()
                .find(|s| s.kind == LabelKind::Classification)
                .map(|s| s.name.clone())
                .ok_or_else(|| DataError::AnchorLabel("<none>".into()))?,
        };
        let k = manifest
            .label_index(&anchor)
            .filter(|&k| manifest.label_specs[k].kind == LabelKind::Classification)
            .ok_or_else(|| DataError::AnchorLabel(anchor.clone()))?;
        let class_count = manifest.label_specs[k].class_count;
        let mut counts = vec![0usize; class_count];
        for &i in &train_indices {
            counts[manifest.records[i].labels[k] as usize] += 1;
        }
        Some(
            train_indices
                .iter()
                .map(|&i| 1.0 / counts[manifest.records[i].labels[k] as usize] as f64)
                .collect(),
        )
    } else {
        None
    };
    Ok(SamplerPlan { mode, train_indices, weights })
}
