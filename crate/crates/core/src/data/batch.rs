//! Batch formation: decoding, conversion, augmentation, normalization, and
//! stacking into model-ready tensors.

use std::path::PathBuf;

use rand::Rng;

use super::augment::{augment, Augmentation};
use super::image::{convert_channels, decode_image_any};
use super::sampler::SamplerPlan;
use super::stats::{normalize_tabular, TabularStats};
use super::{DataError, Manifest};
use crate::task::{Split, Task};
use crate::tensor::Tensor;

/// How records become tensors: which blocks the model consumes, where image
/// files live, and how train images are augmented.
#[derive(Debug, Clone)]
pub struct BatchSettings {
    pub image_root: Option<PathBuf>,
    pub in_channels: usize,
    pub augmentation: Augmentation,
    pub use_images: bool,
    pub use_tabular: bool,
    pub stats: Option<TabularStats>,
}

/// One model-ready batch. Blocks the run does not use stay `None`; all
/// present blocks share the leading batch extent.
#[derive(Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[batch, channels, height, width]`, values in [0, 1].
    pub images: Option<Tensor>,
    /// `[batch, features]`, z-scored.
    pub tabular: Option<Tensor>,
    /// Raw label values per declared label, each of batch length.
    pub targets: Vec<Vec<f64>>,
    /// Time-to-event per sample (survival runs only).
    pub periods: Option<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Builds the epoch's batches for a split. Ordering comes from the sampler
/// plan when one is given (train) and manifest order otherwise; augmentation
/// applies to train batches only. Everything is deterministic given the
/// generator state.
pub fn make_batches<R: Rng>(
    manifest: &Manifest,
    split: Split,
    batch_size: usize,
    plan: Option<&SamplerPlan>,
    settings: &BatchSettings,
    rng: &mut R,
) -> Result<Vec<Batch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::InvalidBatchSize);
    }
    let order = match plan {
        Some(plan) => {
            debug_assert_eq!(split, Split::Train, "sampler plans cover the train split");
            plan.epoch_order(rng)
        }
        None => manifest.split_indices(split),
    };
    if order.is_empty() {
        return Err(DataError::EmptySplit(split));
    }

    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let n = chunk.len();
        let mut ids = Vec::with_capacity(n);
        let mut image_data: Vec<f32> = Vec::new();
        let mut image_dims: Option<(usize, usize)> = None;
        let mut tabular_data: Vec<f32> = Vec::new();
        let mut targets = vec![Vec::with_capacity(n); manifest.label_specs.len()];
        let mut periods = Vec::new();

        for &idx in chunk {
            let record = &manifest.records[idx];
            ids.push(record.id.clone());

            if settings.use_images {
                let rel = record
                    .image_path
                    .as_ref()
                    .ok_or_else(|| DataError::MissingImage { id: record.id.clone() })?;
                let path = match &settings.image_root {
                    Some(root) => root.join(rel),
                    None => PathBuf::from(rel),
                };
                let bytes = std::fs::read(&path)
                    .map_err(|source| DataError::ReadImage { path: path.clone(), source })?;
                let (decoded, _) = decode_image_any(&bytes)
                    .map_err(|source| DataError::DecodeImage { path, source })?;
                let mut img = convert_channels(&decoded, settings.in_channels);
                if split == Split::Train && settings.augmentation != Augmentation::None {
                    img = augment(&img, settings.augmentation, rng);
                }
                match image_dims {
                    None => image_dims = Some((img.height, img.width)),
                    Some((h, w)) if (img.height, img.width) != (h, w) => {
                        return Err(DataError::ImageShape {
                            id: record.id.clone(),
                            detail: format!(
                                "is {}x{}, batch started with {h}x{w}",
                                img.height, img.width
                            ),
                        });
                    }
                    Some(_) => {}
                }
                image_data.extend_from_slice(&img.data);
            }

            if settings.use_tabular {
                let stats = settings.stats.as_ref().expect("tabular runs carry stats");
                tabular_data.extend(normalize_tabular(stats, record)?);
            }

            for (t, v) in targets.iter_mut().zip(&record.labels) {
                t.push(*v);
            }
            if manifest.task == Task::Deepsurv {
                periods.push(record.period.expect("deepsurv records carry periods"));
            }
        }

        let images = if settings.use_images {
            let (h, w) = image_dims.expect("non-empty chunk");
            Some(
                Tensor::new(&[n, settings.in_channels, h, w], image_data, false)
                    .expect("decoded image values are finite"),
            )
        } else {
            None
        };
        let tabular = if settings.use_tabular {
            let k = settings
                .stats
                .as_ref()
                .map(|s| s.feature_count())
                .unwrap_or(0);
            Some(Tensor::new(&[n, k], tabular_data, false).expect("normalized values are finite"))
        } else {
            None
        };
        batches.push(Batch {
            ids,
            images,
            tabular,
            targets,
            periods: (manifest.task == Task::Deepsurv).then_some(periods),
        });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sampler::{build_sampler, SamplerMode};
    use crate::data::{fit_tabular_stats, parse_manifest};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tabular_manifest(n: usize) -> Manifest {
        let mut text = String::from("id,split,input_x,label_y\n");
        for i in 0..n {
            text.push_str(&format!("r{i},train,{i},{}\n", i % 2));
        }
        parse_manifest(&text, Task::Classification).unwrap()
    }

    fn tabular_settings(m: &Manifest) -> BatchSettings {
        BatchSettings {
            image_root: None,
            in_channels: 1,
            augmentation: Augmentation::None,
            use_images: false,
            use_tabular: true,
            stats: Some(fit_tabular_stats(m).unwrap()),
        }
    }

    #[test]
    fn batch_sizes_split_evenly_with_remainder() {
        let m = tabular_manifest(10);
        let settings = tabular_settings(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&m, Split::Train, 4, None, &settings, &mut rng).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(batches[0].tabular.as_ref().unwrap().shape(), &[4, 1]);
        assert_eq!(batches[2].targets[0], vec![0.0, 1.0]);
    }

    #[test]
    fn same_seed_gives_identical_batches() {
        let m = tabular_manifest(23);
        let settings = tabular_settings(&m);
        let plan = build_sampler(&m, SamplerMode::Shuffled, None).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            make_batches(&m, Split::Train, 5, Some(&plan), &settings, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        for (ba, bb) in a.iter().zip(&b) {
            assert_eq!(ba.ids, bb.ids);
            let (ta, tb) = (ba.tabular.as_ref().unwrap(), bb.tabular.as_ref().unwrap());
            for (x, y) in ta.to_vec().iter().zip(tb.to_vec().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_split_is_rejected() {
        let m = tabular_manifest(4);
        let settings = tabular_settings(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = make_batches(&m, Split::Test, 2, None, &settings, &mut rng).unwrap_err();
        assert!(matches!(err, DataError::EmptySplit(Split::Test)));
    }

    #[test]
    fn zero_batch_size_is_rejected() {
        let m = tabular_manifest(4);
        let settings = tabular_settings(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_batches(&m, Split::Train, 0, None, &settings, &mut rng),
            Err(DataError::InvalidBatchSize)
        ));
    }

    #[test]
    fn image_batches_decode_and_stack() {
        let dir = tempfile::tempdir().unwrap();
        for (name, level) in [("a.pgm", 0u8), ("b.pgm", 255u8)] {
            let mut bytes = b"P5 4 4 255\n".to_vec();
            bytes.extend_from_slice(&[level; 16]);
            std::fs::write(dir.path().join(name), bytes).unwrap();
        }
        let text = "id,split,imgpath,label_y\na,train,a.pgm,0\nb,train,b.pgm,1\n";
        let m = parse_manifest(text, Task::Classification).unwrap();
        let settings = BatchSettings {
            image_root: Some(dir.path().to_path_buf()),
            in_channels: 1,
            augmentation: Augmentation::None,
            use_images: true,
            use_tabular: false,
            stats: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&m, Split::Train, 2, None, &settings, &mut rng).unwrap();
        let images = batches[0].images.as_ref().unwrap();
        assert_eq!(images.shape(), &[2, 1, 4, 4]);
        let v = images.to_vec();
        assert!(v[..16].iter().all(|&x| x == 0.0));
        assert!(v[16..].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn missing_image_file_is_reported_with_path() {
        let text = "id,split,imgpath,label_y\na,train,gone.pgm,0\n";
        let m = parse_manifest(text, Task::Classification).unwrap();
        let settings = BatchSettings {
            image_root: Some(PathBuf::from("/nonexistent")),
            in_channels: 1,
            augmentation: Augmentation::None,
            use_images: true,
            use_tabular: false,
            stats: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = make_batches(&m, Split::Train, 1, None, &settings, &mut rng).unwrap_err();
        assert!(matches!(err, DataError::ReadImage { .. }));
    }

    #[test]
    fn deepsurv_batches_carry_periods() {
        let text = "id,split,label_e,period\na,train,1,2.5\nb,train,0,7\n";
        let m = parse_manifest(text, Task::Deepsurv).unwrap();
        let settings = BatchSettings {
            image_root: None,
            in_channels: 1,
            augmentation: Augmentation::None,
            use_images: false,
            use_tabular: false,
            stats: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&m, Split::Train, 2, None, &settings, &mut rng).unwrap();
        assert_eq!(batches[0].periods.as_ref().unwrap(), &vec![2.5, 7.0]);
    }
}
