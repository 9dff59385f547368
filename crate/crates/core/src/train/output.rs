//! CSV emitters for the run artifacts. Floats are written with Rust's
//! shortest round-trip formatting so parsed values reproduce the computed
//! ones bit for bit.

use std::path::Path;

use crate::data::Manifest;
use crate::task::{LabelKind, Task};

use super::{EpochLog, EvalReport, KmPair, LabelMetric, TrainError};

/// `log.csv`: epoch, train_loss, val_loss, one val_loss_<label> column per
/// label, seconds, saved.
pub fn write_log_csv(
    path: &Path,
    logs: &[EpochLog],
    manifest: &Manifest,
) -> Result<(), TrainError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string(), "train_loss".into(), "val_loss".into()];
    for label in &manifest.label_specs {
        header.push(format!("val_loss_{}", label.name));
    }
    header.push("seconds".into());
    header.push("saved".into());
    writer.write_record(&header)?;
    for log in logs {
        let mut record = vec![
            log.epoch.to_string(),
            log.train_loss.to_string(),
            log.val_loss.to_string(),
        ];
        for v in &log.per_label_val {
            record.push(v.to_string());
        }
        record.push(log.seconds.to_string());
        record.push(log.saved.to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// `likelihood.csv`: id, split, raw per-label outputs (class logits /
/// predicted value / risk score), ground-truth columns, and the follow-up
/// period for survival runs.
pub fn write_likelihood_csv(
    path: &Path,
    report: &EvalReport,
    manifest: &Manifest,
) -> Result<(), TrainError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "split".into()];
    for label in &manifest.label_specs {
        match label.kind {
            LabelKind::Classification => {
                for c in 0..label.class_count {
                    header.push(format!("pred_{}_{c}", label.name));
                }
            }
            LabelKind::Regression => header.push(format!("pred_{}", label.name)),
            LabelKind::Survival => header.push("risk".into()),
        }
    }
    for label in &manifest.label_specs {
        header.push(format!("label_{}", label.name));
    }
    let with_period = manifest.task == Task::Deepsurv;
    if with_period {
        header.push("period".into());
    }
    writer.write_record(&header)?;
    for row in &report.rows {
        let mut record = vec![row.id.clone(), row.split.to_string()];
        for outputs in &row.outputs {
            for v in outputs {
                record.push(v.to_string());
            }
        }
        for truth in &row.truths {
            record.push(truth.to_string());
        }
        if with_period {
            record.push(row.period.expect("survival rows carry periods").to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// `metrics.csv`: one row per label/metric pair.
pub fn write_metrics_csv(path: &Path, metrics: &[LabelMetric]) -> Result<(), TrainError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["label", "metric", "value"])?;
    for m in metrics {
        writer.write_record([m.label.as_str(), m.metric.as_str(), &m.value.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// `km.csv`: the product-limit curves of the two median-risk groups.
pub fn write_km_csv(path: &Path, km: &KmPair) -> Result<(), TrainError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["group", "time", "survival", "at_risk", "events"])?;
    for (group, curve) in [("low", &km.low), ("high", &km.high)] {
        for step in &curve.steps {
            writer.write_record([
                group,
                &step.time.to_string(),
                &step.survival.to_string(),
                &step.at_risk.to_string(),
                &step.events.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}
