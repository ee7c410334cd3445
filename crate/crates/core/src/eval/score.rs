//! Scores a prediction folder against a dataset's annotations.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::error::{Error, Result};
use crate::eval::maskio::read_mask;
use crate::eval::metrics::{score_object, MetricReport};
use crate::eval::Dataset;
use crate::types::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutcome {
    #[serde(flatten)]
    pub report: MetricReport,
    /// Prediction files that did not exist and were scored as empty masks.
    pub missing: Vec<PathBuf>,
    /// Samples without annotations, left out of the means.
    pub unannotated: Vec<String>,
}

/// The directory holding `<sample id>/<frame>.png`: `root/Annotations` when
/// present, else `root` itself.
pub fn predictions_root(root: &Path) -> PathBuf {
    let nested = root.join(crate::batch::PREDICTIONS_DIR);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Per-object J and F over every annotated sample. With `per_group`, means
/// are taken per annotator group first.
pub fn score_predictions(ds: &Dataset, pred: &Path, per_group: bool) -> Result<ScoreOutcome> {
    let root = predictions_root(pred);
    let annotated: Vec<_> = ds.samples.iter().filter(|s| s.truth.is_some()).collect();
    let unannotated = ds.samples.iter().filter(|s| s.truth.is_none()).map(|s| s.id.clone()).collect();
    let scored: Vec<(crate::eval::ObjectScore, Vec<PathBuf>)> = annotated
        .par_iter()
        .map(|s| {
            let truth = s.truth.as_ref().expect("filtered to annotated");
            let video = ds.video_of(s);
            let mut missing = Vec::new();
            let preds = video
                .frame_names
                .iter()
                .zip(truth)
                .map(|(name, gt)| {
                    let path = root.join(&s.id).join(format!("{name}.png"));
                    if path.exists() {
                        read_mask(&path)
                    } else {
                        missing.push(path);
                        Ok(BinaryMask::empty(gt.height(), gt.width()))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((score_object(s.id.clone(), s.group.clone(), &preds, truth)?, missing))
        })
        .collect::<Result<_>>()?;
    let mut missing = Vec::new();
    let mut objects = Vec::with_capacity(scored.len());
    for (o, m) in scored {
        objects.push(o);
        missing.extend(m);
    }
    if !missing.is_empty() {
        log::warn!("{} prediction frames missing, scored as empty", missing.len());
    }
    Ok(ScoreOutcome {
        report: MetricReport::from_objects(objects, per_group)?,
        missing,
        unannotated,
    })
}

/// One-row table in percent, with the column names used for the task.
pub fn write_csv(path: &Path, task: Task, method: &str, report: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let pct = |v: f64| format!("{:.1}", v * 100.0);
    let rows: (Vec<&str>, Vec<String>) = match task {
        Task::Rvos => (
            vec!["method", "J&F", "J", "F"],
            vec![method.to_string(), pct(report.jf), pct(report.j), pct(report.f)],
        ),
        Task::Avs => (
            vec!["method", "M_J", "M_F"],
            vec![method.to_string(), pct(report.m_j()), pct(report.m_f())],
        ),
    };
    let err = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    w.write_record(&rows.0).map_err(err)?;
    w.write_record(&rows.1).map_err(err)?;
    w.flush().map_err(|e| Error::io(path, e))
}
