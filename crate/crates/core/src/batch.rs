//! Runs the pipeline over a dataset and writes predictions, the run report
//! and the audit trail.
//!
//! Output layout under `out/`:
//! - `Annotations/<sample id>/<frame>.png` predicted masks (the union over
//!   sounding objects for audio samples)
//! - `by_category/<sample id>/<category>/<frame>.png` per-object masks of audio samples
//! - `report.json` per-sample references, flags and call counts
//! - `audit.jsonl` every model interaction, in sample order
//! - `timings.json` wall-clock per sample, kept apart so the rest is reproducible
//! - `prompts/<sample id>/` prompt images, when dumping is enabled

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{write_jsonl, AuditRecord};
use crate::backends::factory::{BackendFactory, SampleTruth};
use crate::config::{PipelineConfig, Task};
use crate::context::{CallCounts, ChatCache, RunContext, RunFlag};
use crate::error::{Error, Result};
use crate::eval::maskio::write_mask;
use crate::eval::{AnnotatedSample, Dataset, LoadReport, SampleQuery};
use crate::orchestrator::{run_avs_video, run_reference, union_masks, AudioReport, ReferenceReport};
use crate::prompts::PromptSet;
use crate::types::{BinaryMask, Reference};

pub const PREDICTIONS_DIR: &str = "Annotations";
pub const BY_CATEGORY_DIR: &str = "by_category";

/// Everything a run needs besides the dataset.
#[derive(Debug)]
pub struct RunSetup {
    pub task: Task,
    pub pipeline: PipelineConfig,
    pub prompts: PromptSet,
    pub factory: BackendFactory,
    pub cache: ChatCache,
    /// Where to persist the merged cache, if anywhere.
    pub cache_path: Option<PathBuf>,
    pub jobs: usize,
    pub dump_prompts: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub id: String,
    pub video: String,
    #[serde(flatten)]
    pub status: SampleStatus,
    pub frames: usize,
    pub references: Vec<ReferenceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<AudioReport>,
    pub flags: Vec<RunFlag>,
    pub calls: CallCounts,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub pipeline: PipelineConfig,
    pub load: LoadReport,
    pub samples: Vec<SampleReport>,
    pub calls: CallCounts,
    pub failed: usize,
    pub degraded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub id: String,
    pub millis: u128,
}

struct SampleOutput {
    report: SampleReport,
    audit: Vec<AuditRecord>,
    cache_entries: BTreeMap<String, String>,
    masks: Vec<BinaryMask>,
    by_category: Vec<(String, Vec<BinaryMask>)>,
    prompt_images: BTreeMap<String, RgbImage>,
    millis: u128,
}

/// Runs every sample and writes all outputs. Sample failures are recorded in
/// the report rather than aborting the run.
pub fn run_dataset(ds: &Dataset, setup: &RunSetup, out: &Path) -> Result<RunReport> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(setup.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outputs: Vec<SampleOutput> = pool.install(|| ds.samples.par_iter().map(|s| run_sample(ds, s, setup)).collect());

    let mut audit = Vec::new();
    let mut samples = Vec::with_capacity(outputs.len());
    let mut timings = Vec::with_capacity(outputs.len());
    let mut learned = BTreeMap::new();
    let mut calls = CallCounts::default();
    for (sample, output) in ds.samples.iter().zip(outputs) {
        let names = &ds.video_of(sample).frame_names;
        if matches!(output.report.status, SampleStatus::Ok) {
            let dir = out.join(PREDICTIONS_DIR).join(&sample.id);
            write_frames(&dir, names, &output.masks)?;
            for (category, masks) in &output.by_category {
                write_frames(&out.join(BY_CATEGORY_DIR).join(&sample.id).join(category), names, masks)?;
            }
        }
        if !output.prompt_images.is_empty() {
            let dir = out.join("prompts").join(&sample.id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (name, img) in &output.prompt_images {
                let path = dir.join(name);
                img.save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
            }
        }
        audit.extend(output.audit);
        learned.extend(output.cache_entries);
        calls += output.report.calls;
        timings.push(Timing {
            id: sample.id.clone(),
            millis: output.millis,
        });
        samples.push(output.report);
    }

    let report = RunReport {
        task: setup.task,
        pipeline: setup.pipeline.clone(),
        load: ds.report.clone(),
        failed: samples.iter().filter(|s| !matches!(s.status, SampleStatus::Ok)).count(),
        degraded: samples.iter().filter(|s| s.degraded).count(),
        samples,
        calls,
    };
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("timings.json"), &timings)?;
    write_jsonl(&out.join("audit.jsonl"), &audit)?;
    if let Some(path) = &setup.cache_path {
        let mut cache = setup.cache.clone();
        cache.extend(learned);
        cache.save(path)?;
    }
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_frames(dir: &Path, names: &[String], masks: &[BinaryMask]) -> Result<()> {
    if names.len() != masks.len() {
        return Err(Error::LengthMismatch {
            expected: names.len(),
            actual: masks.len(),
        });
    }
    for (name, mask) in names.iter().zip(masks) {
        write_mask(&dir.join(format!("{name}.png")), mask)?;
    }
    Ok(())
}

fn run_sample(ds: &Dataset, sample: &AnnotatedSample, setup: &RunSetup) -> SampleOutput {
    let started = Instant::now();
    let video = ds.video_of(sample);
    let mut ctx = RunContext::new(sample.id.clone()).with_cache(&setup.cache);
    if setup.dump_prompts {
        ctx.prompt_images = Some(BTreeMap::new());
    }
    let mut report = SampleReport {
        id: sample.id.clone(),
        video: video.id.clone(),
        status: SampleStatus::Ok,
        frames: video.frame_names.len(),
        references: Vec::new(),
        audio: None,
        flags: Vec::new(),
        calls: CallCounts::default(),
        degraded: false,
    };
    let result = execute(ds, sample, setup, &mut ctx, &mut report);
    let (masks, by_category) = match result {
        Ok(m) => m,
        Err(e) => {
            log::error!("{}: {e}", sample.id);
            report.status = SampleStatus::Failed { error: e.to_string() };
            (Vec::new(), Vec::new())
        }
    };
    report.flags = ctx.flags.clone();
    report.calls = ctx.calls;
    report.degraded = ctx.flags.iter().any(RunFlag::is_degraded);
    SampleOutput {
        report,
        audit: std::mem::take(&mut ctx.audit),
        cache_entries: std::mem::take(&mut ctx.new_cache_entries),
        masks,
        by_category,
        prompt_images: ctx.prompt_images.take().unwrap_or_default(),
        millis: started.elapsed().as_millis(),
    }
}

type SampleMasks = (Vec<BinaryMask>, Vec<(String, Vec<BinaryMask>)>);

fn execute(
    ds: &Dataset,
    sample: &AnnotatedSample,
    setup: &RunSetup,
    ctx: &mut RunContext<'_>,
    report: &mut SampleReport,
) -> Result<SampleMasks> {
    let video = ds.video_of(sample);
    let clip = video.load()?;
    let truth = sample.truth.as_deref().map(|masks| SampleTruth {
        masks,
        categories: &sample.categories,
    });
    let backends = setup.factory.for_sample(&clip, truth)?;
    match &sample.query {
        SampleQuery::Text(text) => {
            if setup.task != Task::Rvos {
                return Err(Error::Config(format!("{} is a text sample in an audio run", sample.id)));
            }
            let reference = Reference::text(text.clone())?;
            let run = run_reference(ctx, &clip, &reference, &backends, &setup.pipeline, &setup.prompts)?;
            report.references.push(run.report);
            Ok((run.masks.masks, Vec::new()))
        }
        SampleQuery::Audio => {
            if setup.task != Task::Avs {
                return Err(Error::Config(format!("{} is an audio sample in a text run", sample.id)));
            }
            let audio = video.load_audio()?;
            let run = run_avs_video(ctx, &clip, &audio, &backends, &setup.pipeline, &setup.prompts)?;
            let union = union_masks(&run.sequences, clip.len(), clip.height(), clip.width())?;
            report.references = run.references;
            report.audio = Some(run.audio);
            let by_category = run
                .sequences
                .into_iter()
                .map(|s| {
                    let name = s.referent.category().unwrap_or(s.referent.as_str()).replace(['/', '\\'], "_");
                    (name, s.masks)
                })
                .collect();
            Ok((union, by_category))
        }
    }
}
