//! JSON-lines audit trail of every model interaction in a run.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use image::RgbImage;

use crate::symbolic::{compose_grid, compose_pivot_context, paint_boxes, raster_hash, FrameLabelMode};
use crate::types::{BoundingBox, VideoClip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Lbru,
    PivotFrame,
    PivotBox,
    Grounding,
    Segmentation,
    AudioTagging,
    SoundEvents,
    Embedding,
}

impl Step {
    pub fn as_str(self) -> &'static str {
        match self {
            Step::Lbru => "lbru",
            Step::PivotFrame => "pivot_frame",
            Step::PivotBox => "pivot_box",
            Step::Grounding => "grounding",
            Step::Segmentation => "segmentation",
            Step::AudioTagging => "audio_tagging",
            Step::SoundEvents => "sound_events",
            Step::Embedding => "embedding",
        }
    }
}

/// Enough to rebuild a prompt image from the source video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecipe {
    pub hash: String,
    pub source_indices: Vec<usize>,
    pub label_mode: FrameLabelMode,
    /// Set when the pivot frame's cell carries painted candidate boxes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivot: Option<PivotMarks>,
}

impl ImageRecipe {
    /// Rebuilds the image from `clip`. The result hashes to `self.hash` when
    /// the clip and the renderer are unchanged.
    pub fn render(&self, clip: &VideoClip) -> Result<RgbImage> {
        let grid = match &self.pivot {
            None => compose_grid(clip, &self.source_indices, self.label_mode)?,
            Some(marks) => {
                let frame = clip
                    .frame(marks.frame_index)
                    .ok_or_else(|| Error::InvalidInput(format!("pivot frame {} outside video", marks.frame_index)))?;
                let marked = paint_boxes(frame, &marks.boxes)?;
                compose_pivot_context(&marked, clip, &self.source_indices, self.label_mode)?
            }
        };
        Ok(grid.pixels)
    }

    pub fn verify(&self, image: &RgbImage) -> bool {
        raster_hash(image) == self.hash
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotMarks {
    pub frame_index: usize,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Chat {
        template: String,
        template_version: String,
        prompt: String,
        images: Vec<ImageRecipe>,
        attempt: u32,
        cached: bool,
        reply: Option<String>,
        parsed: Option<Value>,
    },
    /// A step answered without the model (ablation or single candidate).
    Skipped { reason: String, value: Value },
    /// A documented fallback was taken.
    Fallback { reason: String, value: Value },
    Grounding {
        text_threshold: f32,
        box_threshold: f32,
        returned: usize,
        kept: usize,
    },
    Segmentation {
        prompts: Vec<(usize, BoundingBox)>,
        start_frame: usize,
    },
    Backend { detail: Value },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub sample: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<usize>,
    pub step: Step,
    #[serde(flatten)]
    pub event: AuditEvent,
}

pub fn write_jsonl(path: &Path, records: &[AuditRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AuditRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(n, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}
