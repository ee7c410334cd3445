//! End-to-end control flow for one video: plan clips, select a pivot per
//! clip, prompt the segmenter with every pivot box, and for audio references
//! blank the frames where the object is silent.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audio_seg::{
    assign_labels, enumerate_combinations, segment_audio, silence_map, AudioClip, AudioSegment,
    SegmentLabelAssignment,
};
use crate::audit::{AuditEvent, Step};
use crate::backends::{self, Backends};
use crate::config::{ClipMode, PipelineConfig};
use crate::context::{CallCounts, RunContext, RunFlag};
use crate::error::{Error, Result};
use crate::gpt_ps::{
    generate_candidates, select_pivot_box, select_pivot_frame, BoxContext, CandidateBoxSet, PivotSelection,
};
use crate::lbru::{collect_audio_tags, identify_sounding_categories, render_reference, AudioTagList, PromptBundle};
use crate::prompts::PromptSet;
use crate::symbolic::{compose_grid, compose_pivot_context, even_spread, paint_boxes, sample_window};
use crate::types::{BinaryMask, BoundingBox, MaskSequence, Reference, VideoClip};

/// One clip: frames `[start, end)` and the frames sampled from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipWindow {
    pub start: usize,
    pub end: usize,
    pub sampled: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub clips: Vec<ClipWindow>,
    pub frames_per_clip: usize,
    pub interval: usize,
}

impl ClipPlan {
    /// 0-based index of the clip whose pivot frame starts propagation:
    /// the ⌈n/2⌉-th clip, counting from 1.
    pub fn middle(&self) -> usize {
        self.clips.len().div_ceil(2) - 1
    }
}

/// Tiles `[0, t)` with clips of `frames_per_clip × interval` frames.
///
/// A trailing remainder shorter than half a clip joins the previous clip;
/// a longer one becomes its own clip, sampled by even spread when the
/// interval no longer fits.
pub fn plan_clips(t: usize, frames_per_clip: usize, interval: usize) -> Result<ClipPlan> {
    if t == 0 {
        return Err(Error::InvalidInput("cannot plan clips for an empty video".into()));
    }
    if frames_per_clip == 0 || interval == 0 {
        return Err(Error::InvalidInput(format!(
            "clip planning needs frames_per_clip >= 1 and interval >= 1, got {frames_per_clip} and {interval}"
        )));
    }
    let span = frames_per_clip.saturating_mul(interval);
    let mut bounds: Vec<(usize, usize)> = (0..t / span).map(|i| (i * span, (i + 1) * span)).collect();
    let covered = bounds.last().map_or(0, |b| b.1);
    if covered < t {
        match bounds.last_mut() {
            Some(last) if 2 * (t - covered) < span => last.1 = t,
            _ => bounds.push((covered, t)),
        }
    }
    let clips = bounds
        .into_iter()
        .map(|(start, end)| {
            Ok(ClipWindow {
                start,
                end,
                sampled: sample_window(start, end, frames_per_clip, interval)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClipPlan {
        clips,
        frames_per_clip,
        interval,
    })
}

/// The plan `mode` gives a `t`-frame video.
pub fn plan_for(t: usize, mode: ClipMode) -> Result<ClipPlan> {
    match mode {
        ClipMode::Divide { frames_per_clip, interval } => plan_clips(t, frames_per_clip, interval),
        ClipMode::Whole { frames } => {
            if t == 0 || frames == 0 {
                return Err(Error::InvalidInput("whole-video plan needs frames".into()));
            }
            Ok(ClipPlan {
                clips: vec![ClipWindow {
                    start: 0,
                    end: t,
                    sampled: even_spread(0, t, frames),
                }],
                frames_per_clip: frames,
                interval: 1,
            })
        }
    }
}

/// What happened in one clip of one reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipOutcome {
    pub clip: usize,
    pub window: (usize, usize),
    pub sampled: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<CandidateBoxSet>,
    /// `None` when the detector found nothing in this clip.
    pub selection: Option<PivotSelection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReport {
    pub reference: Reference,
    pub clips: Vec<ClipOutcome>,
    /// Frame propagation started from; `None` when no clip had a selection.
    pub start_frame: Option<usize>,
    pub flags: Vec<RunFlag>,
    pub calls: CallCounts,
}

impl ReferenceReport {
    pub fn degraded(&self) -> bool {
        self.flags.iter().any(RunFlag::is_degraded)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRun {
    pub masks: MaskSequence,
    pub report: ReferenceReport,
}

fn select_in_clip(
    ctx: &mut RunContext<'_>,
    clip: &VideoClip,
    window: &ClipWindow,
    reference: &Reference,
    backends: &Backends,
    config: &PipelineConfig,
    prompts: &PromptSet,
) -> Result<(Option<CandidateBoxSet>, Option<PivotSelection>)> {
    let grid = compose_grid(clip, &window.sampled, config.label_mode)?;
    let pivot_frame = select_pivot_frame(
        ctx,
        &grid,
        reference,
        backends.chat.as_ref(),
        &prompts.pivot_frame,
        config.frame_strategy,
        config.attempts,
    )?;
    let frame = clip
        .frame(pivot_frame.frame_index)
        .ok_or_else(|| Error::InvalidInput(format!("pivot frame {} outside video", pivot_frame.frame_index)))?;
    let candidates = match generate_candidates(
        ctx,
        frame,
        reference,
        backends.grounding.as_ref(),
        config.thresholds,
        config.max_candidates,
    ) {
        Ok(c) => c,
        Err(Error::ReferentAbsent) => {
            if let Some(i) = ctx.clip {
                ctx.flag(RunFlag::ReferentAbsent { clip: i });
            }
            return Ok((None, None));
        }
        Err(e) => return Err(e),
    };
    let marked = paint_boxes(frame, &candidates.boxes)?;
    let context = compose_pivot_context(&marked, clip, &window.sampled, config.label_mode)?;
    let input = BoxContext {
        grid: &context,
        marked: &marked,
        pivot: &pivot_frame,
    };
    let pivot_box = select_pivot_box(
        ctx,
        &input,
        reference,
        backends.chat.as_ref(),
        prompts,
        config.box_strategy,
        config.attempts,
    )?;
    Ok((
        Some(candidates),
        Some(PivotSelection {
            pivot_frame,
            pivot_box,
        }),
    ))
}

/// The clip nearest to `middle` that has a selection; earlier clips win ties.
fn start_clip(outcomes: &[ClipOutcome], middle: usize) -> Option<usize> {
    outcomes
        .iter()
        .filter(|o| o.selection.is_some())
        .min_by_key(|o| (o.clip.abs_diff(middle), o.clip))
        .map(|o| o.clip)
}

/// Segments one reference over the whole video.
pub fn run_reference(
    ctx: &mut RunContext<'_>,
    clip: &VideoClip,
    reference: &Reference,
    backends: &Backends,
    config: &PipelineConfig,
    prompts: &PromptSet,
) -> Result<ReferenceRun> {
    config.validate()?;
    let plan = plan_for(clip.len(), config.clips)?;
    let flags_before = ctx.flags.len();
    let calls_before = ctx.calls;
    ctx.reference = reference.as_str().to_string();

    let mut outcomes = Vec::with_capacity(plan.clips.len());
    for (i, window) in plan.clips.iter().enumerate() {
        ctx.clip = Some(i);
        let (candidates, selection) = select_in_clip(ctx, clip, window, reference, backends, config, prompts)?;
        outcomes.push(ClipOutcome {
            clip: i,
            window: (window.start, window.end),
            sampled: window.sampled.clone(),
            candidates,
            selection,
        });
    }
    ctx.clip = None;

    let (masks, start_frame) = match start_clip(&outcomes, plan.middle()) {
        None => {
            log::warn!("{}: referent {:?} not found in any clip", ctx.sample, reference.as_str());
            ctx.flag(RunFlag::AllClipsAbsent);
            (MaskSequence::empty(clip.len(), clip.height(), clip.width(), reference.clone()), None)
        }
        Some(start) => {
            let start_frame = outcomes[start].selection.as_ref().map(|s| s.pivot_frame.frame_index);
            let start_frame = start_frame.expect("start clip has a selection");
            let prompts: Vec<(usize, BoundingBox)> = outcomes
                .iter()
                .filter_map(|o| o.selection.as_ref())
                .map(|s| (s.pivot_frame.frame_index, s.pivot_box.bbox.clone()))
                .collect();
            ctx.record(
                Step::Segmentation,
                AuditEvent::Segmentation {
                    prompts: prompts.clone(),
                    start_frame,
                },
            );
            ctx.calls.segmentation += 1;
            let masks = backends::segment_video(backends.segmenter.as_ref(), clip, &prompts, start_frame)
                .map_err(|e| Error::backend(format!("segmenting {}", clip.id()), e))?;
            (MaskSequence::new(masks, reference.clone()), Some(start_frame))
        }
    };

    let calls = ctx.calls - calls_before;
    Ok(ReferenceRun {
        masks,
        report: ReferenceReport {
            reference: reference.clone(),
            clips: outcomes,
            start_frame,
            flags: ctx.flags[flags_before..].to_vec(),
            calls,
        },
    })
}

/// Audio-side results for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioReport {
    pub tags: AudioTagList,
    pub categories: Vec<String>,
    pub segments: Vec<AudioSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<SegmentLabelAssignment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvsRun {
    pub sequences: Vec<MaskSequence>,
    pub references: Vec<ReferenceReport>,
    pub audio: AudioReport,
}

/// Checks that the audio and video durations agree within one frame period.
pub fn check_alignment(clip: &VideoClip, audio: &AudioClip) -> Result<()> {
    let gap = (audio.duration_secs() - clip.duration_secs()).abs();
    if gap > clip.fps().period() + 1e-9 {
        return Err(Error::InvalidInput(format!(
            "{}: audio lasts {:.3} s but video {:.3} s",
            clip.id(),
            audio.duration_secs(),
            clip.duration_secs()
        )));
    }
    Ok(())
}

/// Finds the sounding objects, segments each one, and blanks its masks on
/// frames whose audio segment does not include it.
pub fn run_avs_video(
    ctx: &mut RunContext<'_>,
    clip: &VideoClip,
    audio: &AudioClip,
    backends: &Backends,
    config: &PipelineConfig,
    prompts: &PromptSet,
) -> Result<AvsRun> {
    config.validate()?;
    check_alignment(clip, audio)?;
    let tagger = backends.tagger().map_err(|e| Error::backend("audio tagging", e))?;
    ctx.calls.audio_tagging += 1;
    let tags = collect_audio_tags(audio, tagger, config.audio_top_k)?;
    ctx.record(
        Step::AudioTagging,
        AuditEvent::Backend {
            detail: json!({"tags": tags.tags()}),
        },
    );
    let mut report = AudioReport {
        tags: tags.clone(),
        categories: Vec::new(),
        segments: Vec::new(),
        assignment: None,
    };
    if tags.is_empty() {
        log::warn!("{}: audio tagger returned no labels", ctx.sample);
        ctx.flag(RunFlag::NoSoundingCategories);
        return Ok(AvsRun {
            sequences: Vec::new(),
            references: Vec::new(),
            audio: report,
        });
    }

    let frames = match config.clips {
        ClipMode::Whole { frames } => frames,
        ClipMode::Divide { frames_per_clip, .. } => frames_per_clip,
    };
    let grid = compose_grid(clip, &even_spread(0, clip.len(), frames), config.label_mode)?;
    let bundle = PromptBundle::new(&prompts.lbru, &tags, grid)?;
    let categories = identify_sounding_categories(ctx, &bundle, &tags, backends.chat.as_ref(), config.attempts)?;
    report.categories = categories.as_slice().to_vec();

    let sed = backends.sound_events().map_err(|e| Error::backend("sound event detection", e))?;
    ctx.calls.sound_events += 1;
    let segmentation = segment_audio(audio, sed)?;
    if segmentation.degraded {
        ctx.flag(RunFlag::SoundEventFallback);
    }
    report.segments = segmentation.segments.clone();

    let combinations = enumerate_combinations(&categories)?;
    let embedder = backends.embedder().map_err(|e| Error::backend("embedding", e))?;
    ctx.calls.embedding += (segmentation.segments.len() + combinations.len()) as u32;
    let assignment = assign_labels(audio, &segmentation.segments, &combinations, embedder)?;
    if assignment.degraded {
        ctx.flag(RunFlag::EmbeddingFallback);
    }
    ctx.record(
        Step::Embedding,
        AuditEvent::Backend {
            detail: json!({
                "segments": segmentation.segments,
                "combinations": combinations.iter().map(|c| &c.rendered_text).collect::<Vec<_>>(),
                "labels": assignment.labels,
            }),
        },
    );

    let mut sequences = Vec::with_capacity(categories.len());
    let mut references = Vec::with_capacity(categories.len());
    for category in categories.as_slice() {
        let reference = render_reference(category)?;
        let mut run = run_reference(ctx, clip, &reference, backends, config, prompts)?;
        let silent = silence_map(&assignment, &segmentation.segments, category, clip.len(), clip.fps());
        run.masks.filter_silent(&silent)?;
        sequences.push(run.masks);
        references.push(run.report);
    }
    ctx.reference.clear();
    report.assignment = Some(assignment);
    Ok(AvsRun {
        sequences,
        references,
        audio: report,
    })
}

/// Union of every sequence's mask per frame; empty masks when `sequences` is empty.
pub fn union_masks(sequences: &[MaskSequence], len: usize, height: u32, width: u32) -> Result<Vec<BinaryMask>> {
    let mut out = vec![BinaryMask::empty(height, width); len];
    for seq in sequences {
        if seq.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                actual: seq.len(),
            });
        }
        for (acc, m) in out.iter_mut().zip(&seq.masks) {
            acc.union_with(m)?;
        }
    }
    Ok(out)
}
