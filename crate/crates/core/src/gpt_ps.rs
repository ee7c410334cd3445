//! Pivot selection for one clip: the chat model picks the frame where the
//! referent is clearest, the detector proposes candidate boxes on that frame,
//! and the chat model picks the box that matches the reference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audit::{AuditEvent, ImageRecipe, PivotMarks, Step};
use crate::backends::{self, ChatVisionBackend, GroundingBackend};
use crate::context::{ask, ChatPrompt, RunContext, RunFlag};
use crate::error::{Error, Result};
use crate::prompts::{parse_box_answer, parse_frame_answer, PromptSet, PromptTemplate};
use crate::symbolic::{raster_hash, FrameGridImage, MarkedBoxImage};
use crate::types::{box_iou, BoundingBox, FrameImage, Reference};

/// Most candidate boxes painted on a pivot frame.
pub const MAX_CANDIDATES: usize = 8;

/// Candidates overlapping a higher-scored one by more than this are dropped.
pub const DEDUP_IOU: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub text: f32,
    #[serde(rename = "box")]
    pub box_: f32,
}

impl Thresholds {
    pub const RVOS: Thresholds = Thresholds { text: 0.2, box_: 0.15 };
    pub const AVS: Thresholds = Thresholds { text: 0.25, box_: 0.25 };

    pub fn halved(self) -> Thresholds {
        Thresholds {
            text: self.text / 2.0,
            box_: self.box_ / 2.0,
        }
    }

    pub fn validate(self) -> Result<()> {
        for (name, v) in [("text", self.text), ("box", self.box_)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} threshold {v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStrategy {
    #[default]
    Gpt,
    First,
    Middle,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxStrategy {
    /// Describe the boxes, analyse the reference, select.
    #[default]
    Gpt,
    /// Highest detector score, no chat call.
    #[serde(rename = "topscore")]
    TopScore,
    /// Select directly, without describing the boxes.
    #[serde(rename = "nodesc")]
    NoDescription,
    /// Describe the boxes, then select, without analysing the reference.
    Describe,
    /// Analyse the reference, then select.
    Syntax,
}

impl FromStr for FrameStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpt" => Ok(FrameStrategy::Gpt),
            "first" => Ok(FrameStrategy::First),
            "middle" => Ok(FrameStrategy::Middle),
            "last" => Ok(FrameStrategy::Last),
            other => Err(Error::Config(format!(
                "unknown frame strategy {other:?} (expected gpt, first, middle or last)"
            ))),
        }
    }
}

impl FromStr for BoxStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpt" => Ok(BoxStrategy::Gpt),
            "topscore" => Ok(BoxStrategy::TopScore),
            "nodesc" => Ok(BoxStrategy::NoDescription),
            "describe" => Ok(BoxStrategy::Describe),
            "syntax" => Ok(BoxStrategy::Syntax),
            other => Err(Error::Config(format!(
                "unknown box strategy {other:?} (expected gpt, topscore, nodesc, describe or syntax)"
            ))),
        }
    }
}

impl fmt::Display for FrameStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameStrategy::Gpt => "gpt",
            FrameStrategy::First => "first",
            FrameStrategy::Middle => "middle",
            FrameStrategy::Last => "last",
        })
    }
}

impl fmt::Display for BoxStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoxStrategy::Gpt => "gpt",
            BoxStrategy::TopScore => "topscore",
            BoxStrategy::NoDescription => "nodesc",
            BoxStrategy::Describe => "describe",
            BoxStrategy::Syntax => "syntax",
        })
    }
}

impl BoxStrategy {
    fn template(self, prompts: &PromptSet) -> Option<&PromptTemplate> {
        match self {
            BoxStrategy::Gpt => Some(&prompts.pivot_box),
            BoxStrategy::TopScore => None,
            BoxStrategy::NoDescription => Some(&prompts.pivot_box_direct),
            BoxStrategy::Describe => Some(&prompts.pivot_box_describe),
            BoxStrategy::Syntax => Some(&prompts.pivot_box_avs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PivotFrame {
    /// 1-based position among the sampled frames.
    pub sampled_position: usize,
    pub frame_index: usize,
    pub event_summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateBoxSet {
    /// Sorted by score, highest first.
    pub boxes: Vec<BoundingBox>,
    /// The thresholds that produced `boxes`.
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotBox {
    /// 1-based painted ID.
    pub box_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotSelection {
    pub pivot_frame: PivotFrame,
    pub pivot_box: PivotBox,
}

/// Prompt sentence spelling out which video frame each painted label shows.
pub fn frame_mapping(grid: &FrameGridImage) -> String {
    let pairs: Vec<String> = grid
        .source_indices
        .iter()
        .enumerate()
        .map(|(pos, idx)| format!("{} = video frame {idx}", grid.label_for(pos)))
        .collect();
    format!("Frame IDs map to video frames as follows: {}.", pairs.join(", "))
}

pub(crate) fn grid_recipe(grid: &FrameGridImage, pivot: Option<PivotMarks>) -> ImageRecipe {
    ImageRecipe {
        hash: raster_hash(&grid.pixels),
        source_indices: grid.source_indices.clone(),
        label_mode: grid.label_style.mode,
        pivot,
    }
}

fn position_of_label(grid: &FrameGridImage, id: usize) -> Option<usize> {
    let wanted = id.to_string();
    (0..grid.frame_count()).find(|&p| grid.label_for(p) == wanted)
}

fn pivot_at(grid: &FrameGridImage, position: usize, event_summary: String) -> PivotFrame {
    PivotFrame {
        sampled_position: position,
        frame_index: grid.source_indices[position - 1],
        event_summary,
    }
}

/// Chooses the pivot frame among the grid's cells.
///
/// A single cell or a fixed strategy answers without the chat model. A reply
/// that never names a painted frame ID falls back to the middle position.
pub fn select_pivot_frame(
    ctx: &mut RunContext<'_>,
    grid: &FrameGridImage,
    reference: &Reference,
    llm: &dyn ChatVisionBackend,
    template: &PromptTemplate,
    strategy: FrameStrategy,
    attempts: u32,
) -> Result<PivotFrame> {
    let m = grid.frame_count();
    if m == 0 {
        return Err(Error::InvalidInput("pivot frame selection needs at least one frame".into()));
    }
    let fixed = match (m, strategy) {
        (1, _) => Some((1, "single sampled frame".to_string())),
        (_, FrameStrategy::Gpt) => None,
        (_, FrameStrategy::First) => Some((1, "frame strategy first".to_string())),
        (_, FrameStrategy::Middle) => Some((m.div_ceil(2), "frame strategy middle".to_string())),
        (_, FrameStrategy::Last) => Some((m, "frame strategy last".to_string())),
    };
    if let Some((position, reason)) = fixed {
        let pivot = pivot_at(grid, position, String::new());
        ctx.record(
            Step::PivotFrame,
            AuditEvent::Skipped {
                reason,
                value: json!({"position": position, "frame_index": pivot.frame_index}),
            },
        );
        return Ok(pivot);
    }

    let text = template.render(&[
        ("frame_count", &m.to_string()),
        ("frame_mapping", &frame_mapping(grid)),
        ("reference", reference.as_str()),
    ])?;
    let prompt = ChatPrompt {
        step: Step::PivotFrame,
        template,
        text,
        images: vec![(&grid.pixels, grid_recipe(grid, None))],
    };
    let answer = ask(
        ctx,
        llm,
        &prompt,
        attempts,
        |reply| {
            let a = parse_frame_answer(reply)?;
            Some((position_of_label(grid, a.id)? + 1, a.text))
        },
        |(position, _)| json!({"position": position}),
    )?;
    Ok(match answer {
        Some((position, summary)) => pivot_at(grid, position, summary),
        None => {
            let position = m.div_ceil(2);
            let pivot = pivot_at(grid, position, String::new());
            ctx.record(
                Step::PivotFrame,
                AuditEvent::Fallback {
                    reason: format!("no valid frame ID after {attempts} attempts"),
                    value: json!({"position": position, "frame_index": pivot.frame_index}),
                },
            );
            if let Some(clip) = ctx.clip {
                ctx.flag(RunFlag::PivotFrameFallback { clip });
            }
            pivot
        }
    })
}

/// Score-sorted, deduplicated and capped detections at or above the box
/// threshold. Equal scores keep the detector's order.
pub fn filter_candidates(mut boxes: Vec<BoundingBox>, box_threshold: f32, max: usize) -> Vec<BoundingBox> {
    boxes.retain(|b| b.score >= box_threshold);
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<BoundingBox> = Vec::with_capacity(max.min(boxes.len()));
    for b in boxes {
        if kept.len() == max {
            break;
        }
        if kept.iter().all(|k| box_iou(k, &b) <= DEDUP_IOU) {
            kept.push(b);
        }
    }
    kept
}

/// Grounds the reference on the pivot frame. Retries once with both
/// thresholds halved when nothing is found; [`Error::ReferentAbsent`] if the
/// retry also comes back empty.
pub fn generate_candidates(
    ctx: &mut RunContext<'_>,
    frame: &FrameImage,
    reference: &Reference,
    detector: &dyn GroundingBackend,
    thresholds: Thresholds,
    max: usize,
) -> Result<CandidateBoxSet> {
    thresholds.validate()?;
    for (attempt, t) in [thresholds, thresholds.halved()].into_iter().enumerate() {
        ctx.calls.grounding += 1;
        let raw = backends::ground_checked(detector, &frame.pixels, reference.as_str(), t.text, t.box_)
            .map_err(|e| Error::backend(format!("grounding frame {}", frame.index), e))?;
        let returned = raw.len();
        let boxes = filter_candidates(raw, t.box_, max);
        ctx.record(
            Step::Grounding,
            AuditEvent::Grounding {
                text_threshold: t.text,
                box_threshold: t.box_,
                returned,
                kept: boxes.len(),
            },
        );
        if !boxes.is_empty() {
            if attempt == 1 {
                if let Some(clip) = ctx.clip {
                    ctx.flag(RunFlag::ThresholdsHalved { clip });
                }
            }
            return Ok(CandidateBoxSet { boxes, thresholds: t });
        }
    }
    Err(Error::ReferentAbsent)
}

fn top_score_id(boxes: &[BoundingBox]) -> usize {
    boxes
        .iter()
        .enumerate()
        .fold(0, |best, (i, b)| if b.score > boxes[best].score { i } else { best })
        + 1
}

/// Everything the box-selection prompt refers to.
pub struct BoxContext<'a> {
    pub grid: &'a FrameGridImage,
    pub marked: &'a MarkedBoxImage,
    pub pivot: &'a PivotFrame,
}

/// Chooses one painted candidate.
///
/// A single candidate or the top-score strategy answers without the chat
/// model. A reply that never names a painted ID falls back to the
/// highest-scored candidate.
pub fn select_pivot_box(
    ctx: &mut RunContext<'_>,
    input: &BoxContext<'_>,
    reference: &Reference,
    llm: &dyn ChatVisionBackend,
    prompts: &PromptSet,
    strategy: BoxStrategy,
    attempts: u32,
) -> Result<PivotBox> {
    let boxes = &input.marked.box_ids;
    if boxes.is_empty() {
        return Err(Error::InvalidInput("no candidate boxes to select from".into()));
    }
    let pick = |id: usize, rationale: String| PivotBox {
        box_id: id,
        bbox: boxes[id - 1].clone(),
        rationale,
    };
    let template = match (boxes.len(), strategy.template(prompts)) {
        (1, _) => {
            ctx.record(
                Step::PivotBox,
                AuditEvent::Skipped {
                    reason: "single candidate".into(),
                    value: json!({"box": 1}),
                },
            );
            return Ok(pick(1, String::new()));
        }
        (_, None) => {
            let id = top_score_id(boxes);
            ctx.record(
                Step::PivotBox,
                AuditEvent::Skipped {
                    reason: format!("box strategy {strategy}"),
                    value: json!({"box": id}),
                },
            );
            return Ok(pick(id, String::new()));
        }
        (_, Some(t)) => t,
    };

    let position = input.pivot.sampled_position - 1;
    let text = template.render(&[
        ("frame_count", &input.grid.frame_count().to_string()),
        ("frame_mapping", &frame_mapping(input.grid)),
        ("pivot_label", &input.grid.label_for(position)),
        ("box_count", &boxes.len().to_string()),
        ("reference", reference.as_str()),
        ("event_summary", &input.pivot.event_summary),
    ])?;
    let marks = PivotMarks {
        frame_index: input.marked.frame_index,
        boxes: boxes.clone(),
    };
    let prompt = ChatPrompt {
        step: Step::PivotBox,
        template,
        text,
        images: vec![(&input.grid.pixels, grid_recipe(input.grid, Some(marks)))],
    };
    let answer = ask(
        ctx,
        llm,
        &prompt,
        attempts,
        |reply| parse_box_answer(reply).filter(|a| (1..=boxes.len()).contains(&a.id)),
        |a| Value::from(a.id),
    )?;
    Ok(match answer {
        Some(a) => pick(a.id, a.text),
        None => {
            let id = top_score_id(boxes);
            ctx.record(
                Step::PivotBox,
                AuditEvent::Fallback {
                    reason: format!("no valid box ID after {attempts} attempts"),
                    value: json!({"box": id}),
                },
            );
            if let Some(clip) = ctx.clip {
                ctx.flag(RunFlag::PivotBoxFallback { clip });
            }
            pick(id, String::new())
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{Script, ScriptedChat, ScriptedGrounding};
    use crate::symbolic::{compose_grid, compose_pivot_context, paint_boxes, FrameLabelMode};
    use crate::types::{Fps, VideoClip};
    use image::RgbImage;

    fn clip(n: usize) -> VideoClip {
        let frames: Vec<RgbImage> = (0..n)
            .map(|i| RgbImage::from_pixel(40, 30, image::Rgb([(i * 5) as u8, 0, 0])))
            .collect();
        VideoClip::from_rasters("v", Fps::default(), frames).unwrap()
    }

    fn reference() -> Reference {
        Reference::text("the bicycle behind").unwrap()
    }

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32, s: f32) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1, s)
    }

    fn ctx() -> RunContext<'static> {
        let mut c = RunContext::new("s");
        c.clip = Some(0);
        c
    }

    #[test]
    fn frame_answer_is_used() {
        let clip = clip(50);
        let grid = compose_grid(&clip, &[0, 10, 20, 30, 40], FrameLabelMode::Positional).unwrap();
        let chat = ScriptedChat::replies(["A cyclist passes.\n```json\n{\"event\": \"a cyclist rides past\", \"frame\": 4}\n```"]);
        let prompts = PromptSet::default();
        let mut c = ctx();
        let pf = select_pivot_frame(&mut c, &grid, &reference(), &chat, &prompts.pivot_frame, FrameStrategy::Gpt, 3).unwrap();
        assert_eq!(pf.sampled_position, 4);
        assert_eq!(pf.frame_index, 30);
        assert_eq!(pf.event_summary, "a cyclist rides past");
        let sent = chat.0.requests();
        assert!(sent[0].contains("4 = video frame 30"));
    }

    #[test]
    fn absolute_labels_map_back_to_positions() {
        let clip = clip(50);
        let grid = compose_grid(&clip, &[0, 10, 20, 30, 40], FrameLabelMode::Absolute).unwrap();
        let chat = ScriptedChat::replies(["{\"frame\": 20}"]);
        let prompts = PromptSet::default();
        let mut c = ctx();
        let pf = select_pivot_frame(&mut c, &grid, &reference(), &chat, &prompts.pivot_frame, FrameStrategy::Gpt, 3).unwrap();
        assert_eq!((pf.sampled_position, pf.frame_index), (3, 20));
    }

    #[test]
    fn out_of_range_frame_falls_back_to_middle() {
        let clip = clip(50);
        let grid = compose_grid(&clip, &[0, 10, 20, 30, 40], FrameLabelMode::Positional).unwrap();
        let chat = ScriptedChat::replies(["frame 9"; 3]);
        let prompts = PromptSet::default();
        let mut c = ctx();
        let pf = select_pivot_frame(&mut c, &grid, &reference(), &chat, &prompts.pivot_frame, FrameStrategy::Gpt, 3).unwrap();
        assert_eq!(pf.sampled_position, 3);
        assert_eq!(c.calls.chat, 3);
        assert_eq!(c.flags, [RunFlag::PivotFrameFallback { clip: 0 }]);
    }

    #[test]
    fn single_frame_and_fixed_strategies_skip_the_model() {
        let clip = clip(50);
        let chat = ScriptedChat::replies(Vec::<String>::new());
        let prompts = PromptSet::default();
        let one = compose_grid(&clip, &[7], FrameLabelMode::Positional).unwrap();
        let mut c = ctx();
        let pf = select_pivot_frame(&mut c, &one, &reference(), &chat, &prompts.pivot_frame, FrameStrategy::Gpt, 3).unwrap();
        assert_eq!((pf.sampled_position, pf.frame_index), (1, 7));

        let grid = compose_grid(&clip, &[0, 10, 20, 30], FrameLabelMode::Positional).unwrap();
        for (strategy, want) in [(FrameStrategy::First, 0), (FrameStrategy::Middle, 10), (FrameStrategy::Last, 30)] {
            let pf = select_pivot_frame(&mut c, &grid, &reference(), &chat, &prompts.pivot_frame, strategy, 3).unwrap();
            assert_eq!(pf.frame_index, want, "{strategy}");
        }
        assert_eq!(c.calls.chat, 0);
        assert!(c.flags.is_empty());
    }

    fn brute_dedup(boxes: &[BoundingBox], threshold: f32, max: usize) -> Vec<BoundingBox> {
        let mut sorted: Vec<BoundingBox> = boxes.iter().filter(|b| b.score >= threshold).cloned().collect();
        sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        // a box survives if no surviving higher-scored box overlaps it by > 0.9
        let mut out: Vec<BoundingBox> = Vec::new();
        for b in &sorted {
            let mut dup = false;
            for k in &out {
                let inter = (b.x_min.max(k.x_min)..b.x_max.min(k.x_max)).count()
                    * (b.y_min.max(k.y_min)..b.y_max.min(k.y_max)).count();
                let union = (b.area() + k.area()) as usize - inter;
                if inter as f64 / union as f64 > 0.9 {
                    dup = true;
                }
            }
            if !dup {
                out.push(b.clone());
            }
        }
        out.truncate(max);
        out
    }

    #[test]
    fn twelve_detections_dedup_and_cap() {
        let mut boxes: Vec<BoundingBox> = (0..10).map(|i| bx(i * 3, 0, i * 3 + 2, 10, 0.9 - i as f32 * 0.05)).collect();
        boxes.push(bx(0, 0, 2, 10, 0.5));
        boxes.push(bx(3, 0, 5, 10, 0.2));
        let kept = filter_candidates(boxes.clone(), 0.15, MAX_CANDIDATES);
        assert_eq!(kept.len(), 8);
        assert_eq!(kept, brute_dedup(&boxes, 0.15, MAX_CANDIDATES));
        assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn empty_detection_halves_once_then_reports_absent() {
        let frame = clip(1).frames()[0].clone();
        let detector = ScriptedGrounding::new(Script::sequence(vec![vec![], vec![bx(0, 0, 5, 5, 0.1)]]));
        let mut c = ctx();
        let set = generate_candidates(&mut c, &frame, &reference(), &detector, Thresholds::RVOS, 8).unwrap();
        assert_eq!(set.thresholds, Thresholds::RVOS.halved());
        assert_eq!(set.boxes.len(), 1);
        assert_eq!(c.flags, [RunFlag::ThresholdsHalved { clip: 0 }]);

        let detector = ScriptedGrounding::new(Script::always(vec![]));
        let mut c = ctx();
        let err = generate_candidates(&mut c, &frame, &reference(), &detector, Thresholds::AVS, 8).unwrap_err();
        assert!(matches!(err, Error::ReferentAbsent));
        assert_eq!(c.calls.grounding, 2);
    }

    fn box_setup(boxes: Vec<BoundingBox>) -> (FrameGridImage, MarkedBoxImage, PivotFrame) {
        let clip = clip(50);
        let idx = [0, 10, 20, 30, 40];
        let marked = paint_boxes(&clip.frames()[20], &boxes).unwrap();
        let grid = compose_pivot_context(&marked, &clip, &idx, FrameLabelMode::Positional).unwrap();
        let pivot = PivotFrame {
            sampled_position: 3,
            frame_index: 20,
            event_summary: "two bicycles ride by".into(),
        };
        (grid, marked, pivot)
    }

    #[test]
    fn box_answer_is_used_and_event_forwarded() {
        let (grid, marked, pivot) = box_setup(vec![bx(0, 0, 10, 10, 0.8), bx(20, 5, 35, 25, 0.6)]);
        let chat = ScriptedChat::replies(["Box 1 is a bicycle in front, box 2 one behind it.\n```json\n{\"box\": 2}\n```"]);
        let prompts = PromptSet::default();
        let mut c = ctx();
        let input = BoxContext { grid: &grid, marked: &marked, pivot: &pivot };
        let pb = select_pivot_box(&mut c, &input, &reference(), &chat, &prompts, BoxStrategy::Gpt, 3).unwrap();
        assert_eq!(pb.box_id, 2);
        assert_eq!(pb.bbox, marked.box_ids[1]);
        assert!(chat.0.requests()[0].contains("two bicycles ride by"));
    }

    #[test]
    fn adversarial_box_replies_fall_back_to_top_score() {
        let (grid, marked, pivot) = box_setup(vec![bx(0, 0, 10, 10, 0.3), bx(20, 5, 35, 25, 0.7)]);
        let prompts = PromptSet::default();
        let input = BoxContext { grid: &grid, marked: &marked, pivot: &pivot };
        for replies in [
            vec!["the one on the left"; 3],
            vec!["{\"box\": 5}"; 3],
            vec![""; 3],
            vec!["{\"box\": 0}", "box", "{\"box\": \"x\"}"],
        ] {
            let chat = ScriptedChat::replies(replies);
            let mut c = ctx();
            let pb = select_pivot_box(&mut c, &input, &reference(), &chat, &prompts, BoxStrategy::Gpt, 3).unwrap();
            assert_eq!(pb.box_id, 2);
            assert_eq!(c.calls.chat, 3);
            assert_eq!(c.flags, [RunFlag::PivotBoxFallback { clip: 0 }]);
        }
    }

    #[test]
    fn single_candidate_and_topscore_skip_the_model() {
        let prompts = PromptSet::default();
        let chat = ScriptedChat::replies(Vec::<String>::new());
        let (grid, marked, pivot) = box_setup(vec![bx(0, 0, 10, 10, 0.3)]);
        let mut c = ctx();
        let input = BoxContext { grid: &grid, marked: &marked, pivot: &pivot };
        assert_eq!(select_pivot_box(&mut c, &input, &reference(), &chat, &prompts, BoxStrategy::Gpt, 3).unwrap().box_id, 1);

        let (grid, marked, pivot) = box_setup(vec![bx(0, 0, 10, 10, 0.3), bx(20, 5, 35, 25, 0.7), bx(1, 1, 3, 3, 0.7)]);
        let input = BoxContext { grid: &grid, marked: &marked, pivot: &pivot };
        let pb = select_pivot_box(&mut c, &input, &reference(), &chat, &prompts, BoxStrategy::TopScore, 3).unwrap();
        assert_eq!(pb.box_id, 2);
        assert_eq!(c.calls.chat, 0);
    }

    #[test]
    fn variants_use_their_templates() {
        let (grid, marked, pivot) = box_setup(vec![bx(0, 0, 10, 10, 0.3), bx(20, 5, 35, 25, 0.7)]);
        let prompts = PromptSet::default();
        let input = BoxContext { grid: &grid, marked: &marked, pivot: &pivot };
        for (strategy, name) in [
            (BoxStrategy::NoDescription, "pivot_box_direct"),
            (BoxStrategy::Describe, "pivot_box_describe"),
            (BoxStrategy::Syntax, "pivot_box_avs"),
        ] {
            let chat = ScriptedChat::replies(["{\"box\": 1}"]);
            let mut c = ctx();
            select_pivot_box(&mut c, &input, &reference(), &chat, &prompts, strategy, 3).unwrap();
            assert!(matches!(&c.audit[0].event, AuditEvent::Chat { template, .. } if template == name));
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in ["gpt", "first", "middle", "last"] {
            assert_eq!(s.parse::<FrameStrategy>().unwrap().to_string(), s);
        }
        for s in ["gpt", "topscore", "nodesc", "describe", "syntax"] {
            assert_eq!(s.parse::<BoxStrategy>().unwrap().to_string(), s);
        }
        assert!("best".parse::<FrameStrategy>().is_err());
    }
}
