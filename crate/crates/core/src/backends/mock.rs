//! Deterministic in-process backends for tests, dry runs and fixtures.
//!
//! [`Script`] answers requests from a [`ScriptedScenario`]: a list of steps,
//! each pairing a request matcher with a canned response. Strict scenarios
//! consume steps in call order and fail on any request that does not match
//! the next step; lenient ones answer with the first matching step anywhere
//! in the list.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use image::RgbImage;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    AudioTaggerBackend, BackendError, BackendResult, ChatVisionBackend, CrossModalEmbedderBackend,
    GroundingBackend, ScoredLabel, SessionHandle, SoundEventBackend, VideoSegmenterBackend,
};
use crate::audio_seg::AudioClip;
use crate::symbolic::{hex_digest, raster_hash};
use crate::types::{BinaryMask, BoundingBox, VideoClip};

const MOCK_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestMatch {
    #[default]
    Any,
    /// The 0-based call number.
    Ordinal(usize),
    /// Exact request fingerprint, see [`fingerprint`].
    Fingerprint(String),
    /// Substring of the request text.
    Contains(String),
}

impl RequestMatch {
    fn matches(&self, ordinal: usize, fp: &str, text: &str) -> bool {
        match self {
            RequestMatch::Any => true,
            RequestMatch::Ordinal(n) => *n == ordinal,
            RequestMatch::Fingerprint(f) => f == fp,
            RequestMatch::Contains(s) => text.contains(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedResponse<R> {
    Ok(R),
    Timeout,
    Fail(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep<R> {
    #[serde(default)]
    pub when: RequestMatch,
    pub respond: ScriptedResponse<R>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedScenario<R> {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "Vec::new")]
    pub steps: Vec<ScriptStep<R>>,
    /// Lenient scenarios answer unmatched requests with this, if set.
    #[serde(default = "none")]
    pub fallback: Option<ScriptedResponse<R>>,
}

fn none<T>() -> Option<T> {
    None
}

/// SHA-256 over the request text and the content hashes of its images.
pub fn fingerprint(text: &str, images: &[&RgbImage]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    for img in images {
        hasher.update(raster_hash(img).as_bytes());
    }
    hex_digest(hasher)
}

#[derive(Debug, Default)]
struct ScriptState {
    calls: usize,
    log: Vec<String>,
}

/// Runtime for a [`ScriptedScenario`].
#[derive(Debug)]
pub struct Script<R> {
    scenario: ScriptedScenario<R>,
    state: Mutex<ScriptState>,
}

impl<R: Clone> Script<R> {
    pub fn new(scenario: ScriptedScenario<R>) -> Self {
        Script {
            scenario,
            state: Mutex::new(ScriptState::default()),
        }
    }

    /// Answers every request with `value`.
    pub fn always(value: R) -> Self {
        Self::new(ScriptedScenario {
            name: "always".into(),
            strict: false,
            steps: vec![],
            fallback: Some(ScriptedResponse::Ok(value)),
        })
    }

    /// Answers the i-th request with `values[i]`; further requests fail.
    pub fn sequence(values: Vec<R>) -> Self {
        Self::new(ScriptedScenario {
            name: "sequence".into(),
            strict: true,
            steps: values
                .into_iter()
                .enumerate()
                .map(|(i, v)| ScriptStep {
                    when: RequestMatch::Ordinal(i),
                    respond: ScriptedResponse::Ok(v),
                })
                .collect(),
            fallback: None,
        })
    }

    pub fn failing(message: &str) -> Self {
        Self::new(ScriptedScenario {
            name: "failing".into(),
            strict: false,
            steps: vec![],
            fallback: Some(ScriptedResponse::Fail(message.to_string())),
        })
    }

    pub fn call_count(&self) -> usize {
        self.state.lock().expect("script state poisoned").calls
    }

    /// Request texts seen so far, in call order.
    pub fn requests(&self) -> Vec<String> {
        self.state.lock().expect("script state poisoned").log.clone()
    }

    pub fn respond(&self, fp: &str, text: &str) -> BackendResult<R> {
        let ordinal = {
            let mut state = self.state.lock().expect("script state poisoned");
            let n = state.calls;
            state.calls += 1;
            state.log.push(text.to_string());
            n
        };
        let sc = &self.scenario;
        let response = if sc.strict {
            let step = sc.steps.get(ordinal).ok_or_else(|| {
                BackendError::Scenario(format!(
                    "{}: unexpected request #{ordinal}, scenario has {} steps",
                    sc.name,
                    sc.steps.len()
                ))
            })?;
            if !step.when.matches(ordinal, fp, text) {
                return Err(BackendError::Scenario(format!(
                    "{}: request #{ordinal} does not match expected {:?}",
                    sc.name, step.when
                )));
            }
            &step.respond
        } else {
            sc.steps
                .iter()
                .find(|s| s.when.matches(ordinal, fp, text))
                .map(|s| &s.respond)
                .or(sc.fallback.as_ref())
                .ok_or_else(|| {
                    BackendError::Scenario(format!("{}: no step matches request #{ordinal}", sc.name))
                })?
        };
        match response {
            ScriptedResponse::Ok(v) => Ok(v.clone()),
            ScriptedResponse::Timeout => Err(BackendError::Timeout(MOCK_TIMEOUT)),
            ScriptedResponse::Fail(msg) => Err(BackendError::Server {
                status: 500,
                kind: "mock_failure".into(),
                message: msg.clone(),
            }),
        }
    }
}

#[derive(Debug)]
pub struct ScriptedChat(pub Script<String>);

impl ScriptedChat {
    pub fn new(script: Script<String>) -> Self {
        ScriptedChat(script)
    }

    pub fn replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        ScriptedChat(Script::sequence(replies.into_iter().map(Into::into).collect()))
    }
}

impl ChatVisionBackend for ScriptedChat {
    fn chat(&self, images: &[&RgbImage], text: &str) -> BackendResult<String> {
        self.0.respond(&fingerprint(text, images), text)
    }
}

#[derive(Debug)]
pub struct ScriptedGrounding(pub Script<Vec<BoundingBox>>);

impl ScriptedGrounding {
    pub fn new(script: Script<Vec<BoundingBox>>) -> Self {
        ScriptedGrounding(script)
    }
}

impl GroundingBackend for ScriptedGrounding {
    fn ground(&self, image: &RgbImage, phrase: &str, _text: f32, _box: f32) -> BackendResult<Vec<BoundingBox>> {
        self.0.respond(&fingerprint(phrase, &[image]), phrase)
    }
}

#[derive(Debug)]
pub struct ScriptedTagger(pub Script<Vec<ScoredLabel>>);

impl ScriptedTagger {
    pub fn new(script: Script<Vec<ScoredLabel>>) -> Self {
        ScriptedTagger(script)
    }
}

impl AudioTaggerBackend for ScriptedTagger {
    fn tag(&self, audio: &AudioClip) -> BackendResult<Vec<ScoredLabel>> {
        self.0.respond(&audio_fingerprint(audio), "")
    }
}

#[derive(Debug)]
pub struct ScriptedEmbedder {
    pub audio: Script<Vec<f32>>,
    pub text: Script<Vec<f32>>,
}

impl ScriptedEmbedder {
    pub fn new(audio: Script<Vec<f32>>, text: Script<Vec<f32>>) -> Self {
        ScriptedEmbedder { audio, text }
    }
}

impl CrossModalEmbedderBackend for ScriptedEmbedder {
    fn embed_audio(&self, audio: &AudioClip) -> BackendResult<Vec<f32>> {
        self.audio.respond(&audio_fingerprint(audio), &format!("{:.3}", audio.offset_secs()))
    }

    fn embed_text(&self, text: &str) -> BackendResult<Vec<f32>> {
        self.text.respond(&fingerprint(text, &[]), text)
    }
}

#[derive(Debug)]
pub struct ScriptedSed(pub Script<Vec<f64>>);

impl ScriptedSed {
    pub fn new(script: Script<Vec<f64>>) -> Self {
        ScriptedSed(script)
    }
}

impl SoundEventBackend for ScriptedSed {
    fn boundaries(&self, audio: &AudioClip) -> BackendResult<Vec<f64>> {
        self.0.respond(&audio_fingerprint(audio), "")
    }
}

/// Embeds text as a bag of known words and audio by a lookup on segment
/// offset. Lets fixtures state "this segment sounds like dog" directly.
#[derive(Debug, Clone)]
pub struct VocabularyEmbedder {
    vocabulary: Vec<String>,
    /// `(offset_secs, words)` sorted by offset; a clip takes the last entry at or before its offset.
    audio_words: Vec<(f64, Vec<String>)>,
}

impl VocabularyEmbedder {
    pub fn new(vocabulary: Vec<String>, mut audio_words: Vec<(f64, Vec<String>)>) -> Self {
        audio_words.sort_by(|a, b| a.0.total_cmp(&b.0));
        VocabularyEmbedder {
            vocabulary,
            audio_words,
        }
    }

    fn encode<'a>(&self, words: impl Iterator<Item = &'a str>) -> Vec<f32> {
        let mut v = vec![0.0; self.vocabulary.len()];
        for w in words {
            if let Some(i) = self.vocabulary.iter().position(|x| x == w) {
                v[i] = 1.0;
            }
        }
        v
    }
}

impl CrossModalEmbedderBackend for VocabularyEmbedder {
    fn embed_audio(&self, audio: &AudioClip) -> BackendResult<Vec<f32>> {
        let offset = audio.offset_secs() + 1e-9;
        let words = self
            .audio_words
            .iter()
            .rev()
            .find(|(t, _)| *t <= offset)
            .map(|(_, w)| w.as_slice())
            .unwrap_or(&[]);
        Ok(self.encode(words.iter().map(String::as_str)))
    }

    fn embed_text(&self, text: &str) -> BackendResult<Vec<f32>> {
        Ok(self.encode(text.split(" and ")))
    }
}

fn audio_fingerprint(audio: &AudioClip) -> String {
    let mut hasher = Sha256::new();
    hasher.update(audio.sample_rate().to_le_bytes());
    for s in audio.samples() {
        hasher.update(s.to_le_bytes());
    }
    hex_digest(hasher)
}

#[derive(Debug)]
struct BoxFillSession {
    frames: usize,
    width: u32,
    height: u32,
    prompts: Vec<(usize, BoundingBox)>,
}

/// Segmenter stand-in: every frame receives the box fill of the nearest
/// prompted frame (earlier frame on ties).
#[derive(Debug, Default)]
pub struct BoxFillSegmenter {
    sessions: Mutex<HashMap<String, BoxFillSession>>,
    next_id: Mutex<u64>,
}

impl BoxFillSegmenter {
    pub fn new() -> Self {
        Self::default()
    }
}

impl VideoSegmenterBackend for BoxFillSegmenter {
    fn open(&self, clip: &VideoClip) -> BackendResult<SessionHandle> {
        let mut next = self.next_id.lock().expect("poisoned");
        let id = format!("{}#{}", clip.id(), *next);
        *next += 1;
        self.sessions.lock().expect("poisoned").insert(
            id.clone(),
            BoxFillSession {
                frames: clip.len(),
                width: clip.width(),
                height: clip.height(),
                prompts: vec![],
            },
        );
        Ok(SessionHandle(id))
    }

    fn add_prompt(&self, session: &SessionHandle, frame_index: usize, bbox: &BoundingBox) -> BackendResult<()> {
        let mut sessions = self.sessions.lock().expect("poisoned");
        let s = sessions
            .get_mut(&session.0)
            .ok_or_else(|| BackendError::Protocol(format!("unknown session {}", session.0)))?;
        if frame_index >= s.frames {
            return Err(BackendError::Protocol(format!("prompt frame {frame_index} out of range")));
        }
        s.prompts.push((frame_index, bbox.clone()));
        Ok(())
    }

    fn propagate(&self, session: &SessionHandle, start_frame: usize) -> BackendResult<Vec<BinaryMask>> {
        let s = self
            .sessions
            .lock()
            .expect("poisoned")
            .remove(&session.0)
            .ok_or_else(|| BackendError::Protocol(format!("unknown session {}", session.0)))?;
        if start_frame >= s.frames {
            return Err(BackendError::Protocol(format!("start frame {start_frame} out of range")));
        }
        if s.prompts.is_empty() {
            return Err(BackendError::Protocol("propagation without prompts".into()));
        }
        Ok((0..s.frames)
            .map(|f| {
                let (_, bbox) = s
                    .prompts
                    .iter()
                    .min_by_key(|(p, _)| (p.abs_diff(f), *p))
                    .expect("non-empty prompts");
                BinaryMask::from_box(s.height, s.width, bbox)
            })
            .collect())
    }
}

/// Backends that know the ground truth of one video: the chat model picks
/// the sampled frame with the largest true mask, the detector returns the
/// true box, and the segmenter returns the true masks.
#[derive(Debug)]
pub struct GroundTruthOracle {
    frame_by_hash: HashMap<String, usize>,
    truth: Vec<BinaryMask>,
    categories: Vec<String>,
    frame_map: Regex,
}

impl GroundTruthOracle {
    pub fn new(clip: &VideoClip, truth: Vec<BinaryMask>, categories: Vec<String>) -> Self {
        let frame_by_hash = clip
            .frames()
            .iter()
            .map(|f| (raster_hash(&f.pixels), f.index))
            .collect();
        GroundTruthOracle {
            frame_by_hash,
            truth,
            categories,
            frame_map: Regex::new(r"(\d+) = video frame (\d+)").expect("valid regex"),
        }
    }

    fn area(&self, frame: usize) -> u64 {
        self.truth.get(frame).map_or(0, BinaryMask::area)
    }
}

impl ChatVisionBackend for GroundTruthOracle {
    fn chat(&self, _images: &[&RgbImage], text: &str) -> BackendResult<String> {
        if text.contains("\"box\"") {
            // the oracle detector emits a single box, so this is only reached
            // when another detector is paired with the oracle chat
            Ok("```json\n{\"box\": 1}\n```".into())
        } else if text.contains("\"frame\"") {
            let best = self
                .frame_map
                .captures_iter(text)
                .filter_map(|c| Some((c[1].parse::<usize>().ok()?, c[2].parse::<usize>().ok()?)))
                .fold(None::<(usize, u64)>, |best, (id, frame)| {
                    let area = self.area(frame);
                    match best {
                        Some((_, a)) if a >= area => best,
                        _ => Some((id, area)),
                    }
                })
                .map_or(1, |(id, _)| id);
            Ok(format!(
                "The referent is visible throughout.\n```json\n{{\"frame\": {best}}}\n```"
            ))
        } else {
            Ok(format!("```json\n{}\n```", serde_json::to_string(&self.categories).expect("strings")))
        }
    }
}

impl GroundingBackend for GroundTruthOracle {
    fn ground(&self, image: &RgbImage, phrase: &str, _t: f32, _b: f32) -> BackendResult<Vec<BoundingBox>> {
        let frame = self
            .frame_by_hash
            .get(&raster_hash(image))
            .ok_or_else(|| BackendError::Scenario("oracle asked to ground an unknown frame".into()))?;
        Ok(self.truth[*frame]
            .bounding_box()
            .map(|b| b.with_label(phrase))
            .into_iter()
            .collect())
    }
}

impl VideoSegmenterBackend for GroundTruthOracle {
    fn open(&self, clip: &VideoClip) -> BackendResult<SessionHandle> {
        if clip.len() != self.truth.len() {
            return Err(BackendError::Scenario("oracle opened on a different video".into()));
        }
        Ok(SessionHandle(clip.id().to_string()))
    }

    fn add_prompt(&self, _s: &SessionHandle, _f: usize, _b: &BoundingBox) -> BackendResult<()> {
        Ok(())
    }

    fn propagate(&self, _s: &SessionHandle, _start: usize) -> BackendResult<Vec<BinaryMask>> {
        Ok(self.truth.clone())
    }
}

impl AudioTaggerBackend for GroundTruthOracle {
    fn tag(&self, _audio: &AudioClip) -> BackendResult<Vec<ScoredLabel>> {
        Ok(self
            .categories
            .iter()
            .enumerate()
            .map(|(i, c)| ScoredLabel::new(c.clone(), 0.9 - 0.1 * i as f32))
            .collect())
    }
}

impl CrossModalEmbedderBackend for GroundTruthOracle {
    fn embed_audio(&self, _audio: &AudioClip) -> BackendResult<Vec<f32>> {
        Ok(vec![1.0; self.categories.len().max(1)])
    }

    fn embed_text(&self, text: &str) -> BackendResult<Vec<f32>> {
        let parts: Vec<&str> = text.split(" and ").collect();
        let mut v: Vec<f32> = self
            .categories
            .iter()
            .map(|c| f32::from(u8::from(parts.contains(&c.as_str()))))
            .collect();
        if v.is_empty() {
            v.push(1.0);
        }
        Ok(v)
    }
}

impl SoundEventBackend for GroundTruthOracle {
    fn boundaries(&self, _audio: &AudioClip) -> BackendResult<Vec<f64>> {
        Ok(vec![])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Fps;

    #[test]
    fn scripted_chat_round_trips() {
        let chat = ScriptedChat::replies(["first", "second"]);
        assert_eq!(chat.chat(&[], "a").unwrap(), "first");
        assert_eq!(chat.chat(&[], "b").unwrap(), "second");
        assert!(matches!(chat.chat(&[], "c"), Err(BackendError::Scenario(_))));
        assert_eq!(chat.0.call_count(), 3);
        assert_eq!(chat.0.requests(), ["a", "b", "c"]);
    }

    #[test]
    fn strict_ordinal_mismatch() {
        let scenario = ScriptedScenario {
            name: "s".into(),
            strict: true,
            steps: vec![
                ScriptStep {
                    when: RequestMatch::Contains("frame".into()),
                    respond: ScriptedResponse::Ok("ok".to_string()),
                },
                ScriptStep {
                    when: RequestMatch::Ordinal(5),
                    respond: ScriptedResponse::Ok("never".to_string()),
                },
            ],
            fallback: None,
        };
        let chat = ScriptedChat::new(Script::new(scenario.clone()));
        assert_eq!(chat.chat(&[], "pick a frame").unwrap(), "ok");
        assert!(matches!(chat.chat(&[], "x"), Err(BackendError::Scenario(_))));
        let chat = ScriptedChat::new(Script::new(scenario));
        assert!(matches!(chat.chat(&[], "pick a box"), Err(BackendError::Scenario(_))));
    }

    #[test]
    fn timeout_and_fingerprint_matching() {
        let img = RgbImage::new(2, 2);
        let fp = fingerprint("hello", &[&img]);
        let scenario = ScriptedScenario {
            name: "fp".into(),
            strict: false,
            steps: vec![
                ScriptStep {
                    when: RequestMatch::Fingerprint(fp),
                    respond: ScriptedResponse::Ok("matched".to_string()),
                },
                ScriptStep {
                    when: RequestMatch::Contains("slow".into()),
                    respond: ScriptedResponse::Timeout,
                },
            ],
            fallback: None,
        };
        let chat = ScriptedChat::new(Script::new(scenario));
        assert_eq!(chat.chat(&[&img], "hello").unwrap(), "matched");
        assert!(matches!(chat.chat(&[], "hello"), Err(BackendError::Scenario(_))));
        assert!(matches!(chat.chat(&[], "slow one"), Err(BackendError::Timeout(_))));
    }

    #[test]
    fn scenario_json_shape() {
        let json = r#"{"name":"x","strict":true,"steps":[
            {"when":{"contains":"frame"},"respond":{"ok":"```json\n{\"frame\": 2}\n```"}},
            {"respond":"timeout"},
            {"when":{"ordinal":2},"respond":{"fail":"boom"}}]}"#;
        let sc: ScriptedScenario<String> = serde_json::from_str(json).unwrap();
        assert!(sc.strict);
        assert_eq!(sc.steps.len(), 3);
        assert_eq!(sc.steps[1].when, RequestMatch::Any);
        assert_eq!(sc.steps[1].respond, ScriptedResponse::Timeout);
    }

    #[test]
    fn box_fill_uses_nearest_prompt() {
        let clip = VideoClip::from_rasters("v", Fps::default(), (0..6).map(|_| RgbImage::new(8, 8))).unwrap();
        let seg = BoxFillSegmenter::new();
        let a = BoundingBox::new(0, 0, 2, 2, 0.9);
        let b = BoundingBox::new(4, 4, 8, 8, 0.9);
        let masks = crate::backends::segment_video(&seg, &clip, &[(1, a.clone()), (4, b.clone())], 1).unwrap();
        let areas: Vec<u64> = masks.iter().map(BinaryMask::area).collect();
        assert_eq!(areas, [4, 4, 4, 16, 16, 16]);
        assert!(seg.propagate(&SessionHandle("v#0".into()), 0).is_err());
    }

    #[test]
    fn oracle_grounds_known_frames_only() {
        let clip = VideoClip::from_rasters(
            "v",
            Fps::default(),
            (0..3u8).map(|i| RgbImage::from_pixel(6, 6, image::Rgb([i, 0, 0]))),
        )
        .unwrap();
        let truth: Vec<BinaryMask> = (0..3)
            .map(|i| BinaryMask::from_fn(6, 6, |x, _| x < i))
            .collect();
        let oracle = GroundTruthOracle::new(&clip, truth, vec![]);
        assert!(oracle.ground(&clip.frame(0).unwrap().pixels, "p", 0.2, 0.2).unwrap().is_empty());
        let boxes = oracle.ground(&clip.frame(2).unwrap().pixels, "p", 0.2, 0.2).unwrap();
        assert_eq!((boxes[0].x_min, boxes[0].x_max, boxes[0].y_max), (0, 2, 6));
        assert!(oracle.ground(&RgbImage::from_pixel(6, 6, image::Rgb([9, 9, 9])), "p", 0.2, 0.2).is_err());
        let reply = oracle
            .chat(&[], "Answer {\"frame\": <ID>}\n1 = video frame 0, 2 = video frame 2, 3 = video frame 1")
            .unwrap();
        assert!(reply.contains("{\"frame\": 2}"));
    }
}
