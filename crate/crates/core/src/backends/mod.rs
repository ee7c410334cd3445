//! Interfaces to the external models, plus the validation every response
//! passes through before domain code sees it.
//!
//! Six roles exist: chat-vision reasoning, open-vocabulary grounding, video
//! segmentation with propagation, audio tagging, cross-modal embedding and
//! sound-event boundary detection. Each has a mock implementation in
//! [`mock`] and an HTTP implementation in [`http`].

pub mod factory;
pub mod http;
pub mod local;
pub mod mock;
pub mod protocol;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::audio_seg::AudioClip;
use crate::types::{BinaryMask, BoundingBox, VideoClip};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("server error {status} ({kind}): {message}")]
    Server {
        status: u16,
        kind: String,
        message: String,
    },
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("backend not configured: {0}")]
    Missing(BackendKind),
}

pub type BackendResult<T> = Result<T, BackendError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    ChatVision,
    Grounding,
    VideoSegmenter,
    AudioTagger,
    CrossModalEmbedder,
    SoundEvent,
}

impl BackendKind {
    pub const ALL: [BackendKind; 6] = [
        BackendKind::ChatVision,
        BackendKind::Grounding,
        BackendKind::VideoSegmenter,
        BackendKind::AudioTagger,
        BackendKind::CrossModalEmbedder,
        BackendKind::SoundEvent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::ChatVision => "chat_vision",
            BackendKind::Grounding => "grounding",
            BackendKind::VideoSegmenter => "video_segmenter",
            BackendKind::AudioTagger => "audio_tagger",
            BackendKind::CrossModalEmbedder => "cross_modal_embedder",
            BackendKind::SoundEvent => "sound_event",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a backend lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Http(String),
    Mock(String),
    Local(String),
}

impl Endpoint {
    pub fn parse(raw: &str) -> Result<Self, String> {
        let raw = raw.trim();
        if raw.starts_with("http://") || raw.starts_with("https://") {
            Ok(Endpoint::Http(raw.trim_end_matches('/').to_string()))
        } else if let Some(rest) = raw.strip_prefix("mock:") {
            if rest.is_empty() {
                return Err("mock endpoint needs a scenario name".into());
            }
            Ok(Endpoint::Mock(rest.to_string()))
        } else if let Some(rest) = raw.strip_prefix("local:") {
            Ok(Endpoint::Local(rest.to_string()))
        } else {
            Err(format!("unsupported endpoint {raw:?} (expected http(s)://, mock: or local:)"))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Http(url) => f.write_str(url),
            Endpoint::Mock(s) => write!(f, "mock:{s}"),
            Endpoint::Local(s) => write!(f, "local:{s}"),
        }
    }
}

/// One configured backend.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub endpoint: Endpoint,
    pub timeout: Duration,
    /// Extra attempts after a transport failure.
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub label: String,
    pub score: f32,
}

impl ScoredLabel {
    pub fn new(label: impl Into<String>, score: f32) -> Self {
        ScoredLabel {
            label: label.into(),
            score,
        }
    }
}

/// Opaque segmenter session handle.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SessionHandle(pub String);

pub trait ChatVisionBackend: Send + Sync {
    /// Sends images plus a text prompt and returns the reply verbatim.
    fn chat(&self, images: &[&RgbImage], text: &str) -> BackendResult<String>;
}

pub trait GroundingBackend: Send + Sync {
    fn ground(
        &self,
        image: &RgbImage,
        phrase: &str,
        text_threshold: f32,
        box_threshold: f32,
    ) -> BackendResult<Vec<BoundingBox>>;
}

pub trait VideoSegmenterBackend: Send + Sync {
    fn open(&self, clip: &VideoClip) -> BackendResult<SessionHandle>;
    fn add_prompt(&self, session: &SessionHandle, frame_index: usize, bbox: &BoundingBox) -> BackendResult<()>;
    /// Propagates from `start_frame` in both directions; one mask per frame.
    fn propagate(&self, session: &SessionHandle, start_frame: usize) -> BackendResult<Vec<BinaryMask>>;
}

pub trait AudioTaggerBackend: Send + Sync {
    fn tag(&self, audio: &AudioClip) -> BackendResult<Vec<ScoredLabel>>;
}

pub trait CrossModalEmbedderBackend: Send + Sync {
    fn embed_audio(&self, audio: &AudioClip) -> BackendResult<Vec<f32>>;
    fn embed_text(&self, text: &str) -> BackendResult<Vec<f32>>;
}

pub trait SoundEventBackend: Send + Sync {
    /// Change points in seconds from the clip start.
    fn boundaries(&self, audio: &AudioClip) -> BackendResult<Vec<f64>>;
}

/// The set of backends one pipeline run talks to.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatVisionBackend>,
    pub grounding: Arc<dyn GroundingBackend>,
    pub segmenter: Arc<dyn VideoSegmenterBackend>,
    pub audio_tagger: Option<Arc<dyn AudioTaggerBackend>>,
    pub embedder: Option<Arc<dyn CrossModalEmbedderBackend>>,
    pub sound_events: Option<Arc<dyn SoundEventBackend>>,
}

impl Backends {
    pub fn new(
        chat: Arc<dyn ChatVisionBackend>,
        grounding: Arc<dyn GroundingBackend>,
        segmenter: Arc<dyn VideoSegmenterBackend>,
    ) -> Self {
        Backends {
            chat,
            grounding,
            segmenter,
            audio_tagger: None,
            embedder: None,
            sound_events: None,
        }
    }

    pub fn with_audio(
        mut self,
        tagger: Arc<dyn AudioTaggerBackend>,
        embedder: Arc<dyn CrossModalEmbedderBackend>,
        sound_events: Arc<dyn SoundEventBackend>,
    ) -> Self {
        self.audio_tagger = Some(tagger);
        self.embedder = Some(embedder);
        self.sound_events = Some(sound_events);
        self
    }

    pub fn tagger(&self) -> BackendResult<&dyn AudioTaggerBackend> {
        self.audio_tagger
            .as_deref()
            .ok_or(BackendError::Missing(BackendKind::AudioTagger))
    }

    pub fn embedder(&self) -> BackendResult<&dyn CrossModalEmbedderBackend> {
        self.embedder
            .as_deref()
            .ok_or(BackendError::Missing(BackendKind::CrossModalEmbedder))
    }

    pub fn sound_events(&self) -> BackendResult<&dyn SoundEventBackend> {
        self.sound_events
            .as_deref()
            .ok_or(BackendError::Missing(BackendKind::SoundEvent))
    }
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("audio", &self.audio_tagger.is_some())
            .finish_non_exhaustive()
    }
}

// Response validation. Domain modules only call backends through these.

pub fn ground_checked(
    backend: &dyn GroundingBackend,
    image: &RgbImage,
    phrase: &str,
    text_threshold: f32,
    box_threshold: f32,
) -> BackendResult<Vec<BoundingBox>> {
    let boxes = backend.ground(image, phrase, text_threshold, box_threshold)?;
    for b in &boxes {
        b.validate(image.width(), image.height())
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
    }
    Ok(boxes)
}

/// Opens a session, registers every prompt, then propagates from `start_frame`.
pub fn segment_video(
    backend: &dyn VideoSegmenterBackend,
    clip: &VideoClip,
    prompts: &[(usize, BoundingBox)],
    start_frame: usize,
) -> BackendResult<Vec<BinaryMask>> {
    let session = backend.open(clip)?;
    for (frame, bbox) in prompts {
        backend.add_prompt(&session, *frame, bbox)?;
    }
    let masks = backend.propagate(&session, start_frame)?;
    if masks.len() != clip.len() {
        return Err(BackendError::Protocol(format!(
            "segmenter returned {} masks for a {}-frame video",
            masks.len(),
            clip.len()
        )));
    }
    let dims = (clip.width(), clip.height());
    if let Some(bad) = masks.iter().position(|m| m.dims() != dims) {
        return Err(BackendError::Protocol(format!(
            "mask {bad} is {:?}, video is {dims:?}",
            masks[bad].dims()
        )));
    }
    Ok(masks)
}

pub fn tag_checked(backend: &dyn AudioTaggerBackend, audio: &AudioClip) -> BackendResult<Vec<ScoredLabel>> {
    let labels = backend.tag(audio)?;
    for l in &labels {
        if !l.score.is_finite() || !(0.0..=1.0).contains(&l.score) {
            return Err(BackendError::Protocol(format!("label {:?} has score {}", l.label, l.score)));
        }
        if l.label.trim().is_empty() {
            return Err(BackendError::Protocol("empty audio label".into()));
        }
    }
    Ok(labels)
}

pub(crate) fn check_embedding(values: Vec<f32>) -> BackendResult<Vec<f32>> {
    if values.is_empty() {
        return Err(BackendError::Protocol("empty embedding".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(BackendError::Protocol("non-finite embedding entry".into()));
    }
    Ok(values)
}

pub fn boundaries_checked(backend: &dyn SoundEventBackend, audio: &AudioClip) -> BackendResult<Vec<f64>> {
    let times = backend.boundaries(audio)?;
    if times.iter().any(|t| !t.is_finite()) {
        return Err(BackendError::Protocol("non-finite boundary time".into()));
    }
    Ok(times)
}
