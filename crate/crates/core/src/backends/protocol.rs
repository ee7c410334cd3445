//! Wire types for the model-server protocol (`alref-proto: 1`).
//!
//! All bodies are JSON. Images travel as base64 PNG, audio as base64
//! little-endian `f32` PCM, and masks as row-major run-length counts that
//! start with a background run. The chat endpoint uses the OpenAI
//! chat-completions request and response shape. See `docs/protocol.md`.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendResult, ScoredLabel};
use crate::audio_seg::AudioClip;
use crate::symbolic::{decode_png, encode_png};
use crate::types::{BinaryMask, BoundingBox};

pub const VERSION_HEADER: &str = "alref-proto";
pub const VERSION: &str = "1";

pub const CHAT_PATH: &str = "/v1/chat";
pub const GROUND_PATH: &str = "/v1/ground";
pub const SEGMENT_OPEN_PATH: &str = "/v1/segment/open";
pub const SEGMENT_PROMPT_PATH: &str = "/v1/segment/prompt";
pub const SEGMENT_PROPAGATE_PATH: &str = "/v1/segment/propagate";
pub const AUDIO_TAG_PATH: &str = "/v1/audio/tag";
pub const EMBED_AUDIO_PATH: &str = "/v1/embed/audio";
pub const EMBED_TEXT_PATH: &str = "/v1/embed/text";
pub const SED_PATH: &str = "/v1/sed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatCompletionRequest {
    pub model: String,
    pub temperature: f32,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatCompletionResponse {
    pub choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub message: AssistantMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantMessage {
    #[serde(default)]
    pub role: Option<String>,
    #[serde(default)]
    pub content: Option<String>,
}

impl ChatCompletionRequest {
    pub fn new(model: &str, images: &[&RgbImage], text: &str) -> BackendResult<Self> {
        let mut content = vec![ContentPart::Text {
            text: text.to_string(),
        }];
        for img in images {
            content.push(ContentPart::ImageUrl {
                image_url: ImageUrl {
                    url: format!("data:image/png;base64,{}", encode_image(img)?),
                },
            });
        }
        Ok(ChatCompletionRequest {
            model: model.to_string(),
            temperature: 0.0,
            messages: vec![ChatMessage {
                role: "user".into(),
                content,
            }],
        })
    }

    /// The text and decoded images of the first user message.
    pub fn decode(&self) -> BackendResult<(String, Vec<RgbImage>)> {
        let msg = self
            .messages
            .iter()
            .find(|m| m.role == "user")
            .ok_or_else(|| BackendError::Protocol("chat request without a user message".into()))?;
        let mut text = String::new();
        let mut images = Vec::new();
        for part in &msg.content {
            match part {
                ContentPart::Text { text: t } => text.push_str(t),
                ContentPart::ImageUrl { image_url } => {
                    let data = image_url
                        .url
                        .strip_prefix("data:image/png;base64,")
                        .ok_or_else(|| BackendError::Protocol("image is not an inline PNG".into()))?;
                    images.push(decode_image(data)?);
                }
            }
        }
        Ok((text, images))
    }
}

impl ChatCompletionResponse {
    pub fn from_text(text: impl Into<String>) -> Self {
        ChatCompletionResponse {
            choices: vec![ChatChoice {
                message: AssistantMessage {
                    role: Some("assistant".into()),
                    content: Some(text.into()),
                },
            }],
        }
    }

    pub fn into_text(self) -> BackendResult<String> {
        self.choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| BackendError::Protocol("chat response has no choices".into()))
    }
}

/// Box coordinates as sent by a detector; may be fractional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    #[serde(default)]
    pub label: String,
}

impl From<&BoundingBox> for WireBox {
    fn from(b: &BoundingBox) -> Self {
        WireBox {
            x_min: f64::from(b.x_min),
            y_min: f64::from(b.y_min),
            x_max: f64::from(b.x_max),
            y_max: f64::from(b.y_max),
            score: f64::from(b.score),
            label: b.label.clone(),
        }
    }
}

impl WireBox {
    /// Snaps outward to whole pixels and validates against the image size.
    pub fn to_box(&self, width: u32, height: u32) -> BackendResult<BoundingBox> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max, self.score];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(BackendError::Protocol("non-finite box coordinate".into()));
        }
        if self.x_min < 0.0 || self.y_min < 0.0 {
            return Err(BackendError::Protocol(format!("negative box coordinate in {self:?}")));
        }
        let b = BoundingBox {
            x_min: self.x_min.floor() as u32,
            y_min: self.y_min.floor() as u32,
            x_max: self.x_max.ceil().min(f64::from(u32::MAX)) as u32,
            y_max: self.y_max.ceil().min(f64::from(u32::MAX)) as u32,
            score: self.score as f32,
            label: self.label.clone(),
        };
        b.validate(width, height)
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundRequest {
    pub image: String,
    pub phrase: String,
    pub text_threshold: f32,
    pub box_threshold: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundResponse {
    pub boxes: Vec<WireBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentOpenRequest {
    pub video_id: String,
    pub fps_num: u32,
    pub fps_den: u32,
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentOpenResponse {
    pub session: String,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPromptRequest {
    pub session: String,
    pub frame_index: usize,
    #[serde(rename = "box")]
    pub bbox: WireBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPromptResponse {
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPropagateRequest {
    pub session: String,
    pub start_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPropagateResponse {
    pub masks: Vec<WireMask>,
}

/// Row-major run lengths, alternating background and foreground, starting
/// with a (possibly zero) background run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMask {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u64>,
}

impl From<&BinaryMask> for WireMask {
    fn from(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for &bit in mask.bits() {
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
        counts.push(run);
        WireMask {
            height: mask.height(),
            width: mask.width(),
            counts,
        }
    }
}

impl WireMask {
    pub fn to_mask(&self) -> BackendResult<BinaryMask> {
        let total = u64::from(self.height) * u64::from(self.width);
        let sum: u64 = self.counts.iter().sum();
        if sum != total {
            return Err(BackendError::Protocol(format!(
                "mask runs cover {sum} pixels, expected {total}"
            )));
        }
        let mut bits = Vec::with_capacity(total as usize);
        for (i, &run) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
        }
        BinaryMask::from_bits(self.height, self.width, bits).map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireAudio {
    pub sample_rate: u32,
    /// Offset of this clip within the source recording, seconds.
    #[serde(default)]
    pub offset: f64,
    pub samples: String,
}

impl WireAudio {
    pub fn encode(audio: &AudioClip) -> Self {
        let bytes: Vec<u8> = audio.samples().iter().flat_map(|s| s.to_le_bytes()).collect();
        WireAudio {
            sample_rate: audio.sample_rate(),
            offset: audio.offset_secs(),
            samples: B64.encode(bytes),
        }
    }

    pub fn decode(&self) -> BackendResult<AudioClip> {
        let bytes = B64
            .decode(&self.samples)
            .map_err(|e| BackendError::Protocol(format!("audio base64: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(BackendError::Protocol("audio byte length not a multiple of 4".into()));
        }
        let samples = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let clip = AudioClip::new(samples, self.sample_rate).map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(clip.with_offset(self.offset))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioRequest {
    pub audio: WireAudio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagResponse {
    pub labels: Vec<ScoredLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SedResponse {
    pub boundaries: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: String,
    pub message: String,
}

pub fn encode_image(image: &RgbImage) -> BackendResult<String> {
    let png = encode_png(image).map_err(|e| BackendError::Protocol(e.to_string()))?;
    Ok(B64.encode(png))
}

pub fn decode_image(data: &str) -> BackendResult<RgbImage> {
    let bytes = B64
        .decode(data)
        .map_err(|e| BackendError::Protocol(format!("image base64: {e}")))?;
    decode_png(&bytes).map_err(|e| BackendError::Protocol(e.to_string()))
}
