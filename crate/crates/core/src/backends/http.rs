//! Blocking HTTP client for the model-server protocol.

use std::time::Duration;

use image::RgbImage;
use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::{self as proto, *};
use super::{
    AudioTaggerBackend, BackendDescriptor, BackendError, BackendResult, ChatVisionBackend,
    CrossModalEmbedderBackend, Endpoint, GroundingBackend, ScoredLabel, SessionHandle,
    SoundEventBackend, VideoSegmenterBackend,
};
use crate::audio_seg::AudioClip;
use crate::types::{BinaryMask, BoundingBox, VideoClip};

#[derive(Debug, Clone, PartialEq)]
pub struct ChatOptions {
    pub model: String,
    /// Path appended to the endpoint for chat requests.
    pub path: String,
    pub api_key: Option<String>,
}

impl Default for ChatOptions {
    fn default() -> Self {
        ChatOptions {
            model: "gpt-4o".into(),
            path: proto::CHAT_PATH.into(),
            api_key: None,
        }
    }
}

/// One model server. A single instance implements every backend trait; the
/// server decides which endpoints it actually serves.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base: String,
    client: Client,
    timeout: Duration,
    retries: u32,
    chat: ChatOptions,
}

impl HttpBackend {
    pub fn new(base: impl Into<String>, timeout: Duration, retries: u32) -> BackendResult<Self> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend {
            base: base.into().trim_end_matches('/').to_string(),
            client,
            timeout,
            retries,
            chat: ChatOptions::default(),
        })
    }

    pub fn from_descriptor(desc: &BackendDescriptor) -> BackendResult<Self> {
        match &desc.endpoint {
            Endpoint::Http(url) => Self::new(url.clone(), desc.timeout, desc.retries),
            other => Err(BackendError::Transport(format!("{other} is not an HTTP endpoint"))),
        }
    }

    pub fn with_chat_options(mut self, chat: ChatOptions) -> Self {
        self.chat = chat;
        self
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req, versioned: bool) -> BackendResult<Resp> {
        let url = format!("{}{}", self.base, path);
        let mut attempt = 0;
        let response = loop {
            let mut req = self
                .client
                .post(&url)
                .header(proto::VERSION_HEADER, proto::VERSION)
                .json(body);
            if let Some(key) = self.chat.api_key.as_deref().filter(|_| path == self.chat.path) {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => break resp,
                Err(e) if e.is_timeout() => return Err(BackendError::Timeout(self.timeout)),
                Err(e) if attempt < self.retries && (e.is_connect() || e.is_request()) => {
                    attempt += 1;
                    log::debug!("retrying {url} after transport error: {e}");
                }
                Err(e) => return Err(BackendError::Transport(format!("{url}: {e}"))),
            }
        };
        let status = response.status();
        let header = response
            .headers()
            .get(proto::VERSION_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned);
        let bytes = response.bytes().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout(self.timeout)
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        if !status.is_success() {
            let detail = serde_json::from_slice::<ErrorBody>(&bytes)
                .map(|b| b.error)
                .unwrap_or_else(|_| ErrorDetail {
                    kind: "unknown".into(),
                    message: String::from_utf8_lossy(&bytes).into_owned(),
                });
            return Err(BackendError::Server {
                status: status.as_u16(),
                kind: detail.kind,
                message: detail.message,
            });
        }
        match header.as_deref() {
            Some(proto::VERSION) => {}
            None if !versioned => {}
            other => {
                return Err(BackendError::Protocol(format!(
                    "{url}: expected {} header {:?}, got {other:?}",
                    proto::VERSION_HEADER,
                    proto::VERSION
                )))
            }
        }
        serde_json::from_slice(&bytes).map_err(|e| BackendError::Protocol(format!("{url}: {e}")))
    }
}

impl ChatVisionBackend for HttpBackend {
    fn chat(&self, images: &[&RgbImage], text: &str) -> BackendResult<String> {
        let body = ChatCompletionRequest::new(&self.chat.model, images, text)?;
        // hosted chat APIs do not send the protocol header
        let resp: ChatCompletionResponse = self.post(&self.chat.path, &body, false)?;
        resp.into_text()
    }
}

impl GroundingBackend for HttpBackend {
    fn ground(&self, image: &RgbImage, phrase: &str, text_threshold: f32, box_threshold: f32) -> BackendResult<Vec<BoundingBox>> {
        let body = GroundRequest {
            image: encode_image(image)?,
            phrase: phrase.to_string(),
            text_threshold,
            box_threshold,
        };
        let resp: GroundResponse = self.post(proto::GROUND_PATH, &body, true)?;
        resp.boxes
            .iter()
            .map(|b| b.to_box(image.width(), image.height()))
            .collect()
    }
}

impl VideoSegmenterBackend for HttpBackend {
    fn open(&self, clip: &VideoClip) -> BackendResult<SessionHandle> {
        let frames = clip
            .frames()
            .iter()
            .map(|f| encode_image(&f.pixels))
            .collect::<BackendResult<Vec<_>>>()?;
        let body = SegmentOpenRequest {
            video_id: clip.id().to_string(),
            fps_num: clip.fps().num,
            fps_den: clip.fps().den,
            frames,
        };
        let resp: SegmentOpenResponse = self.post(proto::SEGMENT_OPEN_PATH, &body, true)?;
        if resp.num_frames != clip.len() {
            return Err(BackendError::Protocol(format!(
                "session reports {} frames, sent {}",
                resp.num_frames,
                clip.len()
            )));
        }
        Ok(SessionHandle(resp.session))
    }

    fn add_prompt(&self, session: &SessionHandle, frame_index: usize, bbox: &BoundingBox) -> BackendResult<()> {
        let body = SegmentPromptRequest {
            session: session.0.clone(),
            frame_index,
            bbox: WireBox::from(bbox),
        };
        let resp: SegmentPromptResponse = self.post(proto::SEGMENT_PROMPT_PATH, &body, true)?;
        if !resp.ok {
            return Err(BackendError::Protocol("segmenter rejected prompt".into()));
        }
        Ok(())
    }

    fn propagate(&self, session: &SessionHandle, start_frame: usize) -> BackendResult<Vec<BinaryMask>> {
        let body = SegmentPropagateRequest {
            session: session.0.clone(),
            start_frame,
        };
        let resp: SegmentPropagateResponse = self.post(proto::SEGMENT_PROPAGATE_PATH, &body, true)?;
        resp.masks.iter().map(WireMask::to_mask).collect()
    }
}

impl AudioTaggerBackend for HttpBackend {
    fn tag(&self, audio: &AudioClip) -> BackendResult<Vec<ScoredLabel>> {
        let body = AudioRequest {
            audio: WireAudio::encode(audio),
        };
        let resp: TagResponse = self.post(proto::AUDIO_TAG_PATH, &body, true)?;
        Ok(resp.labels)
    }
}

impl CrossModalEmbedderBackend for HttpBackend {
    fn embed_audio(&self, audio: &AudioClip) -> BackendResult<Vec<f32>> {
        let body = AudioRequest {
            audio: WireAudio::encode(audio),
        };
        let resp: EmbeddingResponse = self.post(proto::EMBED_AUDIO_PATH, &body, true)?;
        Ok(resp.embedding)
    }

    fn embed_text(&self, text: &str) -> BackendResult<Vec<f32>> {
        let body = EmbedTextRequest { text: text.to_string() };
        let resp: EmbeddingResponse = self.post(proto::EMBED_TEXT_PATH, &body, true)?;
        Ok(resp.embedding)
    }
}

impl SoundEventBackend for HttpBackend {
    fn boundaries(&self, audio: &AudioClip) -> BackendResult<Vec<f64>> {
        let body = AudioRequest {
            audio: WireAudio::encode(audio),
        };
        let resp: SedResponse = self.post(proto::SED_PATH, &body, true)?;
        Ok(resp.boundaries)
    }
}
