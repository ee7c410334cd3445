//! A model server stand-in that answers the JSON protocol from any
//! [`Backends`] set, usually mocks. Used to exercise the HTTP client end to
//! end without real models.

use std::net::SocketAddr;
use std::sync::Arc;

use alref_core::backends::protocol::{self as proto, *};
use alref_core::backends::{BackendError, Backends, SessionHandle};
use alref_core::types::{Fps, VideoClip};
use axum::extract::{Request, State};
use axum::http::{HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

type Shared = Arc<Backends>;

/// Router serving every protocol endpoint from `backends`.
pub fn router(backends: Backends) -> Router {
    Router::new()
        .route(proto::CHAT_PATH, post(chat))
        .route(proto::GROUND_PATH, post(ground))
        .route(proto::SEGMENT_OPEN_PATH, post(segment_open))
        .route(proto::SEGMENT_PROMPT_PATH, post(segment_prompt))
        .route(proto::SEGMENT_PROPAGATE_PATH, post(segment_propagate))
        .route(proto::AUDIO_TAG_PATH, post(audio_tag))
        .route(proto::EMBED_AUDIO_PATH, post(embed_audio))
        .route(proto::EMBED_TEXT_PATH, post(embed_text))
        .route(proto::SED_PATH, post(sed))
        .layer(middleware::from_fn(versioned))
        .with_state(Arc::new(backends))
}

/// Rejects requests without the protocol header (chat excepted, since
/// hosted chat clients do not send it) and stamps it on every response.
async fn versioned(req: Request, next: Next) -> Response {
    let sent = req.headers().get(proto::VERSION_HEADER).and_then(|v| v.to_str().ok());
    let mut resp = if req.uri().path() != proto::CHAT_PATH && sent != Some(proto::VERSION) {
        let msg = format!("expected {}: {}, got {sent:?}", proto::VERSION_HEADER, proto::VERSION);
        error_response(StatusCode::BAD_REQUEST, "version", msg)
    } else {
        next.run(req).await
    };
    resp.headers_mut()
        .insert(proto::VERSION_HEADER, HeaderValue::from_static(proto::VERSION));
    resp
}

fn error_response(status: StatusCode, kind: &str, message: String) -> Response {
    let body = ErrorBody {
        error: ErrorDetail {
            kind: kind.into(),
            message,
        },
    };
    (status, Json(body)).into_response()
}

struct Failure(BackendError);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        if let BackendError::Server { status, kind, message } = self.0 {
            let status = StatusCode::from_u16(status).unwrap_or(StatusCode::BAD_GATEWAY);
            return error_response(status, &kind, message);
        }
        let (status, kind) = match &self.0 {
            BackendError::Protocol(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_request"),
            BackendError::Timeout(_) => (StatusCode::GATEWAY_TIMEOUT, "timeout"),
            BackendError::Missing(_) => (StatusCode::NOT_IMPLEMENTED, "not_served"),
            BackendError::Scenario(_) => (StatusCode::INTERNAL_SERVER_ERROR, "scenario"),
            BackendError::Transport(_) | BackendError::Server { .. } => (StatusCode::BAD_GATEWAY, "upstream"),
        };
        error_response(status, kind, self.0.to_string())
    }
}

type Reply<T> = Result<Json<T>, Failure>;

/// Backends are blocking; keep them off the async workers.
async fn blocking<T, F>(backends: Shared, f: F) -> Reply<T>
where
    T: Send + 'static,
    F: FnOnce(&Backends) -> Result<T, BackendError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&backends))
        .await
        .map_err(|e| Failure(BackendError::Scenario(format!("handler panicked: {e}"))))?
        .map(Json)
        .map_err(Failure)
}

async fn chat(State(b): State<Shared>, Json(req): Json<ChatCompletionRequest>) -> Reply<ChatCompletionResponse> {
    blocking(b, move |b| {
        let (text, images) = req.decode()?;
        let refs: Vec<_> = images.iter().collect();
        b.chat.chat(&refs, &text).map(ChatCompletionResponse::from_text)
    })
    .await
}

async fn ground(State(b): State<Shared>, Json(req): Json<GroundRequest>) -> Reply<GroundResponse> {
    blocking(b, move |b| {
        let image = decode_image(&req.image)?;
        let boxes = b
            .grounding
            .ground(&image, &req.phrase, req.text_threshold, req.box_threshold)?;
        Ok(GroundResponse {
            boxes: boxes.iter().map(WireBox::from).collect(),
        })
    })
    .await
}

async fn segment_open(State(b): State<Shared>, Json(req): Json<SegmentOpenRequest>) -> Reply<SegmentOpenResponse> {
    blocking(b, move |b| {
        let invalid = |e: alref_core::Error| BackendError::Protocol(e.to_string());
        let fps = Fps::new(req.fps_num, req.fps_den).map_err(invalid)?;
        let frames = req.frames.iter().map(|f| decode_image(f)).collect::<Result<Vec<_>, _>>()?;
        let clip = VideoClip::from_rasters(req.video_id, fps, frames).map_err(invalid)?;
        let session = b.segmenter.open(&clip)?;
        Ok(SegmentOpenResponse {
            session: session.0,
            num_frames: clip.len(),
        })
    })
    .await
}

async fn segment_prompt(State(b): State<Shared>, Json(req): Json<SegmentPromptRequest>) -> Reply<SegmentPromptResponse> {
    blocking(b, move |b| {
        // boxes are not clamped to a frame size here; the segmenter validates them
        let bbox = req.bbox.to_box(u32::MAX, u32::MAX)?;
        b.segmenter.add_prompt(&SessionHandle(req.session), req.frame_index, &bbox)?;
        Ok(SegmentPromptResponse { ok: true })
    })
    .await
}

async fn segment_propagate(
    State(b): State<Shared>,
    Json(req): Json<SegmentPropagateRequest>,
) -> Reply<SegmentPropagateResponse> {
    blocking(b, move |b| {
        let masks = b.segmenter.propagate(&SessionHandle(req.session), req.start_frame)?;
        Ok(SegmentPropagateResponse {
            masks: masks.iter().map(WireMask::from).collect(),
        })
    })
    .await
}

async fn audio_tag(State(b): State<Shared>, Json(req): Json<AudioRequest>) -> Reply<TagResponse> {
    blocking(b, move |b| {
        let labels = b.tagger()?.tag(&req.audio.decode()?)?;
        Ok(TagResponse { labels })
    })
    .await
}

async fn embed_audio(State(b): State<Shared>, Json(req): Json<AudioRequest>) -> Reply<EmbeddingResponse> {
    blocking(b, move |b| {
        let embedding = b.embedder()?.embed_audio(&req.audio.decode()?)?;
        Ok(EmbeddingResponse { embedding })
    })
    .await
}

async fn embed_text(State(b): State<Shared>, Json(req): Json<EmbedTextRequest>) -> Reply<EmbeddingResponse> {
    blocking(b, move |b| {
        let embedding = b.embedder()?.embed_text(&req.text)?;
        Ok(EmbeddingResponse { embedding })
    })
    .await
}

async fn sed(State(b): State<Shared>, Json(req): Json<AudioRequest>) -> Reply<SedResponse> {
    blocking(b, move |b| {
        let boundaries = b.sound_events()?.boundaries(&req.audio.decode()?)?;
        Ok(SedResponse { boundaries })
    })
    .await
}

/// Serves until the returned handle is dropped. Runs its own runtime on a
/// background thread so blocking clients can call it from plain tests.
pub struct StubServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl StubServer {
    pub fn start(backends: Backends) -> std::io::Result<Self> {
        Self::bind(backends, SocketAddr::from(([127, 0, 0, 1], 0)))
    }

    pub fn bind(backends: Backends, addr: SocketAddr) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = runtime.block_on(TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(backends);
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                    rx.await.ok();
                });
                if let Err(e) = serve.await {
                    eprintln!("stub server stopped: {e}");
                }
            });
        });
        Ok(StubServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server thread exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            tx.send(()).ok();
        }
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}
