//! Builds a [`Backends`] set for each sample from the `[backends]` config.
//!
//! Endpoint forms:
//! - `http://host:port` / `https://…` a model server speaking the JSON protocol
//! - `mock:oracle` ground-truth oracle (needs annotations)
//! - `mock:boxfill` box-fill segmenter
//! - `mock:<file.json>` scripted scenario, one section per backend kind
//! - `local:spectral` spectral change-point sound-event detector

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::http::{ChatOptions, HttpBackend};
use super::local::SpectralChangeSed;
use super::mock::{
    BoxFillSegmenter, GroundTruthOracle, Script, ScriptedChat, ScriptedEmbedder, ScriptedGrounding, ScriptedScenario,
    ScriptedSed, ScriptedTagger,
};
use super::{
    AudioTaggerBackend, BackendKind, Backends, ChatVisionBackend, CrossModalEmbedderBackend, Endpoint,
    GroundingBackend, ScoredLabel, SoundEventBackend, VideoSegmenterBackend,
};
use crate::config::Task;
use crate::error::{Error, Result};
use crate::types::{BinaryMask, BoundingBox, VideoClip};

pub const DEFAULT_TIMEOUT_SECS: u64 = 120;
pub const DEFAULT_RETRIES: u32 = 2;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub endpoint: Option<String>,
    /// Chat model name sent in requests.
    pub model: Option<String>,
    /// Environment variable holding the chat API key.
    pub api_key_env: Option<String>,
    /// Chat request path, for OpenAI-compatible servers.
    pub path: Option<String>,
    pub timeout_secs: Option<u64>,
    pub retries: Option<u32>,
}

impl BackendSpec {
    pub fn endpoint(endpoint: impl Into<String>) -> Self {
        BackendSpec {
            endpoint: Some(endpoint.into()),
            ..Default::default()
        }
    }

    /// Fields of `self`, falling back to `base` where unset.
    fn over(&self, base: &BackendSpec) -> BackendSpec {
        BackendSpec {
            endpoint: self.endpoint.clone().or_else(|| base.endpoint.clone()),
            model: self.model.clone().or_else(|| base.model.clone()),
            api_key_env: self.api_key_env.clone().or_else(|| base.api_key_env.clone()),
            path: self.path.clone().or_else(|| base.path.clone()),
            timeout_secs: self.timeout_secs.or(base.timeout_secs),
            retries: self.retries.or(base.retries),
        }
    }
}

/// The `[backends]` table. `default` fills in every kind left unset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default)]
    pub default: BackendSpec,
    #[serde(default)]
    pub chat: BackendSpec,
    #[serde(default)]
    pub grounding: BackendSpec,
    #[serde(default)]
    pub segmenter: BackendSpec,
    #[serde(default)]
    pub audio_tagger: BackendSpec,
    #[serde(default)]
    pub embedder: BackendSpec,
    #[serde(default)]
    pub sound_events: BackendSpec,
}

impl BackendsConfig {
    /// Every kind served by one endpoint.
    pub fn uniform(endpoint: &str) -> Self {
        BackendsConfig {
            default: BackendSpec::endpoint(endpoint),
            ..Default::default()
        }
    }

    fn spec(&self, kind: BackendKind) -> BackendSpec {
        let own = match kind {
            BackendKind::ChatVision => &self.chat,
            BackendKind::Grounding => &self.grounding,
            BackendKind::VideoSegmenter => &self.segmenter,
            BackendKind::AudioTagger => &self.audio_tagger,
            BackendKind::CrossModalEmbedder => &self.embedder,
            BackendKind::SoundEvent => &self.sound_events,
        };
        own.over(&self.default)
    }
}

/// Scripted responses for `mock:<file>` endpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScenarioFile {
    #[serde(default)]
    pub chat: Option<ScriptedScenario<String>>,
    #[serde(default)]
    pub grounding: Option<ScriptedScenario<Vec<BoundingBox>>>,
    #[serde(default)]
    pub audio_tagger: Option<ScriptedScenario<Vec<ScoredLabel>>>,
    #[serde(default)]
    pub embed_audio: Option<ScriptedScenario<Vec<f32>>>,
    #[serde(default)]
    pub embed_text: Option<ScriptedScenario<Vec<f32>>>,
    #[serde(default)]
    pub sound_events: Option<ScriptedScenario<Vec<f64>>>,
}

impl MockScenarioFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
enum Source {
    Http(Arc<HttpBackend>),
    Oracle,
    BoxFill,
    Spectral,
    Scenario(Arc<MockScenarioFile>),
}

impl Source {
    fn needs_truth(&self) -> bool {
        matches!(self, Source::Oracle)
    }
}

/// Resolved backend sources; [`BackendFactory::for_sample`] instantiates them.
#[derive(Debug, Clone)]
pub struct BackendFactory {
    chat: Source,
    grounding: Source,
    segmenter: Source,
    audio: Option<[Source; 3]>,
}

/// Ground truth handed to oracle backends.
#[derive(Debug, Clone, Copy)]
pub struct SampleTruth<'a> {
    pub masks: &'a [BinaryMask],
    pub categories: &'a [String],
}

impl BackendFactory {
    /// Resolves every kind `task` needs. Relative scenario paths resolve
    /// against `base_dir`.
    pub fn new(cfg: &BackendsConfig, task: Task, base_dir: &Path) -> Result<Self> {
        let chat = resolve(cfg, BackendKind::ChatVision, base_dir)?;
        let grounding = resolve(cfg, BackendKind::Grounding, base_dir)?;
        let segmenter = resolve(cfg, BackendKind::VideoSegmenter, base_dir)?;
        let audio = match task {
            Task::Rvos => None,
            Task::Avs => Some([
                resolve(cfg, BackendKind::AudioTagger, base_dir)?,
                resolve(cfg, BackendKind::CrossModalEmbedder, base_dir)?,
                resolve(cfg, BackendKind::SoundEvent, base_dir)?,
            ]),
        };
        Ok(BackendFactory {
            chat,
            grounding,
            segmenter,
            audio,
        })
    }

    /// Whether any backend is an oracle and so needs ground truth.
    pub fn needs_truth(&self) -> bool {
        [&self.chat, &self.grounding, &self.segmenter]
            .into_iter()
            .chain(self.audio.iter().flatten())
            .any(Source::needs_truth)
    }

    /// Fresh instances for one sample, so scripted call counters never leak
    /// between samples.
    pub fn for_sample(&self, clip: &VideoClip, truth: Option<SampleTruth<'_>>) -> Result<Backends> {
        let oracle = if self.needs_truth() {
            let t = truth.ok_or_else(|| Error::Dataset(format!("oracle backends need ground truth for {}", clip.id())))?;
            Some(Arc::new(GroundTruthOracle::new(clip, t.masks.to_vec(), t.categories.to_vec())))
        } else {
            None
        };
        let chat: Arc<dyn ChatVisionBackend> = match &self.chat {
            Source::Http(h) => h.clone(),
            Source::Oracle => oracle.clone().expect("oracle built"),
            Source::Scenario(s) => Arc::new(ScriptedChat::new(script(&s.chat, BackendKind::ChatVision)?)),
            other => return Err(unsupported(other, BackendKind::ChatVision)),
        };
        let grounding: Arc<dyn GroundingBackend> = match &self.grounding {
            Source::Http(h) => h.clone(),
            Source::Oracle => oracle.clone().expect("oracle built"),
            Source::Scenario(s) => Arc::new(ScriptedGrounding::new(script(&s.grounding, BackendKind::Grounding)?)),
            other => return Err(unsupported(other, BackendKind::Grounding)),
        };
        let segmenter: Arc<dyn VideoSegmenterBackend> = match &self.segmenter {
            Source::Http(h) => h.clone(),
            Source::Oracle => oracle.clone().expect("oracle built"),
            Source::BoxFill => Arc::new(BoxFillSegmenter::new()),
            other => return Err(unsupported(other, BackendKind::VideoSegmenter)),
        };
        let mut backends = Backends::new(chat, grounding, segmenter);
        if let Some([tagger, embedder, sed]) = &self.audio {
            let tagger: Arc<dyn AudioTaggerBackend> = match tagger {
                Source::Http(h) => h.clone(),
                Source::Oracle => oracle.clone().expect("oracle built"),
                Source::Scenario(s) => Arc::new(ScriptedTagger::new(script(&s.audio_tagger, BackendKind::AudioTagger)?)),
                other => return Err(unsupported(other, BackendKind::AudioTagger)),
            };
            let embedder: Arc<dyn CrossModalEmbedderBackend> = match embedder {
                Source::Http(h) => h.clone(),
                Source::Oracle => oracle.clone().expect("oracle built"),
                Source::Scenario(s) => Arc::new(ScriptedEmbedder::new(
                    script(&s.embed_audio, BackendKind::CrossModalEmbedder)?,
                    script(&s.embed_text, BackendKind::CrossModalEmbedder)?,
                )),
                other => return Err(unsupported(other, BackendKind::CrossModalEmbedder)),
            };
            let sed: Arc<dyn SoundEventBackend> = match sed {
                Source::Http(h) => h.clone(),
                Source::Oracle => oracle.clone().expect("oracle built"),
                Source::Spectral => Arc::new(SpectralChangeSed::default()),
                Source::Scenario(s) => Arc::new(ScriptedSed::new(script(&s.sound_events, BackendKind::SoundEvent)?)),
                other => return Err(unsupported(other, BackendKind::SoundEvent)),
            };
            backends = backends.with_audio(tagger, embedder, sed);
        }
        Ok(backends)
    }
}

fn script<R: Clone>(section: &Option<ScriptedScenario<R>>, kind: BackendKind) -> Result<Script<R>> {
    section
        .clone()
        .map(Script::new)
        .ok_or_else(|| Error::Config(format!("mock scenario has no section for {kind}")))
}

fn unsupported(source: &Source, kind: BackendKind) -> Error {
    let name = match source {
        Source::BoxFill => "mock:boxfill",
        Source::Spectral => "local:spectral",
        _ => "this endpoint",
    };
    Error::Config(format!("{name} cannot serve {kind}"))
}

fn resolve(cfg: &BackendsConfig, kind: BackendKind, base_dir: &Path) -> Result<Source> {
    let spec = cfg.spec(kind);
    let raw = match (&spec.endpoint, kind) {
        (Some(e), _) => e.clone(),
        // needs no weights, so it is a sensible default
        (None, BackendKind::SoundEvent) => "local:spectral".to_string(),
        (None, _) => return Err(Error::Config(format!("no endpoint configured for {kind}"))),
    };
    let endpoint = Endpoint::parse(&raw).map_err(|e| Error::Config(format!("{kind}: {e}")))?;
    let source = match endpoint {
        Endpoint::Http(url) => {
            let timeout = Duration::from_secs(spec.timeout_secs.unwrap_or(DEFAULT_TIMEOUT_SECS));
            let mut http = HttpBackend::new(url, timeout, spec.retries.unwrap_or(DEFAULT_RETRIES))
                .map_err(|e| Error::Config(format!("{kind}: {e}")))?;
            if kind == BackendKind::ChatVision {
                let mut opts = ChatOptions::default();
                if let Some(m) = spec.model {
                    opts.model = m;
                }
                if let Some(p) = spec.path {
                    opts.path = p;
                }
                if let Some(var) = spec.api_key_env {
                    let key = std::env::var(&var)
                        .map_err(|_| Error::Config(format!("{kind}: environment variable {var} is not set")))?;
                    opts.api_key = Some(key);
                }
                http = http.with_chat_options(opts);
            }
            Source::Http(Arc::new(http))
        }
        Endpoint::Mock(name) => match name.as_str() {
            "oracle" => Source::Oracle,
            "boxfill" => Source::BoxFill,
            path => {
                let path: PathBuf = base_dir.join(path);
                Source::Scenario(Arc::new(MockScenarioFile::load(&path)?))
            }
        },
        Endpoint::Local(name) => match name.as_str() {
            "spectral" | "" => Source::Spectral,
            other => return Err(Error::Config(format!("{kind}: unknown local backend {other:?}"))),
        },
    };
    if let Source::BoxFill = source {
        if kind != BackendKind::VideoSegmenter {
            return Err(unsupported(&source, kind));
        }
    }
    if let Source::Spectral = source {
        if kind != BackendKind::SoundEvent {
            return Err(unsupported(&source, kind));
        }
    }
    Ok(source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Fps;
    use image::RgbImage;

    fn clip() -> VideoClip {
        VideoClip::from_rasters("v", Fps::default(), vec![RgbImage::new(4, 4); 2]).unwrap()
    }

    #[test]
    fn missing_endpoint_is_config_error() {
        let cfg = BackendsConfig::default();
        let err = BackendFactory::new(&cfg, Task::Rvos, Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("chat_vision")));
    }

    #[test]
    fn uniform_oracle_needs_truth() {
        let f = BackendFactory::new(&BackendsConfig::uniform("mock:oracle"), Task::Avs, Path::new(".")).unwrap();
        assert!(f.needs_truth());
        assert!(f.for_sample(&clip(), None).is_err());
        let masks = vec![BinaryMask::empty(4, 4); 2];
        let b = f
            .for_sample(&clip(), Some(SampleTruth { masks: &masks, categories: &[] }))
            .unwrap();
        assert!(b.tagger().is_ok());
    }

    #[test]
    fn per_kind_overrides_and_restrictions() {
        let cfg: BackendsConfig = toml::from_str(
            "[default]\nendpoint = \"http://127.0.0.1:9\"\ntimeout_secs = 5\n[segmenter]\nendpoint = \"mock:boxfill\"\n",
        )
        .unwrap();
        let f = BackendFactory::new(&cfg, Task::Rvos, Path::new(".")).unwrap();
        assert!(!f.needs_truth());
        assert!(f.for_sample(&clip(), None).is_ok());

        let bad = BackendsConfig::uniform("mock:boxfill");
        assert!(matches!(BackendFactory::new(&bad, Task::Rvos, Path::new(".")), Err(Error::Config(_))));
        let bad = BackendsConfig::uniform("ftp://x");
        assert!(matches!(BackendFactory::new(&bad, Task::Rvos, Path::new(".")), Err(Error::Config(_))));
        assert!(toml::from_str::<BackendsConfig>("[chat]\nurl = \"x\"\n").is_err());
    }

    #[test]
    fn missing_api_key_variable() {
        let mut cfg = BackendsConfig::uniform("http://127.0.0.1:9");
        cfg.chat.api_key_env = Some("ALREF_TEST_SURELY_UNSET_KEY".into());
        assert!(matches!(BackendFactory::new(&cfg, Task::Rvos, Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn scenario_file_instantiates_fresh_scripts() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("s.json"),
            r#"{"chat": {"strict": true, "steps": [{"respond": {"ok": "hi"}}]},
                "grounding": {"fallback": {"ok": []}}}"#,
        )
        .unwrap();
        let mut cfg = BackendsConfig::uniform("mock:s.json");
        cfg.segmenter = BackendSpec::endpoint("mock:boxfill");
        let f = BackendFactory::new(&cfg, Task::Rvos, dir.path()).unwrap();
        for _ in 0..2 {
            let b = f.for_sample(&clip(), None).unwrap();
            assert_eq!(b.chat.chat(&[], "x").unwrap(), "hi");
        }
        // no audio sections, so the audio task cannot be served
        let f = BackendFactory::new(&cfg, Task::Avs, dir.path()).unwrap();
        assert!(matches!(f.for_sample(&clip(), None), Err(Error::Config(_))));
    }
}
