//! Per-sample bookkeeping threaded through the pipeline stages, and the
//! chat helper that renders, retries, caches and audits model calls.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::audit::{AuditEvent, AuditRecord, ImageRecipe, Step};
use crate::backends::ChatVisionBackend;
use crate::error::{Error, Result};
use crate::prompts::PromptTemplate;
use crate::symbolic::hex_digest;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub chat: u32,
    pub grounding: u32,
    pub segmentation: u32,
    pub audio_tagging: u32,
    pub sound_events: u32,
    pub embedding: u32,
}

impl std::ops::AddAssign for CallCounts {
    fn add_assign(&mut self, o: Self) {
        self.chat += o.chat;
        self.grounding += o.grounding;
        self.segmentation += o.segmentation;
        self.audio_tagging += o.audio_tagging;
        self.sound_events += o.sound_events;
        self.embedding += o.embedding;
    }
}

impl std::ops::Sub for CallCounts {
    type Output = CallCounts;

    fn sub(self, o: Self) -> Self {
        CallCounts {
            chat: self.chat - o.chat,
            grounding: self.grounding - o.grounding,
            segmentation: self.segmentation - o.segmentation,
            audio_tagging: self.audio_tagging - o.audio_tagging,
            sound_events: self.sound_events - o.sound_events,
            embedding: self.embedding - o.embedding,
        }
    }
}

/// Markers recorded in the run report. Every variant except
/// [`RunFlag::ThresholdsHalved`] means a fallback path was taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum RunFlag {
    LbruFallback,
    CategoryOverflow { dropped: Vec<String> },
    NoSoundingCategories,
    PivotFrameFallback { clip: usize },
    PivotBoxFallback { clip: usize },
    ThresholdsHalved { clip: usize },
    ReferentAbsent { clip: usize },
    AllClipsAbsent,
    SoundEventFallback,
    EmbeddingFallback,
}

impl RunFlag {
    pub fn is_degraded(&self) -> bool {
        !matches!(self, RunFlag::ThresholdsHalved { .. })
    }
}

/// Previously seen replies, keyed by template version, prompt text and image
/// hashes. Read-only during a run so results never depend on scheduling.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatCache {
    entries: BTreeMap<String, String>,
}

impl ChatCache {
    pub fn key(template_version: &str, prompt: &str, image_hashes: &[&str]) -> String {
        let mut hasher = Sha256::new();
        hasher.update(template_version.as_bytes());
        hasher.update([0]);
        hasher.update(prompt.as_bytes());
        for h in image_hashes {
            hasher.update([0]);
            hasher.update(h.as_bytes());
        }
        hex_digest(hasher)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = (String, String)>) {
        self.entries.extend(entries);
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(ChatCache::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Mutable state for one sample's run.
#[derive(Debug, Default)]
pub struct RunContext<'c> {
    pub sample: String,
    pub reference: String,
    pub clip: Option<usize>,
    pub audit: Vec<AuditRecord>,
    pub calls: CallCounts,
    pub flags: Vec<RunFlag>,
    cache: Option<&'c ChatCache>,
    /// Replies learned during this run, to be merged into the cache afterwards.
    pub new_cache_entries: BTreeMap<String, String>,
    /// When set, every prompt image is collected here under a content-derived name.
    pub prompt_images: Option<BTreeMap<String, RgbImage>>,
}

impl<'c> RunContext<'c> {
    pub fn new(sample: impl Into<String>) -> Self {
        RunContext {
            sample: sample.into(),
            ..Default::default()
        }
    }

    pub fn with_cache(mut self, cache: &'c ChatCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn record(&mut self, step: Step, event: AuditEvent) {
        self.audit.push(AuditRecord {
            sample: self.sample.clone(),
            reference: self.reference.clone(),
            clip: self.clip,
            step,
            event,
        });
    }

    pub fn flag(&mut self, flag: RunFlag) {
        self.flags.push(flag);
    }

    fn cached(&self, key: &str) -> Option<String> {
        self.new_cache_entries
            .get(key)
            .cloned()
            .or_else(|| self.cache.and_then(|c| c.get(key)).map(str::to_owned))
    }
}

/// A rendered chat prompt plus the images it refers to.
pub struct ChatPrompt<'a> {
    pub step: Step,
    pub template: &'a PromptTemplate,
    pub text: String,
    pub images: Vec<(&'a RgbImage, ImageRecipe)>,
}

/// Sends `prompt` up to `attempts` times until `parse` accepts the reply.
///
/// Returns `Ok(None)` when every attempt was rejected; backend errors abort.
pub fn ask<T>(
    ctx: &mut RunContext<'_>,
    chat: &dyn ChatVisionBackend,
    prompt: &ChatPrompt<'_>,
    attempts: u32,
    parse: impl Fn(&str) -> Option<T>,
    describe: impl Fn(&T) -> Value,
) -> Result<Option<T>> {
    let hashes: Vec<&str> = prompt.images.iter().map(|(_, r)| r.hash.as_str()).collect();
    let key = ChatCache::key(prompt.template.version(), &prompt.text, &hashes);
    let recipes: Vec<ImageRecipe> = prompt.images.iter().map(|(_, r)| r.clone()).collect();
    let chat_event = |attempt, cached, reply: Option<String>, parsed: Option<Value>| AuditEvent::Chat {
        template: prompt.template.name().to_string(),
        template_version: prompt.template.version().to_string(),
        prompt: prompt.text.clone(),
        images: recipes.clone(),
        attempt,
        cached,
        reply,
        parsed,
    };

    if let Some(dump) = ctx.prompt_images.as_mut() {
        for (img, recipe) in &prompt.images {
            let name = format!("{}-{}.png", prompt.step.as_str(), &recipe.hash[..recipe.hash.len().min(16)]);
            dump.entry(name).or_insert_with(|| (*img).clone());
        }
    }
    if let Some(reply) = ctx.cached(&key) {
        if let Some(value) = parse(&reply) {
            let described = describe(&value);
            ctx.record(prompt.step, chat_event(0, true, Some(reply), Some(described)));
            return Ok(Some(value));
        }
    }

    let images: Vec<&RgbImage> = prompt.images.iter().map(|(img, _)| *img).collect();
    for attempt in 1..=attempts {
        ctx.calls.chat += 1;
        let reply = chat
            .chat(&images, &prompt.text)
            .map_err(|e| Error::backend(format!("{} chat call", prompt.template.name()), e))?;
        let parsed = parse(&reply);
        let described = parsed.as_ref().map(&describe);
        ctx.record(prompt.step, chat_event(attempt, false, Some(reply.clone()), described));
        if let Some(value) = parsed {
            ctx.new_cache_entries.insert(key, reply);
            return Ok(Some(value));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::ScriptedChat;
    use crate::symbolic::FrameLabelMode;

    fn recipe() -> ImageRecipe {
        ImageRecipe {
            hash: "h".into(),
            source_indices: vec![0],
            label_mode: FrameLabelMode::Positional,
            pivot: None,
        }
    }

    #[test]
    fn retries_until_parse_succeeds_then_caches() {
        let template = PromptTemplate::new("t", "x");
        let img = RgbImage::new(1, 1);
        let prompt = ChatPrompt {
            step: Step::PivotFrame,
            template: &template,
            text: "pick".into(),
            images: vec![(&img, recipe())],
        };
        let chat = ScriptedChat::replies(["nope", "42"]);
        let mut ctx = RunContext::new("s");
        let got = ask(&mut ctx, &chat, &prompt, 3, |r| r.parse::<u32>().ok(), |v| Value::from(*v)).unwrap();
        assert_eq!(got, Some(42));
        assert_eq!(ctx.calls.chat, 2);
        assert_eq!(ctx.audit.len(), 2);

        // second ask is served from the run-local cache
        let again = ask(&mut ctx, &chat, &prompt, 3, |r| r.parse::<u32>().ok(), |v| Value::from(*v)).unwrap();
        assert_eq!(again, Some(42));
        assert_eq!(ctx.calls.chat, 2);
        assert!(matches!(ctx.audit[2].event, AuditEvent::Chat { cached: true, .. }));
    }

    #[test]
    fn exhausts_attempts() {
        let template = PromptTemplate::new("t", "x");
        let prompt = ChatPrompt {
            step: Step::PivotBox,
            template: &template,
            text: "pick".into(),
            images: vec![],
        };
        let chat = ScriptedChat::replies(["a", "b", "c", "d"]);
        let mut ctx = RunContext::new("s");
        let got = ask(&mut ctx, &chat, &prompt, 3, |r| r.parse::<u32>().ok(), |v| Value::from(*v)).unwrap();
        assert_eq!(got, None);
        assert_eq!(ctx.calls.chat, 3);
        assert!(ctx.new_cache_entries.is_empty());
    }

    #[test]
    fn persisted_cache_is_consulted() {
        let template = PromptTemplate::new("t", "x");
        let prompt = ChatPrompt {
            step: Step::Lbru,
            template: &template,
            text: "q".into(),
            images: vec![],
        };
        let mut cache = ChatCache::default();
        cache.extend([(ChatCache::key(template.version(), "q", &[]), "7".to_string())]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        cache.save(&path).unwrap();
        let cache = ChatCache::load(&path).unwrap();
        let chat = ScriptedChat::replies(Vec::<String>::new());
        let mut ctx = RunContext::new("s").with_cache(&cache);
        let got = ask(&mut ctx, &chat, &prompt, 3, |r| r.parse::<u32>().ok(), |v| Value::from(*v)).unwrap();
        assert_eq!(got, Some(7));
        assert_eq!(ctx.calls.chat, 0);
    }
}
