//! Turning an audio track into language references: tag the audio, let the
//! chat model keep the tags whose sources are visible, and render one
//! reference per remaining category.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audit::{AuditEvent, ImageRecipe, Step};
use crate::backends::{self, AudioTaggerBackend, ChatVisionBackend, ScoredLabel};
use crate::context::{ask, ChatPrompt, RunContext, RunFlag};
use crate::error::{Error, Result};
use crate::audio_seg::AudioClip;
use crate::prompts::{parse_category_list, PromptTemplate};
use crate::symbolic::{raster_hash, FrameGridImage};
use crate::types::Reference;

/// Audio tags kept for the prompt.
pub const DEFAULT_TOP_K: usize = 5;

/// The top-`k` audio tags, most confident first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioTagList {
    tags: Vec<ScoredLabel>,
    k: usize,
}

impl AudioTagList {
    /// Sorts by score (descending, then label ascending) and keeps `k`.
    pub fn new(mut tags: Vec<ScoredLabel>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("audio top-k must be at least 1".into()));
        }
        tags.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.label.cmp(&b.label)));
        tags.truncate(k);
        Ok(AudioTagList { tags, k })
    }

    pub fn tags(&self) -> &[ScoredLabel] {
        &self.tags
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// One `- label (score)` line per tag.
    pub fn render(&self) -> String {
        self.tags
            .iter()
            .map(|t| format!("- {} ({:.2})", t.label, t.score))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn collect_audio_tags(audio: &AudioClip, tagger: &dyn AudioTaggerBackend, k: usize) -> Result<AudioTagList> {
    if audio.is_empty() {
        return Err(Error::InvalidInput("cannot tag empty audio".into()));
    }
    let labels = backends::tag_checked(tagger, audio).map_err(|e| Error::backend("audio tagging", e))?;
    AudioTagList::new(labels, k)
}

/// Lowercase, trimmed, internal whitespace collapsed.
pub fn normalize_category(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Distinct normalized category names, in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoundingCategorySet {
    categories: Vec<String>,
}

impl SoundingCategorySet {
    /// Normalizes and deduplicates `names`; errors when nothing non-empty remains.
    pub fn from_names(names: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut categories: Vec<String> = Vec::new();
        for name in names {
            let name = normalize_category(&name);
            if !name.is_empty() && !categories.contains(&name) {
                categories.push(name);
            }
        }
        if categories.is_empty() {
            return Err(Error::InvalidInput("no sounding categories".into()));
        }
        Ok(SoundingCategorySet { categories })
    }

    pub fn as_slice(&self) -> &[String] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Keeps the first `k` categories and returns the rest.
    pub fn truncate(&mut self, k: usize) -> Vec<String> {
        if self.categories.len() <= k {
            return Vec::new();
        }
        self.categories.split_off(k)
    }
}

/// The rendered LBRU prompt: instruction text with the tag block filled in,
/// plus the frame grid it refers to.
#[derive(Debug, Clone)]
pub struct PromptBundle<'a> {
    pub template: &'a PromptTemplate,
    pub system_text: String,
    pub tag_block: String,
    pub image: FrameGridImage,
}

impl<'a> PromptBundle<'a> {
    pub fn new(template: &'a PromptTemplate, tags: &AudioTagList, image: FrameGridImage) -> Result<Self> {
        let tag_block = tags.render();
        let frame_count = image.frame_count().to_string();
        let system_text = template.render(&[("audio_tags", &tag_block), ("frame_count", &frame_count)])?;
        Ok(PromptBundle {
            template,
            system_text,
            tag_block,
            image,
        })
    }

    fn recipe(&self) -> ImageRecipe {
        ImageRecipe {
            hash: raster_hash(&self.image.pixels),
            source_indices: self.image.source_indices.clone(),
            label_mode: self.image.label_style.mode,
            pivot: None,
        }
    }
}

/// Asks the chat model which tagged sounds come from visible objects.
///
/// A reply that never parses to a non-empty list falls back to the tag texts
/// themselves. More than `k` categories are cut to the first `k`.
pub fn identify_sounding_categories(
    ctx: &mut RunContext<'_>,
    bundle: &PromptBundle<'_>,
    tags: &AudioTagList,
    llm: &dyn ChatVisionBackend,
    attempts: u32,
) -> Result<SoundingCategorySet> {
    if tags.is_empty() {
        return Err(Error::InvalidInput("no audio tags to filter".into()));
    }
    let prompt = ChatPrompt {
        step: Step::Lbru,
        template: bundle.template,
        text: bundle.system_text.clone(),
        images: vec![(&bundle.image.pixels, bundle.recipe())],
    };
    let parsed = ask(
        ctx,
        llm,
        &prompt,
        attempts,
        |reply| parse_category_list(reply).and_then(|names| SoundingCategorySet::from_names(names).ok()),
        |set| Value::from(set.as_slice().to_vec()),
    )?;
    let mut set = match parsed {
        Some(set) => set,
        None => {
            let set = SoundingCategorySet::from_names(tags.tags().iter().map(|t| t.label.clone()))?;
            log::warn!("{}: category reply unusable, using the audio tags", ctx.sample);
            ctx.record(
                Step::Lbru,
                AuditEvent::Fallback {
                    reason: format!("no parseable category list after {attempts} attempts"),
                    value: Value::from(set.as_slice().to_vec()),
                },
            );
            ctx.flag(RunFlag::LbruFallback);
            set
        }
    };
    let dropped = set.truncate(tags.k());
    if !dropped.is_empty() {
        log::warn!("{}: more than {} categories, dropping {dropped:?}", ctx.sample, tags.k());
        ctx.flag(RunFlag::CategoryOverflow { dropped });
    }
    Ok(set)
}

/// `the <category> that is making sound`, with the category trimmed.
pub fn render_reference(category: &str) -> Result<Reference> {
    let category = category.split_whitespace().collect::<Vec<_>>().join(" ");
    if category.is_empty() {
        return Err(Error::InvalidInput("empty category".into()));
    }
    Ok(Reference::from_category(
        format!("the {category} that is making sound"),
        category,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{Script, ScriptedChat, ScriptedTagger};
    use crate::prompts::PromptSet;
    use crate::symbolic::{compose_grid, FrameLabelMode};
    use crate::types::{Fps, ReferenceSource, VideoClip};
    use image::RgbImage;

    fn grid() -> FrameGridImage {
        let clip = VideoClip::from_rasters("v", Fps::default(), vec![RgbImage::new(16, 16); 3]).unwrap();
        compose_grid(&clip, &[0, 1, 2], FrameLabelMode::Positional).unwrap()
    }

    fn tags(names: &[(&str, f32)]) -> AudioTagList {
        AudioTagList::new(names.iter().map(|(n, s)| ScoredLabel::new(*n, *s)).collect(), 5).unwrap()
    }

    #[test]
    fn top_k_with_alphabetical_ties() {
        let labels: Vec<ScoredLabel> = (0..10).map(|i| ScoredLabel::new(format!("t{i}"), i as f32 / 10.0)).collect();
        let list = AudioTagList::new(labels, 5).unwrap();
        let names: Vec<&str> = list.tags().iter().map(|t| t.label.as_str()).collect();
        assert_eq!(names, ["t9", "t8", "t7", "t6", "t5"]);

        let list = tags(&[("zebra", 0.7), ("apple", 0.7), ("mid", 0.9)]);
        let names: Vec<&str> = list.tags().iter().map(|t| t.label.as_str()).collect();
        assert_eq!(names, ["mid", "apple", "zebra"]);
        assert!(list.render().starts_with("- mid (0.90)\n- apple"));
    }

    #[test]
    fn collect_uses_tagger() {
        let tagger = ScriptedTagger::new(Script::always(vec![
            ScoredLabel::new("dog", 0.9),
            ScoredLabel::new("engine", 0.4),
            ScoredLabel::new("canine bark", 0.8),
        ]));
        let audio = AudioClip::new(vec![0.1; 100], 100).unwrap();
        let list = collect_audio_tags(&audio, &tagger, 2).unwrap();
        assert_eq!(list.tags().len(), 2);
        assert_eq!(list.tags()[1].label, "canine bark");
        let failing = ScriptedTagger::new(Script::failing("down"));
        assert!(matches!(collect_audio_tags(&audio, &failing, 5), Err(Error::Backend { .. })));
    }

    #[test]
    fn categories_normalize_and_dedup() {
        let set = SoundingCategorySet::from_names(["  Dog ", "dog", "Acoustic   Guitar"].map(String::from)).unwrap();
        assert_eq!(set.as_slice(), ["dog", "acoustic guitar"]);
        assert!(SoundingCategorySet::from_names(["  "].map(String::from)).is_err());
    }

    #[test]
    fn merged_reply_is_parsed() {
        let prompts = PromptSet::default();
        let list = tags(&[("dog", 0.9), ("canine bark", 0.8), ("engine", 0.3)]);
        let bundle = PromptBundle::new(&prompts.lbru, &list, grid()).unwrap();
        assert!(bundle.system_text.contains("- dog (0.90)\n- canine bark (0.80)\n- engine (0.30)"));
        let chat = ScriptedChat::replies(["Only a dog is visible.\n```json\n[\"dog\"]\n```"]);
        let mut ctx = RunContext::new("s");
        let set = identify_sounding_categories(&mut ctx, &bundle, &list, &chat, 3).unwrap();
        assert_eq!(set.as_slice(), ["dog"]);
        assert!(ctx.flags.is_empty());
        assert_eq!(ctx.calls.chat, 1);
    }

    #[test]
    fn unparseable_replies_fall_back_after_three_attempts() {
        let prompts = PromptSet::default();
        let list = tags(&[("silence", 0.9)]);
        let bundle = PromptBundle::new(&prompts.lbru, &list, grid()).unwrap();
        let chat = ScriptedChat::replies(["nothing", "[]", "still nothing", "[\"late\"]"]);
        let mut ctx = RunContext::new("s");
        let set = identify_sounding_categories(&mut ctx, &bundle, &list, &chat, 3).unwrap();
        assert_eq!(set.as_slice(), ["silence"]);
        assert_eq!(ctx.calls.chat, 3);
        assert_eq!(ctx.flags, [RunFlag::LbruFallback]);
    }

    #[test]
    fn overflow_is_truncated() {
        let prompts = PromptSet::default();
        let list = AudioTagList::new(vec![ScoredLabel::new("a", 0.5), ScoredLabel::new("b", 0.4)], 2).unwrap();
        let bundle = PromptBundle::new(&prompts.lbru, &list, grid()).unwrap();
        let chat = ScriptedChat::replies(["[\"a\", \"b\", \"c\"]"]);
        let mut ctx = RunContext::new("s");
        let set = identify_sounding_categories(&mut ctx, &bundle, &list, &chat, 3).unwrap();
        assert_eq!(set.as_slice(), ["a", "b"]);
        assert_eq!(ctx.flags, [RunFlag::CategoryOverflow { dropped: vec!["c".into()] }]);
    }

    #[test]
    fn references_follow_template() {
        let r = render_reference("dog").unwrap();
        assert_eq!(r.as_str(), "the dog that is making sound");
        assert_eq!(r.source(), ReferenceSource::LbruCategory);
        assert_eq!(r.category(), Some("dog"));
        assert_eq!(
            render_reference("  ambulance siren ").unwrap().as_str(),
            "the ambulance siren that is making sound"
        );
        assert!(render_reference(" ").is_err());
    }
}
