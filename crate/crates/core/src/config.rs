//! Pipeline settings, dataset presets, and the TOML run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpt_ps::{BoxStrategy, FrameStrategy, Thresholds, MAX_CANDIDATES};
use crate::lbru::DEFAULT_TOP_K;
use crate::symbolic::FrameLabelMode;

/// Chat attempts per step before the documented fallback.
pub const DEFAULT_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Rvos,
    Avs,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rvos" => Ok(Task::Rvos),
            "avs" => Ok(Task::Avs),
            other => Err(Error::Config(format!("unknown task {other:?} (expected rvos or avs)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Rvos => "rvos",
            Task::Avs => "avs",
        })
    }
}

/// How a video is divided before pivot selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClipMode {
    /// Consecutive clips of `frames_per_clip × interval` frames.
    Divide { frames_per_clip: usize, interval: usize },
    /// One clip over the whole video, `frames` sampled evenly.
    Whole { frames: usize },
}

/// Everything that shapes one pipeline run apart from the backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub clips: ClipMode,
    pub thresholds: Thresholds,
    pub max_candidates: usize,
    pub attempts: u32,
    pub frame_strategy: FrameStrategy,
    pub box_strategy: BoxStrategy,
    pub label_mode: FrameLabelMode,
    pub audio_top_k: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Preset::RefYoutubeVos.config()
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        match self.clips {
            ClipMode::Divide { frames_per_clip, interval } if frames_per_clip == 0 || interval == 0 => {
                return Err(Error::Config("frames_per_clip and interval must be at least 1".into()))
            }
            ClipMode::Whole { frames: 0 } => return Err(Error::Config("frames must be at least 1".into())),
            _ => {}
        }
        self.thresholds.validate()?;
        if self.max_candidates == 0 {
            return Err(Error::Config("max_candidates must be at least 1".into()));
        }
        if self.attempts == 0 {
            return Err(Error::Config("attempts must be at least 1".into()));
        }
        if self.audio_top_k == 0 {
            return Err(Error::Config("audio_top_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` ablation switch (`frame=…` or `box=…`).
    pub fn apply_ablation(&mut self, switch: &str) -> Result<()> {
        let (key, value) = switch
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("ablation {switch:?} is not key=value")))?;
        match key.trim() {
            "frame" => self.frame_strategy = value.trim().parse()?,
            "box" => self.box_strategy = value.trim().parse()?,
            other => return Err(Error::Config(format!("unknown ablation key {other:?} (expected frame or box)"))),
        }
        Ok(())
    }
}

/// Per-dataset defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    RefYoutubeVos,
    RefDavis17,
    Mevis,
    AvsS4,
    AvsMs3,
    Avss,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::RefYoutubeVos,
        Preset::RefDavis17,
        Preset::Mevis,
        Preset::AvsS4,
        Preset::AvsMs3,
        Preset::Avss,
    ];

    pub fn task(self) -> Task {
        match self {
            Preset::RefYoutubeVos | Preset::RefDavis17 | Preset::Mevis => Task::Rvos,
            Preset::AvsS4 | Preset::AvsMs3 | Preset::Avss => Task::Avs,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::RefYoutubeVos => "ref-youtube-vos",
            Preset::RefDavis17 => "ref-davis17",
            Preset::Mevis => "mevis",
            Preset::AvsS4 => "avs-s4",
            Preset::AvsMs3 => "avs-ms3",
            Preset::Avss => "avss",
        }
    }

    pub fn config(self) -> PipelineConfig {
        let (clips, thresholds, box_strategy) = match self {
            Preset::RefYoutubeVos => (divide(5, 10), Thresholds::RVOS, BoxStrategy::Gpt),
            Preset::RefDavis17 | Preset::Mevis => (divide(5, 5), Thresholds::RVOS, BoxStrategy::Gpt),
            Preset::AvsS4 | Preset::AvsMs3 => (ClipMode::Whole { frames: 5 }, Thresholds::AVS, BoxStrategy::Syntax),
            Preset::Avss => (ClipMode::Whole { frames: 10 }, Thresholds::AVS, BoxStrategy::Syntax),
        };
        PipelineConfig {
            clips,
            thresholds,
            max_candidates: MAX_CANDIDATES,
            attempts: DEFAULT_ATTEMPTS,
            frame_strategy: FrameStrategy::Gpt,
            box_strategy,
            label_mode: FrameLabelMode::Positional,
            audio_top_k: DEFAULT_TOP_K,
        }
    }

    pub fn default_for(task: Task) -> Preset {
        match task {
            Task::Rvos => Preset::RefYoutubeVos,
            Task::Avs => Preset::AvsS4,
        }
    }
}

fn divide(frames_per_clip: usize, interval: usize) -> ClipMode {
    ClipMode::Divide { frames_per_clip, interval }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.as_str()).collect();
                Error::Config(format!("unknown preset {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

/// The `[run]` file: a preset plus overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<Preset>,
    /// Directory of prompt template overrides.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    /// Persistent chat reply cache.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default)]
    pub pipeline: Option<toml::Table>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.templates = cfg.templates.map(|p| base.join(p));
        cfg.cache = cfg.cache.map(|p| base.join(p));
        Ok(cfg)
    }

    /// The preset's settings with `[pipeline]` keys layered on top.
    pub fn pipeline(&self, task: Task) -> Result<PipelineConfig> {
        let preset = self.preset.unwrap_or(Preset::default_for(task));
        if preset.task() != task {
            return Err(Error::Config(format!("preset {} is for {}, not {task}", preset.as_str(), preset.task())));
        }
        let mut merged = toml::Table::try_from(preset.config()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(overrides) = &self.pipeline {
            for (k, v) in overrides {
                merged.insert(k.clone(), v.clone());
            }
        }
        let cfg: PipelineConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[pipeline]: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
