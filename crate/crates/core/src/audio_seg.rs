//! Splitting the audio track into homogeneous segments and deciding which
//! sounding categories are active in each one.
//!
//! Segments come from a sound-event backend. Every non-empty combination of
//! categories is rendered as text and embedded next to each segment's audio,
//! and a segment takes the combination whose text embedding has the highest
//! cosine similarity to its audio embedding. The per-frame silence map for one
//! category then follows from which segment contains each frame's midpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{self, CrossModalEmbedderBackend, SoundEventBackend};
use crate::error::{Error, Result};
use crate::lbru::SoundingCategorySet;
use crate::types::Fps;

/// Shortest segment kept; shorter spans merge into their neighbour.
pub const MIN_SEGMENT_SECS: f64 = 0.5;

/// Largest category set whose combinations are enumerated (2^6 − 1 = 63).
pub const MAX_CATEGORIES: usize = 6;

/// Mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
    /// Start of this clip within the source recording, in seconds.
    offset_secs: f64,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("audio contains non-finite samples".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
            offset_secs: 0.0,
        })
    }

    /// Reads a PCM WAV file, averaging channels down to mono.
    pub fn load_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path).map_err(|e| match e {
            hound::Error::IoError(io) => Error::io(path, io),
            other => Error::Dataset(format!("{}: {other}", path.display())),
        })?;
        let spec = reader.spec();
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
            }
        };
        let channels = usize::from(spec.channels.max(1));
        let mono = interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / frame.len() as f32)
            .collect();
        Self::new(mono, spec.sample_rate)
    }

    /// Writes 16-bit mono PCM.
    pub fn save_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let wrap = |e: hound::Error| Error::Dataset(format!("{}: {e}", path.display()));
        let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * f32::from(i16::MAX)).round() as i16;
            writer.write_sample(v).map_err(wrap)?;
        }
        writer.finalize().map_err(wrap)
    }

    pub fn with_offset(mut self, offset_secs: f64) -> Self {
        self.offset_secs = offset_secs;
        self
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn offset_secs(&self) -> f64 {
        self.offset_secs
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The samples covering `[start, end)` seconds of this clip.
    pub fn slice(&self, start: f64, end: f64) -> AudioClip {
        let rate = f64::from(self.sample_rate);
        let n = self.samples.len();
        let a = ((start * rate).round().max(0.0) as usize).min(n);
        let b = ((end * rate).round().max(0.0) as usize).clamp(a, n);
        AudioClip {
            samples: self.samples[a..b].to_vec(),
            sample_rate: self.sample_rate,
            offset_secs: self.offset_secs + start,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioSegment {
    pub index: usize,
    pub start: f64,
    pub end: f64,
}

impl AudioSegment {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub segments: Vec<AudioSegment>,
    pub degraded: bool,
}

/// Turns raw change points into contiguous segments covering `[0, duration]`.
///
/// Boundaries outside the open interval are dropped; a segment shorter than
/// [`MIN_SEGMENT_SECS`] is merged into the one after it, and a short final
/// segment into the one before it.
pub fn segments_from_boundaries(duration: f64, boundaries: &[f64], min_len: f64) -> Vec<AudioSegment> {
    let mut cuts: Vec<f64> = boundaries
        .iter()
        .copied()
        .filter(|&t| t > 0.0 && t < duration)
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut kept: Vec<f64> = Vec::with_capacity(cuts.len());
    let mut prev = 0.0;
    for cut in cuts {
        if cut - prev >= min_len {
            kept.push(cut);
            prev = cut;
        }
    }
    while let Some(&last) = kept.last() {
        if duration - last < min_len {
            kept.pop();
        } else {
            break;
        }
    }

    let mut edges = Vec::with_capacity(kept.len() + 2);
    edges.push(0.0);
    edges.extend(kept);
    edges.push(duration);
    edges
        .windows(2)
        .enumerate()
        .map(|(index, w)| AudioSegment {
            index,
            start: w[0],
            end: w[1],
        })
        .collect()
}

/// Splits `audio` at the sound-event backend's change points. A backend
/// failure yields one segment over the whole clip, marked degraded.
pub fn segment_audio(audio: &AudioClip, sed: &dyn SoundEventBackend) -> Result<Segmentation> {
    if audio.is_empty() {
        return Err(Error::InvalidInput("cannot segment empty audio".into()));
    }
    let duration = audio.duration_secs();
    match backends::boundaries_checked(sed, audio) {
        Ok(times) => Ok(Segmentation {
            segments: segments_from_boundaries(duration, &times, MIN_SEGMENT_SECS),
            degraded: false,
        }),
        Err(err) => {
            log::warn!("sound event detection failed, using one segment: {err}");
            Ok(Segmentation {
                segments: segments_from_boundaries(duration, &[], MIN_SEGMENT_SECS),
                degraded: true,
            })
        }
    }
}

/// A non-empty subset of the sounding categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCombination {
    /// Positions into the category set, ascending.
    pub members: Vec<usize>,
    pub categories: Vec<String>,
    pub rendered_text: String,
}

/// All `2^n − 1` non-empty subsets, ordered by size and then
/// lexicographically by member positions.
pub fn enumerate_combinations(categories: &SoundingCategorySet) -> Result<Vec<LabelCombination>> {
    let names = categories.as_slice();
    let n = names.len();
    if n == 0 {
        return Err(Error::InvalidInput("no categories to combine".into()));
    }
    if n > MAX_CATEGORIES {
        return Err(Error::Config(format!(
            "{n} sounding categories exceed the limit of {MAX_CATEGORIES}; lower audio_top_k"
        )));
    }
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << n))
        .map(|bits| (0..n).filter(|i| bits & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    Ok(subsets
        .into_iter()
        .map(|members| {
            let cats: Vec<String> = members.iter().map(|&i| names[i].clone()).collect();
            LabelCombination {
                rendered_text: cats.join(" and "),
                categories: cats,
                members,
            }
        })
        .collect())
}

/// Cosine similarity in f64; zero vectors score 0.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// For each audio vector, the 0-based index of the most similar text vector.
/// Earlier text vectors win exact ties.
pub fn argmax_similarity(audio: &[Vec<f32>], text: &[Vec<f32>]) -> Vec<usize> {
    audio
        .iter()
        .map(|a| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (j, t) in text.iter().enumerate() {
                let sim = cosine_similarity(a, t);
                if sim > best_sim {
                    best = j;
                    best_sim = sim;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLabelAssignment {
    /// 1-based combination index per segment.
    pub labels: Vec<usize>,
    /// The categories of the chosen combination per segment.
    pub category_sets: Vec<Vec<String>>,
    pub degraded: bool,
}

impl SegmentLabelAssignment {
    fn from_indices(indices: Vec<usize>, combinations: &[LabelCombination], degraded: bool) -> Self {
        SegmentLabelAssignment {
            category_sets: indices.iter().map(|&j| combinations[j].categories.clone()).collect(),
            labels: indices.into_iter().map(|j| j + 1).collect(),
            degraded,
        }
    }
}

/// Picks a label combination for every segment by embedding similarity.
///
/// If the embedder fails, every segment gets the full category set and the
/// assignment is marked degraded.
pub fn assign_labels(
    audio: &AudioClip,
    segments: &[AudioSegment],
    combinations: &[LabelCombination],
    embedder: &dyn CrossModalEmbedderBackend,
) -> Result<SegmentLabelAssignment> {
    if segments.is_empty() || combinations.is_empty() {
        return Err(Error::InvalidInput(
            "label assignment needs at least one segment and one combination".into(),
        ));
    }
    match embed_all(audio, segments, combinations, embedder) {
        Ok((audio_vecs, text_vecs)) => Ok(SegmentLabelAssignment::from_indices(
            argmax_similarity(&audio_vecs, &text_vecs),
            combinations,
            false,
        )),
        Err(err) => {
            log::warn!("embedding failed, assigning every category to every segment: {err}");
            let full = combinations
                .iter()
                .enumerate()
                .max_by_key(|(_, c)| c.members.len())
                .map(|(j, _)| j)
                .unwrap_or(0);
            Ok(SegmentLabelAssignment::from_indices(
                vec![full; segments.len()],
                combinations,
                true,
            ))
        }
    }
}

type Embeddings = (Vec<Vec<f32>>, Vec<Vec<f32>>);

fn embed_all(
    audio: &AudioClip,
    segments: &[AudioSegment],
    combinations: &[LabelCombination],
    embedder: &dyn CrossModalEmbedderBackend,
) -> std::result::Result<Embeddings, backends::BackendError> {
    let audio_vecs = segments
        .iter()
        .map(|s| embedder.embed_audio(&audio.slice(s.start, s.end)).and_then(backends::check_embedding))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let text_vecs = combinations
        .iter()
        .map(|c| embedder.embed_text(&c.rendered_text).and_then(backends::check_embedding))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let dim = audio_vecs[0].len();
    if audio_vecs.iter().chain(&text_vecs).any(|v| v.len() != dim) {
        return Err(backends::BackendError::Protocol(
            "embedding dimensions differ between calls".into(),
        ));
    }
    Ok((audio_vecs, text_vecs))
}

/// Index of the segment containing time `t`; times past the end belong to the
/// last segment and a time on an edge belongs to the later segment.
pub fn segment_at(segments: &[AudioSegment], t: f64) -> usize {
    segments
        .iter()
        .rposition(|s| s.start <= t)
        .unwrap_or(0)
}

/// `true` for every frame whose midpoint falls in a segment where `category`
/// is not sounding.
pub fn silence_map(
    assignment: &SegmentLabelAssignment,
    segments: &[AudioSegment],
    category: &str,
    frame_count: usize,
    fps: Fps,
) -> Vec<bool> {
    (0..frame_count)
        .map(|f| {
            let seg = segment_at(segments, fps.frame_midpoint(f));
            !assignment.category_sets[seg].iter().any(|c| c == category)
        })
        .collect()
}
