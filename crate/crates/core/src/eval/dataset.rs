//! Dataset loaders for the referring-expression layout
//! (`meta_expressions.json` + `JPEGImages/` + `Annotations/` or `mask_dict.json`)
//! and the audio-visual layout (`metadata.csv` + per-video `frames/`, `masks/`,
//! `audio.wav`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio_seg::AudioClip;
use crate::config::Task;
use crate::error::{Error, Result};
use crate::eval::maskio::read_labels;
use crate::types::{BinaryMask, Fps, VideoClip};

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetVideo {
    pub id: String,
    pub frame_names: Vec<String>,
    pub frame_paths: Vec<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub fps: Fps,
    pub audio: Option<PathBuf>,
}

impl DatasetVideo {
    pub fn load(&self) -> Result<VideoClip> {
        let rasters = self
            .frame_paths
            .iter()
            .map(|p| image::open(p).map(|i| i.to_rgb8()).map_err(|e| Error::Image(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>>>()?;
        VideoClip::from_rasters(self.id.clone(), self.fps, rasters)
    }

    pub fn load_audio(&self) -> Result<AudioClip> {
        let path = self
            .audio
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("video {} has no audio track", self.id)))?;
        AudioClip::load_wav(path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum SampleQuery {
    /// A referring expression.
    Text(String),
    /// The video's own soundtrack.
    Audio,
}

/// One unit of work: a video, what to segment in it, and optionally the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub id: String,
    /// Index into [`Dataset::videos`].
    pub video: usize,
    pub query: SampleQuery,
    pub truth: Option<Vec<BinaryMask>>,
    /// Annotator, for grouped averaging.
    pub group: Option<String>,
    /// Ground-truth sounding categories, when the metadata lists them.
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: Vec<SkippedSample>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Skip samples without complete ground truth.
    pub require_truth: bool,
    /// Keep only rows of this split (audio-visual layout).
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub task: Task,
    pub videos: Vec<DatasetVideo>,
    pub samples: Vec<AnnotatedSample>,
    pub report: LoadReport,
}

impl Dataset {
    pub fn load(root: &Path, task: Task, opts: &LoadOptions) -> Result<Self> {
        let mut ds = Dataset {
            root: root.to_path_buf(),
            task,
            videos: Vec::new(),
            samples: Vec::new(),
            report: LoadReport::default(),
        };
        match task {
            Task::Rvos => ds.load_rvos(opts)?,
            Task::Avs => ds.load_avs(opts)?,
        }
        ds.report.loaded = ds.samples.len();
        for s in &ds.report.skipped {
            log::warn!("skipping {}: {}", s.id, s.reason);
        }
        Ok(ds)
    }

    pub fn video_of(&self, sample: &AnnotatedSample) -> &DatasetVideo {
        &self.videos[sample.video]
    }

    fn skip(&mut self, id: impl Into<String>, reason: impl Into<String>) {
        self.report.skipped.push(SkippedSample {
            id: id.into(),
            reason: reason.into(),
        });
    }

    fn load_rvos(&mut self, opts: &LoadOptions) -> Result<()> {
        let meta_path = self.root.join("meta_expressions.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: RvosMeta =
            serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", meta_path.display())))?;
        let rle_path = self.root.join("mask_dict.json");
        let rle: Option<BTreeMap<String, Vec<Option<Rle>>>> = if rle_path.exists() {
            let text = std::fs::read_to_string(&rle_path).map_err(|e| Error::io(&rle_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", rle_path.display())))?)
        } else {
            None
        };

        for (vid, entry) in meta.videos {
            let ids: Vec<String> = entry.expressions.keys().map(|k| format!("{vid}/{k}")).collect();
            let fps = match entry.fps {
                Some(n) => Fps::integer(n)?,
                None => Fps::default(),
            };
            let video = match self.scan_frames(&vid, &self.root.join("JPEGImages").join(&vid), &entry.frames, fps, None) {
                Ok(v) => v,
                Err(reason) => {
                    for id in ids {
                        self.skip(id, reason.clone());
                    }
                    continue;
                }
            };
            let ann_dir = self.root.join("Annotations").join(&vid);
            let labels = if ann_dir.is_dir() {
                match read_label_maps(&ann_dir, &video) {
                    Ok(maps) => maps,
                    Err(reason) => {
                        for id in ids {
                            self.skip(id, reason.clone());
                        }
                        continue;
                    }
                }
            } else {
                None
            };
            let video_idx = self.videos.len();
            self.videos.push(video);
            let video = &self.videos[video_idx];

            let mut accepted = Vec::new();
            let mut rejected = Vec::new();
            for (exp_id, exp) in entry.expressions {
                let id = format!("{vid}/{exp_id}");
                let truth = match (&labels, &rle) {
                    (Some(maps), _) => match exp.object_ids() {
                        Ok(obj) => Some(maps.iter().map(|m| m.objects(&obj)).collect()),
                        Err(reason) => {
                            rejected.push((id, reason));
                            continue;
                        }
                    },
                    (None, Some(rle)) => match rle_truth(rle, &exp, video) {
                        Ok(t) => t,
                        Err(reason) => {
                            rejected.push((id, reason));
                            continue;
                        }
                    },
                    (None, None) => None,
                };
                if opts.require_truth && truth.is_none() {
                    rejected.push((id, "no ground-truth masks".to_string()));
                    continue;
                }
                if exp.exp.trim().is_empty() {
                    rejected.push((id, "empty expression".to_string()));
                    continue;
                }
                accepted.push(AnnotatedSample {
                    id,
                    video: video_idx,
                    query: SampleQuery::Text(exp.exp),
                    truth,
                    group: exp.annotator.map(|a| json_scalar(&a)),
                    categories: Vec::new(),
                });
            }
            self.samples.extend(accepted);
            for (id, reason) in rejected {
                self.skip(id, reason);
            }
        }
        Ok(())
    }

    fn load_avs(&mut self, opts: &LoadOptions) -> Result<()> {
        let csv_path = self.root.join("metadata.csv");
        let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| Error::Dataset(format!("{}: {e}", csv_path.display())))?;
        let rows: Vec<AvsRow> = reader
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Dataset(format!("{}: {e}", csv_path.display())))?;
        for row in rows {
            if opts.split.as_ref().is_some_and(|s| row.split.as_ref() != Some(s)) {
                continue;
            }
            let dir = self.root.join(&row.uid);
            let audio = dir.join("audio.wav");
            let duration = match wav_duration(&audio) {
                Ok(d) => d,
                Err(reason) => {
                    self.skip(&row.uid, reason);
                    continue;
                }
            };
            let frame_dir = dir.join("frames");
            let names = match list_stems(&frame_dir) {
                Ok(n) if !n.is_empty() => n,
                Ok(_) => {
                    self.skip(&row.uid, format!("{} has no frames", frame_dir.display()));
                    continue;
                }
                Err(reason) => {
                    self.skip(&row.uid, reason);
                    continue;
                }
            };
            let fps = match row.fps {
                Some(n) => Fps::integer(n)?,
                None => Fps::new(names.len() as u32, (duration.round() as u32).max(1))?,
            };
            let video = match self.scan_frames(&row.uid, &frame_dir, &names, fps, Some(audio)) {
                Ok(v) => v,
                Err(reason) => {
                    self.skip(&row.uid, reason);
                    continue;
                }
            };
            let mask_dir = dir.join("masks");
            let truth = if mask_dir.is_dir() {
                match read_label_maps(&mask_dir, &video) {
                    Ok(Some(maps)) => Some(maps.iter().map(|m| m.foreground()).collect()),
                    Ok(None) => None,
                    Err(reason) => {
                        self.skip(&row.uid, reason);
                        continue;
                    }
                }
            } else {
                None
            };
            if opts.require_truth && truth.is_none() {
                self.skip(&row.uid, "no ground-truth masks");
                continue;
            }
            let categories = row
                .categories
                .or(row.label)
                .map(|s| s.split(';').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect())
                .unwrap_or_default();
            self.videos.push(video);
            self.samples.push(AnnotatedSample {
                id: row.uid,
                video: self.videos.len() - 1,
                query: SampleQuery::Audio,
                truth,
                group: None,
                categories,
            });
        }
        Ok(())
    }

    /// Checks every listed frame exists and shares one size.
    fn scan_frames(
        &self,
        id: &str,
        dir: &Path,
        names: &[String],
        fps: Fps,
        audio: Option<PathBuf>,
    ) -> std::result::Result<DatasetVideo, String> {
        if names.is_empty() {
            return Err(format!("video {id} lists no frames"));
        }
        let mut paths = Vec::with_capacity(names.len());
        let mut missing = Vec::new();
        for name in names {
            match find_image(dir, name) {
                Some(p) => paths.push(p),
                None => missing.push(name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(format!("missing frames in {}: {}", dir.display(), missing.join(", ")));
        }
        let mut dims = None;
        for p in &paths {
            let d = image::image_dimensions(p).map_err(|e| format!("{}: {e}", p.display()))?;
            match dims {
                None => dims = Some(d),
                Some(first) if first != d => {
                    return Err(format!("{}: size {:?} differs from {:?}", p.display(), d, first));
                }
                _ => {}
            }
        }
        let (width, height) = dims.expect("at least one frame");
        Ok(DatasetVideo {
            id: id.to_string(),
            frame_names: names.to_vec(),
            frame_paths: paths,
            width,
            height,
            fps,
            audio,
        })
    }
}

/// All label maps of a video, `None` when no mask file exists at all.
fn read_label_maps(dir: &Path, video: &DatasetVideo) -> std::result::Result<Option<Vec<crate::eval::maskio::LabelMap>>, String> {
    let paths: Vec<PathBuf> = video.frame_names.iter().map(|n| dir.join(format!("{n}.png"))).collect();
    let present = paths.iter().filter(|p| p.exists()).count();
    if present == 0 {
        return Ok(None);
    }
    let missing: Vec<&str> = video
        .frame_names
        .iter()
        .zip(&paths)
        .filter(|(_, p)| !p.exists())
        .map(|(n, _)| n.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(format!("missing masks in {}: {}", dir.display(), missing.join(", ")));
    }
    let mut maps = Vec::with_capacity(paths.len());
    for p in &paths {
        let m = read_labels(p).map_err(|e| e.to_string())?;
        if (m.width, m.height) != (video.width, video.height) {
            return Err(format!(
                "{}: mask size {}x{} differs from frame size {}x{}",
                p.display(),
                m.width,
                m.height,
                video.width,
                video.height
            ));
        }
        maps.push(m);
    }
    Ok(Some(maps))
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS.iter().map(|ext| dir.join(format!("{stem}.{ext}"))).find(|p| p.is_file())
}

/// Image stems in a directory, numeric names in numeric order.
fn list_stems(dir: &Path) -> std::result::Result<Vec<String>, String> {
    let entries = std::fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_owned))
        .collect();
    stems.sort_by(|a, b| match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    });
    stems.dedup();
    Ok(stems)
}

fn wav_duration(path: &Path) -> std::result::Result<f64, String> {
    let reader = hound::WavReader::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let spec = reader.spec();
    Ok(f64::from(reader.duration()) / f64::from(spec.sample_rate))
}

fn json_scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Deserialize)]
struct RvosMeta {
    videos: BTreeMap<String, RvosVideo>,
}

#[derive(Debug, Deserialize)]
struct RvosVideo {
    expressions: BTreeMap<String, RvosExpression>,
    frames: Vec<String>,
    #[serde(default)]
    fps: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct RvosExpression {
    exp: String,
    #[serde(default)]
    obj_id: Option<Value>,
    #[serde(default)]
    anno_id: Option<Value>,
    #[serde(default)]
    annotator: Option<Value>,
}

fn scalar_list(v: &Value) -> Vec<&Value> {
    match v {
        Value::Array(items) => items.iter().collect(),
        other => vec![other],
    }
}

impl RvosExpression {
    /// Palette indices of the referred objects.
    fn object_ids(&self) -> std::result::Result<Vec<u8>, String> {
        let v = self.obj_id.as_ref().ok_or("expression has no obj_id")?;
        scalar_list(v)
            .into_iter()
            .map(|x| json_scalar(x).parse::<u8>().map_err(|_| format!("obj_id {x} is not a palette index")))
            .collect()
    }

    fn anno_ids(&self) -> std::result::Result<Vec<String>, String> {
        let v = self.anno_id.as_ref().ok_or("expression has no anno_id")?;
        Ok(scalar_list(v).into_iter().map(json_scalar).collect())
    }
}

/// COCO run-length encoding: column-major runs starting with background.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Rle {
    pub size: [u32; 2],
    pub counts: RleCounts,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Compressed(String),
    Raw(Vec<u64>),
}

impl Rle {
    pub fn decode(&self) -> Result<BinaryMask> {
        let [h, w] = self.size;
        let runs = match &self.counts {
            RleCounts::Raw(r) => r.clone(),
            RleCounts::Compressed(s) => decode_counts(s)?,
        };
        let n = h as usize * w as usize;
        let mut col_major = Vec::with_capacity(n);
        let mut value = false;
        for run in runs {
            col_major.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        if col_major.len() != n {
            return Err(Error::Dataset(format!("RLE covers {} pixels, mask has {n}", col_major.len())));
        }
        Ok(BinaryMask::from_fn(h, w, |x, y| col_major[x as usize * h as usize + y as usize]))
    }
}

/// The LEB128-like string form used by COCO tools.
fn decode_counts(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = i64::from(bytes[p]) - 48;
            if !(0..64).contains(&c) || k > 12 {
                return Err(Error::Dataset(format!("bad RLE byte {:?}", bytes[p] as char)));
            }
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
            if p >= bytes.len() {
                return Err(Error::Dataset("truncated RLE string".into()));
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| Error::Dataset("negative RLE run".into())))
        .collect()
}

/// Union of the expression's annotation tracks, frame by frame.
fn rle_truth(
    dict: &BTreeMap<String, Vec<Option<Rle>>>,
    exp: &RvosExpression,
    video: &DatasetVideo,
) -> std::result::Result<Option<Vec<BinaryMask>>, String> {
    let ids = exp.anno_ids()?;
    let mut masks = vec![BinaryMask::empty(video.height, video.width); video.frame_names.len()];
    for id in ids {
        let track = dict.get(&id).ok_or_else(|| format!("anno_id {id} missing from mask_dict.json"))?;
        if track.len() != masks.len() {
            return Err(format!("anno_id {id} has {} frames, video has {}", track.len(), masks.len()));
        }
        for (mask, rle) in masks.iter_mut().zip(track) {
            if let Some(rle) = rle {
                let m = rle.decode().map_err(|e| e.to_string())?;
                mask.union_with(&m).map_err(|e| format!("anno_id {id}: {e}"))?;
            }
        }
    }
    Ok(Some(masks))
}

#[derive(Debug, Deserialize)]
struct AvsRow {
    uid: String,
    #[serde(default)]
    split: Option<String>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    categories: Option<String>,
    #[serde(default)]
    fps: Option<u32>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compressed_rle() {
        // 2x3 mask, column-major runs [1, 2, 3]: pixel (0,1) and (1,0) set
        let encoded = encode_counts(&[1, 2, 3]);
        let rle = Rle {
            size: [2, 3],
            counts: RleCounts::Compressed(encoded),
        };
        let m = rle.decode().unwrap();
        assert_eq!(m.bits(), &[false, true, false, true, false, false]);
        let raw = Rle {
            size: [2, 3],
            counts: RleCounts::Raw(vec![1, 2, 3]),
        };
        assert_eq!(raw.decode().unwrap(), m);
        let short = Rle {
            size: [2, 3],
            counts: RleCounts::Raw(vec![1, 2]),
        };
        assert!(short.decode().is_err());
    }

    /// Independent encoder written from the format description.
    fn encode_counts(counts: &[i64]) -> String {
        let mut out = String::new();
        for (i, &c) in counts.iter().enumerate() {
            let mut x = if i > 2 { c - counts[i - 2] } else { c };
            loop {
                let mut byte = x & 0x1f;
                x >>= 5;
                let more = if byte & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    byte |= 0x20;
                }
                out.push((byte as u8 + 48) as char);
                if !more {
                    break;
                }
            }
        }
        out
    }

    #[test]
    fn rle_round_trips_long_runs() {
        let runs = [0i64, 500, 3, 1000, 40, 2];
        let total: i64 = runs.iter().sum();
        let rle = Rle {
            size: [1, total as u32],
            counts: RleCounts::Compressed(encode_counts(&runs)),
        };
        let m = rle.decode().unwrap();
        assert_eq!(m.area(), 1502);
    }
}
