//! Synthetic fixture datasets for tests, demos and the acceptance suite.
//!
//! [`write_rvos_fixture`] lays out moving shapes in the referring-expression
//! layout with palette annotations and a `backends.toml` pointing at the
//! ground-truth oracle. [`write_avs_alternating`] lays out one audio-visual
//! video where two objects take turns sounding, plus a scripted scenario that
//! drives the whole audio pipeline.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde_json::json;

use crate::audio_seg::AudioClip;
use crate::error::{Error, Result};
use crate::eval::maskio::{write_labels, write_mask};
use crate::types::{BinaryMask, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone)]
struct Object {
    id: u8,
    name: &'static str,
    colour: [u8; 3],
    shape: Shape,
    size: (f64, f64),
    start: (f64, f64),
    velocity: (f64, f64),
}

impl Object {
    /// Whether pixel `(x, y)` is covered at frame `t`.
    fn covers(&self, x: u32, y: u32, t: usize, w: u32, h: u32) -> bool {
        let (cx, cy) = self.centre(t, w, h);
        let (dx, dy) = (f64::from(x) + 0.5 - cx, f64::from(y) + 0.5 - cy);
        let (rx, ry) = (self.size.0 / 2.0, self.size.1 / 2.0);
        match self.shape {
            Shape::Rect => dx.abs() <= rx && dy.abs() <= ry,
            Shape::Ellipse => (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0,
        }
    }

    /// Centre bouncing inside the frame.
    fn centre(&self, t: usize, w: u32, h: u32) -> (f64, f64) {
        let bounce = |start: f64, v: f64, half: f64, extent: f64| {
            let span = (extent - 2.0 * half).max(1.0);
            let p = (start - half + v * t as f64).rem_euclid(2.0 * span);
            half + if p > span { 2.0 * span - p } else { p }
        };
        (
            bounce(self.start.0, self.velocity.0, self.size.0 / 2.0, f64::from(w)),
            bounce(self.start.1, self.velocity.1, self.size.1 / 2.0, f64::from(h)),
        )
    }
}

/// Texture that differs between frames, so every frame has a distinct hash.
fn background(x: u32, y: u32, t: usize) -> Rgb<u8> {
    let t = t as u32;
    let v = (x * 7 + y * 13 + t * 29) % 41;
    Rgb([40 + v as u8, 60 + ((v * 3) % 41) as u8, 80 + ((v + t) % 37) as u8])
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvosFixture {
    pub width: u32,
    pub height: u32,
    /// Frame count per video.
    pub frames: Vec<usize>,
}

impl Default for RvosFixture {
    /// Five videos whose lengths cover single, merged and split clip plans.
    fn default() -> Self {
        RvosFixture {
            width: 64,
            height: 48,
            frames: vec![30, 45, 60, 37, 52],
        }
    }
}

fn video_objects(v: usize) -> Vec<Object> {
    let k = v as f64;
    vec![
        Object {
            id: 1,
            name: "red square",
            colour: [220, 30, 30],
            shape: Shape::Rect,
            size: (14.0 + k, 12.0),
            start: (10.0 + 3.0 * k, 12.0),
            velocity: (1.3 + 0.2 * k, 0.7),
        },
        Object {
            id: 2,
            name: "blue ball",
            colour: [30, 60, 230],
            shape: Shape::Ellipse,
            size: (12.0, 12.0 + k),
            start: (44.0, 30.0 - k),
            velocity: (-0.9, 0.5 + 0.1 * k),
        },
    ]
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Writes the referring-expression fixture under `root`: one expression per
/// object, two objects per video. Returns the number of expressions.
pub fn write_rvos_fixture(root: &Path, spec: &RvosFixture) -> Result<usize> {
    let (w, h) = (spec.width, spec.height);
    let mut videos = serde_json::Map::new();
    let mut expressions_total = 0;
    for (v, &t_len) in spec.frames.iter().enumerate() {
        let vid = format!("video{v:02}");
        let objects = video_objects(v);
        let names: Vec<String> = (0..t_len).map(|t| format!("{t:05}")).collect();
        for (t, name) in names.iter().enumerate() {
            let mut labels = vec![0u8; (w * h) as usize];
            let img = RgbImage::from_fn(w, h, |x, y| {
                let mut px = background(x, y, t);
                for o in &objects {
                    if o.covers(x, y, t, w, h) {
                        px = Rgb(o.colour);
                        labels[(y * w + x) as usize] = o.id;
                    }
                }
                px
            });
            save_png(&root.join("JPEGImages").join(&vid).join(format!("{name}.png")), &img)?;
            write_labels(&root.join("Annotations").join(&vid).join(format!("{name}.png")), w, h, &labels)?;
        }
        let expressions: serde_json::Map<String, serde_json::Value> = objects
            .iter()
            .enumerate()
            .map(|(i, o)| (i.to_string(), json!({"exp": format!("the {} moving around", o.name), "obj_id": o.id.to_string()})))
            .collect();
        expressions_total += expressions.len();
        videos.insert(vid, json!({"expressions": expressions, "frames": names}));
    }
    write_json(&root.join("meta_expressions.json"), &json!({ "videos": videos }))?;
    let toml = "[default]\nendpoint = \"mock:oracle\"\n";
    std::fs::write(root.join("backends.toml"), toml).map_err(|e| Error::io(root.join("backends.toml"), e))?;
    Ok(expressions_total)
}

/// Seconds each category sounds before the other takes over.
pub const AVS_TURN_SECS: usize = 2;
pub const AVS_FRAMES: usize = 10;
const AVS_RATE: u32 = 16_000;
const AVS_CATEGORIES: [&str; 2] = ["dog", "guitar"];

fn avs_boxes() -> [BoundingBox; 2] {
    [BoundingBox::new(6, 10, 26, 36, 0.9), BoundingBox::new(38, 8, 58, 40, 0.9)]
}

/// Index into the categories of the object sounding during frame `f` at 1 fps.
pub fn avs_sounding(f: usize) -> usize {
    (f / AVS_TURN_SECS) % 2
}

/// Writes the alternating-category audio-visual fixture under `root`.
pub fn write_avs_alternating(root: &Path) -> Result<()> {
    let (w, h) = (64u32, 48u32);
    let uid = "alternating";
    let dir = root.join(uid);
    let boxes = avs_boxes();
    let colours = [[150u8, 90, 40], [230, 200, 40]];
    for f in 0..AVS_FRAMES {
        let img = RgbImage::from_fn(w, h, |x, y| {
            boxes
                .iter()
                .zip(colours)
                .find(|(b, _)| b.contains(x, y))
                .map_or_else(|| background(x, y, f), |(_, c)| Rgb(c))
        });
        save_png(&dir.join("frames").join(format!("{f}.png")), &img)?;
        let truth = BinaryMask::from_box(h, w, &boxes[avs_sounding(f)]);
        write_mask(&dir.join("masks").join(format!("{f}.png")), &truth)?;
    }
    // tones of different pitch per turn
    let pitches = [440.0f32, 1320.0];
    let samples: Vec<f32> = (0..AVS_FRAMES * AVS_RATE as usize)
        .map(|i| {
            let t = i as f32 / AVS_RATE as f32;
            let turn = (i / (AVS_TURN_SECS * AVS_RATE as usize)) % 2;
            0.4 * (2.0 * std::f32::consts::PI * pitches[turn] * t).sin()
        })
        .collect();
    AudioClip::new(samples, AVS_RATE)?.save_wav(&dir.join("audio.wav"))?;
    let csv = format!("uid,split,label\n{uid},test,{}\n", AVS_CATEGORIES.join(";"));
    std::fs::write(root.join("metadata.csv"), csv).map_err(|e| Error::io(root.join("metadata.csv"), e))?;

    let turns = AVS_FRAMES / AVS_TURN_SECS;
    let boundaries: Vec<f64> = (1..turns).map(|i| (i * AVS_TURN_SECS) as f64).collect();
    let audio_steps: Vec<serde_json::Value> = (0..turns)
        .map(|i| {
            let v = if i % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
            json!({"when": {"ordinal": i}, "respond": {"ok": v}})
        })
        .collect();
    let grounding_steps: Vec<serde_json::Value> = AVS_CATEGORIES
        .iter()
        .zip(&boxes)
        .map(|(c, b)| json!({"when": {"contains": c}, "respond": {"ok": [b.clone().with_label(*c)]}}))
        .collect();
    let scenario = json!({
        "chat": {
            "name": "alternating-chat",
            "steps": [
                {"when": {"contains": "Audio tags:"}, "respond": {"ok": format!("```json\n{}\n```", json!(AVS_CATEGORIES))}},
                {"when": {"contains": "\"frame\""}, "respond": {"ok": "```json\n{\"frame\": 1}\n```"}}
            ],
            "fallback": {"ok": "```json\n{\"box\": 1}\n```"}
        },
        "grounding": {"name": "alternating-grounding", "steps": grounding_steps},
        "audio_tagger": {"name": "alternating-tags", "fallback": {"ok": [
            {"label": AVS_CATEGORIES[0], "score": 0.8},
            {"label": AVS_CATEGORIES[1], "score": 0.7}
        ]}},
        "embed_audio": {"name": "alternating-audio", "steps": audio_steps},
        "embed_text": {"name": "alternating-text", "steps": [
            {"when": {"contains": " and "}, "respond": {"ok": [1.0, 1.0]}},
            {"when": {"contains": AVS_CATEGORIES[0]}, "respond": {"ok": [1.0, 0.0]}},
            {"when": {"contains": AVS_CATEGORIES[1]}, "respond": {"ok": [0.0, 1.0]}}
        ]},
        "sound_events": {"name": "alternating-sed", "fallback": {"ok": boundaries}}
    });
    write_json(&root.join("scenario.json"), &scenario)?;
    let toml = "[default]\nendpoint = \"mock:scenario.json\"\n\n[segmenter]\nendpoint = \"mock:boxfill\"\n";
    std::fs::write(root.join("backends.toml"), toml).map_err(|e| Error::io(root.join("backends.toml"), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;
    use crate::eval::{Dataset, LoadOptions};

    #[test]
    fn rvos_fixture_loads_with_truth() {
        let dir = tempfile::tempdir().unwrap();
        let spec = RvosFixture {
            frames: vec![4, 6],
            ..Default::default()
        };
        assert_eq!(write_rvos_fixture(dir.path(), &spec).unwrap(), 4);
        let opts = LoadOptions {
            require_truth: true,
            ..Default::default()
        };
        let ds = Dataset::load(dir.path(), Task::Rvos, &opts).unwrap();
        assert_eq!(ds.samples.len(), 4);
        assert!(ds.report.skipped.is_empty());
        for s in &ds.samples {
            let truth = s.truth.as_ref().unwrap();
            assert!(truth.iter().all(|m| !m.is_empty()), "{} has an empty frame", s.id);
        }
        let clip = ds.video_of(&ds.samples[0]).load().unwrap();
        assert_eq!((clip.len(), clip.width(), clip.height()), (4, 64, 48));
    }

    #[test]
    fn avs_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_avs_alternating(dir.path()).unwrap();
        let ds = Dataset::load(dir.path(), Task::Avs, &LoadOptions::default()).unwrap();
        assert_eq!(ds.samples.len(), 1);
        let s = &ds.samples[0];
        assert_eq!(s.categories, ["dog", "guitar"]);
        let video = ds.video_of(s);
        assert_eq!(video.fps.as_f64(), 1.0);
        let audio = video.load_audio().unwrap();
        assert!((audio.duration_secs() - 10.0).abs() < 1e-9);
        assert_eq!(s.truth.as_ref().unwrap().len(), AVS_FRAMES);
    }
}
