//! Domain values shared across the pipeline: frames, clips, boxes, masks and
//! references, plus the IoU primitives used for deduplication and scoring.

use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames-per-second as an exact rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fps {
    pub num: u32,
    pub den: u32,
}

impl Fps {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidInput(format!("invalid frame rate {num}/{den}")));
        }
        Ok(Fps { num, den })
    }

    pub fn integer(num: u32) -> Result<Self> {
        Self::new(num, 1)
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    /// Duration of one frame in seconds.
    pub fn period(self) -> f64 {
        f64::from(self.den) / f64::from(self.num)
    }

    /// Timestamp of the temporal midpoint of frame `index`.
    pub fn frame_midpoint(self, index: usize) -> f64 {
        (index as f64 + 0.5) * self.period()
    }
}

impl Default for Fps {
    fn default() -> Self {
        Fps { num: 1, den: 1 }
    }
}

impl fmt::Display for Fps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// One decoded RGB frame together with its 0-based ordinal in the video.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pub index: usize,
    pub pixels: RgbImage,
}

impl FrameImage {
    pub fn new(index: usize, pixels: RgbImage) -> Result<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::InvalidInput(format!("frame {index} has zero size")));
        }
        Ok(FrameImage { index, pixels })
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

/// A whole video: uniformly sized frames with contiguous indices starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    id: String,
    fps: Fps,
    frames: Vec<FrameImage>,
}

impl VideoClip {
    pub fn new(id: impl Into<String>, fps: Fps, frames: Vec<FrameImage>) -> Result<Self> {
        let id = id.into();
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput(format!("video {id:?} has no frames")))?;
        let dims = (first.width(), first.height());
        for (pos, frame) in frames.iter().enumerate() {
            if frame.index != pos {
                return Err(Error::InvalidInput(format!(
                    "video {id:?}: frame at position {pos} has index {}",
                    frame.index
                )));
            }
            let got = (frame.width(), frame.height());
            if got != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    actual: got,
                });
            }
        }
        Ok(VideoClip { id, fps, frames })
    }

    /// Builds a clip from bare rasters, assigning indices 0..T.
    pub fn from_rasters(
        id: impl Into<String>,
        fps: Fps,
        rasters: impl IntoIterator<Item = RgbImage>,
    ) -> Result<Self> {
        let frames = rasters
            .into_iter()
            .enumerate()
            .map(|(i, px)| FrameImage::new(i, px))
            .collect::<Result<Vec<_>>>()?;
        Self::new(id, fps, frames)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn fps(&self) -> Fps {
        self.fps
    }

    pub fn frames(&self) -> &[FrameImage] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> Option<&FrameImage> {
        self.frames.get(index)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.frames[0].width()
    }

    pub fn height(&self) -> u32 {
        self.frames[0].height()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 * self.fps.period()
    }
}

/// Axis-aligned box in half-open pixel coordinates `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    pub score: f32,
    #[serde(default)]
    pub label: String,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32, score: f32) -> Self {
        BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
            score,
            label: String::new(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn width(&self) -> u32 {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> u32 {
        self.y_max.saturating_sub(self.y_min)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    /// Checks the geometric invariants against a `width × height` image.
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        let ok = self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_max <= width
            && self.y_max <= height
            && self.score.is_finite()
            && (0.0..=1.0).contains(&self.score);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "box ({}, {}, {}, {}) score {} invalid for {width}x{height} image",
                self.x_min, self.y_min, self.x_max, self.y_max, self.score
            )))
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        u64::from(w) * u64::from(h)
    }
}

/// Intersection over union of two valid boxes.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: u32, width: u32) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height as usize * width as usize],
        }
    }

    pub fn from_bits(height: u32, width: u32, bits: Vec<bool>) -> Result<Self> {
        let expected = height as usize * width as usize;
        if bits.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: bits.len(),
            });
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: u32, width: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height as usize * width as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    /// Mask covering exactly the pixels of `bbox`, clipped to the raster.
    pub fn from_box(height: u32, width: u32, bbox: &BoundingBox) -> Self {
        Self::from_fn(height, width, |x, y| bbox.contains(x, y))
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn area(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn clear(&mut self) {
        self.bits.iter_mut().for_each(|b| *b = false);
    }

    /// Tight box around the foreground, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        any.then(|| BoundingBox::new(x0, y0, x1, y1, 1.0))
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        ensure_same_dims(self, other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }
}

fn ensure_same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    Ok(())
}

/// `|a ∧ b| / |a ∨ b|`, with two empty masks scoring 1.0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    ensure_same_dims(a, b)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &q) in a.bits.iter().zip(&b.bits) {
        inter += u64::from(p && q);
        union += u64::from(p || q);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    RvosText,
    LbruCategory,
}

/// A language-formatted description of the object to segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    text: String,
    source: ReferenceSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
}

impl Reference {
    /// A free-text referring expression.
    pub fn text(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("reference text is empty".into()));
        }
        Ok(Reference {
            text,
            source: ReferenceSource::RvosText,
            category: None,
        })
    }

    pub(crate) fn from_category(text: String, category: String) -> Self {
        Reference {
            text,
            source: ReferenceSource::LbruCategory,
            category: Some(category),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn source(&self) -> ReferenceSource {
        self.source
    }

    pub fn category(&self) -> Option<&str> {
        self.category.as_deref()
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Per-frame masks of one referent over a whole video.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence {
    pub masks: Vec<BinaryMask>,
    pub silence_flags: Vec<bool>,
    pub referent: Reference,
}

impl MaskSequence {
    pub fn new(masks: Vec<BinaryMask>, referent: Reference) -> Self {
        let silence_flags = vec![false; masks.len()];
        MaskSequence {
            masks,
            silence_flags,
            referent,
        }
    }

    pub fn empty(len: usize, height: u32, width: u32, referent: Reference) -> Self {
        Self::new(vec![BinaryMask::empty(height, width); len], referent)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Zeroes every frame flagged silent and records the flags.
    ///
    /// Flags accumulate, so applying the same filter twice is a no-op.
    pub fn filter_silent(&mut self, silent: &[bool]) -> Result<()> {
        if silent.len() != self.masks.len() {
            return Err(Error::LengthMismatch {
                expected: self.masks.len(),
                actual: silent.len(),
            });
        }
        for ((mask, flag), &s) in self.masks.iter_mut().zip(&mut self.silence_flags).zip(silent) {
            if s {
                mask.clear();
                *flag = true;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1, 0.5)
    }

    fn brute_box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let (mut inter, mut union) = (0u32, 0u32);
        for y in 0..64 {
            for x in 0..64 {
                let (p, q) = (a.contains(x, y), b.contains(x, y));
                inter += u32::from(p && q);
                union += u32::from(p || q);
            }
        }
        f64::from(inter) / f64::from(union)
    }

    #[test]
    fn box_iou_cases() {
        let a = bx(0, 0, 10, 10);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &bx(20, 20, 30, 30)), 0.0);
        // touching edges share no pixels under half-open coordinates
        assert_eq!(box_iou(&a, &bx(10, 0, 20, 10)), 0.0);
        let b = bx(0, 0, 10, 20);
        assert_eq!(brute_box_iou(&a, &b), 0.5);
        assert_eq!(box_iou(&a, &b), 0.5);
    }

    #[test]
    fn box_validation() {
        assert!(bx(0, 0, 10, 10).validate(10, 10).is_ok());
        assert!(bx(0, 0, 11, 10).validate(10, 10).is_err());
        assert!(bx(5, 0, 5, 10).validate(10, 10).is_err());
        assert!(BoundingBox::new(0, 0, 1, 1, 1.5).validate(10, 10).is_err());
    }

    #[test]
    fn mask_iou_cases() {
        let full = BinaryMask::from_fn(10, 10, |_, _| true);
        let left = BinaryMask::from_fn(10, 10, |x, _| x < 5);
        let empty = BinaryMask::empty(10, 10);
        assert_eq!(mask_iou(&full, &full).unwrap(), 1.0);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(mask_iou(&empty, &full).unwrap(), 0.0);
        assert_eq!(mask_iou(&left, &full).unwrap(), 0.5);
        assert!(mask_iou(&full, &BinaryMask::empty(10, 11)).is_err());
    }

    #[test]
    fn clip_rejects_mixed_sizes() {
        let a = RgbImage::new(4, 4);
        let b = RgbImage::new(4, 5);
        assert!(VideoClip::from_rasters("v", Fps::default(), [a.clone(), b]).is_err());
        assert!(VideoClip::from_rasters("v", Fps::default(), Vec::<RgbImage>::new()).is_err());
        let clip = VideoClip::from_rasters("v", Fps::default(), [a.clone(), a]).unwrap();
        assert_eq!(clip.len(), 2);
    }

    #[test]
    fn silence_filter_is_idempotent() {
        let r = Reference::text("x").unwrap();
        let full = BinaryMask::from_fn(3, 3, |_, _| true);
        let mut seq = MaskSequence::new(vec![full.clone(), full.clone(), full], r);
        let flags = [false, true, false];
        seq.filter_silent(&flags).unwrap();
        let once = seq.clone();
        seq.filter_silent(&flags).unwrap();
        assert_eq!(seq, once);
        assert!(seq.masks[1].is_empty());
        assert!(!seq.masks[0].is_empty());
        assert_eq!(seq.silence_flags, flags);
    }

    #[test]
    fn empty_reference_rejected() {
        assert!(Reference::text("  ").is_err());
    }

    #[test]
    fn midpoint_timestamps() {
        let fps = Fps::new(2, 1).unwrap();
        assert_eq!(fps.frame_midpoint(0), 0.25);
        assert_eq!(fps.frame_midpoint(3), 1.75);
    }
}
