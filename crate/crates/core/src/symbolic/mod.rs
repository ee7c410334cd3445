//! Symbolic images a chat-vision model can read: sampled frames tiled into a
//! grid with painted frame IDs, and pivot frames with painted, numbered
//! candidate boxes.
//!
//! Every function here is pure. Identical inputs produce byte-identical
//! rasters, which prompt caching and audit replay depend on.

mod font;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{BoundingBox, FrameImage, VideoClip};

pub use font::{text_extent, GLYPH_HEIGHT, GLYPH_WIDTH};

/// Cells per grid row.
pub const GRID_COLUMNS: usize = 5;

/// Outline colors cycled by box ID.
pub const BOX_PALETTE: [[u8; 3]; 8] = [
    [255, 48, 48],
    [48, 220, 48],
    [64, 128, 255],
    [255, 220, 0],
    [255, 64, 255],
    [0, 230, 230],
    [255, 140, 0],
    [255, 255, 255],
];

const LABEL_TEXT: [u8; 3] = [255, 255, 0];
const LABEL_PLATE: [u8; 3] = [16, 16, 16];
const GRID_FILL: [u8; 3] = [0, 0, 0];

/// What number gets painted on each grid cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameLabelMode {
    /// 1-based position within the sampled set.
    #[default]
    Positional,
    /// The frame's index in the source video.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelStyle {
    pub text_color: [u8; 3],
    pub plate_color: [u8; 3],
    pub scale: u32,
    pub mode: FrameLabelMode,
}

impl LabelStyle {
    fn for_frame(width: u32, height: u32, mode: FrameLabelMode) -> Self {
        LabelStyle {
            text_color: LABEL_TEXT,
            plate_color: LABEL_PLATE,
            scale: label_scale(width, height),
            mode,
        }
    }
}

/// Integer glyph scale for a `width × height` frame.
pub fn label_scale(width: u32, height: u32) -> u32 {
    (width.min(height) / 80).clamp(1, 8)
}

fn outline_thickness(width: u32, height: u32) -> u32 {
    (width.min(height) / 160).clamp(1, 4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

/// Sampled frames tiled row-major, each cell carrying a painted numeric label.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGridImage {
    pub pixels: RgbImage,
    pub source_indices: Vec<usize>,
    pub cell_geometry: Vec<Rect>,
    pub label_style: LabelStyle,
}

impl FrameGridImage {
    pub fn frame_count(&self) -> usize {
        self.source_indices.len()
    }

    /// Text painted on cell `position` (0-based).
    pub fn label_for(&self, position: usize) -> String {
        match self.label_style.mode {
            FrameLabelMode::Positional => (position + 1).to_string(),
            FrameLabelMode::Absolute => self.source_indices[position].to_string(),
        }
    }
}

/// A pivot frame with painted candidate outlines and 1-based box IDs.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedBoxImage {
    pub frame_index: usize,
    pub pixels: RgbImage,
    /// `box_ids[i]` carries painted ID `i + 1`.
    pub box_ids: Vec<BoundingBox>,
    /// Regions touched by painting: outline rings then label plates, per box.
    pub painted_regions: Vec<PaintedRegion>,
}

impl MarkedBoxImage {
    pub fn box_by_id(&self, id: usize) -> Option<&BoundingBox> {
        id.checked_sub(1).and_then(|i| self.box_ids.get(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaintedRegion {
    pub id: usize,
    pub outline: BoxOutline,
    pub thickness: u32,
    pub label: Rect,
}

/// Plain box geometry without score or label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxOutline {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl PaintedRegion {
    /// Whether painting this region may have changed pixel `(x, y)`.
    pub fn covers(&self, x: u32, y: u32) -> bool {
        if self.label.contains(x, y) {
            return true;
        }
        let o = &self.outline;
        let t = self.thickness;
        let inside = x >= o.x_min && x < o.x_max && y >= o.y_min && y < o.y_max;
        inside
            && (x < o.x_min + t || x + t >= o.x_max || y < o.y_min + t || y + t >= o.y_max)
    }
}

/// Indices `start, start+interval, …` when `count` of them fit inside
/// `[start, end)`; otherwise `count` rounded, evenly spread indices over
/// `[start, end-1]` (all of them when the window is too short).
pub fn sample_window(start: usize, end: usize, count: usize, interval: usize) -> Result<Vec<usize>> {
    if count == 0 || interval == 0 {
        return Err(Error::InvalidInput(format!(
            "sampling needs count >= 1 and interval >= 1, got {count} and {interval}"
        )));
    }
    if end <= start {
        return Err(Error::InvalidInput(format!("empty sampling window [{start}, {end})")));
    }
    let reach = (count - 1).checked_mul(interval).and_then(|r| r.checked_add(start));
    match reach {
        Some(last) if last < end => Ok((0..count).map(|k| start + k * interval).collect()),
        _ => Ok(even_spread(start, end, count)),
    }
}

/// `count` indices spread evenly over `[start, end-1]` by rounded linear spacing.
pub fn even_spread(start: usize, end: usize, count: usize) -> Vec<usize> {
    let len = end - start;
    if len <= count {
        return (start..end).collect();
    }
    if count == 1 {
        return vec![start];
    }
    let span = (len - 1) as f64;
    let steps = (count - 1) as f64;
    (0..count)
        .map(|k| start + (k as f64 * span / steps).round() as usize)
        .collect()
}

/// Samples `count` frames from the start of `clip`, `interval` frames apart.
pub fn sample_frames(clip: &VideoClip, count: usize, interval: usize) -> Result<Vec<usize>> {
    if clip.is_empty() {
        return Err(Error::InvalidInput("cannot sample an empty clip".into()));
    }
    sample_window(0, clip.len(), count, interval)
}

/// Tiles the frames at `indices` into at most [`GRID_COLUMNS`] cells per row
/// and paints each cell's label.
pub fn compose_grid(
    clip: &VideoClip,
    indices: &[usize],
    mode: FrameLabelMode,
) -> Result<FrameGridImage> {
    let cells = indices
        .iter()
        .map(|&i| {
            clip.frame(i)
                .map(|f| &f.pixels)
                .ok_or_else(|| Error::InvalidInput(format!("frame {i} outside video of {} frames", clip.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    tile(&cells, indices, clip.width(), clip.height(), mode)
}

fn tile(
    cells: &[&RgbImage],
    indices: &[usize],
    cell_w: u32,
    cell_h: u32,
    mode: FrameLabelMode,
) -> Result<FrameGridImage> {
    if cells.is_empty() {
        return Err(Error::InvalidInput("grid needs at least one frame".into()));
    }
    let cols = cells.len().min(GRID_COLUMNS) as u32;
    let rows = cells.len().div_ceil(GRID_COLUMNS) as u32;
    let mut canvas = RgbImage::from_pixel(cols * cell_w, rows * cell_h, Rgb(GRID_FILL));
    let style = LabelStyle::for_frame(cell_w, cell_h, mode);
    let mut geometry = Vec::with_capacity(cells.len());
    let mut grid = FrameGridImage {
        pixels: RgbImage::new(0, 0),
        source_indices: indices.to_vec(),
        cell_geometry: Vec::new(),
        label_style: style,
    };
    for (pos, cell) in cells.iter().enumerate() {
        let rect = Rect {
            x: (pos as u32 % cols) * cell_w,
            y: (pos as u32 / cols) * cell_h,
            width: cell_w,
            height: cell_h,
        };
        image::imageops::replace(&mut canvas, *cell, i64::from(rect.x), i64::from(rect.y));
        geometry.push(rect);
    }
    for (pos, rect) in geometry.iter().enumerate() {
        let text = grid.label_for(pos);
        paint_label(&mut canvas, &text, rect.x, rect.y, rect, &style);
    }
    grid.pixels = canvas;
    grid.cell_geometry = geometry;
    Ok(grid)
}

/// Draws a dark plate with `text` at `(x, y)`, shifted left/up as needed to
/// stay inside `bounds`. Returns the plate rectangle.
fn paint_label(canvas: &mut RgbImage, text: &str, x: u32, y: u32, bounds: &Rect, style: &LabelStyle) -> Rect {
    let s = style.scale;
    let (tw, th) = text_extent(text, s);
    let pw = (tw + 2 * s).min(bounds.width);
    let ph = (th + 2 * s).min(bounds.height);
    let px = x.min(bounds.x + bounds.width - pw).max(bounds.x);
    let py = y.min(bounds.y + bounds.height - ph).max(bounds.y);
    let plate = Rect {
        x: px,
        y: py,
        width: pw,
        height: ph,
    };
    for yy in py..py + ph {
        for xx in px..px + pw {
            canvas.put_pixel(xx, yy, Rgb(style.plate_color));
        }
    }
    let mut cursor = px + s;
    for ch in text.chars() {
        let digit = ch.to_digit(10).expect("labels are numeric") as u8;
        for row in 0..GLYPH_HEIGHT {
            for col in 0..GLYPH_WIDTH {
                if !font::inked(digit, col, row) {
                    continue;
                }
                for dy in 0..s {
                    for dx in 0..s {
                        let gx = cursor + col * s + dx;
                        let gy = py + s + row * s + dy;
                        if plate.contains(gx, gy) {
                            canvas.put_pixel(gx, gy, Rgb(style.text_color));
                        }
                    }
                }
            }
        }
        cursor += (GLYPH_WIDTH + 1) * s;
    }
    plate
}

/// Paints each candidate's outline in the palette color for its ID and a
/// numbered plate at the box's top-left corner.
pub fn paint_boxes(frame: &FrameImage, boxes: &[BoundingBox]) -> Result<MarkedBoxImage> {
    if boxes.is_empty() {
        return Err(Error::InvalidInput("no candidate boxes to paint".into()));
    }
    let (w, h) = (frame.width(), frame.height());
    for b in boxes {
        b.validate(w, h)?;
    }
    let mut canvas = frame.pixels.clone();
    let t = outline_thickness(w, h);
    let bounds = Rect {
        x: 0,
        y: 0,
        width: w,
        height: h,
    };
    let mut regions = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let color = Rgb(BOX_PALETTE[i % BOX_PALETTE.len()]);
        for y in b.y_min..b.y_max {
            for x in b.x_min..b.x_max {
                let edge = x < b.x_min + t || x + t >= b.x_max || y < b.y_min + t || y + t >= b.y_max;
                if edge {
                    canvas.put_pixel(x, y, color);
                }
            }
        }
        let style = LabelStyle {
            text_color: BOX_PALETTE[i % BOX_PALETTE.len()],
            plate_color: LABEL_PLATE,
            scale: label_scale(w, h),
            mode: FrameLabelMode::Positional,
        };
        let label = paint_label(&mut canvas, &(i + 1).to_string(), b.x_min, b.y_min, &bounds, &style);
        regions.push(PaintedRegion {
            id: i + 1,
            outline: BoxOutline {
                x_min: b.x_min,
                y_min: b.y_min,
                x_max: b.x_max,
                y_max: b.y_max,
            },
            thickness: t,
            label,
        });
    }
    Ok(MarkedBoxImage {
        frame_index: frame.index,
        pixels: canvas,
        box_ids: boxes.to_vec(),
        painted_regions: regions,
    })
}

/// The sampled grid in temporal order with the marked pivot frame substituted
/// into its own cell.
pub fn compose_pivot_context(
    marked: &MarkedBoxImage,
    clip: &VideoClip,
    indices: &[usize],
    mode: FrameLabelMode,
) -> Result<FrameGridImage> {
    if !indices.contains(&marked.frame_index) {
        return Err(Error::InvalidInput(format!(
            "pivot frame {} is not among the sampled frames {indices:?}",
            marked.frame_index
        )));
    }
    if marked.pixels.dimensions() != (clip.width(), clip.height()) {
        return Err(Error::DimensionMismatch {
            expected: (clip.width(), clip.height()),
            actual: marked.pixels.dimensions(),
        });
    }
    let cells = indices
        .iter()
        .map(|&i| {
            if i == marked.frame_index {
                Ok(&marked.pixels)
            } else {
                clip.frame(i)
                    .map(|f| &f.pixels)
                    .ok_or_else(|| Error::InvalidInput(format!("frame {i} outside video")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    tile(&cells, indices, clip.width(), clip.height(), mode)
}

/// Content hash of a raster: SHA-256 over dimensions and raw RGB bytes, hex encoded.
pub fn raster_hash(image: &RgbImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(image.width().to_le_bytes());
    hasher.update(image.height().to_le_bytes());
    hasher.update(image.as_raw());
    hex_digest(hasher)
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Lossless PNG encoding of an RGB raster.
pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Image(e.to_string()))
}
