//! Label-map PNG reading and palette mask writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::types::BinaryMask;

/// Per-pixel labels decoded from an annotation PNG.
///
/// Palette images yield their raw indices, grayscale images their values
/// (16-bit samples keep the high byte unless it is zero), colour images 1 for
/// any non-black pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u8>,
}

impl LabelMap {
    /// Pixels equal to `id`.
    pub fn object(&self, id: u8) -> BinaryMask {
        self.select(|v| v == id)
    }

    /// Pixels in any of `ids`.
    pub fn objects(&self, ids: &[u8]) -> BinaryMask {
        self.select(|v| ids.contains(&v))
    }

    /// Every labelled pixel.
    pub fn foreground(&self) -> BinaryMask {
        self.select(|v| v != 0)
    }

    fn select(&self, f: impl Fn(u8) -> bool) -> BinaryMask {
        let bits = self.labels.iter().map(|&v| f(v)).collect();
        BinaryMask::from_bits(self.height, self.width, bits).expect("label map length matches its dimensions")
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image(format!("{}: {e}", path.display()))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (width, height) = (info.width, info.height);
    let channels = info.color_type.samples();
    let depth = info.bit_depth;
    let mut labels = Vec::with_capacity(width as usize * height as usize);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        match (info.color_type, depth) {
            (ColorType::Indexed | ColorType::Grayscale, BitDepth::One | BitDepth::Two | BitDepth::Four) => {
                let bits = depth as usize;
                let per_byte = 8 / bits;
                let mask = (1u8 << bits) - 1;
                labels.extend((0..width as usize).map(|x| {
                    let byte = row[x / per_byte];
                    let shift = 8 - bits * (x % per_byte + 1);
                    (byte >> shift) & mask
                }));
            }
            (ColorType::Indexed | ColorType::Grayscale, BitDepth::Eight) => labels.extend_from_slice(&row[..width as usize]),
            (ColorType::Grayscale, BitDepth::Sixteen) => labels.extend((0..width as usize).map(|x| {
                let v = u16::from_be_bytes([row[2 * x], row[2 * x + 1]]);
                if v > 255 {
                    (v >> 8) as u8
                } else {
                    v as u8
                }
            })),
            (ColorType::GrayscaleAlpha, _) | (ColorType::Rgb, _) | (ColorType::Rgba, _) => {
                let bytes = if depth == BitDepth::Sixteen { 2 } else { 1 };
                let colour = match info.color_type {
                    ColorType::GrayscaleAlpha => 1,
                    _ => 3,
                };
                labels.extend((0..width as usize).map(|x| {
                    let px = &row[x * channels * bytes..(x * channels + colour) * bytes];
                    u8::from(px.iter().any(|&b| b != 0))
                }));
            }
            (ct, d) => return Err(image_err(path, format!("unsupported PNG format {ct:?}/{d:?}"))),
        }
    }
    Ok(LabelMap { width, height, labels })
}

/// Standard segmentation colour map: index bits spread over the RGB channels.
pub fn palette() -> Vec<u8> {
    let mut out = Vec::with_capacity(256 * 3);
    for i in 0u32..256 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= (((c >> 0) & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        out.extend([r, g, b]);
    }
    out
}

/// Writes an 8-bit palette PNG with index 1 on the mask and 0 elsewhere.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let labels: Vec<u8> = mask.bits().iter().map(|&b| u8::from(b)).collect();
    write_labels(path, mask.width(), mask.height(), &labels)
}

pub fn write_labels(path: &Path, width: u32, height: u32, labels: &[u8]) -> Result<()> {
    if labels.len() != width as usize * height as usize {
        return Err(Error::LengthMismatch {
            expected: width as usize * height as usize,
            actual: labels.len(),
        });
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(ColorType::Indexed);
    encoder.set_depth(BitDepth::Eight);
    encoder.set_palette(palette());
    let mut writer = encoder.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(labels).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// Reads a mask written by [`write_mask`] or any label PNG, as its foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    Ok(read_labels(path)?.foreground())
}
