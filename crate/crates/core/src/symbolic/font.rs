//! 5×7 bitmap glyphs for the decimal digits, enough to paint frame and box IDs.

pub const GLYPH_WIDTH: u32 = 5;
pub const GLYPH_HEIGHT: u32 = 7;

#[rustfmt::skip]
const DIGITS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

/// Whether unscaled glyph cell `(col, row)` of `digit` is inked.
pub fn inked(digit: u8, col: u32, row: u32) -> bool {
    debug_assert!(digit < 10 && col < GLYPH_WIDTH && row < GLYPH_HEIGHT);
    DIGITS[digit as usize][row as usize] & (1 << (GLYPH_WIDTH - 1 - col)) != 0
}

/// Pixel extent of `text` at the given integer scale, with one scaled column between glyphs.
pub fn text_extent(text: &str, scale: u32) -> (u32, u32) {
    let n = text.chars().count() as u32;
    if n == 0 {
        return (0, 0);
    }
    let w = n * GLYPH_WIDTH * scale + (n - 1) * scale;
    (w, GLYPH_HEIGHT * scale)
}
