//! 3×5 bitmap glyphs for lowercase words.

use crate::image::{Image, Rgb};

pub const GLYPH_W: usize = 3;
pub const GLYPH_H: usize = 5;
/// Horizontal advance per character (glyph plus one column of spacing).
pub const ADVANCE: usize = GLYPH_W + 1;

pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz";

#[rustfmt::skip]
const GLYPHS: [[&str; 5]; 26] = [
    [".#.", "#.#", "###", "#.#", "#.#"], // a
    ["##.", "#.#", "##.", "#.#", "##."], // b
    [".##", "#..", "#..", "#..", ".##"], // c
    ["##.", "#.#", "#.#", "#.#", "##."], // d
    ["###", "#..", "##.", "#..", "###"], // e
    ["###", "#..", "##.", "#..", "#.."], // f
    [".##", "#..", "#.#", "#.#", ".##"], // g
    ["#.#", "#.#", "###", "#.#", "#.#"], // h
    ["###", ".#.", ".#.", ".#.", "###"], // i
    ["..#", "..#", "..#", "#.#", ".#."], // j
    ["#.#", "#.#", "##.", "#.#", "#.#"], // k
    ["#..", "#..", "#..", "#..", "###"], // l
    ["#.#", "###", "###", "#.#", "#.#"], // m
    ["##.", "#.#", "#.#", "#.#", "#.#"], // n
    [".#.", "#.#", "#.#", "#.#", ".#."], // o
    ["##.", "#.#", "##.", "#..", "#.."], // p
    [".#.", "#.#", "#.#", "##.", ".##"], // q
    ["##.", "#.#", "##.", "#.#", "#.#"], // r
    [".##", "#..", ".#.", "..#", "##."], // s
    ["###", ".#.", ".#.", ".#.", ".#."], // t
    ["#.#", "#.#", "#.#", "#.#", "###"], // u
    ["#.#", "#.#", "#.#", "#.#", ".#."], // v
    ["#.#", "#.#", "###", "###", "#.#"], // w
    ["#.#", "#.#", ".#.", "#.#", "#.#"], // x
    ["#.#", "#.#", ".#.", ".#.", ".#."], // y
    ["###", "..#", ".#.", "#..", "###"], // z
];

/// Bitmap of one character, row-major, `true` for ink.
pub fn glyph(c: char) -> Option<[[bool; GLYPH_W]; GLYPH_H]> {
    let idx = ALPHABET.find(c)?;
    let mut out = [[false; GLYPH_W]; GLYPH_H];
    for (r, row) in GLYPHS[idx].iter().enumerate() {
        for (col, b) in row.bytes().enumerate() {
            out[r][col] = b == b'#';
        }
    }
    Some(out)
}

pub fn text_width(len: usize) -> usize {
    if len == 0 {
        0
    } else {
        len * ADVANCE - 1
    }
}

/// Draws `word` with its top-left corner at `(x, y)`. Characters outside
/// the alphabet are skipped as blanks.
pub fn draw_text(img: &mut Image, word: &str, x: usize, y: usize, ink: Rgb) {
    for (i, c) in word.chars().enumerate() {
        if let Some(g) = glyph(c) {
            for (r, row) in g.iter().enumerate() {
                for (col, &on) in row.iter().enumerate() {
                    if on {
                        img.set(x + i * ADVANCE + col, y + r, ink);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn every_letter_has_a_distinct_glyph() {
        let glyphs: Vec<_> = ALPHABET.chars().map(|c| glyph(c).unwrap()).collect();
        for i in 0..glyphs.len() {
            for j in i + 1..glyphs.len() {
                assert_ne!(glyphs[i], glyphs[j], "glyphs {i} and {j} collide");
            }
        }
        assert!(glyph('A').is_none());
    }
}
