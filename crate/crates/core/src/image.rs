//! Square RGB raster with channel values in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Result};

pub type Rgb = [f32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    /// Row-major, interleaved RGB.
    data: Vec<f32>,
}

impl Image {
    pub fn filled(size: usize, color: Rgb) -> Self {
        let mut data = vec![0.0; size * size * 3];
        for px in data.chunks_mut(3) {
            px.copy_from_slice(&color);
        }
        Self { size, data }
    }

    pub fn from_data(size: usize, data: Vec<f32>) -> Result<Self> {
        if size == 0 || data.len() != size * size * 3 {
            return Err(contract("image data must hold size×size×3 values"));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract("image values must lie in [0, 1]"));
        }
        Ok(Self { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Writes a pixel; coordinates outside the raster are ignored.
    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        if x < self.size && y < self.size {
            let i = (y * self.size + x) * 3;
            self.data[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, c: Rgb) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.set(x, y, c);
            }
        }
    }

    /// One-pixel outline just inside the rectangle.
    pub fn stroke_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, c: Rgb) {
        if w == 0 || h == 0 {
            return;
        }
        for x in x0..x0 + w {
            self.set(x, y0, c);
            self.set(x, y0 + h - 1, c);
        }
        for y in y0..y0 + h {
            self.set(x0, y, c);
            self.set(x0 + w - 1, y, c);
        }
    }

    /// Flattened `patch×patch×3` blocks in row-major patch order.
    pub fn patches(&self, patch: usize) -> Result<Vec<f32>> {
        if patch == 0 || self.size % patch != 0 {
            return Err(contract("image size must be a multiple of the patch size"));
        }
        let per_side = self.size / patch;
        let mut out = Vec::with_capacity(self.data.len());
        for pr in 0..per_side {
            for pc in 0..per_side {
                for dy in 0..patch {
                    let y = pr * patch + dy;
                    let start = (y * self.size + pc * patch) * 3;
                    out.extend_from_slice(&self.data[start..start + patch * 3]);
                }
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(size: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 4 != 0 {
            return Err(contract("image payload is not a whole number of f32 values"));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::from_data(size, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_order_is_row_major() {
        let mut img = Image::filled(4, [0.0; 3]);
        img.set(2, 0, [1.0, 0.0, 0.0]);
        let p = img.patches(2).unwrap();
        // second patch (top-right) starts at offset 12; its first pixel is (2, 0)
        assert_eq!(&p[12..15], &[1.0, 0.0, 0.0]);
        assert!(p[..12].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bytes_round_trip() {
        let mut img = Image::filled(4, [0.25, 0.5, 0.75]);
        img.set(1, 3, [1.0, 0.0, 0.125]);
        let back = Image::from_bytes(4, &img.to_bytes()).unwrap();
        assert_eq!(back, img);
    }
}
