//! In-memory RGB rasters and binary masks, with lossless PNG encoding.

use std::io::Cursor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::sha256_hex;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: u32, height: u32 },
    #[error("buffer holds {actual} bytes but {width}x{height} needs {expected}")]
    BufferSize { width: u32, height: u32, expected: usize, actual: usize },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch { left: (u32, u32), right: (u32, u32) },
    #[error("png encode failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode failed: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported png layout: {0}")]
    Unsupported(String),
}

/// 8-bit RGB image, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("digest", &&self.digest()[..12])
            .finish()
    }
}

impl Raster {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyDimensions { width, height });
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(RasterError::BufferSize { width, height, expected, actual: data.len() });
        }
        Ok(Self { width, height, data })
    }

    /// A raster filled with one color. Panics on zero dimensions.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        let data = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// SHA-256 over dimensions and pixel bytes.
    pub fn digest(&self) -> String {
        let mut buf = Vec::with_capacity(self.data.len() + 8);
        buf.extend_from_slice(&self.width.to_le_bytes());
        buf.extend_from_slice(&self.height.to_le_bytes());
        buf.extend_from_slice(&self.data);
        sha256_hex(&buf)
    }

    /// Luma in [0, 255] using integer BT.601 weights.
    pub fn gray(&self, x: u32, y: u32) -> f64 {
        let [r, g, b] = self.pixel(x, y);
        (299.0 * r as f64 + 587.0 * g as f64 + 114.0 * b as f64) / 1000.0
    }

    /// Copies the `w`x`h` window at (`x0`, `y0`).
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Raster {
        Raster::from_fn(w, h, |x, y| self.pixel(x0 + x, y0 + y))
    }

    pub fn to_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&self.data)?;
            writer.finish()?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let (width, height, color, buf) = decode_png(bytes)?;
        let data = match color {
            png::ColorType::Rgb => buf,
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(RasterError::Unsupported(format!("{other:?}"))),
        };
        Raster::new(width, height, data)
    }
}

fn decode_png(bytes: &[u8]) -> Result<(u32, u32, png::ColorType, Vec<u8>), RasterError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RasterError::Unsupported("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, info.color_type, buf))
}

/// Binary foreground mask, row-major. `true` marks product foreground.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("foreground", &self.foreground_count())
            .finish()
    }
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyDimensions { width, height });
        }
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(RasterError::BufferSize { width, height, expected, actual: bits.len() });
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self::from_fn(width, height, |_, _| false)
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::from_fn(width, height, |_, _| true)
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    /// Axis-aligned rectangle `[x0, x1) x [y0, y1)` set to foreground.
    pub fn rectangle(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self::from_fn(width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn inverted(&self) -> Mask {
        Mask { width: self.width, height: self.height, bits: self.bits.iter().map(|b| !b).collect() }
    }

    /// Inclusive-exclusive bounding box `(x0, y0, x1, y1)` of the foreground.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bbox: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bbox = Some(match bbox {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bbox
    }

    pub fn ensure_matches(&self, raster: &Raster) -> Result<(), RasterError> {
        if self.dimensions() != raster.dimensions() {
            return Err(RasterError::DimensionMismatch { left: self.dimensions(), right: raster.dimensions() });
        }
        Ok(())
    }

    /// Encodes as a 1-bit grayscale PNG (white = foreground).
    pub fn to_png(&self) -> Result<Vec<u8>, RasterError> {
        let row_bytes = (self.width as usize).div_ceil(8);
        let mut packed = vec![0u8; row_bytes * self.height as usize];
        for y in 0..self.height as usize {
            for x in 0..self.width as usize {
                if self.bits[y * self.width as usize + x] {
                    packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::One);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&packed)?;
            writer.finish()?;
        }
        Ok(out)
    }

    /// Decodes any grayscale or color PNG; nonzero luma is foreground.
    pub fn from_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let (width, height, color, buf) = decode_png(bytes)?;
        let channels = match color {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(RasterError::Unsupported(format!("{other:?}"))),
        };
        let bits = buf.chunks_exact(channels).map(|p| p[0] != 0).collect();
        Mask::new(width, height, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_buffers() {
        assert!(matches!(Raster::new(0, 4, vec![]), Err(RasterError::EmptyDimensions { .. })));
        assert!(matches!(Raster::new(2, 2, vec![0; 11]), Err(RasterError::BufferSize { .. })));
        assert!(matches!(Mask::new(2, 2, vec![true; 3]), Err(RasterError::BufferSize { .. })));
    }

    #[test]
    fn bounding_box_of_rectangle() {
        let m = Mask::rectangle(10, 8, 2, 3, 7, 5);
        assert_eq!(m.bounding_box(), Some((2, 3, 7, 5)));
        assert_eq!(m.foreground_count(), 10);
        assert_eq!(Mask::empty(4, 4).bounding_box(), None);
    }

    #[test]
    fn odd_width_mask_survives_bit_packing() {
        let m = Mask::from_fn(13, 3, |x, y| (x + y) % 3 == 0);
        assert_eq!(Mask::from_png(&m.to_png().unwrap()).unwrap(), m);
    }

    proptest! {
        #[test]
        fn raster_png_round_trip(w in 1u32..24, h in 1u32..24, seed in any::<u64>()) {
            let r = Raster::from_fn(w, h, |x, y| {
                let v = seed.wrapping_mul(6364136223846793005).wrapping_add((x * 31 + y * 17) as u64);
                [(v >> 8) as u8, (v >> 16) as u8, (v >> 24) as u8]
            });
            prop_assert_eq!(Raster::from_png(&r.to_png().unwrap()).unwrap(), r);
        }

        #[test]
        fn mask_png_round_trip(w in 1u32..40, h in 1u32..40, bits in proptest::collection::vec(any::<bool>(), 1600)) {
            let m = Mask::from_fn(w, h, |x, y| bits[(y * 40 + x) as usize]);
            prop_assert_eq!(Mask::from_png(&m.to_png().unwrap()).unwrap(), m);
        }
    }
}
