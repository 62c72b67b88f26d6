//! RGB float images and their on-disk forms.
//!
//! Float sidecar (`.f64img`), little-endian:
//!
//! ```text
//! magic    8 bytes  "SNRFIMG\0"
//! version  u32      1
//! width    u32
//! height   u32
//! channels u32      3
//! data     f64 × width·height·channels, row-major, channels interleaved
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FLOAT_MAGIC: &[u8; 8] = b"SNRFIMG\0";
pub const FLOAT_VERSION: u32 = 1;

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be nonzero"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self { width, height, data })
    }

    /// Clamps into `[0, 1]` first; for renderer output that may overshoot by rounding.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies a `w × h` window; coordinates outside the image repeat the border.
    pub fn crop_clamped(&self, x0: isize, y0: isize, w: usize, h: usize) -> Image {
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h as isize {
            let sy = (y0 + y).clamp(0, self.height as isize - 1) as usize;
            for x in 0..w as isize {
                let sx = (x0 + x).clamp(0, self.width as isize - 1) as usize;
                data.extend_from_slice(&self.pixel(sx, sy));
            }
        }
        Image {
            width: w,
            height: h,
            data,
        }
    }

    /// Writes `patch` with its top-left at `(x0, y0)`, dropping what falls outside.
    pub fn paste(&mut self, patch: &Image, x0: usize, y0: usize) {
        for y in 0..patch.height.min(self.height.saturating_sub(y0)) {
            for x in 0..patch.width.min(self.width.saturating_sub(x0)) {
                self.set_pixel(x0 + x, y0 + y, patch.pixel(x, y));
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        enc.write_header()
            .and_then(|mut w| w.write_image_data(&bytes))
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let bytes = &buf[..info.buffer_size()];
        let (w, h) = (info.width as usize, info.height as usize);
        let data: Vec<f64> = match info.color_type {
            png::ColorType::Rgb => bytes.iter().map(|&b| b as f64 / 255.0).collect(),
            png::ColorType::Rgba => bytes
                .chunks_exact(4)
                .flat_map(|p| p[..3].iter().map(|&b| b as f64 / 255.0))
                .collect(),
            png::ColorType::Grayscale => bytes.iter().flat_map(|&b| [b as f64 / 255.0; 3]).collect(),
            other => return Err(Error::format(path, format!("unsupported png color type {other:?}"))),
        };
        Self::new(w, h, data).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save_float(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            w.write_all(FLOAT_MAGIC)?;
            for v in [FLOAT_VERSION, self.width as u32, self.height as u32, 3] {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in &self.data {
                w.write_all(&v.to_le_bytes())?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load_float(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::format(path, msg);
        if bytes.len() < 24 || &bytes[..8] != FLOAT_MAGIC {
            return Err(bad("not a float image"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != FLOAT_VERSION as usize {
            return Err(bad("unsupported float image version"));
        }
        let (w, h, c) = (word(1), word(2), word(3));
        if c != 3 {
            return Err(bad("float image must have 3 channels"));
        }
        if bytes.len() != 24 + w * h * c * 8 {
            return Err(bad("float image length does not match header"));
        }
        let data = bytes[24..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(w, h, data).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Single-channel map (e.g. depth) in the sidecar layout with `channels = 1`.
/// Values are unrestricted.
pub fn save_depth_float(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        w.write_all(FLOAT_MAGIC)?;
        for v in [FLOAT_VERSION, width as u32, height as u32, 1] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in depth {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_depth_float(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[..8] != FLOAT_MAGIC {
        return Err(Error::format(path, "not a float map"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (word(1), word(2), word(3));
    if word(0) != FLOAT_VERSION as usize || c != 1 || bytes.len() != 24 + w * h * 8 {
        return Err(Error::format(path, "malformed float map"));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((w, h, data))
}
