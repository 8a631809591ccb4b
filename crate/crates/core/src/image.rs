//! Linear RGB float images with PFM and 8-bit sRGB PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Row-major RGB, top row first.
    pixels: Vec<[f32; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    /// 32-bit float, linear.
    Pfm,
    /// 8-bit, clamped and sRGB encoded.
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
            Some("pfm") => Ok(Self::Pfm),
            Some("png") => Ok(Self::Png),
            _ => Err(Error::Image {
                path: path.into(),
                message: "unknown image extension (expected .pfm or .png)".into(),
            }),
        }
    }
}

/// sRGB transfer of a linear value clamped to `[0, 1]`, as a byte.
pub fn linear_to_srgb_byte(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f64 };
    let s = if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    };
    (s * 255.0).round() as u8
}

/// Inverse sRGB transfer for a normalized encoded value.
pub fn srgb_to_linear(s: f64) -> f64 {
    if s <= 0.040_45 {
        s / 12.92
    } else {
        ((s + 0.055) / 1.055).powf(2.4)
    }
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[f32; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension {
                expected: width * height,
                got: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: [f32; 3]) {
        self.pixels[y * self.width + x] = v;
    }

    /// Per-channel mean.
    pub fn mean(&self) -> [f64; 3] {
        let n = self.pixels.len().max(1) as f64;
        let mut m = [0.0; 3];
        for p in &self.pixels {
            for c in 0..3 {
                m[c] += p[c] as f64 / n;
            }
        }
        m
    }

    pub fn encode_pfm(&self) -> Vec<u8> {
        let mut out = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 12);
        // PFM stores the bottom row first
        for y in (0..self.height).rev() {
            for p in &self.pixels[y * self.width..(y + 1) * self.width] {
                for c in p {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<Self, String> {
        // three whitespace-terminated header tokens
        let mut pos = 0;
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PFM header".into());
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if tokens[0] != "PF" {
            return Err(format!("unsupported PFM type {:?}", tokens[0]));
        }
        let width: usize = tokens[1].parse().map_err(|_| "bad PFM width")?;
        let height: usize = tokens[2].parse().map_err(|_| "bad PFM height")?;
        let scale: f32 = tokens[3].parse().map_err(|_| "bad PFM scale")?;
        let little = scale < 0.0;
        let body = bytes.get(pos..).ok_or("truncated PFM body")?;
        if body.len() != width * height * 12 {
            return Err(format!("PFM body is {} bytes, expected {}", body.len(), width * height * 12));
        }
        let mut img = Image::new(width, height);
        for (i, chunk) in body.chunks_exact(12).enumerate() {
            let (x, row) = (i % width, i / width);
            let y = height - 1 - row;
            let mut p = [0f32; 3];
            for (c, b) in p.iter_mut().zip(chunk.chunks_exact(4)) {
                let b: [u8; 4] = b.try_into().unwrap();
                *c = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            }
            img.set(x, y, p);
        }
        Ok(img)
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = crate::io::read_file(path)?;
        Self::decode_pfm(&bytes).map_err(|message| Error::Image {
            path: path.into(),
            message,
        })
    }

    pub fn srgb_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.map(linear_to_srgb_byte)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
        let path = path.as_ref();
        match format {
            ImageFormat::Pfm => crate::io::write_file(path, &self.encode_pfm()),
            ImageFormat::Png => write_png_rgb8(path, self.width, self.height, &self.srgb_bytes()),
        }
    }
}

/// Writes raw 8-bit RGB bytes as a PNG.
pub fn write_png_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| Error::Image {
        path: path.into(),
        message: e.to_string(),
    };
    let mut w = enc.write_header().map_err(err)?;
    w.write_image_data(rgb).map_err(err)?;
    w.finish().map_err(err)?;
    Ok(())
}

/// Reads a PNG as normalized `[0, 1]` values with `channels` (1 or 3)
/// components per pixel. Gray expands to RGB, alpha is dropped, and 16-bit
/// data is only accepted when `allow_16` is set.
pub fn read_png_channels(path: &Path, channels: usize, allow_16: bool) -> Result<(usize, usize, Vec<f64>)> {
    let err = |message: String| Error::Image {
        path: path.into(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| err(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    if wide && !allow_16 {
        return Err(err("expected an 8-bit image".into()));
    }
    let src_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(err("unexpanded palette image".into())),
    };
    let bytes_per = if wide { 2 } else { 1 };
    let max = if wide { 65535.0 } else { 255.0 };
    let sample = |px: usize, c: usize| -> f64 {
        let row = px / w;
        let col = px % w;
        let at = row * info.line_size + (col * src_channels + c) * bytes_per;
        if wide {
            u16::from_be_bytes([buf[at], buf[at + 1]]) as f64 / max
        } else {
            buf[at] as f64 / max
        }
    };
    let mut out = Vec::with_capacity(w * h * channels);
    for px in 0..w * h {
        match (channels, src_channels) {
            (1, 1 | 2) => out.push(sample(px, 0)),
            (1, _) => return Err(err("expected a grayscale image".into())),
            (3, 1 | 2) => out.extend([sample(px, 0); 3]),
            (3, _) => out.extend([sample(px, 0), sample(px, 1), sample(px, 2)]),
            _ => return Err(err(format!("unsupported channel count {channels}"))),
        }
    }
    Ok((w, h, out))
}

/// Mean squared difference over pixels and channels.
pub fn image_mse(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Dimension {
            expected: a.width * a.height,
            got: b.width * b.height,
        });
    }
    let n = (a.pixels.len() * 3).max(1) as f64;
    let mut sum = 0.0;
    for (p, q) in a.pixels.iter().zip(&b.pixels) {
        for c in 0..3 {
            let d = p[c] as f64 - q[c] as f64;
            sum += d * d;
        }
    }
    Ok(sum / n)
}

/// Writes a small text log line by line.
pub(crate) fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
