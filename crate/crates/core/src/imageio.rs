//! PNG and raw-field file formats, plus colour encodings for figures.
//!
//! In-memory images are `[3, H, W]` tensors in `[-1, 1]`. PNG files are 8-bit
//! RGB. Field rasters are little-endian: `u32` width, `u32` height, then the
//! `dx` plane and the `dy` plane as `f32`, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![255; width * height * 3],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies `other` with its top-left corner at `(x0, y0)`, clipping.
    pub fn blit(&mut self, other: &Rgb8, x0: usize, y0: usize) {
        for y in 0..other.height.min(self.height.saturating_sub(y0)) {
            for x in 0..other.width.min(self.width.saturating_sub(x0)) {
                let s = 3 * (y * other.width + x);
                self.put(x0 + x, y0 + y, [other.data[s], other.data[s + 1], other.data[s + 2]]);
            }
        }
    }

    /// Tiles rasters left to right with `gap` white pixels between them.
    pub fn hstack(parts: &[Rgb8], gap: usize) -> Self {
        let height = parts.iter().map(|p| p.height).max().unwrap_or(0);
        let width = parts.iter().map(|p| p.width).sum::<usize>() + gap * parts.len().saturating_sub(1);
        let mut out = Self::new(width, height);
        let mut x = 0;
        for p in parts {
            out.blit(p, x, 0);
            x += p.width + gap;
        }
        out
    }

    /// Stacks rasters top to bottom with `gap` white pixels between them.
    pub fn vstack(parts: &[Rgb8], gap: usize) -> Self {
        let width = parts.iter().map(|p| p.width).max().unwrap_or(0);
        let height = parts.iter().map(|p| p.height).sum::<usize>() + gap * parts.len().saturating_sub(1);
        let mut out = Self::new(width, height);
        let mut y = 0;
        for p in parts {
            out.blit(p, 0, y);
            y += p.height + gap;
        }
        out
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn scaled(&self, factor: usize) -> Self {
        let mut out = Self::new(self.width * factor, self.height * factor);
        for y in 0..out.height {
            for x in 0..out.width {
                let s = 3 * ((y / factor) * self.width + x / factor);
                out.put(x, y, [self.data[s], self.data[s + 1], self.data[s + 2]]);
            }
        }
        out
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [3, h, w] | [1, 3, h, w] => Ok((h, w)),
        ref s => Err(Error::Argument(format!("expected one RGB image, got shape {s:?}"))),
    }
}

fn to_byte(v: f64) -> u8 {
    (0.5 * (v + 1.0) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Quantises an image in `[-1, 1]` to 8 bits per channel.
pub fn to_rgb8(image: &Tensor) -> Result<Rgb8> {
    let (h, w) = image_dims(image)?;
    let hw = h * w;
    let d = image.data();
    let mut out = Rgb8::new(w, h);
    for i in 0..hw {
        for c in 0..3 {
            out.data[3 * i + c] = to_byte(d[c * hw + i]);
        }
    }
    Ok(out)
}

pub fn from_rgb8(raster: &Rgb8) -> Tensor {
    let hw = raster.width * raster.height;
    Tensor::from_fn(&[3, raster.height, raster.width], |j| {
        let (c, i) = (j / hw, j % hw);
        f64::from(raster.data[3 * i + c]) / 255.0 * 2.0 - 1.0
    })
}

pub fn write_rgb8(path: &Path, raster: &Rgb8) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), raster.width as u32, raster.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(&raster.data).map_err(fail)?;
    writer.finish().map_err(fail)
}

/// Reads any 8- or 16-bit PNG as RGB, dropping alpha.
pub fn read_rgb8(path: &Path) -> Result<Rgb8> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let fail = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = dec.read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
    };
    let mut out = Rgb8::new(w, h);
    for i in 0..w * h {
        let px = &buf[i * channels..(i + 1) * channels];
        let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
        out.data[3 * i..3 * i + 3].copy_from_slice(&rgb);
    }
    Ok(out)
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    write_rgb8(path, &to_rgb8(image)?)
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    Ok(from_rgb8(&read_rgb8(path)?))
}

fn field_dims(field: &Tensor) -> Result<(usize, usize)> {
    match *field.shape() {
        [2, h, w] | [1, 2, h, w] => Ok((h, w)),
        ref s => Err(Error::Argument(format!("expected one [2, H, W] field, got shape {s:?}"))),
    }
}

pub fn field_to_bytes(field: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = field_dims(field)?;
    let mut out = Vec::with_capacity(8 + 4 * field.len());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for &v in field.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn field_from_bytes(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 8 {
        return Err("truncated header".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (w, h) = (word(0), word(4));
    let n = 2 * w * h;
    if w == 0 || h == 0 || bytes.len() != 8 + 4 * n {
        return Err(format!(
            "{w}x{h} field needs {} bytes, file has {}",
            8 + 4 * n,
            bytes.len()
        ));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(&[2, h, w], data).map_err(|e| e.to_string())
}

pub fn write_field(path: &Path, field: &Tensor) -> Result<()> {
    let bytes = field_to_bytes(field)?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    field_from_bytes(&bytes).map_err(|d| Error::format(path, d))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Flow colouring: hue encodes direction, saturation the magnitude relative
/// to `max_magnitude` (the field's own maximum when `None`). Zero is white.
pub fn flow_to_rgb8(field: &Tensor, max_magnitude: Option<f64>) -> Result<Rgb8> {
    let (h, w) = field_dims(field)?;
    let hw = h * w;
    let d = field.data();
    let peak = max_magnitude.unwrap_or_else(|| {
        (0..hw).map(|i| d[i].hypot(d[hw + i])).fold(0.0, f64::max)
    });
    let mut out = Rgb8::new(w, h);
    for i in 0..hw {
        let (dx, dy) = (d[i], d[hw + i]);
        let mag = dx.hypot(dy);
        let s = if peak > 0.0 { (mag / peak).min(1.0) } else { 0.0 };
        let hue = dy.atan2(dx) / std::f64::consts::TAU;
        out.put(i % w, i / w, hsv_to_rgb(hue, s, 1.0));
    }
    Ok(out)
}

/// Blue-white-red colouring of a scalar map over `[lo, hi]`.
pub fn heatmap_rgb8(values: &[f64], width: usize, height: usize, lo: f64, hi: f64) -> Result<Rgb8> {
    if values.len() != width * height {
        return Err(Error::Argument(format!(
            "heatmap of {} values for {width}x{height}",
            values.len()
        )));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Rgb8::new(width, height);
    for (i, &v) in values.iter().enumerate() {
        let t = ((v - lo) / span).clamp(0.0, 1.0) * 2.0 - 1.0;
        let fade = |c: f64| (255.0 * (1.0 - c)).round() as u8;
        let rgb = if t < 0.0 {
            [fade(-t), fade(-t), 255]
        } else {
            [255, fade(t), fade(t)]
        };
        out.put(i % width, i / width, rgb);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn png_round_trip_is_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Tensor::uniform(&[3, 5, 7], -1.0, 1.0, &mut rng);
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        let err = back.zip_map(&img, |a, b| (a - b).abs()).unwrap().abs_max();
        assert!(err <= 1.0 / 255.0 + 1e-12);
    }

    #[test]
    fn field_bytes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Tensor::randn(&[2, 3, 4], 2.0, &mut rng);
        let bytes = field_to_bytes(&f).unwrap();
        let back = field_from_bytes(&bytes).unwrap();
        assert_eq!(field_to_bytes(&back).unwrap(), bytes);
        assert!(field_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_rgb8(&Tensor::zeros(&[2, 2, 2]), None).unwrap();
        assert!(img.data.iter().all(|&b| b == 255));
    }

    #[test]
    fn missing_png_names_path() {
        let err = read_png(Path::new("/nonexistent/q.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/q.png"));
    }
}
