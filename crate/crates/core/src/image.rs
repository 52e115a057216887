//! Linear-radiometric image buffers and PFM/PNG I/O.
//!
//! PNG files are 8-bit sRGB and get decoded to linear on load. PFM holds
//! linear floats (1 or 3 channels); a 4-channel buffer is stored as an RGB
//! `.pfm` plus a single-channel `_alpha.pfm` companion.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, top row first, channels interleaved.
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::InvalidInput(format!("unsupported channel count {channels}")));
        }
        Ok(ImageBuffer { width, height, channels, data: vec![0.0; width * height * channels] })
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::InvalidInput(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at {bad}")));
        }
        Ok(ImageBuffer { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Result<Self> {
        let mut img = ImageBuffer::new(width, height, value.len())?;
        for px in img.data.chunks_mut(value.len()) {
            px.copy_from_slice(value);
        }
        Ok(img)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_at(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// RGB of pixel `index` (grey images are broadcast).
    #[inline]
    pub fn rgb_at(&self, index: usize) -> [f64; 3] {
        let p = self.pixel_at(index);
        if self.channels == 1 {
            [p[0]; 3]
        } else {
            [p[0], p[1], p[2]]
        }
    }

    /// Alpha channel of pixel `index`; images without alpha are opaque.
    #[inline]
    pub fn alpha_at(&self, index: usize) -> f64 {
        if self.channels == 4 {
            self.data[index * 4 + 3]
        } else {
            1.0
        }
    }

    /// Extracts `count` channels starting at `first`.
    pub fn channels_slice(&self, first: usize, count: usize) -> Result<ImageBuffer> {
        if first + count > self.channels {
            return Err(Error::InvalidInput("channel range out of bounds".into()));
        }
        let mut out = ImageBuffer::new(self.width, self.height, count)?;
        for i in 0..self.pixel_count() {
            out.data[i * count..(i + 1) * count]
                .copy_from_slice(&self.data[i * self.channels + first..i * self.channels + first + count]);
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// sRGB byte to linear.
pub fn srgb_to_linear(v8: u8) -> f64 {
    let c = v8 as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Linear to sRGB byte, clamped and rounded.
pub fn linear_to_srgb(v: f64) -> u8 {
    let c = v.clamp(0.0, 1.0);
    let s = if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    };
    (s * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn write_pfm(path: &Path, img: &ImageBuffer) -> Result<()> {
    let channels = match img.channels {
        1 | 3 => img.channels,
        c => return Err(Error::InvalidInput(format!("PFM cannot store {c} channels"))),
    };
    let mut out = Vec::with_capacity(32 + img.data.len() * 4);
    let tag = if channels == 3 { "PF" } else { "Pf" };
    write!(out, "{tag}\n{} {}\n-1.0\n", img.width, img.height).expect("in-memory write");
    // PFM rows run bottom to top.
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for &v in img.pixel(x, y) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<ImageBuffer> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |detail: &str| Error::Image { path: path.to_path_buf(), detail: detail.to_string() };
    let mut header = Vec::new();
    // Header is three whitespace-separated tokens lines: tag, dims, scale.
    while header.len() < 4 {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(bad("truncated header"));
        }
        header.extend(line.split_whitespace().map(str::to_string));
    }
    let channels = match header[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(bad("not a PFM file")),
    };
    let width: usize = header[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = header[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = header[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; width * height * channels * 4];
    reader.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let mut img = ImageBuffer::new(width, height, channels)?;
    let mut k = 0;
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let b = [raw[k], raw[k + 1], raw[k + 2], raw[k + 3]];
                k += 4;
                let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
                img.pixel_mut(x, y)[c] = v as f64;
            }
        }
    }
    if !img.is_finite() {
        return Err(bad("non-finite pixel values"));
    }
    Ok(img)
}

/// Writes an 8-bit PNG, sRGB-encoding color channels. Alpha stays linear.
pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let to_err = |e: image::ImageError| Error::Image { path: path.to_path_buf(), detail: e.to_string() };
    let enc = |i: usize, c: usize| -> u8 {
        let v = img.data[i * img.channels + c];
        if c == 3 {
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        } else {
            linear_to_srgb(v)
        }
    };
    let n = img.pixel_count();
    match img.channels {
        1 => {
            let buf: Vec<u8> = (0..n).map(|i| enc(i, 0)).collect();
            image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
                .expect("buffer size")
                .save(path)
                .map_err(to_err)
        }
        3 => {
            let buf: Vec<u8> = (0..n).flat_map(|i| (0..3).map(move |c| (i, c))).map(|(i, c)| enc(i, c)).collect();
            image::RgbImage::from_raw(img.width as u32, img.height as u32, buf)
                .expect("buffer size")
                .save(path)
                .map_err(to_err)
        }
        _ => {
            let buf: Vec<u8> = (0..n).flat_map(|i| (0..4).map(move |c| (i, c))).map(|(i, c)| enc(i, c)).collect();
            image::RgbaImage::from_raw(img.width as u32, img.height as u32, buf)
                .expect("buffer size")
                .save(path)
                .map_err(to_err)
        }
    }
}

/// Reads a PNG into linear RGB (or RGBA when the file has alpha).
pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let dynimg = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), detail: e.to_string() })?;
    let has_alpha = dynimg.color().has_alpha();
    let rgba = dynimg.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let channels = if has_alpha { 4 } else { 3 };
    let mut img = ImageBuffer::new(w, h, channels)?;
    for (i, px) in rgba.pixels().enumerate() {
        for c in 0..3 {
            img.data[i * channels + c] = srgb_to_linear(px.0[c]);
        }
        if has_alpha {
            img.data[i * channels + 3] = px.0[3] as f64 / 255.0;
        }
    }
    Ok(img)
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Saves a linear image as `<base>.pfm` (plus `<base>_alpha.pfm` for RGBA)
/// and an sRGB preview `<base>.png`.
pub fn save_linear(base: &Path, img: &ImageBuffer) -> Result<()> {
    match img.channels {
        4 => {
            write_pfm(&with_suffix(base, ".pfm"), &img.channels_slice(0, 3)?)?;
            write_pfm(&with_suffix(base, "_alpha.pfm"), &img.channels_slice(3, 1)?)?;
        }
        _ => write_pfm(&with_suffix(base, ".pfm"), img)?,
    }
    write_png(&with_suffix(base, ".png"), img)
}

/// Loads `<base>.pfm` (with optional `_alpha.pfm`), falling back to
/// `<base>.png`. A base that already carries an extension is read directly.
pub fn load_linear(base: &Path) -> Result<ImageBuffer> {
    match base.extension().and_then(|e| e.to_str()) {
        Some("pfm") => return read_pfm(base),
        Some("png") => return read_png(base),
        _ => {}
    }
    let pfm = with_suffix(base, ".pfm");
    if pfm.exists() {
        let rgb = read_pfm(&pfm)?;
        let alpha_path = with_suffix(base, "_alpha.pfm");
        if !alpha_path.exists() {
            return Ok(rgb);
        }
        let alpha = read_pfm(&alpha_path)?;
        if alpha.width != rgb.width || alpha.height != rgb.height {
            return Err(Error::Image { path: alpha_path, detail: "alpha size mismatch".into() });
        }
        let mut out = ImageBuffer::new(rgb.width, rgb.height, 4)?;
        for i in 0..rgb.pixel_count() {
            let c = rgb.rgb_at(i);
            out.data[i * 4..i * 4 + 3].copy_from_slice(&c);
            out.data[i * 4 + 3] = alpha.data[i];
        }
        return Ok(out);
    }
    let png = with_suffix(base, ".png");
    if png.exists() {
        return read_png(&png);
    }
    Err(Error::Dataset(format!("no image found for {}", base.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_endpoints() {
        assert_eq!(srgb_to_linear(0), 0.0);
        assert_eq!(srgb_to_linear(255), 1.0);
    }

    #[test]
    fn srgb_midpoint_matches_reference() {
        // ((128/255 + 0.055) / 1.055)^2.4, evaluated independently.
        let c: f64 = 128.0 / 255.0;
        let expected = ((c + 0.055) / 1.055).powf(2.4);
        assert!((srgb_to_linear(128) - expected).abs() < 1e-15);
        assert!((srgb_to_linear(128) - 0.215_860_500_22).abs() < 1e-9);
    }

    #[test]
    fn srgb_roundtrip_all_bytes() {
        for b in 0..=255u8 {
            let lin = srgb_to_linear(b);
            assert_eq!(linear_to_srgb(lin), b);
            let back = srgb_to_linear(linear_to_srgb(lin));
            assert!((back - lin).abs() <= 1.0 / 512.0);
        }
    }

    #[test]
    fn pfm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageBuffer::new(5, 3, 3).unwrap();
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64 * 0.25;
        }
        let p = dir.path().join("a.pfm");
        write_pfm(&p, &img).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), img);
    }

    #[test]
    fn rgba_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageBuffer::new(4, 4, 4).unwrap();
        for i in 0..16 {
            img.data[i * 4..i * 4 + 4].copy_from_slice(&[0.5, 0.25, i as f64, if i % 2 == 0 { 1.0 } else { 0.0 }]);
        }
        let base = dir.path().join("r_0");
        save_linear(&base, &img).unwrap();
        assert_eq!(load_linear(&base).unwrap(), img);
        assert!(base.with_extension("png").exists());
    }

    #[test]
    fn rejects_bad_channels() {
        assert!(ImageBuffer::new(2, 2, 2).is_err());
        assert!(ImageBuffer::from_data(1, 1, 1, vec![f64::NAN]).is_err());
    }
}
