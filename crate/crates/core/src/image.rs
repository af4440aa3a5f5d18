//! In-memory image types and file IO.
//!
//! Pixels live in linear [0,1] as f64 RGB; files are 8-bit PNG or binary PPM
//! (P6, maxval 255). Quantization is round-to-nearest, so a write/read round
//! trip moves each channel by at most 1/255.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Row-major RGB image, f64 channels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vector3<f64>>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, Vector3::zeros())
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vector3<f64> {
        self.pixels[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: Vector3<f64>) {
        let i = self.idx(x, y);
        self.pixels[i] = v;
    }

    pub fn filled(width: usize, height: usize, v: Vector3<f64>) -> Self {
        ImageBuf { width, height, pixels: vec![v; width * height] }
    }
}

/// Binary H x W mask (visibility masks, opacity masks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Bitmap { width, height, bits: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Per-pixel AND; panics on dimension mismatch (caller bug).
    pub fn and(&self, other: &Bitmap) -> Bitmap {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Bitmap {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Read a PNG or binary PPM image; format is sniffed from magic bytes.
pub fn read_image(path: &Path) -> Result<ImageBuf> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.starts_with(b"P6") {
        read_ppm_bytes(&data, path)
    } else if data.starts_with(&[0x89, b'P', b'N', b'G']) {
        let img = image::load_from_memory(&data)
            .map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ImageBuf::filled(w, h, Vector3::zeros());
        for (i, p) in img.pixels().enumerate() {
            out.pixels[i] = Vector3::new(
                p.0[0] as f64 / 255.0,
                p.0[1] as f64 / 255.0,
                p.0[2] as f64 / 255.0,
            );
        }
        Ok(out)
    } else {
        Err(Error::Image { path: path.into(), msg: "not a PNG or binary PPM (P6) file".into() })
    }
}

/// Write PNG or binary PPM depending on the file extension (.png / .ppm).
pub fn write_image(img: &ImageBuf, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(img, path),
        Some("ppm") => write_ppm(img, path),
        other => Err(Error::Image {
            path: path.into(),
            msg: format!("unsupported image extension {:?} (use .png or .ppm)", other),
        }),
    }
}

fn write_png(img: &ImageBuf, path: &Path) -> Result<()> {
    let mut rgb = image::RgbImage::new(img.width as u32, img.height as u32);
    for (i, p) in img.pixels.iter().enumerate() {
        let x = (i % img.width) as u32;
        let y = (i / img.width) as u32;
        rgb.put_pixel(x, y, image::Rgb([quantize(p.x), quantize(p.y), quantize(p.z)]));
    }
    rgb.save(path).map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })
}

fn write_ppm(img: &ImageBuf, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(img.pixels.len() * 3 + 32);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height).unwrap();
    for p in &img.pixels {
        out.extend_from_slice(&[quantize(p.x), quantize(p.y), quantize(p.z)]);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_ppm_bytes(data: &[u8], path: &Path) -> Result<ImageBuf> {
    // Header: "P6" <ws> width <ws> height <ws> maxval <single ws> raster.
    // '#' comments are allowed between tokens per the format spec.
    let mut pos = 2; // past "P6"
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image { path: path.into(), msg: "malformed PPM header".into() });
        }
        *f = std::str::from_utf8(&data[start..pos]).unwrap().parse().unwrap();
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::Image {
            path: path.into(),
            msg: format!("unsupported PPM maxval {} (only 255)", maxval),
        });
    }
    pos += 1; // the single whitespace byte after maxval
    let need = w * h * 3;
    if data.len() < pos + need {
        return Err(Error::Image { path: path.into(), msg: "truncated PPM raster".into() });
    }
    let mut img = ImageBuf::filled(w, h, Vector3::zeros());
    for i in 0..w * h {
        let o = pos + i * 3;
        img.pixels[i] = Vector3::new(
            data[o] as f64 / 255.0,
            data[o + 1] as f64 / 255.0,
            data[o + 2] as f64 / 255.0,
        );
    }
    Ok(img)
}

/// Write a mask as an 8-bit gray PNG (0 / 255).
pub fn write_mask_png(mask: &Bitmap, path: &Path) -> Result<()> {
    let mut gray = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for (i, b) in mask.bits.iter().enumerate() {
        let x = (i % mask.width) as u32;
        let y = (i / mask.width) as u32;
        gray.put_pixel(x, y, image::Luma([if *b { 255 } else { 0 }]));
    }
    gray.save(path).map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })
}

/// Read a mask written by [`write_mask_png`]; any value >= 128 counts as set.
pub fn read_mask_png(path: &Path) -> Result<Bitmap> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&data)
        .map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })?
        .into_luma8();
    Ok(Bitmap {
        width: img.width() as usize,
        height: img.height() as usize,
        bits: img.pixels().map(|p| p.0[0] >= 128).collect(),
    })
}

/// Debug dump of per-pixel transmittance (1 - acc) as a binary PGM (P5).
pub fn write_transmittance_pgm(acc: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    assert_eq!(acc.len(), width * height);
    let mut out = Vec::with_capacity(acc.len() + 32);
    write!(out, "P5\n{} {}\n255\n", width, height).unwrap();
    for a in acc {
        out.push(quantize(1.0 - a));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
