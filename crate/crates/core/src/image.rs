//! 8-bit grayscale images: PGM (P5) and PNG reading, PGM/PNG writing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, 0 = black, 255 = white.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Image(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Maps a `[H, W]` tensor in `[-1, 1]` back to bytes (`+1` → 255).
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Shape(format!("expected [H, W], got {:?}", t.shape())));
        }
        let pixels = t
            .data()
            .iter()
            .map(|v| {
                let v = v.to_f64();
                let v = if v.is_finite() { v } else { 1.0 };
                ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
            })
            .collect();
        Self::new(t.dim(1), t.dim(0), pixels)
    }
}

fn pgm_token<'a>(data: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("truncated PGM header".into()));
    }
    Ok(&data[start..*pos])
}

pub fn decode_pgm(data: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    if pgm_token(data, &mut pos)? != b"P5" {
        return Err(Error::Image("not a binary PGM (P5)".into()));
    }
    let mut num = || -> Result<usize> {
        let tok = pgm_token(data, &mut pos)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image("bad PGM header number".into()))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and raster
    let start = pos + 1;
    let end = start + w * h;
    if data.len() < end {
        return Err(Error::Image("truncated PGM raster".into()));
    }
    let pixels = data[start..end]
        .iter()
        .map(|&p| ((u32::from(p) * 255 + maxval as u32 / 2) / maxval as u32) as u8)
        .collect();
    GrayImage::new(w, h, pixels)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

fn decode_png(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let channels = info.color_type.samples();
    let pixels = buf
        .chunks_exact(channels)
        .map(|px| match channels {
            1 | 2 => px[0],
            _ => {
                let l = 0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2]);
                l.round() as u8
            }
        })
        .collect();
    GrayImage::new(w, h, pixels)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => decode_png(path),
        _ => {
            let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_pgm(&data)
        }
    }
}

/// Writes PNG for a `.png` extension and PGM otherwise.
pub fn write_image(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let mut enc = png::Encoder::new(&mut w, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Image(e.to_string()))?;
        writer
            .write_image_data(&img.pixels)
            .map_err(|e| Error::Image(e.to_string()))?;
    } else {
        w.write_all(&encode_pgm(img)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
