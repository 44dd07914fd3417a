//! Synthetic handwriting corpus: glyph-rendered words with per-writer
//! geometric and stroke distortions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{manifest_lines, Sample, WriterRegistry};
use crate::error::{Error, Result};
use crate::glyphs::{tokenize, GlyphTable, GLYPH_SIZE};
use crate::image::{write_image, GrayImage};

pub const SMOKE_WORDS: [&str; 10] = ["ink", "pen", "arc", "fox", "hand", "note", "word", "mist", "cup", "lamp"];

/// Distortion parameters of one synthetic writer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WriterStyle {
    /// Horizontal shift per pixel above the baseline.
    pub shear: f64,
    /// Stroke dilation radius in pixels (0 keeps the 1-px font strokes).
    pub bold: usize,
    /// Vertical sine displacement amplitude in pixels.
    pub wave_amp: f64,
    pub wave_period: f64,
    /// Horizontal stretch of the rendered word.
    pub stretch: f64,
    /// Gray level of ink strokes.
    pub ink: u8,
}

impl WriterStyle {
    /// Styles that alternate between slanted/heavy and upright/thin/wavy.
    pub fn preset(k: usize) -> Self {
        if k % 2 == 0 {
            Self {
                shear: 0.35 + 0.05 * (k / 2) as f64,
                bold: 1,
                wave_amp: 0.0,
                wave_period: 1.0,
                stretch: 1.0,
                ink: 10 + 10 * (k / 2 % 3) as u8,
            }
        } else {
            Self {
                shear: -0.1,
                bold: 0,
                wave_amp: 2.0 + 0.5 * (k / 2) as f64,
                wave_period: 18.0 + 4.0 * (k / 2) as f64,
                stretch: 1.15,
                ink: 60,
            }
        }
    }
}

/// Renders `word` onto a white canvas `height` pixels tall using the
/// glyph bitmaps, then applies `style`. `jitter` varies shear and baseline
/// slightly so repeated words are not identical.
pub fn render_word(font: &GlyphTable, word: &str, style: &WriterStyle, jitter: &mut impl Rng) -> Result<GrayImage> {
    let (_, glyphs) = tokenize(font, word)?;
    let l = glyphs.len();
    // binary ink mask on a 16-px tall strip
    let w0 = GLYPH_SIZE * l;
    let mut mask = vec![false; GLYPH_SIZE * w0];
    for (i, g) in glyphs.iter().enumerate() {
        for r in 0..GLYPH_SIZE {
            for c in 0..GLYPH_SIZE {
                if g.get(r, c) {
                    mask[r * w0 + i * GLYPH_SIZE + c] = true;
                }
            }
        }
    }
    if style.bold > 0 {
        let src = mask.clone();
        let rad = style.bold as isize;
        for r in 0..GLYPH_SIZE as isize {
            for c in 0..w0 as isize {
                if src[(r * w0 as isize + c) as usize] {
                    for dr in -rad..=rad {
                        for dc in 0..=rad {
                            let (rr, cc) = (r + dr, c + dc);
                            if rr >= 0 && rr < GLYPH_SIZE as isize && cc >= 0 && cc < w0 as isize {
                                mask[(rr * w0 as isize + cc) as usize] = true;
                            }
                        }
                    }
                }
            }
        }
    }
    let shear = style.shear + jitter.random_range(-0.04..0.04);
    let phase = jitter.random_range(0.0..std::f64::consts::TAU);
    let scale = 2.0;
    let out_h = 48;
    let out_w = ((w0 as f64) * scale * style.stretch).ceil() as usize + 8;
    let top = (out_h as f64 - GLYPH_SIZE as f64 * scale) / 2.0 + jitter.random_range(-1.5..1.5);
    let mut pixels = vec![255u8; out_h * out_w];
    // inverse-map every output pixel into the strip; supersample 2×2
    for y in 0..out_h {
        for x in 0..out_w {
            let mut hits = 0;
            for sy in 0..2 {
                for sx in 0..2 {
                    let fy = y as f64 + 0.25 + 0.5 * sy as f64;
                    let fx = x as f64 + 0.25 + 0.5 * sx as f64;
                    let wave = style.wave_amp * (fx / style.wave_period * std::f64::consts::TAU + phase).sin();
                    let v = (fy - top - wave) / scale;
                    let above = GLYPH_SIZE as f64 - v;
                    let u = (fx - 4.0 - shear * above * scale) / (scale * style.stretch);
                    if v >= 0.0 && u >= 0.0 {
                        let (vi, ui) = (v as usize, u as usize);
                        if vi < GLYPH_SIZE && ui < w0 && mask[vi * w0 + ui] {
                            hits += 1;
                        }
                    }
                }
            }
            if hits > 0 {
                let a = hits as f64 / 4.0;
                pixels[y * out_w + x] = (255.0 - a * (255.0 - f64::from(style.ink))).round() as u8;
            }
        }
    }
    GrayImage::new(out_w, out_h, pixels)
}

/// Writes `n_writers × words.len() × copies` images plus `manifest.jsonl`
/// into `out_dir`; returns the samples.
pub fn write_corpus(
    font: &GlyphTable,
    out_dir: &Path,
    n_writers: usize,
    words: &[&str],
    copies: usize,
    seed: u64,
) -> Result<(Vec<Sample>, WriterRegistry)> {
    if n_writers == 0 || words.is_empty() || copies == 0 {
        return Err(Error::Config("corpus needs writers, words and copies".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let registry = WriterRegistry {
        tags: (0..n_writers).map(|k| format!("synth{k}")).collect(),
    };
    let mut samples = Vec::new();
    for k in 0..n_writers {
        let style = WriterStyle::preset(k);
        for (wi, word) in words.iter().enumerate() {
            for c in 0..copies {
                let img = render_word(font, word, &style, &mut rng)?;
                let path = out_dir.join(format!("w{k}_{wi:03}_{c}.pgm"));
                write_image(&path, &img)?;
                samples.push(Sample {
                    image_path: path,
                    transcript: (*word).to_string(),
                    writer_id: k,
                });
            }
        }
    }
    let manifest = out_dir.join("manifest.jsonl");
    std::fs::write(&manifest, manifest_lines(&samples, &registry, out_dir)).map_err(|e| Error::io(&manifest, e))?;
    Ok((samples, registry))
}

/// The two-writer, ten-word smoke corpus.
pub fn write_smoke_corpus(font: &GlyphTable, out_dir: &Path, seed: u64) -> Result<(Vec<Sample>, WriterRegistry)> {
    write_corpus(font, out_dir, 2, &SMOKE_WORDS, 1, seed)
}
