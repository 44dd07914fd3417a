//! Unifont `.hex` parsing and text-to-glyph content encoding.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const GLYPH_SIZE: usize = 16;
pub const GLYPH_PIXELS: usize = GLYPH_SIZE * GLYPH_SIZE;

/// A 16×16 binary glyph; each row is a 16-bit mask with the leftmost pixel
/// in the most significant bit.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Bitmap16 {
    rows: [u16; GLYPH_SIZE],
}

impl Bitmap16 {
    pub fn from_rows(rows: [u16; GLYPH_SIZE]) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[u16; GLYPH_SIZE] {
        &self.rows
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.rows[row] & (0x8000 >> col) != 0
    }

    pub fn ink(&self) -> u32 {
        self.rows.iter().map(|r| r.count_ones()).sum()
    }

    pub fn or(&self, other: &Bitmap16) -> Bitmap16 {
        let mut rows = self.rows;
        for (r, o) in rows.iter_mut().zip(&other.rows) {
            *r |= o;
        }
        Bitmap16 { rows }
    }

    /// Row-major 0/1 values.
    pub fn flatten(&self) -> [u8; GLYPH_PIXELS] {
        let mut out = [0u8; GLYPH_PIXELS];
        for r in 0..GLYPH_SIZE {
            for c in 0..GLYPH_SIZE {
                out[r * GLYPH_SIZE + c] = u8::from(self.get(r, c));
            }
        }
        out
    }

    /// 64 uppercase hex digits.
    pub fn to_hex(&self) -> String {
        self.rows.iter().map(|r| format!("{r:04X}")).collect()
    }

    pub fn to_ascii_art(&self) -> String {
        let mut s = String::with_capacity(GLYPH_SIZE * (GLYPH_SIZE + 1));
        for r in 0..GLYPH_SIZE {
            for c in 0..GLYPH_SIZE {
                s.push(if self.get(r, c) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Debug for Bitmap16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bitmap16({})", self.to_hex())
    }
}

#[derive(Clone, Debug)]
pub struct GlyphTable {
    entries: BTreeMap<u32, Bitmap16>,
    source_path: PathBuf,
}

fn parse_line(line: &str, lineno: usize) -> Result<(u32, Bitmap16)> {
    let err = |message: String| Error::Parse {
        line: lineno,
        message,
    };
    let (cp, payload) = line
        .split_once(':')
        .ok_or_else(|| err(format!("expected CODEPOINT:HEX, got {line:?}")))?;
    if cp.is_empty() || cp.len() > 6 || !cp.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(err(format!("bad codepoint field {cp:?}")));
    }
    if !payload.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(err("payload is not hexadecimal".into()));
    }
    let cp = u32::from_str_radix(cp, 16).map_err(|e| err(e.to_string()))?;
    let mut rows = [0u16; GLYPH_SIZE];
    match payload.len() {
        32 => {
            for (r, row) in rows.iter_mut().enumerate() {
                let byte = u8::from_str_radix(&payload[2 * r..2 * r + 2], 16).unwrap();
                // centre the 8-wide cell in the 16-wide frame
                *row = u16::from(byte) << 4;
            }
        }
        64 => {
            for (r, row) in rows.iter_mut().enumerate() {
                *row = u16::from_str_radix(&payload[4 * r..4 * r + 4], 16).unwrap();
            }
        }
        n => {
            return Err(err(format!(
                "payload has {n} hex digits, expected 32 or 64"
            )))
        }
    }
    Ok((cp, Bitmap16 { rows }))
}

impl GlyphTable {
    pub fn parse(text: &str, source_path: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let (cp, bmp) = parse_line(line, i + 1)?;
            if entries.insert(cp, bmp).is_some() {
                return Err(Error::DuplicateCodepoint(cp));
            }
        }
        if entries.is_empty() {
            return Err(Error::Empty("font file has no glyphs".into()));
        }
        Ok(Self {
            entries,
            source_path: source_path.into(),
        })
    }

    pub fn source_path(&self) -> &Path {
        &self.source_path
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, c: char) -> bool {
        self.entries.contains_key(&(c as u32))
    }

    pub fn codepoints(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, cp: u32) -> Option<&Bitmap16> {
        self.entries.get(&cp)
    }

    /// Serializes every glyph as a 16-wide `.hex` line.
    pub fn to_hex_lines(&self) -> String {
        let mut s = String::new();
        for (cp, bmp) in &self.entries {
            s.push_str(&format!("{cp:04X}:{}\n", bmp.to_hex()));
        }
        s
    }
}

pub fn load_hex_font(path: impl AsRef<Path>) -> Result<GlyphTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GlyphTable::parse(&text, path)
}

pub fn render_char(table: &GlyphTable, c: char) -> Result<Bitmap16> {
    table
        .get(c as u32)
        .copied()
        .ok_or(Error::MissingGlyph(c as u32))
}

/// Glyph for a base character, falling back to overlaying its canonical
/// decomposition when the precomposed form is missing from the font.
fn base_glyph(table: &GlyphTable, c: char) -> Result<Bitmap16> {
    if let Some(b) = table.get(c as u32) {
        return Ok(*b);
    }
    let parts: Vec<char> = std::iter::once(c).nfd().collect();
    if parts.len() < 2 {
        return Err(Error::MissingGlyph(c as u32));
    }
    let mut acc = Bitmap16::default();
    for p in parts {
        let g = table.get(p as u32).ok_or(Error::MissingGlyph(c as u32))?;
        acc = acc.or(g);
    }
    Ok(acc)
}

/// One visual token per NFC base character; trailing combining marks are
/// OR-ed into the preceding token. Returns the normalized text alongside.
pub fn tokenize(table: &GlyphTable, s: &str) -> Result<(String, Vec<Bitmap16>)> {
    let text: String = s.nfc().collect();
    let mut tokens: Vec<Bitmap16> = Vec::new();
    for c in text.chars() {
        if is_combining_mark(c) && !tokens.is_empty() {
            let mark = render_char(table, c)?;
            let last = tokens.last_mut().unwrap();
            *last = last.or(&mark);
        } else {
            tokens.push(base_glyph(table, c)?);
        }
    }
    if tokens.is_empty() {
        return Err(Error::Empty("text to render is empty".into()));
    }
    Ok((text, tokens))
}

/// Number of content tokens `s` renders to (which fixes the image width).
pub fn token_count(table: &GlyphTable, s: &str) -> Result<usize> {
    tokenize(table, s).map(|(_, t)| t.len())
}

/// `L × d` sinusoidal table: `(p, 2k) = sin(p / 10000^(2k/d))`,
/// `(p, 2k+1) = cos(·)`.
pub fn sinusoidal_pe<T: Real>(len: usize, d: usize) -> Result<Tensor<T>> {
    if d < 2 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding width must be even and >= 2, got {d}"
        )));
    }
    if len == 0 {
        return Err(Error::Empty("positional encoding length is zero".into()));
    }
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        for k in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            data.push(T::from_f64(angle.sin()));
            data.push(T::from_f64(angle.cos()));
        }
    }
    Tensor::from_vec(&[len, d], data)
}

/// Glyph tokens and positional encodings for one query word.
#[derive(Clone, Debug)]
pub struct ContentSequence<T> {
    /// `L × 256` of {0, 1}.
    pub tokens: Tensor<T>,
    /// `L × d_model`.
    pub positions: Tensor<T>,
    pub text: String,
}

impl<T: Real> ContentSequence<T> {
    pub fn len(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn render_text<T: Real>(table: &GlyphTable, s: &str, d_model: usize) -> Result<ContentSequence<T>> {
    let (text, glyphs) = tokenize(table, s)?;
    let mut data = Vec::with_capacity(glyphs.len() * GLYPH_PIXELS);
    for g in &glyphs {
        data.extend(g.flatten().iter().map(|&b| T::from_f64(f64::from(b))));
    }
    Ok(ContentSequence {
        tokens: Tensor::from_vec(&[glyphs.len(), GLYPH_PIXELS], data)?,
        positions: sinusoidal_pe(glyphs.len(), d_model)?,
        text,
    })
}

/// Path of the Latin/Vietnamese Unifont subset shipped with the repository.
pub fn bundled_font_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/unifont-latin.hex")
}
