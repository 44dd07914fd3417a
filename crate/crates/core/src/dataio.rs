//! Manifests, preprocessing, style-set sampling and evaluation splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::image::{read_image, GrayImage};
use crate::tensor::{Real, Tensor};

pub const IMG_HEIGHT: usize = 32;
pub const CHAR_WIDTH: usize = 16;
pub const EVAL_WIDTH: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub image_path: PathBuf,
    pub transcript: String,
    pub writer_id: usize,
}

/// Writer tags in first-appearance order; the index is the dense id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriterRegistry {
    pub tags: Vec<String>,
}

impl WriterRegistry {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn id_of(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    fn intern(&mut self, tag: String) -> usize {
        match self.id_of(&tag) {
            Some(i) => i,
            None => {
                self.tags.push(tag);
                self.tags.len() - 1
            }
        }
    }
}

fn field_text(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Parses JSON-lines records with keys `image`, `text` and `writer`.
/// Relative image paths are resolved against `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<(Vec<Sample>, WriterRegistry)> {
    let mut samples = Vec::new();
    let mut registry = WriterRegistry::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let get = |key: &str| -> Result<String> {
            rec.get(key).and_then(field_text).ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!("missing or non-text field `{key}`"),
            })
        };
        let image = get("image")?;
        let transcript: String = get("text")?.nfc().collect();
        if transcript.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty transcript".into(),
            });
        }
        let writer_id = registry.intern(get("writer")?);
        let path = PathBuf::from(image);
        samples.push(Sample {
            image_path: if path.is_absolute() { path } else { base_dir.join(path) },
            transcript,
            writer_id,
        });
    }
    if samples.is_empty() {
        return Err(Error::Empty("manifest has no records".into()));
    }
    Ok((samples, registry))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Vec<Sample>, WriterRegistry)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Writes samples back as JSON lines, image paths relative to `base_dir` when possible.
pub fn manifest_lines(samples: &[Sample], registry: &WriterRegistry, base_dir: &Path) -> String {
    let mut out = String::new();
    for s in samples {
        let rel = s.image_path.strip_prefix(base_dir).unwrap_or(&s.image_path);
        let rec = serde_json::json!({
            "image": rel.to_string_lossy(),
            "text": s.transcript,
            "writer": registry.tags[s.writer_id],
        });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}

/// Number of character cells a transcript occupies: NFC characters that
/// are not combining marks.
pub fn transcript_len(s: &str) -> usize {
    let n = s.nfc().filter(|&c| !is_combining_mark(c)).count();
    // a leading mark still gets its own cell
    if n == 0 && !s.is_empty() {
        1
    } else {
        n
    }
}

/// Bilinear resize with half-pixel centres. Returns row-major values.
pub fn resize_bilinear(src: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = axis(w, ow);
    let ys = axis(h, oh);
    let mut out = Vec::with_capacity(ow * oh);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Resizes to `32 × 16L` and maps bytes to `[-1, 1]` with white at `+1`.
pub fn preprocess_image<T: Real>(raw: &GrayImage, transcript_len: usize) -> Result<Tensor<T>> {
    if raw.width == 0 || raw.height == 0 {
        return Err(Error::Image(format!(
            "image has zero dimension {}x{}",
            raw.width, raw.height
        )));
    }
    if transcript_len == 0 {
        return Err(Error::Data("transcript length must be at least 1".into()));
    }
    let ow = CHAR_WIDTH * transcript_len;
    let src: Vec<f64> = raw
        .pixels
        .iter()
        .map(|&p| 2.0 * f64::from(p) / 255.0 - 1.0)
        .collect();
    let data = resize_bilinear(&src, raw.width, raw.height, ow, IMG_HEIGHT)
        .into_iter()
        .map(|v| T::from_f64(v.clamp(-1.0, 1.0)))
        .collect();
    Tensor::from_vec(&[IMG_HEIGHT, ow], data)
}

/// Character cells implied by an image's aspect ratio once scaled to
/// height 32, for style images without a transcript.
pub fn implied_len(raw: &GrayImage) -> usize {
    if raw.height == 0 {
        return 1;
    }
    let w = raw.width as f64 * IMG_HEIGHT as f64 / raw.height as f64;
    ((w / CHAR_WIDTH as f64).round() as usize).max(1)
}

/// Right-pads with white or truncates a `[32, W]` image to `[32, 128]`.
pub fn pad_or_truncate_eval<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    pad_or_truncate(img, EVAL_WIDTH)
}

pub fn pad_or_truncate<T: Real>(img: &Tensor<T>, width: usize) -> Tensor<T> {
    let (h, w) = (img.dim(0), img.dim(1));
    let mut out = Tensor::full(&[h, width], T::ONE);
    let keep = w.min(width);
    for r in 0..h {
        out.data_mut()[r * width..r * width + keep]
            .copy_from_slice(&img.data()[r * w..r * w + keep]);
    }
    out
}

/// A sample with its preprocessed image held in memory.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub sample: Sample,
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<LoadedSample>,
    pub registry: WriterRegistry,
}

impl Dataset {
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let (samples, registry) = load_manifest(manifest)?;
        Self::from_samples(samples, registry)
    }

    pub fn from_samples(samples: Vec<Sample>, registry: WriterRegistry) -> Result<Self> {
        let items = samples
            .into_iter()
            .map(|s| {
                let raw = read_image(&s.image_path)?;
                let image = preprocess_image(&raw, transcript_len(&s.transcript))?;
                Ok(LoadedSample { sample: s, image })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items, registry })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.items.iter().map(|i| i.sample.clone()).collect()
    }

    /// Sample indices per writer id.
    pub fn by_writer(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, it) in self.items.iter().enumerate() {
            m.entry(it.sample.writer_id).or_default().push(i);
        }
        m
    }

    /// Restricts to the given indices, keeping the registry.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            registry: self.registry.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StyleSet {
    pub writer_id: usize,
    /// Indices into the sample list the set was drawn from.
    pub indices: Vec<usize>,
    pub images: Vec<Tensor<f32>>,
}

/// Chooses `p` sample indices of `writer_id`: without replacement when the
/// writer has at least `p` samples, with replacement otherwise.
pub fn choose_style_indices<R: Rng>(
    samples: &[Sample],
    writer_id: usize,
    p: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if p == 0 {
        return Err(Error::Config("style set size must be at least 1".into()));
    }
    let own: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.writer_id == writer_id)
        .map(|(i, _)| i)
        .collect();
    if own.is_empty() {
        return Err(Error::Data(format!("writer {writer_id} has no samples")));
    }
    if own.len() >= p {
        Ok(own.choose_multiple(rng, p).copied().collect())
    } else {
        Ok((0..p).map(|_| *own.choose(rng).unwrap()).collect())
    }
}

pub fn sample_style_set(data: &Dataset, writer_id: usize, p: usize, rng_seed: u64) -> Result<StyleSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let samples = data.samples();
    let indices = choose_style_indices(&samples, writer_id, p, &mut rng)?;
    Ok(StyleSet {
        writer_id,
        images: indices.iter().map(|&i| data.items[i].image.clone()).collect(),
        indices,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_writers: BTreeSet<usize>,
    pub test_writers: BTreeSet<usize>,
    pub train_vocab: BTreeSet<String>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.train_writers.intersection(&self.test_writers).next() {
            return Err(Error::Data(format!("writer {w} is in both train and test sets")));
        }
        Ok(())
    }

    pub fn in_vocab(&self, word: &str) -> bool {
        let w: String = word.nfc().collect();
        self.train_vocab.contains(&w)
    }

    /// Holds out `n_test_writers` writers (chosen by seed) and takes the
    /// vocabulary from the training writers' transcripts.
    pub fn by_holdout(samples: &[Sample], n_writers: usize, n_test_writers: usize, seed: u64) -> Result<Self> {
        if n_test_writers >= n_writers {
            return Err(Error::Config(format!(
                "cannot hold out {n_test_writers} of {n_writers} writers"
            )));
        }
        let mut ids: Vec<usize> = (0..n_writers).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test_writers: BTreeSet<usize> = ids[..n_test_writers].iter().copied().collect();
        let train_writers: BTreeSet<usize> = ids[n_test_writers..].iter().copied().collect();
        let train_vocab = samples
            .iter()
            .filter(|s| train_writers.contains(&s.writer_id))
            .map(|s| s.transcript.nfc().collect())
            .collect();
        Ok(Self {
            train_writers,
            test_writers,
            train_vocab,
        })
    }

    /// Lines `train_writer <tag>`, `test_writer <tag>` and `vocab <word>`.
    pub fn to_text(&self, registry: &WriterRegistry) -> String {
        let mut s = String::new();
        for &w in &self.train_writers {
            s.push_str(&format!("train_writer {}\n", registry.tags[w]));
        }
        for &w in &self.test_writers {
            s.push_str(&format!("test_writer {}\n", registry.tags[w]));
        }
        for v in &self.train_vocab {
            s.push_str(&format!("vocab {v}\n"));
        }
        s
    }

    pub fn parse(text: &str, registry: &WriterRegistry) -> Result<Self> {
        let mut spec = SplitSpec::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let (kind, value) = line
                .split_once(' ')
                .ok_or_else(|| err(format!("expected `<kind> <value>`, got {line:?}")))?;
            match kind {
                "train_writer" | "test_writer" => {
                    let id = registry
                        .id_of(value)
                        .ok_or_else(|| err(format!("unknown writer {value:?}")))?;
                    if kind == "train_writer" {
                        spec.train_writers.insert(id);
                    } else {
                        spec.test_writers.insert(id);
                    }
                }
                "vocab" => {
                    spec.train_vocab.insert(value.nfc().collect());
                }
                other => return Err(err(format!("unknown record kind {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pool {
    IvS,
    IvU,
    OovS,
    OovU,
}

impl Pool {
    pub const ALL: [Pool; 4] = [Pool::IvS, Pool::IvU, Pool::OovS, Pool::OovU];

    pub fn label(self) -> &'static str {
        match self {
            Pool::IvS => "IV-S",
            Pool::IvU => "IV-U",
            Pool::OovS => "OOV-S",
            Pool::OovU => "OOV-U",
        }
    }

    pub fn classify(split: &SplitSpec, sample: &Sample) -> Pool {
        let iv = split.in_vocab(&sample.transcript);
        let seen = split.train_writers.contains(&sample.writer_id);
        match (iv, seen) {
            (true, true) => Pool::IvS,
            (true, false) => Pool::IvU,
            (false, true) => Pool::OovS,
            (false, false) => Pool::OovU,
        }
    }
}

/// Sample indices per pool.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalGrid {
    pub pools: BTreeMap<Pool, Vec<usize>>,
}

impl EvalGrid {
    pub fn pool(&self, p: Pool) -> &[usize] {
        self.pools.get(&p).map_or(&[], Vec::as_slice)
    }
}

pub fn build_eval_grid(split: &SplitSpec, samples: &[Sample]) -> EvalGrid {
    let mut pools: BTreeMap<Pool, Vec<usize>> = Pool::ALL.iter().map(|&p| (p, Vec::new())).collect();
    for (i, s) in samples.iter().enumerate() {
        pools.get_mut(&Pool::classify(split, s)).unwrap().push(i);
    }
    for (p, v) in &pools {
        if v.is_empty() {
            log::warn!("evaluation pool {} is empty", p.label());
        }
    }
    EvalGrid { pools }
}
