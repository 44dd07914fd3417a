//! Recognizer: residual conv stem, transformer over image columns, CTC.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::dataio::IMG_HEIGHT;
use crate::error::{Error, Result};
use crate::nnblocks::{BlockConfig, Conv2d, LayerNorm, Linear, TokenGrid, VitEncoder};
use crate::params::{Bound, Builder, ParamStore};
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "recog";
pub const BLANK: usize = 0;
const STEM_ROWS: usize = 4;
const STEM_CHANNELS: usize = 64;

/// Ordered symbols; class `i + 1` is `symbols[i]`, class 0 is the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Charset {
    pub symbols: Vec<char>,
}

impl Charset {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        let set: BTreeSet<char> = symbols.iter().copied().collect();
        if set.len() != symbols.len() {
            return Err(Error::Config("charset symbols are not unique".into()));
        }
        Ok(Self { symbols })
    }

    /// Sorted characters observed in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self {
            symbols: set.into_iter().collect(),
        }
    }

    /// Number of classes including the blank.
    pub fn n_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn class_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c).map(|i| i + 1)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.class_of(c)
                    .ok_or_else(|| Error::Data(format!("character {c:?} not in charset")))
            })
            .collect()
    }

    pub fn decode(&self, classes: &[usize]) -> String {
        classes
            .iter()
            .filter(|&&k| k != BLANK)
            .filter_map(|&k| self.symbols.get(k - 1))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(bld: &mut Builder<'_>, name: &str, c_in: usize, c_out: usize, stride: (usize, usize)) -> Self {
        let mut s = bld.sub(name);
        let skip = (stride != (1, 1) || c_in != c_out)
            .then(|| Conv2d::new(&mut s, "skip", c_in, c_out, (1, 1), Conv2dSpec::new(stride, (0, 0))));
        Self {
            a: Conv2d::new(&mut s, "a", c_in, c_out, (3, 3), Conv2dSpec::new(stride, (1, 1))),
            b: Conv2d::same3(&mut s, "b", c_out, c_out),
            skip,
        }
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let h = self.b.forward(p, self.a.forward(p, x).relu());
        let s = match &self.skip {
            Some(c) => c.forward(p, x),
            None => x,
        };
        h.add(s).relu()
    }
}

#[derive(Clone, Debug)]
struct TemporalBlock {
    a: Conv2d,
    b: Conv2d,
}

impl TemporalBlock {
    fn new(bld: &mut Builder<'_>, name: &str, d: usize) -> Self {
        let mut s = bld.sub(name);
        let spec = Conv2dSpec::new((1, 1), (0, 1));
        Self {
            a: Conv2d::new(&mut s, "a", d, d, (1, 3), spec),
            b: Conv2d::new(&mut s, "b", d, d, (1, 3), spec),
        }
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.add(self.b.forward(p, self.a.forward(p, x.gelu()).gelu()))
    }
}

#[derive(Clone, Debug)]
enum Body {
    Vit(VitEncoder),
    Conv { blocks: Vec<TemporalBlock>, ln: LayerNorm },
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    stem: Conv2d,
    res: Vec<ResBlock>,
    proj: Linear,
    body: Body,
    head: Linear,
    pub n_classes: usize,
}

impl Recognizer {
    pub fn new(b: &mut Builder<'_>, cfg: &BlockConfig, n_classes: usize, use_vit: bool, use_cpe: bool) -> Self {
        let d = cfg.d_model;
        let stem = Conv2d::new(b, "stem", 1, 32, (3, 3), Conv2dSpec::new((2, 2), (1, 1)));
        let res = {
            let mut s = b.sub("res");
            vec![
                ResBlock::new(&mut s, "0", 32, 32, (2, 2)),
                ResBlock::new(&mut s, "1", 32, 32, (1, 1)),
                ResBlock::new(&mut s, "2", 32, STEM_CHANNELS, (2, 1)),
                ResBlock::new(&mut s, "3", STEM_CHANNELS, STEM_CHANNELS, (1, 1)),
            ]
        };
        let proj = Linear::new(b, "proj", STEM_ROWS * STEM_CHANNELS, d);
        let body = if use_vit {
            Body::Vit(VitEncoder::new(b, "enc", cfg, use_cpe))
        } else {
            let mut s = b.sub("temporal");
            Body::Conv {
                blocks: (0..cfg.n_layers)
                    .map(|i| TemporalBlock::new(&mut s, &format!("block{i}"), d))
                    .collect(),
                ln: LayerNorm::new(&mut s, "ln_out", d),
            }
        };
        Self {
            stem,
            res,
            proj,
            body,
            head: Linear::new(b, "head", d, n_classes),
            n_classes,
        }
    }

    pub fn init(cfg: &BlockConfig, n_classes: usize, use_vit: bool, use_cpe: bool, seed: u64) -> (Self, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::new(&mut Builder::new(&mut store, &mut rng, PREFIX), cfg, n_classes, use_vit, use_cpe);
        (net, store)
    }

    /// `[32, W]` image → `[⌊W/4⌋, n_classes]` logits.
    pub fn recognize<'t, T: Real>(&self, p: &Bound<'t, T>, img: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = img.shape();
        if s.len() != 2 || s[0] != IMG_HEIGHT {
            return Err(Error::Shape(format!("recognizer input must be [32, W], got {s:?}")));
        }
        let w = s[1] - s[1] % 4;
        if w == 0 {
            return Err(Error::Shape(format!("recognizer input width {} below 4", s[1])));
        }
        let img = if w == s[1] { img } else { img.slice(1, 0, w) };
        let mut x = self.stem.forward(p, img.reshape(&[1, 1, IMG_HEIGHT, w])).relu();
        for blk in &self.res {
            x = blk.forward(p, x);
        }
        let t = x.dim(3);
        // column t: its 4 cells stacked, each with all channels
        let cols = x
            .reshape(&[STEM_CHANNELS, STEM_ROWS, t])
            .permute(&[2, 1, 0])
            .reshape(&[t, STEM_ROWS * STEM_CHANNELS]);
        let tokens = self.proj.forward(p, cols);
        let tokens = match &self.body {
            Body::Vit(enc) => enc.forward(p, TokenGrid::new(tokens, (1, t)))?.tokens,
            Body::Conv { blocks, ln } => {
                let d = tokens.dim(1);
                let mut m = tokens.t().reshape(&[1, d, 1, t]);
                for blk in blocks {
                    m = blk.forward(p, m);
                }
                ln.forward(p, m.reshape(&[d, t]).t())
            }
        };
        Ok(self.head.forward(p, tokens))
    }

    /// Forward without gradients.
    pub fn logits<T: Real>(&self, params: &ParamStore<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        Ok(self.recognize(&p, tape.constant(img.clone()))?.value())
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum number of frames that can emit `labels`.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `labels` summed over all blank-augmented
/// alignments, with the gradient with respect to the logits. `logits` is
/// `[T, C]` row-major.
pub fn ctc_nll(logits: &[f64], t: usize, c: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if let Some(&bad) = labels.iter().find(|&&k| k == BLANK || k >= c) {
        return Err(Error::Data(format!("label class {bad} invalid for {c} classes")));
    }
    if min_frames(labels) > t {
        return Err(Error::Data(format!(
            "transcript needs {} frames, only {t} available",
            min_frames(labels)
        )));
    }
    // log-softmax per frame
    let mut lp = vec![0.0; t * c];
    for f in 0..t {
        let row = &logits[f * c..(f + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for k in 0..c {
            lp[f * c + k] = row[k] - lse;
        }
    }
    let mut ext = vec![BLANK];
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    let s = ext.len();
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |j: usize| j >= 2 && ext[j] != BLANK && ext[j] != ext[j - 2];
    let mut alpha = vec![ninf; t * s];
    alpha[0] = lp[ext[0]];
    if s > 1 {
        alpha[1] = lp[ext[1]];
    }
    for f in 1..t {
        for j in 0..s {
            let mut a = alpha[(f - 1) * s + j];
            if j >= 1 {
                a = log_sum_exp(a, alpha[(f - 1) * s + j - 1]);
            }
            if skip_ok(j) {
                a = log_sum_exp(a, alpha[(f - 1) * s + j - 2]);
            }
            alpha[f * s + j] = a + lp[f * c + ext[j]];
        }
    }
    let mut beta = vec![ninf; t * s];
    beta[(t - 1) * s + s - 1] = lp[(t - 1) * c + ext[s - 1]];
    if s > 1 {
        beta[(t - 1) * s + s - 2] = lp[(t - 1) * c + ext[s - 2]];
    }
    for f in (0..t - 1).rev() {
        for j in 0..s {
            let mut b = beta[(f + 1) * s + j];
            if j + 1 < s {
                b = log_sum_exp(b, beta[(f + 1) * s + j + 1]);
            }
            if j + 2 < s && skip_ok(j + 2) {
                b = log_sum_exp(b, beta[(f + 1) * s + j + 2]);
            }
            beta[f * s + j] = b + lp[f * c + ext[j]];
        }
    }
    let mut log_z = alpha[(t - 1) * s + s - 1];
    if s > 1 {
        log_z = log_sum_exp(log_z, alpha[(t - 1) * s + s - 2]);
    }
    if !log_z.is_finite() {
        return Err(Error::Numeric("CTC likelihood underflowed".into()));
    }
    let mut grad = vec![0.0; t * c];
    for f in 0..t {
        let mut occ = vec![ninf; c];
        for j in 0..s {
            let k = ext[j];
            // alpha and beta both include the emission at frame f
            occ[k] = log_sum_exp(occ[k], alpha[f * s + j] + beta[f * s + j] - lp[f * c + k]);
        }
        for k in 0..c {
            grad[f * c + k] = lp[f * c + k].exp() - (occ[k] - log_z).exp();
        }
    }
    Ok((-log_z, grad))
}

/// CTC loss as a differentiable scalar on `[T, C]` logits.
pub fn recognition_loss<'t, T: Real>(logits: Var<'t, T>, transcript: &str, charset: &Charset) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != charset.n_classes() {
        return Err(Error::Shape(format!(
            "logits {shape:?} do not match {} classes",
            charset.n_classes()
        )));
    }
    let labels = charset.encode(transcript)?;
    let (loss, grad) = ctc_nll(&logits.value().to_f64_vec(), shape[0], shape[1], &labels)?;
    let g = Tensor::from_f64(&shape, &grad)?;
    Ok(Var::custom_scalar(&[logits], T::from_f64(loss), vec![g]))
}

/// Per-frame argmax, merge repeats, drop blanks.
pub fn greedy_decode<T: Real>(logits: &Tensor<T>, charset: &Charset) -> String {
    let c = logits.dim(1);
    let path: Vec<usize> = logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, v)| {
                    if v.to_f64() > best.1 {
                        (k, v.to_f64())
                    } else {
                        best
                    }
                })
                .0
        })
        .collect();
    collapse_path(&path, charset)
}

pub fn collapse_path(path: &[usize], charset: &Charset) -> String {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    charset.decode(&out)
}
