//! Writer identifier: style-token encoder plus writer classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::dataio::IMG_HEIGHT;
use crate::error::{Error, Result};
use crate::nnblocks::{map_to_tokens, BlockConfig, Conv2d, ConvResidual, LayerNorm, Linear, TokenGrid, VitEncoder};
use crate::params::{Bound, Builder, ParamStore};
use crate::tensor::{Real, Tensor};

pub const PATCH_H: usize = 4;
pub const PATCH_W: usize = 8;
pub const PREFIX: &str = "writerid";

#[derive(Clone, Debug)]
enum Body {
    Vit(VitEncoder),
    Conv { blocks: Vec<ConvResidual>, ln: LayerNorm },
}

#[derive(Clone, Debug)]
pub struct WriterId {
    patch: Conv2d,
    body: Body,
    head: Linear,
    pub d_model: usize,
    pub n_writers: usize,
}

/// Per-patch style tokens of every image, concatenated, and their mean.
pub struct StyleEmbedding<'t, T: Real> {
    pub tokens: Var<'t, T>,
    pub pooled: Var<'t, T>,
    /// Token count contributed by each image.
    pub per_image: Vec<usize>,
}

impl WriterId {
    pub fn new(b: &mut Builder<'_>, cfg: &BlockConfig, n_writers: usize, use_vit: bool, use_cpe: bool) -> Self {
        let d = cfg.d_model;
        let patch = Conv2d::new(
            b,
            "patch",
            1,
            d,
            (PATCH_H, PATCH_W),
            Conv2dSpec::new((PATCH_H, PATCH_W), (0, 0)),
        );
        let body = if use_vit {
            Body::Vit(VitEncoder::new(b, "enc", cfg, use_cpe))
        } else {
            let mut s = b.sub("conv");
            Body::Conv {
                blocks: (0..cfg.n_layers)
                    .map(|i| ConvResidual::new(&mut s, &format!("res{i}"), d))
                    .collect(),
                ln: LayerNorm::new(&mut s, "ln_out", d),
            }
        };
        Self {
            patch,
            body,
            head: Linear::new(b, "head", d, n_writers.max(1)),
            d_model: d,
            n_writers,
        }
    }

    /// Builds a freshly initialized network and its parameters.
    pub fn init(cfg: &BlockConfig, n_writers: usize, use_vit: bool, use_cpe: bool, seed: u64) -> (Self, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::new(&mut Builder::new(&mut store, &mut rng, PREFIX), cfg, n_writers, use_vit, use_cpe);
        (net, store)
    }

    fn encode_one<'t, T: Real>(&self, p: &Bound<'t, T>, img: Var<'t, T>) -> Result<TokenGrid<'t, T>> {
        let s = img.shape();
        if s.len() != 2 || s[0] != IMG_HEIGHT {
            return Err(Error::Shape(format!("style image must be [32, W], got {s:?}")));
        }
        if s[1] < PATCH_W {
            return Err(Error::Shape(format!("style image width {} below one patch", s[1])));
        }
        let w = s[1] - s[1] % PATCH_W;
        let img = if w == s[1] { img } else { img.slice(1, 0, w) };
        let map = self.patch.forward(p, img.reshape(&[1, 1, IMG_HEIGHT, w]));
        match &self.body {
            Body::Vit(enc) => enc.forward(p, map_to_tokens(map)),
            Body::Conv { blocks, ln } => {
                let mut m = map;
                for blk in blocks {
                    m = blk.forward(p, m);
                }
                let g = map_to_tokens(m);
                Ok(g.with_tokens(ln.forward(p, g.tokens)))
            }
        }
    }

    /// Encodes each `[32, W]` image on its own `8 × W/8` patch grid and
    /// concatenates the tokens.
    pub fn embed_style<'t, T: Real>(&self, p: &Bound<'t, T>, images: &[Var<'t, T>]) -> Result<StyleEmbedding<'t, T>> {
        if images.is_empty() {
            return Err(Error::Empty("style set has no images".into()));
        }
        let grids = images
            .iter()
            .map(|&im| self.encode_one(p, im))
            .collect::<Result<Vec<_>>>()?;
        let per_image = grids.iter().map(TokenGrid::len).collect();
        let parts: Vec<Var<'t, T>> = grids.iter().map(|g| g.tokens).collect();
        let tokens = if parts.len() == 1 { parts[0] } else { Var::concat(&parts, 0) };
        Ok(StyleEmbedding {
            tokens,
            pooled: tokens.mean_axis(0),
            per_image,
        })
    }

    /// Unnormalized writer logits `[n_writers]` from the pooled vector.
    pub fn classify_writer<'t, T: Real>(&self, p: &Bound<'t, T>, e: &StyleEmbedding<'t, T>) -> Var<'t, T> {
        let d = self.d_model;
        let logits = self.head.forward(p, e.pooled.reshape(&[1, d]));
        let n = logits.dim(1);
        logits.reshape(&[n])
    }
}

/// `−log softmax(logits)[target]`.
pub fn writer_loss<'t, T: Real>(logits: Var<'t, T>, target: usize) -> Result<Var<'t, T>> {
    let n = logits.numel();
    if target >= n {
        return Err(Error::Data(format!("writer {target} outside {n} classes")));
    }
    let z = logits.value().to_f64_vec();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let value = lse - z[target];
    let grad: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(i, v)| (v - lse).exp() - if i == target { 1.0 } else { 0.0 })
        .collect();
    let g = Tensor::from_f64(&logits.shape(), &grad)?;
    Ok(Var::custom_scalar(&[logits], T::from_f64(value), vec![g]))
}

/// Convenience forward for callers without a tape of their own.
pub fn pooled_embedding<T: Real>(net: &WriterId, params: &ParamStore<T>, images: &[Tensor<T>]) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let vars: Vec<_> = images.iter().map(|im| tape.constant(im.clone())).collect();
    Ok(net.embed_style(&p, &vars)?.pooled.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::Rng;

    fn small() -> BlockConfig {
        BlockConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_layers: 1,
            dropout: 0.0,
        }
    }

    fn random_image(seed: u64, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[32, w], (0..32 * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn token_counts_follow_patch_grid() {
        let (net, store) = WriterId::init(&small(), 3, true, true, 0);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let img = tape.constant(random_image(1, 80));
        let e = net.embed_style(&p, &[img]).unwrap();
        assert_eq!(e.tokens.shape(), vec![80, 16]);
        let e = net.embed_style(&p, &[img, img, img]).unwrap();
        assert_eq!(e.tokens.shape(), vec![240, 16]);
        assert_eq!(e.per_image, vec![80, 80, 80]);
        let t = e.tokens.value();
        assert_eq!(&t.data()[..80 * 16], &t.data()[80 * 16..160 * 16]);
        let pooled = e.pooled.value();
        for j in 0..16 {
            let mean: f64 = (0..240).map(|i| t.at(&[i, j])).sum::<f64>() / 240.0;
            assert!((pooled.data()[j] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_wrong_height() {
        let (net, store) = WriterId::init(&small(), 2, true, true, 0);
        let tape = Tape::<f64>::new();
        let p = store.bind(&tape, false);
        let img = tape.constant(Tensor::zeros(&[16, 32]));
        assert!(net.embed_style(&p, &[img]).is_err());
        assert!(net.embed_style(&p, &[]).is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let (net, mut store) = WriterId::init(&small(), 4, true, true, 0);
        store.set("writerid.head.w", Tensor::zeros(&[16, 4])).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let e = net.embed_style(&p, &[tape.constant(random_image(2, 48))]).unwrap();
        let logits = net.classify_writer(&p, &e);
        assert_eq!(logits.value().data(), &[0.0; 4]);
        let sm: f64 = logits.softmax().value().data().iter().sum();
        assert!((sm - 1.0).abs() < 1e-6);
        let loss = writer_loss(logits, 1).unwrap().item();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_values() {
        let tape = Tape::<f64>::new();
        let z = tape.var(Tensor::from_f64(&[2], &[10.0, -10.0]).unwrap());
        let l = writer_loss(z, 0).unwrap().item();
        // independent: -ln(e^10 / (e^10 + e^-10))
        let oracle = -(10f64.exp() / (10f64.exp() + (-10f64).exp())).ln();
        assert!((l - oracle).abs() < 1e-15 && l < 1e-6 && l >= 0.0);
        assert!(writer_loss(z, 2).is_err());
    }

    #[test]
    fn loss_gradient_matches_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_vec(&[5], (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let err = finite_diff_check(
                |t| {
                    let tape = Tape::new();
                    let v = tape.var(t.clone());
                    let l = writer_loss(v, 3).unwrap();
                    (l.item(), tape.backward(l).get_or_zeros(v))
                },
                &x,
                1e-4,
            );
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn different_writers_different_pooled() {
        for vit in [true, false] {
            let (net, store) = WriterId::init(&small(), 2, vit, true, 5);
            for s in 0..4 {
                let a = pooled_embedding(&net, &store, &[random_image(s, 64)]).unwrap();
                let b = pooled_embedding(&net, &store, &[random_image(s + 100, 64)]).unwrap();
                assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
                let a2 = pooled_embedding(&net, &store, &[random_image(s, 64)]).unwrap();
                assert_eq!(a, a2);
            }
        }
    }
}
