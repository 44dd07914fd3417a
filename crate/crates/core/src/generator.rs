//! Generator: content/style fusion by cross-attention, a coarse-to-fine
//! token-grid stack, and a small convolutional image decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataio::{CHAR_WIDTH, IMG_HEIGHT};
use crate::error::{Error, Result};
use crate::glyphs::{render_text, ContentSequence, GlyphTable, GLYPH_PIXELS};
use crate::nnblocks::{
    map_to_tokens, tokens_to_map, BlockConfig, Conv2d, ConvResidual, DecoderBlock, LayerNorm, Linear, TokenGrid,
    VitEncoder,
};
use crate::params::{Bound, Builder, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::writerid::{StyleEmbedding, WriterId};

pub const PREFIX: &str = "gen";
pub const MAX_SCALES: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Wiring {
    /// Content tokens query the style tokens.
    #[default]
    Conventional,
    /// Style tokens query content keys; the result is resampled to the text length.
    StyleQuery,
}

impl std::str::FromStr for Wiring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(Wiring::Conventional),
            "style-query" => Ok(Wiring::StyleQuery),
            other => Err(Error::Config(format!(
                "unknown wiring {other:?} (expected conventional or style-query)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub block: BlockConfig,
    #[serde(default)]
    pub wiring: Wiring,
    pub n_scales: usize,
    pub use_cpe: bool,
    /// Transformer refinement at every scale; convolutional blocks otherwise.
    pub use_vit: bool,
    /// Smallest channel count in the image decoder.
    pub min_channels: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            block: BlockConfig::desk(),
            wiring: Wiring::Conventional,
            n_scales: 2,
            use_cpe: true,
            use_vit: true,
            min_channels: 16,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if !(1..=MAX_SCALES).contains(&self.n_scales) {
            return Err(Error::Config(format!(
                "n_scales must be in 1..={MAX_SCALES}, got {}",
                self.n_scales
            )));
        }
        if self.min_channels == 0 {
            return Err(Error::Config("min_channels must be positive".into()));
        }
        Ok(())
    }

    /// Token grid after the last scale for a text of `l` cells.
    pub fn final_grid(&self, l: usize) -> (usize, usize) {
        let f = 1 << (self.n_scales - 1);
        (2 * f, 2 * l * f)
    }

    /// Upsampling factors of the decoder stages; they always reach `32 × 16L`.
    pub fn decoder_factors(&self) -> Vec<(usize, usize)> {
        let k = self.n_scales;
        let mut f = vec![(2, 2); 4 - k];
        f.push((2, 1));
        f
    }
}

#[derive(Clone, Debug)]
enum ScaleBody {
    Vit(VitEncoder),
    Conv(Vec<ConvResidual>),
}

#[derive(Clone, Debug)]
struct Scale {
    mix: Option<Linear>,
    body: ScaleBody,
}

#[derive(Clone, Debug)]
struct DecStage {
    conv: Conv2d,
    up: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GenConfig,
    content_proj: Linear,
    fuse: Vec<DecoderBlock>,
    fuse_ln: LayerNorm,
    expand: Linear,
    scales: Vec<Scale>,
    stages: Vec<DecStage>,
    out: Conv2d,
}

/// Length-`n_out` linear resampling of a length-`n_in` sequence with
/// half-sample centres, as a `[n_out, n_in]` matrix.
pub fn resample_matrix(n_out: usize, n_in: usize) -> Tensor<f64> {
    let mut m = Tensor::zeros(&[n_out, n_in]);
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let f = s - i0 as f64;
        m.data_mut()[i * n_in + i0] += 1.0 - f;
        m.data_mut()[i * n_in + i1] += f;
    }
    m
}

impl Generator {
    pub fn new(b: &mut Builder<'_>, cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let bc = &cfg.block;
        let d = bc.d_model;
        let fuse = {
            let mut s = b.sub("fuse");
            (0..bc.n_layers.max(1))
                .map(|i| DecoderBlock::new(&mut s, &format!("dec{i}"), bc))
                .collect()
        };
        let scales = (0..cfg.n_scales)
            .map(|k| {
                let mut s = b.sub(format!("scale{k}"));
                let mix = (k > 0).then(|| Linear::new(&mut s, "mix", d, d));
                let body = if cfg.use_vit {
                    ScaleBody::Vit(VitEncoder::new(&mut s, "enc", bc, cfg.use_cpe))
                } else {
                    ScaleBody::Conv(
                        (0..bc.n_layers)
                            .map(|i| ConvResidual::new(&mut s, &format!("res{i}"), d))
                            .collect(),
                    )
                };
                Scale { mix, body }
            })
            .collect();
        let mut c = d;
        let stages = {
            let mut s = b.sub("decoder");
            cfg.decoder_factors()
                .into_iter()
                .enumerate()
                .map(|(i, up)| {
                    let c_out = (c / 2).max(cfg.min_channels);
                    let conv = Conv2d::same3(&mut s, &format!("stage{i}"), c, c_out);
                    c = c_out;
                    DecStage { conv, up }
                })
                .collect()
        };
        Ok(Self {
            cfg: *cfg,
            content_proj: Linear::new(b, "content", GLYPH_PIXELS, d),
            fuse,
            fuse_ln: LayerNorm::new(b, "fuse_ln", d),
            expand: Linear::new(b, "expand", d, 4 * d),
            scales,
            stages,
            out: Conv2d::same3(b, "out", c, 1),
        })
    }

    pub fn init(cfg: &GenConfig, seed: u64) -> Result<(Self, ParamStore<f64>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::new(&mut Builder::new(&mut store, &mut rng, PREFIX), cfg)?;
        Ok((net, store))
    }

    /// Fused tokens, one per text cell.
    pub fn fuse<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        content: &ContentSequence<T>,
        style: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let tape = style.tape();
        let d = self.cfg.block.d_model;
        if style.dim(1) != d || content.positions.dim(1) != d {
            return Err(Error::Shape(format!(
                "fusion expects d_model {d}, got style {} and positions {}",
                style.dim(1),
                content.positions.dim(1)
            )));
        }
        let l = content.len();
        let glyphs = tape.constant(content.tokens.clone());
        let c = self
            .content_proj
            .forward(p, glyphs)
            .add(tape.constant(content.positions.clone()));
        let out = match self.cfg.wiring {
            Wiring::Conventional => {
                let mut x = c;
                for blk in &self.fuse {
                    x = blk.forward(p, x, style, style)?;
                }
                x
            }
            Wiring::StyleQuery => {
                let s = style.dim(0);
                let to_l = tape.constant(resample_matrix(l, s).cast());
                let values = to_l.matmul(style);
                let mut x = style;
                for blk in &self.fuse {
                    x = blk.forward(p, x, c, values)?;
                }
                to_l.matmul(x)
            }
        };
        Ok(self.fuse_ln.forward(p, out))
    }

    /// Coarse `(2, 2L)` arrangement followed by every scale; returns the
    /// finest grid.
    pub fn refine<'t, T: Real>(&self, p: &Bound<'t, T>, tokens: Var<'t, T>) -> Result<TokenGrid<'t, T>> {
        let (l, d) = (tokens.dim(0), tokens.dim(1));
        // each token becomes a 2×2 block; rows of the grid first
        let coarse = self
            .expand
            .forward(p, tokens)
            .reshape(&[l, 2, 2, d])
            .permute(&[1, 0, 2, 3])
            .reshape(&[4 * l, d]);
        let mut x = TokenGrid::new(coarse, (2, 2 * l));
        for sc in &self.scales {
            if let Some(mix) = &sc.mix {
                let grid = x.grid.expect("grid kept across scales");
                let up = tokens_to_map(x.tokens, grid).upsample(2, 2);
                let g = map_to_tokens(up);
                x = g.with_tokens(mix.forward(p, g.tokens));
            }
            x = match &sc.body {
                ScaleBody::Vit(enc) => enc.forward(p, x)?,
                ScaleBody::Conv(blocks) => {
                    let mut m = tokens_to_map(x.tokens, x.grid.expect("grid"));
                    for blk in blocks {
                        m = blk.forward(p, m);
                    }
                    map_to_tokens(m)
                }
            };
        }
        Ok(x)
    }

    /// Finest grid → `[32, 16L]` image in `[-1, 1]`.
    pub fn decode<'t, T: Real>(&self, p: &Bound<'t, T>, grid: TokenGrid<'t, T>) -> Var<'t, T> {
        let shape = grid.grid.expect("decoder needs a grid");
        let mut m = tokens_to_map(grid.tokens, shape);
        for st in &self.stages {
            m = st.conv.forward(p, m.upsample(st.up.0, st.up.1)).gelu();
        }
        let img = self.out.forward(p, m).tanh();
        let (h, w) = (img.dim(2), img.dim(3));
        img.reshape(&[h, w])
    }

    pub fn generate_one<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        content: &ContentSequence<T>,
        style: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let fused = self.fuse(p, content, style)?;
        let grid = self.refine(p, fused)?;
        let img = self.decode(p, grid);
        debug_assert_eq!(img.shape(), vec![IMG_HEIGHT, CHAR_WIDTH * content.len()]);
        Ok(img)
    }
}

/// Generator and writer identifier needed at synthesis time, with their
/// parameters.
pub struct Synthesizer<'a, T: Real> {
    pub gen: &'a Generator,
    pub gen_params: &'a ParamStore<T>,
    pub wid: &'a WriterId,
    pub wid_params: &'a ParamStore<T>,
    pub font: &'a GlyphTable,
}

impl<T: Real> Synthesizer<'_, T> {
    /// Renders every text in the style of `style_images`; pure in its inputs.
    pub fn generate(&self, style_images: &[Tensor<T>], texts: &[String]) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::new();
        let pg = self.gen_params.bind(&tape, false);
        let pw = self.wid_params.bind(&tape, false);
        let imgs: Vec<_> = style_images.iter().map(|i| tape.constant(i.clone())).collect();
        let style: StyleEmbedding<'_, T> = self.wid.embed_style(&pw, &imgs)?;
        texts
            .iter()
            .map(|t| {
                let content = render_text::<T>(self.font, t, self.gen.cfg.block.d_model)?;
                Ok(self.gen.generate_one(&pg, &content, style.tokens)?.value())
            })
            .collect()
    }
}
