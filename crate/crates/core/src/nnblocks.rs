//! Shared differentiable building blocks: linear and convolutional layers,
//! multi-head attention, pre-norm transformer encoder/decoder layers, and
//! conditional positional encoding over 2-D token grids.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Builder, ParamId};
use crate::tensor::Real;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BlockConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            n_layers: 2,
            dropout: 0.0,
        }
    }

    pub fn large() -> Self {
        Self {
            d_model: 384,
            n_heads: 8,
            d_ff: 768,
            n_layers: 2,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Tokens with the 2-D layout they came from, when they have one.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid<'t, T: Real> {
    pub tokens: Var<'t, T>,
    pub grid: Option<(usize, usize)>,
}

impl<'t, T: Real> TokenGrid<'t, T> {
    pub fn new(tokens: Var<'t, T>, grid: (usize, usize)) -> Self {
        debug_assert_eq!(tokens.dim(0), grid.0 * grid.1);
        Self {
            tokens,
            grid: Some(grid),
        }
    }

    pub fn flat(tokens: Var<'t, T>) -> Self {
        Self { tokens, grid: None }
    }

    pub fn len(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_tokens(self, tokens: Var<'t, T>) -> Self {
        Self {
            tokens,
            grid: self.grid,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            w: s.uniform_fan_in("w", &[d_in, d_out], d_in),
            b: s.zeros("b", &[d_out]),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(p[self.w], p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gamma: s.ones("gamma", &[d]),
            beta: s.zeros("beta", &[d]),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.layer_norm(p[self.gamma], p[self.beta], LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
    ) -> Self {
        let cg = c_in / spec.groups;
        let fan_in = cg * kernel.0 * kernel.1;
        let mut s = b.sub(name);
        Self {
            w: s.uniform_fan_in("w", &[c_out, cg, kernel.0, kernel.1], fan_in),
            b: s.zeros("b", &[c_out]),
            spec,
        }
    }

    /// 3×3, stride 1, same padding.
    pub fn same3(b: &mut Builder<'_>, name: &str, c_in: usize, c_out: usize) -> Self {
        Self::new(b, name, c_in, c_out, (3, 3), Conv2dSpec::new((1, 1), (1, 1)))
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(p[self.w], Some(p[self.b]), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize, n_heads: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            q: Linear::new(&mut s, "q", d, d),
            k: Linear::new(&mut s, "k", d, d),
            v: Linear::new(&mut s, "v", d, d),
            o: Linear::new(&mut s, "o", d, d),
            n_heads,
        }
    }

    fn split_heads<'t, T: Real>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let (n, d) = (x.dim(0), x.dim(1));
        let dh = d / self.n_heads;
        x.reshape(&[n, self.n_heads, dh]).permute(&[1, 0, 2])
    }

    /// Per-head softmax weights, shape `[heads, Lq, Lk]`.
    pub fn weights<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        q_in: Var<'t, T>,
        k_in: Var<'t, T>,
    ) -> Var<'t, T> {
        let d = q_in.dim(1);
        assert_eq!(k_in.dim(1), d, "attention d_model mismatch");
        let q = self.split_heads(self.q.forward(p, q_in));
        let k = self.split_heads(self.k.forward(p, k_in));
        let dh = d / self.n_heads;
        q.bmm(k, false, true)
            .scale(1.0 / (dh as f64).sqrt())
            .softmax()
    }

    /// `q_in: [Lq, d]`, `k_in, v_in: [Lk, d]` → `[Lq, d]`.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        q_in: Var<'t, T>,
        k_in: Var<'t, T>,
        v_in: Var<'t, T>,
    ) -> Var<'t, T> {
        assert_eq!(k_in.dim(0), v_in.dim(0), "keys and values differ in length");
        let (lq, d) = (q_in.dim(0), q_in.dim(1));
        let attn = self.weights(p, q_in, k_in);
        let v = self.split_heads(self.v.forward(p, v_in));
        let ctx = attn.bmm(v, false, false).permute(&[1, 0, 2]).reshape(&[lq, d]);
        self.o.forward(p, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize, d_ff: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            up: Linear::new(&mut s, "up", d, d_ff),
            down: Linear::new(&mut s, "down", d_ff, d),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.down.forward(p, self.up.forward(p, x).gelu())
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &BlockConfig) -> Self {
        let mut s = b.sub(name);
        let d = cfg.d_model;
        Self {
            ln_attn: LayerNorm::new(&mut s, "ln_attn", d),
            attn: MultiHeadAttention::new(&mut s, "attn", d, cfg.n_heads),
            ln_ff: LayerNorm::new(&mut s, "ln_ff", d),
            ff: FeedForward::new(&mut s, "ff", d, cfg.d_ff),
            dropout: cfg.dropout,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: TokenGrid<'t, T>) -> TokenGrid<'t, T> {
        let h = self.ln_attn.forward(p, x.tokens);
        let y = x
            .tokens
            .add(self.attn.forward(p, h, h, h).dropout(self.dropout));
        let h = self.ln_ff.forward(p, y);
        let y = y.add(self.ff.forward(p, h).dropout(self.dropout));
        x.with_tokens(y)
    }
}

/// Pre-norm decoder layer: self-attention over the target, cross-attention
/// with caller-chosen key and value sources, then a feed-forward layer.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl DecoderBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &BlockConfig) -> Self {
        let mut s = b.sub(name);
        let d = cfg.d_model;
        Self {
            ln_self: LayerNorm::new(&mut s, "ln_self", d),
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", d, cfg.n_heads),
            ln_cross: LayerNorm::new(&mut s, "ln_cross", d),
            cross_attn: MultiHeadAttention::new(&mut s, "cross_attn", d, cfg.n_heads),
            ln_ff: LayerNorm::new(&mut s, "ln_ff", d),
            ff: FeedForward::new(&mut s, "ff", d, cfg.d_ff),
            dropout: cfg.dropout,
        }
    }

    /// Queries come from `tgt`; keys from `mem_k`; values from `mem_v`.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        tgt: Var<'t, T>,
        mem_k: Var<'t, T>,
        mem_v: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let d = tgt.dim(1);
        if mem_k.dim(1) != d || mem_v.dim(1) != d {
            return Err(Error::Shape(format!(
                "decoder d_model mismatch: target {d}, keys {}, values {}",
                mem_k.dim(1),
                mem_v.dim(1)
            )));
        }
        if mem_k.dim(0) != mem_v.dim(0) {
            return Err(Error::Shape(format!(
                "decoder keys ({}) and values ({}) differ in length",
                mem_k.dim(0),
                mem_v.dim(0)
            )));
        }
        let h = self.ln_self.forward(p, tgt);
        let x = tgt.add(self.self_attn.forward(p, h, h, h).dropout(self.dropout));
        let h = self.ln_cross.forward(p, x);
        let x = x.add(
            self.cross_attn
                .forward(p, h, mem_k, mem_v)
                .dropout(self.dropout),
        );
        let h = self.ln_ff.forward(p, x);
        Ok(x.add(self.ff.forward(p, h).dropout(self.dropout)))
    }
}

/// Conditional positional encoding: residual 3×3 depthwise aggregation over
/// the token grid with zero padding.
#[derive(Clone, Debug)]
pub struct Cpe {
    pub conv: Conv2d,
}

impl Cpe {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize) -> Self {
        Self {
            conv: Conv2d::new(b, name, d, d, (3, 3), Conv2dSpec::depthwise(d)),
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: TokenGrid<'t, T>,
    ) -> Result<TokenGrid<'t, T>> {
        let (h, w) = x
            .grid
            .ok_or_else(|| Error::Shape("positional encoding needs a grid layout".into()))?;
        let (n, d) = (x.tokens.dim(0), x.tokens.dim(1));
        if n != h * w {
            return Err(Error::Shape(format!("grid {h}x{w} does not hold {n} tokens")));
        }
        let map = x.tokens.t().reshape(&[1, d, h, w]);
        let pe = self.conv.forward(p, map).reshape(&[d, n]).t();
        Ok(x.with_tokens(x.tokens.add(pe)))
    }
}

/// A stack of encoder layers, optionally preceded by CPE, with a final norm.
#[derive(Clone, Debug)]
pub struct VitEncoder {
    pub cpe: Option<Cpe>,
    pub blocks: Vec<EncoderBlock>,
    pub ln_out: LayerNorm,
}

impl VitEncoder {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &BlockConfig, use_cpe: bool) -> Self {
        let mut s = b.sub(name);
        let d = cfg.d_model;
        Self {
            cpe: use_cpe.then(|| Cpe::new(&mut s, "cpe", d)),
            blocks: (0..cfg.n_layers)
                .map(|i| EncoderBlock::new(&mut s, &format!("block{i}"), cfg))
                .collect(),
            ln_out: LayerNorm::new(&mut s, "ln_out", d),
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: TokenGrid<'t, T>,
    ) -> Result<TokenGrid<'t, T>> {
        let mut x = match &self.cpe {
            Some(cpe) => cpe.forward(p, x)?,
            None => x,
        };
        for block in &self.blocks {
            x = block.forward(p, x);
        }
        Ok(x.with_tokens(self.ln_out.forward(p, x.tokens)))
    }
}

/// Two 3×3 convolutions with a residual connection, channel count preserved.
#[derive(Clone, Debug)]
pub struct ConvResidual {
    pub a: Conv2d,
    pub b: Conv2d,
}

impl ConvResidual {
    pub fn new(b: &mut Builder<'_>, name: &str, c: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            a: Conv2d::same3(&mut s, "a", c, c),
            b: Conv2d::same3(&mut s, "b", c, c),
        }
    }

    /// `x: [1, C, H, W]`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let h = self.a.forward(p, x.gelu());
        x.add(self.b.forward(p, h.gelu()))
    }
}

/// `[N, d]` tokens on an `(h, w)` grid → `[1, d, h, w]`.
pub fn tokens_to_map<'t, T: Real>(tokens: Var<'t, T>, grid: (usize, usize)) -> Var<'t, T> {
    let d = tokens.dim(1);
    tokens.t().reshape(&[1, d, grid.0, grid.1])
}

/// `[1, d, h, w]` → `[h·w, d]` row-major over the grid.
pub fn map_to_tokens<'t, T: Real>(map: Var<'t, T>) -> TokenGrid<'t, T> {
    let s = map.shape();
    let (d, h, w) = (s[1], s[2], s[3]);
    TokenGrid::new(map.reshape(&[d, h * w]).t(), (h, w))
}
