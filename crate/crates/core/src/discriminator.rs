//! Convolutional patch critic and the hinge losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2dSpec, Var};
use crate::dataio::IMG_HEIGHT;
use crate::error::{Error, Result};
use crate::nnblocks::Conv2d;
use crate::params::{Bound, Builder, ParamStore};
use crate::tensor::Real;

pub const PREFIX: &str = "disc";
const STAGES: usize = 4;

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    res_a: Conv2d,
    res_b: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    stages: Vec<Stage>,
    score: Conv2d,
}

impl Discriminator {
    /// Channels `base, 2·base, 4·base, 8·base` over the four stages.
    pub fn new(b: &mut Builder<'_>, base: usize) -> Self {
        let mut c_in = 1;
        let stages = (0..STAGES)
            .map(|i| {
                let c = base << i;
                let mut s = b.sub(format!("stage{i}"));
                let st = Stage {
                    down: Conv2d::new(&mut s, "down", c_in, c, (3, 3), Conv2dSpec::new((2, 2), (1, 1))),
                    res_a: Conv2d::same3(&mut s, "res_a", c, c),
                    res_b: Conv2d::same3(&mut s, "res_b", c, c),
                };
                c_in = c;
                st
            })
            .collect();
        Self {
            stages,
            score: Conv2d::same3(b, "score", c_in, 1),
        }
    }

    pub fn init(base: usize, seed: u64) -> (Self, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::new(&mut Builder::new(&mut store, &mut rng, PREFIX), base);
        (net, store)
    }

    /// `[32, W]` image → `2·⌊W/16⌋` patch scores. Columns past the last
    /// multiple of 16 are ignored.
    pub fn discriminate<'t, T: Real>(&self, p: &Bound<'t, T>, img: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = img.shape();
        if s.len() != 2 || s[0] != IMG_HEIGHT {
            return Err(Error::Shape(format!("critic input must be [32, W], got {s:?}")));
        }
        let w = s[1] - s[1] % 16;
        if w == 0 {
            return Err(Error::Shape(format!("critic input width {} below 16", s[1])));
        }
        let img = if w == s[1] { img } else { img.slice(1, 0, w) };
        let mut x = img.reshape(&[1, 1, IMG_HEIGHT, w]);
        for st in &self.stages {
            x = st.down.forward(p, x).gelu();
            let h = st.res_a.forward(p, x).gelu();
            x = x.add(st.res_b.forward(p, h));
        }
        let scores = self.score.forward(p, x);
        Ok(scores.reshape(&[scores.numel()]))
    }
}

/// `mean(max(1 − real, 0)) + mean(max(1 + fake, 0))`.
pub fn d_hinge_loss<'t, T: Real>(real: Var<'t, T>, fake: Var<'t, T>) -> Var<'t, T> {
    let r = real.neg().add_const(1.0).relu().mean();
    let f = fake.add_const(1.0).relu().mean();
    r.add(f)
}

/// `−mean(fake)`.
pub fn g_hinge_loss<'t, T: Real>(fake: Var<'t, T>) -> Var<'t, T> {
    fake.mean().neg()
}
