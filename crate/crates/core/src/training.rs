//! Alternating adversarial training with gradient balancing at the
//! generator output, plus checkpointed, resumable fitting.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Archive;
use crate::config::{BalanceConfig, RunConfig};
use crate::dataio::{choose_style_indices, Dataset, Sample, SplitSpec};
use crate::discriminator::{d_hinge_loss, g_hinge_loss, Discriminator};
use crate::error::{Error, Result};
use crate::generator::{Generator, Synthesizer};
use crate::glyphs::{load_hex_font, render_text, GlyphTable};
use crate::params::{Adam, ParamStore};
use crate::recognizer::{recognition_loss, Charset, Recognizer};
use crate::tensor::Tensor;
use crate::writerid::{writer_loss, WriterId};

/// Standard deviations of the three loss gradients at the generated images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradStats {
    pub sigma_d: f64,
    pub sigma_r: f64,
    /// Writer-term denominator.
    pub sigma_w: f64,
}

/// Population standard deviation.
pub fn population_std(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

const SIGMA_FLOOR: f64 = 1e-12;

/// `g_adv + α·σ_D/σ_R·g_R + β·σ_D/σ_W·g_W`. A term whose σ is below
/// 1e-12 is added unscaled.
pub fn balance_gradients(
    g_adv: &Tensor<f64>,
    g_r: &Tensor<f64>,
    g_w: &Tensor<f64>,
    cfg: &BalanceConfig,
) -> Result<(Tensor<f64>, GradStats)> {
    if g_adv.shape() != g_r.shape() || g_adv.shape() != g_w.shape() {
        return Err(Error::Shape(format!(
            "balance_gradients shapes differ: {:?} {:?} {:?}",
            g_adv.shape(),
            g_r.shape(),
            g_w.shape()
        )));
    }
    let stats = GradStats {
        sigma_d: population_std(g_adv.data()),
        sigma_r: population_std(g_r.data()),
        sigma_w: population_std(g_w.data()),
    };
    if ![stats.sigma_d, stats.sigma_r, stats.sigma_w].iter().all(|s| s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient std {stats:?}")));
    }
    let factor = |name: &str, weight: f64, sigma: f64| {
        if sigma < SIGMA_FLOOR {
            warn!("{name} gradient std {sigma:e} below floor; term passed through unscaled");
            1.0
        } else {
            weight * stats.sigma_d / sigma
        }
    };
    let kr = factor("recognition", cfg.alpha, stats.sigma_r);
    let kw = factor("writer", cfg.beta, stats.sigma_w);
    let data = g_adv
        .data()
        .iter()
        .zip(g_r.data())
        .zip(g_w.data())
        .map(|((a, r), w)| a + kr * r + kw * w)
        .collect();
    Ok((Tensor::from_vec(g_adv.shape(), data)?, stats))
}

/// Network definitions; parameters live in [`TrainState`].
#[derive(Clone, Debug)]
pub struct Models {
    pub gen: Generator,
    pub disc: Discriminator,
    pub recog: Recognizer,
    pub wid: WriterId,
}

type Stores = (ParamStore<f64>, ParamStore<f64>, ParamStore<f64>, ParamStore<f64>);

impl Models {
    /// Builds all four networks with parameters initialized from `cfg.seed`.
    pub fn build(cfg: &RunConfig, n_classes: usize, n_writers: usize) -> Result<(Self, Stores)> {
        cfg.validate()?;
        let s = cfg.seed.wrapping_mul(16);
        let (gen, pg) = Generator::init(&cfg.generator, s)?;
        let (disc, pd) = Discriminator::init(cfg.disc_channels, s + 1);
        let r = &cfg.recognizer;
        let (recog, pr) = Recognizer::init(&r.block, n_classes, r.use_vit, r.use_cpe, s + 2);
        let w = &cfg.writerid;
        let (wid, pw) = WriterId::init(&w.block, n_writers, w.use_vit, w.use_cpe, s + 3);
        Ok((Self { gen, disc, recog, wid }, (pg, pd, pr, pw)))
    }
}

/// Parameters and optimizer moments of all networks plus the step counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub charset: Charset,
    /// Writer tags indexed by writer id.
    pub writers: Vec<String>,
    pub models: Models,
    pub gen: ParamStore<f32>,
    pub disc: ParamStore<f32>,
    pub recog: ParamStore<f32>,
    pub wid: ParamStore<f32>,
    pub opt_gen: Adam<f32>,
    pub opt_disc: Adam<f32>,
    pub opt_recog: Adam<f32>,
    pub opt_wid: Adam<f32>,
    /// Completed training steps.
    pub step: u64,
}

const NETS: [&str; 4] = ["gen", "disc", "recog", "wid"];

impl TrainState {
    pub fn new(config: RunConfig, charset: Charset, writers: Vec<String>) -> Result<Self> {
        if writers.is_empty() {
            return Err(Error::Data("no writers to train on".into()));
        }
        let (models, (pg, pd, pr, pw)) = Models::build(&config, charset.n_classes(), writers.len())?;
        let (gen, disc, recog, wid) = (pg.cast(), pd.cast(), pr.cast(), pw.cast());
        Ok(Self {
            opt_gen: Adam::new(config.adam_for("gen"), &gen),
            opt_disc: Adam::new(config.adam_for("disc"), &disc),
            opt_recog: Adam::new(config.adam_for("recog"), &recog),
            opt_wid: Adam::new(config.adam_for("writerid"), &wid),
            config,
            charset,
            writers,
            models,
            gen,
            disc,
            recog,
            wid,
            step: 0,
        })
    }

    fn parts(&self) -> [(&ParamStore<f32>, &Adam<f32>); 4] {
        [
            (&self.gen, &self.opt_gen),
            (&self.disc, &self.opt_disc),
            (&self.recog, &self.opt_recog),
            (&self.wid, &self.opt_wid),
        ]
    }

    pub fn to_archive(&self) -> Archive {
        let mut tensors = Vec::new();
        let mut adam_t = serde_json::Map::new();
        for (net, (store, opt)) in NETS.iter().zip(self.parts()) {
            for (name, v) in store.iter() {
                tensors.push((name.to_string(), v.clone()));
            }
            for (name, m) in store.names().iter().zip(&opt.m) {
                tensors.push((format!("adam.m/{name}"), m.clone()));
            }
            for (name, v) in store.names().iter().zip(&opt.v) {
                tensors.push((format!("adam.v/{name}"), v.clone()));
            }
            adam_t.insert(net.to_string(), opt.t.into());
        }
        let meta = serde_json::json!({
            "format": 1,
            "step": self.step,
            "config": self.config,
            "charset": self.charset.symbols.iter().collect::<String>(),
            "writers": self.writers,
            "adam_t": adam_t,
        });
        Archive { meta, tensors }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let parse = |k: &str| {
            a.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("header lacks `{k}`")))
        };
        let config: RunConfig =
            serde_json::from_value(parse("config")?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let step = parse("step")?
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("step is not an integer".into()))?;
        let charset = Charset::new(
            parse("charset")?
                .as_str()
                .ok_or_else(|| Error::Checkpoint("charset is not a string".into()))?
                .chars()
                .collect(),
        )?;
        let writers: Vec<String> =
            serde_json::from_value(parse("writers")?).map_err(|e| Error::Checkpoint(format!("writers: {e}")))?;
        let adam_t = parse("adam_t")?;
        let mut s = Self::new(config, charset, writers)?;
        s.step = step;
        let take = |name: &str| {
            a.get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        for net in NETS {
            let t = adam_t
                .get(net)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("adam_t.{net} missing")))?;
            let (store, opt) = match net {
                "gen" => (&mut s.gen, &mut s.opt_gen),
                "disc" => (&mut s.disc, &mut s.opt_disc),
                "recog" => (&mut s.recog, &mut s.opt_recog),
                _ => (&mut s.wid, &mut s.opt_wid),
            };
            opt.t = t;
            let names = store.names().to_vec();
            for (i, name) in names.iter().enumerate() {
                store.set(name, take(name)?)?;
                let m = take(&format!("adam.m/{name}"))?;
                let v = take(&format!("adam.v/{name}"))?;
                if m.shape() != store.values()[i].shape() || v.shape() != m.shape() {
                    return Err(Error::Checkpoint(format!("moment shape mismatch for {name}")));
                }
                opt.m[i] = m;
                opt.v[i] = v;
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    pub fn synthesizer<'a>(&'a self, font: &'a GlyphTable) -> Synthesizer<'a, f32> {
        Synthesizer {
            gen: &self.models.gen,
            gen_params: &self.gen,
            wid: &self.models.wid,
            wid_params: &self.wid,
            font,
        }
    }
}

/// Training corpus restricted to the training writers and vocabulary.
pub struct TrainData {
    pub data: Dataset,
    samples: Vec<Sample>,
    pub writers: Vec<usize>,
    pub vocab: Vec<String>,
    pub font: GlyphTable,
}

impl TrainData {
    /// Without a split every writer and every transcript is used.
    pub fn new(full: &Dataset, split: Option<&SplitSpec>, font: GlyphTable) -> Result<Self> {
        let keep: Vec<usize> = (0..full.len())
            .filter(|&i| {
                let s = &full.items[i].sample;
                split.is_none_or(|sp| sp.train_writers.contains(&s.writer_id) && sp.in_vocab(&s.transcript))
            })
            .collect();
        let data = full.subset(&keep);
        if data.is_empty() {
            return Err(Error::Data("no training samples after applying the split".into()));
        }
        let samples = data.samples();
        let writers: Vec<usize> = samples.iter().map(|s| s.writer_id).collect::<BTreeSet<_>>().into_iter().collect();
        let vocab: Vec<String> = match split {
            Some(sp) if !sp.train_vocab.is_empty() => sp.train_vocab.iter().cloned().collect(),
            _ => samples.iter().map(|s| s.transcript.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
        };
        for w in &vocab {
            render_text::<f32>(&font, w, 2)?;
        }
        Ok(Self {
            data,
            samples,
            writers,
            vocab,
            font,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub writer_id: usize,
    /// Style-set indices into [`TrainData::data`].
    pub style: Vec<usize>,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    /// Real images for the critic phase, as indices into [`TrainData::data`].
    pub reals: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Critic = 0,
    Generator = 1,
}

/// Deterministic batch for `step` and `phase`: one writer per item with a
/// fresh style set and a target word from the vocabulary. Reals are the
/// style images.
pub fn make_batch(td: &TrainData, cfg: &RunConfig, step: u64, phase: Phase) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2 * step + phase as u64);
    let mut items = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let writer_id = *td.writers.choose(&mut rng).expect("writers non-empty");
        let style = choose_style_indices(&td.samples, writer_id, cfg.style_size, &mut rng)?;
        let target = td.vocab.choose(&mut rng).expect("vocab non-empty").clone();
        items.push(BatchItem {
            writer_id,
            style,
            target,
        });
    }
    let reals = items.iter().flat_map(|it| it.style.iter().copied()).collect();
    Ok(Batch { items, reals })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub adv: f64,
    pub recog: f64,
    pub writer: f64,
    pub total: f64,
    pub sigmas: GradStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticReport {
    pub d_hinge: f64,
    /// Absent when the batch has no real images.
    pub recog: Option<f64>,
    pub writer: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub critic: CriticReport,
    pub generator: GenReport,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{name} loss is {v}")))
    }
}

fn mean_of<'t>(terms: Vec<Var<'t, f32>>) -> Option<Var<'t, f32>> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let first = it.next()?;
    Some(it.fold(first, |acc, t| acc.add(t)).scale(1.0 / n as f64))
}

fn dropout_seed(cfg: &RunConfig, step: u64, phase: Phase) -> u64 {
    cfg.seed ^ (2 * step + phase as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl TrainState {
    /// Renders every batch item with the current generator on `tape`;
    /// writer-identifier parameters are bound as constants.
    fn render_batch<'t>(
        &self,
        tape: &'t Tape<f32>,
        td: &TrainData,
        batch: &Batch,
        trainable_gen: bool,
    ) -> Result<(crate::params::Bound<'t, f32>, Vec<Var<'t, f32>>)> {
        let pg = self.gen.bind(tape, trainable_gen);
        let pw = self.wid.bind(tape, false);
        let d = self.config.generator.block.d_model;
        let mut fakes = Vec::with_capacity(batch.items.len());
        for it in &batch.items {
            let imgs: Vec<_> = it
                .style
                .iter()
                .map(|&i| tape.constant(td.data.items[i].image.clone()))
                .collect();
            let style = self.models.wid.embed_style(&pw, &imgs)?;
            let content = render_text::<f32>(&td.font, &it.target, d)?;
            fakes.push(self.models.gen.generate_one(&pg, &content, style.tokens)?);
        }
        Ok((pg, fakes))
    }

    /// One generator update. Only generator parameters change; on a
    /// non-finite loss or gradient the state is left untouched.
    pub fn generator_step(&mut self, td: &TrainData, batch: &Batch) -> Result<GenReport> {
        if batch.items.is_empty() {
            return Err(Error::Data("generator batch is empty".into()));
        }
        let tape = Tape::new().with_dropout_seed(dropout_seed(&self.config, self.step, Phase::Generator));
        let (pg, fakes) = self.render_batch(&tape, td, batch, true)?;

        // losses on detached copies of the fakes give image-space gradients
        let aux = Tape::<f32>::new();
        let leaves: Vec<_> = fakes.iter().map(|f| aux.var(f.value())).collect();
        let pd = self.disc.bind(&aux, false);
        let pr = self.recog.bind(&aux, false);
        let pw = self.wid.bind(&aux, false);
        let mut scores = Vec::new();
        let mut rl = Vec::new();
        let mut wl = Vec::new();
        for (x, it) in leaves.iter().zip(&batch.items) {
            scores.push(self.models.disc.discriminate(&pd, *x)?);
            rl.push(recognition_loss(self.models.recog.recognize(&pr, *x)?, &it.target, &self.charset)?);
            let e = self.models.wid.embed_style(&pw, &[*x])?;
            wl.push(writer_loss(self.models.wid.classify_writer(&pw, &e), it.writer_id)?);
        }
        let l_adv = g_hinge_loss(Var::concat(&scores, 0));
        let l_r = mean_of(rl).expect("non-empty");
        let l_w = mean_of(wl).expect("non-empty");
        let adv = finite("adversarial", l_adv.item() as f64)?;
        let recog = finite("recognition", l_r.item() as f64)?;
        let writer = finite("writer", l_w.item() as f64)?;

        let flat = |root: Var<'_, f32>| -> Result<Tensor<f64>> {
            let g = aux.backward(root);
            let data: Vec<f64> = leaves.iter().flat_map(|&l| g.get_or_zeros(l).to_f64_vec()).collect();
            Tensor::from_vec(&[data.len()], data)
        };
        let (combined, sigmas) = balance_gradients(&flat(l_adv)?, &flat(l_r)?, &flat(l_w)?, &self.config.balance)?;

        let mut seeds = Vec::with_capacity(fakes.len());
        let mut off = 0;
        for f in &fakes {
            let n = f.numel();
            let part = combined.data()[off..off + n].iter().map(|&v| v as f32).collect();
            seeds.push((*f, Tensor::from_vec(&f.shape(), part)?));
            off += n;
        }
        let grads = pg.grads(&tape.backward_seeded(&seeds));
        if !grads.iter().all(Tensor::all_finite) {
            return Err(Error::Numeric("non-finite generator gradient".into()));
        }
        self.opt_gen.step(&mut self.gen, &grads);
        Ok(GenReport {
            adv,
            recog,
            writer,
            total: adv + recog + writer,
            sigmas,
        })
    }

    /// One critic update of D (hinge), R (CTC on reals) and W (writer
    /// cross-entropy on reals). Fakes come from the current generator
    /// without gradient. R and W are not stepped when there are no reals.
    pub fn critic_step(&mut self, td: &TrainData, batch: &Batch) -> Result<CriticReport> {
        let fakes: Vec<Tensor<f32>> = {
            let tape = Tape::new();
            let (_, f) = self.render_batch(&tape, td, batch, false)?;
            f.iter().map(|v| v.value()).collect()
        };
        if fakes.is_empty() && batch.reals.is_empty() {
            return Err(Error::Data("critic batch is empty".into()));
        }
        let tape = Tape::new().with_dropout_seed(dropout_seed(&self.config, self.step, Phase::Critic));
        let pd = self.disc.bind(&tape, true);
        let pr = self.recog.bind(&tape, true);
        let pw = self.wid.bind(&tape, true);
        let score = |img: &Tensor<f32>| self.models.disc.discriminate(&pd, tape.constant(img.clone()));
        let fake_s = fakes.iter().map(score).collect::<Result<Vec<_>>>()?;
        let real_s = batch
            .reals
            .iter()
            .map(|&i| score(&td.data.items[i].image))
            .collect::<Result<Vec<_>>>()?;
        let d_loss = match (real_s.is_empty(), fake_s.is_empty()) {
            (false, false) => d_hinge_loss(Var::concat(&real_s, 0), Var::concat(&fake_s, 0)),
            (true, _) => Var::concat(&fake_s, 0).add_const(1.0).relu().mean(),
            (false, true) => Var::concat(&real_s, 0).neg().add_const(1.0).relu().mean(),
        };
        let d_hinge = finite("discriminator hinge", d_loss.item() as f64)?;
        let mut rl = Vec::new();
        let mut wl = Vec::new();
        for &i in &batch.reals {
            let it = &td.data.items[i];
            let x = tape.constant(it.image.clone());
            rl.push(recognition_loss(self.models.recog.recognize(&pr, x)?, &it.sample.transcript, &self.charset)?);
            let e = self.models.wid.embed_style(&pw, &[x])?;
            wl.push(writer_loss(self.models.wid.classify_writer(&pw, &e), it.sample.writer_id)?);
        }
        let l_r = mean_of(rl);
        let l_w = mean_of(wl);
        let recog = l_r.map(|v| finite("recognition", v.item() as f64)).transpose()?;
        let writer = l_w.map(|v| finite("writer", v.item() as f64)).transpose()?;
        let mut total = d_loss;
        for t in [l_r, l_w].into_iter().flatten() {
            total = total.add(t);
        }
        let g = tape.backward(total);
        let (gd, gr, gw) = (pd.grads(&g), pr.grads(&g), pw.grads(&g));
        if ![&gd, &gr, &gw].iter().all(|gs| gs.iter().all(Tensor::all_finite)) {
            return Err(Error::Numeric("non-finite critic gradient".into()));
        }
        self.opt_disc.step(&mut self.disc, &gd);
        if !batch.reals.is_empty() {
            self.opt_recog.step(&mut self.recog, &gr);
            self.opt_wid.step(&mut self.wid, &gw);
        }
        Ok(CriticReport {
            d_hinge,
            recog,
            writer,
            total: d_hinge + recog.unwrap_or(0.0) + writer.unwrap_or(0.0),
        })
    }

    /// Recognizer-only update on the batch's real images; returns the mean
    /// CTC loss.
    pub fn recognizer_step(&mut self, td: &TrainData, batch: &Batch) -> Result<f64> {
        let tape = Tape::new().with_dropout_seed(dropout_seed(&self.config, self.step, Phase::Critic));
        let pr = self.recog.bind(&tape, true);
        let mut rl = Vec::new();
        for &i in &batch.reals {
            let it = &td.data.items[i];
            let logits = self.models.recog.recognize(&pr, tape.constant(it.image.clone()))?;
            rl.push(recognition_loss(logits, &it.sample.transcript, &self.charset)?);
        }
        let loss = mean_of(rl).ok_or_else(|| Error::Data("recognizer batch has no real images".into()))?;
        let value = finite("recognition", loss.item() as f64)?;
        let g = pr.grads(&tape.backward(loss));
        if !g.iter().all(Tensor::all_finite) {
            return Err(Error::Numeric("non-finite recognizer gradient".into()));
        }
        self.opt_recog.step(&mut self.recog, &g);
        Ok(value)
    }

    /// Critic phase then generator phase on their own batches; advances
    /// the step counter only when both succeed.
    pub fn train_step(&mut self, td: &TrainData) -> Result<StepReport> {
        let cb = make_batch(td, &self.config, self.step, Phase::Critic)?;
        let gb = make_batch(td, &self.config, self.step, Phase::Generator)?;
        let backup = self.clone();
        let res = self
            .critic_step(td, &cb)
            .and_then(|c| self.generator_step(td, &gb).map(|g| (c, g)));
        match res {
            Ok((critic, generator)) => {
                self.step += 1;
                Ok(StepReport {
                    step: self.step,
                    critic,
                    generator,
                })
            }
            Err(e) => {
                *self = backup;
                Err(e)
            }
        }
    }
}

/// Where [`fit`] writes its outputs.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.root.join(format!("step-{step:07}.ckpt"))
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("last.ckpt")
    }
}

/// Trains until `state.step == until`, appending a metrics line every
/// `log_interval` steps and checkpointing every `checkpoint_interval`
/// steps and at the end. `on_step` sees every report.
pub fn run_until(
    state: &mut TrainState,
    td: &TrainData,
    dir: &RunDir,
    until: u64,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()> {
    std::fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
    let log_path = dir.metrics();
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    while state.step < until {
        let r = state.train_step(td).inspect_err(|e| {
            log::error!("step {} aborted: {e}", state.step + 1);
        })?;
        on_step(&r);
        if r.step % state.config.log_interval == 0 {
            let line = serde_json::to_string(&r)?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            info!(
                "step {} d_hinge {:.4} g_adv {:.4} ctc {:.4} wid {:.4}",
                r.step, r.critic.d_hinge, r.generator.adv, r.generator.recog, r.generator.writer
            );
        }
        if r.step % state.config.checkpoint_interval == 0 {
            state.save(dir.checkpoint(r.step))?;
        }
    }
    state.save(dir.last())
}

/// Loads the corpus named by `config`, builds or resumes the state, and
/// trains for `config.steps` total steps.
pub fn fit(config: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainState> {
    config.validate()?;
    let manifest = config
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("field `manifest` is required for training".into()))?;
    let full = Dataset::load(manifest)?;
    let split = match &config.split {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let s = SplitSpec::parse(&text, &full.registry)?;
            s.validate()?;
            Some(s)
        }
        None => None,
    };
    let font = load_hex_font(&config.font)?;
    let td = TrainData::new(&full, split.as_ref(), font)?;
    let mut state = match resume {
        Some(p) => {
            let s = TrainState::load(p)?;
            if s.writers != full.registry.tags {
                return Err(Error::Checkpoint("checkpoint writers differ from the manifest".into()));
            }
            s
        }
        None => {
            let charset = Charset::from_texts(full.items.iter().map(|i| i.sample.transcript.as_str()));
            TrainState::new(config.clone(), charset, full.registry.tags.clone())?
        }
    };
    let dir = RunDir {
        root: out_dir.to_path_buf(),
    };
    run_until(&mut state, &td, &dir, config.steps, |_| {})?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphs::bundled_font_path;
    use crate::synth::write_smoke_corpus;
    use rand::Rng;

    fn rand_t(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(&[n], (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).unwrap()
    }

    #[test]
    fn balance_ratios_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = BalanceConfig::default();
        let a = rand_t(500, 0.01, &mut rng);
        let r = rand_t(500, 40.0, &mut rng);
        let w = rand_t(500, 2.0, &mut rng);
        let (c, st) = balance_gradients(&a, &r, &w, &cfg).unwrap();
        let zero = Tensor::zeros(&[500]);
        let (only_r, _) = balance_gradients(&zero, &r, &zero, &cfg).unwrap();
        // σ_D = 0 scales the other terms to zero
        assert!(only_r.data().iter().all(|&v| v == 0.0));
        let gr: Vec<f64> = r.data().iter().map(|v| v * cfg.alpha * st.sigma_d / st.sigma_r).collect();
        assert!((population_std(&gr) / st.sigma_d - 0.7).abs() < 1e-9);
        let back: Vec<f64> = c
            .data()
            .iter()
            .zip(a.data())
            .zip(&gr)
            .map(|((c, a), g)| c - a - g)
            .collect();
        assert!((population_std(&back) / st.sigma_d - 0.7).abs() < 1e-6);
    }

    #[test]
    fn zero_recognition_gradient_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(64, 1.0, &mut rng);
        let w = rand_t(64, 3.0, &mut rng);
        let z = Tensor::zeros(&[64]);
        let (c, st) = balance_gradients(&a, &z, &w, &BalanceConfig::default()).unwrap();
        assert_eq!(st.sigma_r, 0.0);
        for ((c, a), w) in c.data().iter().zip(a.data()).zip(w.data()) {
            assert!((c - a - 0.7 * st.sigma_d / st.sigma_w * w).abs() < 1e-12);
        }
        assert!(balance_gradients(&a, &Tensor::zeros(&[3]), &w, &BalanceConfig::default()).is_err());
    }

    fn toy() -> (TrainData, TrainState, tempfile::TempDir) {
        let font = load_hex_font(bundled_font_path()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (samples, reg) = write_smoke_corpus(&font, dir.path(), 0).unwrap();
        let full = Dataset::from_samples(samples, reg).unwrap();
        let mut cfg = RunConfig::smoke();
        cfg.generator.block.d_model = 16;
        cfg.generator.block.d_ff = 16;
        cfg.writerid.block = cfg.generator.block;
        cfg.recognizer.block = cfg.generator.block;
        cfg.generator.n_scales = 1;
        cfg.disc_channels = 4;
        cfg.generator.min_channels = 4;
        cfg.batch_size = 1;
        cfg.log_interval = 2;
        cfg.checkpoint_interval = 2;
        let charset = Charset::from_texts(full.items.iter().map(|i| i.sample.transcript.as_str()));
        let state = TrainState::new(cfg, charset, full.registry.tags.clone()).unwrap();
        (TrainData::new(&full, None, font).unwrap(), state, dir)
    }

    #[test]
    fn phases_are_isolated() {
        let (td, mut s, _d) = toy();
        let before = s.clone();
        let b = make_batch(&td, &s.config, 0, Phase::Generator).unwrap();
        let rep = s.generator_step(&td, &b).unwrap();
        assert!(rep.adv.is_finite() && rep.recog.is_finite() && rep.writer.is_finite());
        assert!((rep.total - (rep.adv + rep.recog + rep.writer)).abs() < 1e-9);
        assert_ne!(s.gen, before.gen);
        assert_eq!((&s.disc, &s.recog, &s.wid), (&before.disc, &before.recog, &before.wid));

        let mid = s.clone();
        let b = make_batch(&td, &s.config, 0, Phase::Critic).unwrap();
        s.critic_step(&td, &b).unwrap();
        assert_eq!(s.gen, mid.gen);
        assert_ne!(s.disc, mid.disc);
        assert_ne!(s.recog, mid.recog);
        assert_ne!(s.wid, mid.wid);

        let mid = s.clone();
        let fakes_only = Batch { reals: vec![], ..b };
        s.critic_step(&td, &fakes_only).unwrap();
        assert_ne!(s.disc, mid.disc);
        assert_eq!((&s.gen, &s.recog, &s.wid), (&mid.gen, &mid.recog, &mid.wid));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (td, mut a, dir) = toy();
        let mut b = a.clone();
        let run = RunDir {
            root: dir.path().join("a"),
        };
        run_until(&mut a, &td, &run, 3, |_| {}).unwrap();
        run_until(&mut b, &td, &RunDir { root: dir.path().join("b") }, 2, |_| {}).unwrap();
        let mut c = TrainState::load(dir.path().join("b").join("step-0000002.ckpt")).unwrap();
        run_until(&mut c, &td, &RunDir { root: dir.path().join("c") }, 3, |_| {}).unwrap();
        assert_eq!(c.step, 3);
        assert_eq!(c.gen, a.gen);
        assert_eq!(c.disc, a.disc);
        assert_eq!(c.opt_wid, a.opt_wid);
        let lines = std::fs::read_to_string(run.metrics()).unwrap().lines().count();
        assert_eq!(lines, 1);
        assert!(TrainState::load(dir.path().join("nope.ckpt")).is_err());
    }
}
