//! Evaluation helpers over a trained state and the cumulative ablation sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ablation_variants, AblationAxis, RunConfig};
use crate::dataio::{pad_or_truncate_eval, Dataset};
use crate::error::{Error, Result};
use crate::glyphs::GlyphTable;
use crate::metrics::{cer, fid, FeatureExtractor, ImageSynth, SynthRequest};
use crate::recognizer::{greedy_decode, Charset};
use crate::tensor::Tensor;
use crate::training::{make_batch, run_until, Phase, RunDir, StepReport, TrainData, TrainState};

/// Adapts a training state to the evaluation synthesis interface.
pub struct StateSynth<'a> {
    pub state: &'a TrainState,
    pub font: &'a GlyphTable,
}

impl ImageSynth for StateSynth<'_> {
    fn synthesize(&self, req: &SynthRequest<'_>) -> Result<Tensor<f32>> {
        let mut out = self
            .state
            .synthesizer(self.font)
            .generate(&req.style_images, &[req.text.to_string()])?;
        Ok(out.remove(0))
    }
}

/// (prediction, reference) for every image of `data` read by the recognizer.
pub fn recognizer_pairs(state: &TrainState, data: &Dataset) -> Result<Vec<(String, String)>> {
    data.items
        .iter()
        .map(|it| {
            let logits = state.models.recog.logits(&state.recog, &it.image)?;
            Ok((greedy_decode(&logits, &state.charset), it.sample.transcript.clone()))
        })
        .collect()
}

/// Every word of `texts` generated once per writer, styled by that
/// writer's first `style_size` images in `data`. Returns (writer, text,
/// image) triples.
pub fn generate_per_writer(
    state: &TrainState,
    font: &GlyphTable,
    data: &Dataset,
    texts: &[String],
    style_size: usize,
) -> Result<Vec<(usize, String, Tensor<f32>)>> {
    let syn = state.synthesizer(font);
    let mut out = Vec::new();
    for (writer, idx) in data.by_writer() {
        let style: Vec<Tensor<f32>> = idx.iter().take(style_size).map(|&i| data.items[i].image.clone()).collect();
        for (t, img) in texts.iter().zip(syn.generate(&style, texts)?) {
            out.push((writer, t.clone(), img));
        }
    }
    Ok(out)
}

/// Recognizer reading of generated images against the words they render.
pub fn generated_pairs(state: &TrainState, generated: &[(usize, String, Tensor<f32>)]) -> Result<Vec<(String, String)>> {
    generated
        .iter()
        .map(|(_, t, img)| {
            let logits = state.models.recog.logits(&state.recog, img)?;
            Ok((greedy_decode(&logits, &state.charset), t.clone()))
        })
        .collect()
}

/// Mean absolute pixel difference between the images two writers' styles
/// produce for the same words.
pub fn writer_divergence(generated: &[(usize, String, Tensor<f32>)], a: usize, b: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (_, t, ia) in generated.iter().filter(|g| g.0 == a) {
        let Some((_, _, ib)) = generated.iter().find(|g| g.0 == b && &g.1 == t) else {
            continue;
        };
        total += ia.data().iter().zip(ib.data()).map(|(x, y)| f64::from((x - y).abs())).sum::<f64>();
        n += ia.numel();
    }
    if n == 0 {
        return Err(Error::Data(format!("writers {a} and {b} share no generated words")));
    }
    Ok(total / n as f64)
}

/// FID between real images and generated ones, both padded to 32×128.
pub fn fid_real_vs_generated(real: &[Tensor<f32>], fake: &[Tensor<f32>], extractor: &FeatureExtractor) -> Result<f64> {
    let pad = |v: &[Tensor<f32>]| v.iter().map(pad_or_truncate_eval).collect::<Vec<_>>();
    fid(&extractor.extract(&pad(real))?, &extractor.extract(&pad(fake))?)
}

/// SHA-256 over the batch composition of steps `0..steps`.
pub fn data_order_hash(td: &TrainData, cfg: &RunConfig, steps: u64) -> Result<String> {
    let mut h = Sha256::new();
    for step in 0..steps {
        for phase in [Phase::Critic, Phase::Generator] {
            let b = make_batch(td, cfg, step, phase)?;
            for it in &b.items {
                h.update(format!("{}|{:?}|{};", it.writer_id, it.style, it.target));
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantReport {
    pub label: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub steps: u64,
    pub data_order_hash: String,
    pub final_step: Option<StepReport>,
    pub fid: f64,
    pub feature_extractor: String,
    pub recognizer_cer: f64,
    pub generated_cer: f64,
    pub checkpoint_sha256: String,
}

/// Trains every cumulative variant of `base` for `steps` steps on `data`
/// and scores it: FID of generated training words against the real
/// images, recognizer CER on real and generated images.
pub fn run_ablation(
    base: &RunConfig,
    axes: &[AblationAxis],
    data: &Dataset,
    font: &GlyphTable,
    steps: u64,
    out_dir: &Path,
) -> Result<Vec<VariantReport>> {
    let td = TrainData::new(data, None, font.clone())?;
    let charset = Charset::from_texts(data.items.iter().map(|i| i.sample.transcript.as_str()));
    let extractor = FeatureExtractor::new(base.seed);
    let real: Vec<Tensor<f32>> = data.items.iter().map(|i| i.image.clone()).collect();
    let mut reports = Vec::new();
    for (label, mut cfg) in ablation_variants(base, axes) {
        cfg.steps = steps;
        let mut state = TrainState::new(cfg.clone(), charset.clone(), data.registry.tags.clone())?;
        let dir = RunDir {
            root: out_dir.join(&label),
        };
        let mut last = None;
        run_until(&mut state, &td, &dir, steps, |r| last = Some(*r))?;
        let generated = generate_per_writer(&state, font, data, &td.vocab, cfg.style_size)?;
        let fakes: Vec<Tensor<f32>> = generated.iter().map(|g| g.2.clone()).collect();
        reports.push(VariantReport {
            config_hash: cfg.hash(),
            data_order_hash: data_order_hash(&td, &cfg, steps)?,
            fid: fid_real_vs_generated(&real, &fakes, &extractor)?,
            feature_extractor: extractor.id(),
            recognizer_cer: cer(&recognizer_pairs(&state, data)?)?,
            generated_cer: cer(&generated_pairs(&state, &generated)?)?,
            checkpoint_sha256: crate::checkpoint::file_sha256(dir.last())?,
            final_step: last,
            label,
            config: cfg,
            steps,
        });
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub component: String,
    pub params: usize,
    pub mb: f64,
}

/// Serialized size in MB at 4 bytes per parameter.
pub fn megabytes(params: usize) -> f64 {
    params as f64 * 4.0 / (1024.0 * 1024.0)
}

/// Gen, Enc and Total rows; the remaining networks are listed apart and
/// left out of the total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub rows: Vec<SizeRow>,
    pub other: Vec<SizeRow>,
}

impl SizeReport {
    pub fn new(gen: usize, enc: usize, other: &[(&str, usize)]) -> Self {
        let row = |c: &str, n: usize| SizeRow {
            component: c.to_string(),
            params: n,
            mb: megabytes(n),
        };
        Self {
            rows: vec![row("Gen", gen), row("Enc", enc), row("Total", gen + enc)],
            other: other.iter().map(|&(c, n)| row(c, n)).collect(),
        }
    }

    pub fn of_state(s: &TrainState) -> Self {
        Self::new(
            s.gen.num_scalars(),
            s.wid.num_scalars(),
            &[("Disc", s.disc.num_scalars()), ("Recog", s.recog.num_scalars())],
        )
    }

    pub fn total_mb(&self) -> f64 {
        self.rows[2].mb
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8} {:>12} {:>10}\n", "module", "params", "MB");
        for r in self.rows.iter().chain(&self.other) {
            out.push_str(&format!("{:<8} {:>12} {:>10.2}\n", r.component, r.params, r.mb));
        }
        out
    }
}
