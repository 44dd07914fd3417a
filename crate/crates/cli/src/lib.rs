//! Command-line front end: argument definitions and one function per
//! subcommand. `main.rs` only parses and maps errors to exit codes.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use inkvit_core::checkpoint::file_sha256;
use inkvit_core::config::{AblationAxis, RunConfig};
use inkvit_core::dataio::{
    build_eval_grid, choose_style_indices, implied_len, load_manifest, manifest_lines, preprocess_image,
    transcript_len, Dataset, Sample, SplitSpec, WriterRegistry,
};
use inkvit_core::experiments::{
    fid_real_vs_generated, run_ablation, SizeReport, StateSynth,
};
use inkvit_core::generator::Wiring;
use inkvit_core::glyphs::{bundled_font_path, load_hex_font, tokenize, GlyphTable, GLYPH_SIZE};
use inkvit_core::image::{read_image, write_image, GrayImage};
use inkvit_core::metrics::{cer, edit_distance, eval_four_way, kid, ned, wer, FeatureExtractor};
use inkvit_core::recognizer::greedy_decode;
use inkvit_core::synth::{write_corpus, SMOKE_WORDS};
use inkvit_core::training::{fit, make_batch, Models, Phase, RunDir, TrainData, TrainState};
use inkvit_core::{Error, Tensor};

pub const CONFIG_ENV: &str = "INKVIT_CONFIG";

#[derive(Parser, Debug)]
#[command(name = "inkvit", version, about = "Style-conditioned handwritten word synthesis")]
pub struct Cli {
    /// Overrides the seed of the run configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Glyph font utilities.
    Font {
        #[command(subcommand)]
        cmd: FontCmd,
    },
    /// Corpus preparation.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Train all networks, or the recognizer alone.
    ///
    /// Recognizer-augmentation recipe: train with `--recognizer-only` on the
    /// real manifest, then on a manifest concatenating it with the output of
    /// `augment`, and compare both with `recognize --manifest`.
    Train(TrainArgs),
    /// Render words in the style of a directory of exemplar images.
    Generate(GenerateArgs),
    /// Transcribe images with the checkpoint's recognizer.
    Recognize(RecognizeArgs),
    /// FID, KID and recognition metrics, optionally per IV/OOV × seen/unseen pool.
    Evaluate(EvaluateArgs),
    /// Train and score the cumulative architecture variants.
    Ablate(AblateArgs),
    /// Write a synthetic corpus drawn from a checkpoint.
    Augment(AugmentArgs),
    /// Parameter counts and serialized size of generator and style encoder.
    ReportSize(ReportSizeArgs),
    /// Styles × texts image grid with labeled margins.
    Grid(GridArgs),
}

#[derive(Subcommand, Debug)]
pub enum FontCmd {
    /// Glyph count, coverage and ASCII renderings.
    Inspect {
        #[arg(long)]
        font: Option<PathBuf>,
        /// Text whose glyph tokens are printed.
        #[arg(long)]
        text: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
pub enum DataCmd {
    /// Validate a manifest, or synthesize a corpus when none is given, and
    /// write a writer/vocabulary split plus a ready-to-train config.
    Prepare(PrepareArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Built-in configuration: desk, smoke or large.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Existing manifest; a synthetic corpus is written when absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub writers: usize,
    /// Comma-separated word list for the synthetic corpus.
    #[arg(long, value_delimiter = ',')]
    pub words: Option<Vec<String>>,
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
    /// Writers held out of training.
    #[arg(long, default_value_t = 0)]
    pub test_writers: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Checkpoint to continue from; its configuration is used unless
    /// `--config` or `--preset` is given.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total step count to reach.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub recognizer_only: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of style images (PGM/PNG); a `manifest.jsonl` there
    /// supplies transcripts for width normalization.
    #[arg(long)]
    pub style_dir: PathBuf,
    #[arg(long)]
    pub text: Vec<String>,
    /// One word per line.
    #[arg(long)]
    pub text_file: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub wiring: Option<Wiring>,
    /// Must match the checkpoint.
    #[arg(long)]
    pub scales: Option<usize>,
    #[arg(long)]
    pub font: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RecognizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: Vec<PathBuf>,
    /// Reads every manifest image and reports CER/WER/NED.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Enables the four-way pool table.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n_per_pool: usize,
    #[arg(long, default_value_t = 100)]
    pub kid_subset: usize,
    #[arg(long, default_value_t = 10)]
    pub kid_subsets: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Writes reference, prediction and edit counts per generated image.
    #[arg(long)]
    pub diff_dump: Option<PathBuf>,
    #[arg(long)]
    pub font: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Comma-separated subset of vit_generator, multi_scale, vit_recognizer_writerid.
    #[arg(long, value_delimiter = ',', default_value = "vit_generator,multi_scale,vit_recognizer_writerid")]
    pub axes: Vec<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One word per line.
    #[arg(long)]
    pub vocab_file: PathBuf,
    #[arg(long)]
    pub n: i64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Style source; defaults to the checkpoint's training manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub font: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportSizeArgs {
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Writer classes assumed when sizing from a configuration.
    #[arg(long, default_value_t = 339)]
    pub writers: usize,
    /// Recognizer classes assumed when sizing from a configuration.
    #[arg(long, default_value_t = 80)]
    pub classes: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Style source per row: an image or a directory of images.
    #[arg(long, required = true)]
    pub style: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub text: Vec<String>,
    /// `.png` or `.pgm`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub font: Option<PathBuf>,
}

/// Exit status for an error chain: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Json(_) => 2,
                Error::Numeric(_) => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Font { cmd: FontCmd::Inspect { font, text } } => cmd_font_inspect(font, text),
        Command::Data { cmd: DataCmd::Prepare(a) } => cmd_data_prepare(&a, seed),
        Command::Train(a) => cmd_train(&a, seed),
        Command::Generate(a) => cmd_generate(&a),
        Command::Recognize(a) => cmd_recognize(&a),
        Command::Evaluate(a) => cmd_evaluate(&a, seed).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a, seed).map(|_| ()),
        Command::Augment(a) => cmd_augment(&a, seed),
        Command::ReportSize(a) => cmd_report_size(&a).map(|r| {
            if a.json {
                println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            } else {
                print!("{}", r.to_table());
            }
        }),
        Command::Grid(a) => cmd_grid(&a),
    }
}

/// The configuration named by `--config`, `--preset` or the environment.
pub fn resolve_config(c: &ConfigArgs, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(p), _) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => {
            return Err(Error::Config(format!("no configuration: pass --config or --preset, or set {CONFIG_ENV}")).into())
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn font_for(over: &Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<GlyphTable> {
    let p = over.clone().unwrap_or_else(|| cfg.font.clone());
    Ok(load_hex_font(&p).with_context(|| format!("loading font {}", p.display()))?)
}

fn load_state(path: &Path) -> anyhow::Result<(TrainState, String)> {
    let state = TrainState::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((state, file_sha256(path)?))
}

pub fn cmd_font_inspect(font: Option<PathBuf>, text: Option<String>) -> anyhow::Result<()> {
    let path = font.unwrap_or_else(bundled_font_path);
    let table = load_hex_font(&path)?;
    let cps: Vec<u32> = table.codepoints().collect();
    println!("font      {}", path.display());
    println!("glyphs    {}", table.len());
    if let (Some(lo), Some(hi)) = (cps.first(), cps.last()) {
        println!("range     U+{lo:04X}..U+{hi:04X}");
    }
    if let Some(t) = text {
        let (nfc, glyphs) = tokenize(&table, &t)?;
        println!("tokens    {} for {:?}", glyphs.len(), nfc);
        for (i, g) in glyphs.iter().enumerate() {
            println!("-- token {i} ({})", g.to_hex());
            print!("{}", g.to_ascii_art());
        }
    }
    Ok(())
}

pub fn cmd_data_prepare(a: &PrepareArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let seed = seed.unwrap_or(0);
    let font_path = bundled_font_path();
    let (manifest, samples, registry) = match &a.manifest {
        Some(m) => {
            let (samples, registry) = load_manifest(m)?;
            // decode every image once so broken entries fail here
            Dataset::from_samples(samples.clone(), registry.clone())?;
            (m.clone(), samples, registry)
        }
        None => {
            let font = load_hex_font(&font_path)?;
            let words: Vec<&str> = match &a.words {
                Some(w) => w.iter().map(String::as_str).collect(),
                None => SMOKE_WORDS.to_vec(),
            };
            let (samples, registry) = write_corpus(&font, &a.out_dir, a.writers, &words, a.copies, seed)?;
            (a.out_dir.join("manifest.jsonl"), samples, registry)
        }
    };
    let split = if a.test_writers > 0 {
        SplitSpec::by_holdout(&samples, registry.len(), a.test_writers, seed)?
    } else {
        SplitSpec {
            train_writers: (0..registry.len()).collect(),
            test_writers: BTreeSet::new(),
            train_vocab: samples.iter().map(|s| s.transcript.clone()).collect(),
        }
    };
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let split_path = a.out_dir.join("split.txt");
    std::fs::write(&split_path, split.to_text(&registry)).map_err(|e| Error::io(&split_path, e))?;
    let mut cfg = RunConfig::smoke();
    cfg.seed = seed;
    cfg.font = font_path;
    cfg.manifest = Some(std::path::absolute(&manifest).map_err(|e| Error::io(&manifest, e))?);
    cfg.split = Some(std::path::absolute(&split_path).map_err(|e| Error::io(&split_path, e))?);
    write_json(&a.out_dir.join("config.json"), &cfg)?;
    println!(
        "{} samples, {} writers ({} held out); manifest {}; config {}",
        samples.len(),
        registry.len(),
        split.test_writers.len(),
        manifest.display(),
        a.out_dir.join("config.json").display()
    );
    Ok(())
}

fn train_data(cfg: &RunConfig) -> anyhow::Result<(Dataset, TrainData)> {
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("field `manifest` is required for training".into()))?;
    let full = Dataset::load(manifest)?;
    let split = match &cfg.split {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(SplitSpec::parse(&text, &full.registry)?)
        }
        None => None,
    };
    let td = TrainData::new(&full, split.as_ref(), load_hex_font(&cfg.font)?)?;
    Ok((full, td))
}

pub fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = match (&a.resume, &a.cfg.config, &a.cfg.preset) {
        (Some(ck), None, None) => {
            let mut c = TrainState::load(ck)?.config;
            if let Some(s) = seed {
                c.seed = s;
            }
            c
        }
        _ => resolve_config(&a.cfg, seed)?,
    };
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(s) = &a.split {
        cfg.split = Some(s.clone());
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    cfg.validate()?;
    if a.recognizer_only {
        return train_recognizer(&cfg, a);
    }
    let state = fit(&cfg, &a.out_dir, a.resume.as_deref())?;
    let last = RunDir { root: a.out_dir.clone() }.last();
    println!("trained to step {}; checkpoint {} ({})", state.step, last.display(), file_sha256(&last)?);
    Ok(())
}

fn train_recognizer(cfg: &RunConfig, a: &TrainArgs) -> anyhow::Result<()> {
    let (full, td) = train_data(cfg)?;
    let mut state = match &a.resume {
        Some(p) => TrainState::load(p)?,
        None => {
            let charset = inkvit_core::recognizer::Charset::from_texts(
                full.items.iter().map(|i| i.sample.transcript.as_str()),
            );
            TrainState::new(cfg.clone(), charset, full.registry.tags.clone())?
        }
    };
    let dir = RunDir { root: a.out_dir.clone() };
    std::fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
    let mut log = String::new();
    while state.step < cfg.steps {
        let batch = make_batch(&td, cfg, state.step, Phase::Critic)?;
        let loss = state.recognizer_step(&td, &batch)?;
        state.step += 1;
        if state.step % cfg.log_interval == 0 {
            log.push_str(&format!("{}\n", json!({"step": state.step, "recog": loss})));
            info!("step {} ctc {loss:.4}", state.step);
        }
    }
    let metrics = dir.metrics();
    std::fs::write(&metrics, log).map_err(|e| Error::io(&metrics, e))?;
    state.save(dir.last())?;
    println!("recognizer trained to step {}; checkpoint {}", state.step, dir.last().display());
    Ok(())
}

/// Style images from a directory, width-normalized by transcript when a
/// manifest is present and by aspect ratio otherwise.
pub fn load_style_dir(dir: &Path) -> anyhow::Result<Vec<Tensor<f32>>> {
    let manifest = dir.join("manifest.jsonl");
    if manifest.exists() {
        let (samples, _) = load_manifest(&manifest)?;
        return samples
            .iter()
            .map(|s| Ok(preprocess_image(&read_image(&s.image_path)?, transcript_len(&s.transcript))?))
            .collect();
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("pgm" | "png")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no PGM/PNG images in {}", dir.display())).into());
    }
    paths
        .iter()
        .map(|p| {
            let raw = read_image(p)?;
            Ok(preprocess_image(&raw, implied_len(&raw))?)
        })
        .collect()
}

fn style_source(p: &Path) -> anyhow::Result<Vec<Tensor<f32>>> {
    if p.is_dir() {
        load_style_dir(p)
    } else {
        let raw = read_image(p)?;
        Ok(vec![preprocess_image(&raw, implied_len(&raw))?])
    }
}

fn safe_name(s: &str) -> String {
    s.chars().map(|c| if c.is_alphanumeric() { c } else { '_' }).collect()
}

pub fn cmd_generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let (mut state, sha) = load_state(&a.checkpoint)?;
    if let Some(k) = a.scales {
        if k != state.config.generator.n_scales {
            return Err(Error::Config(format!(
                "--scales {k} does not match the checkpoint's {} scales",
                state.config.generator.n_scales
            ))
            .into());
        }
    }
    if let Some(w) = a.wiring {
        // both wirings share one parameter layout
        state.config.generator.wiring = w;
        state.models.gen.cfg.wiring = w;
    }
    let mut texts = a.text.clone();
    if let Some(f) = &a.text_file {
        texts.extend(read_lines(f)?);
    }
    if texts.is_empty() {
        return Err(Error::Empty("no text given (--text or --text-file)".into()).into());
    }
    let font = font_for(&a.font, &state.config)?;
    let style = load_style_dir(&a.style_dir)?;
    let images = state.synthesizer(&font).generate(&style, &texts)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut samples = Vec::new();
    for (i, (t, img)) in texts.iter().zip(&images).enumerate() {
        let path = a.out_dir.join(format!("{i:04}_{}.pgm", safe_name(t)));
        write_image(&path, &GrayImage::from_tensor(img)?)?;
        samples.push(Sample {
            image_path: path,
            transcript: t.clone(),
            writer_id: 0,
        });
    }
    let registry = WriterRegistry {
        tags: vec!["style".into()],
    };
    let manifest = a.out_dir.join("manifest.jsonl");
    std::fs::write(&manifest, manifest_lines(&samples, &registry, &a.out_dir)).map_err(|e| Error::io(&manifest, e))?;
    write_json(
        &a.out_dir.join("report.json"),
        &json!({
            "command": "generate",
            "config": state.config,
            "checkpoint": a.checkpoint,
            "checkpoint_sha256": sha,
            "style_dir": a.style_dir,
            "style_images": style.len(),
            "texts": texts,
        }),
    )?;
    println!("wrote {} images to {}", images.len(), a.out_dir.display());
    Ok(())
}

pub fn cmd_recognize(a: &RecognizeArgs) -> anyhow::Result<()> {
    let (state, sha) = load_state(&a.checkpoint)?;
    let read = |img: &Tensor<f32>| -> anyhow::Result<String> {
        Ok(greedy_decode(&state.models.recog.logits(&state.recog, img)?, &state.charset))
    };
    for p in &a.image {
        let raw = read_image(p)?;
        println!("{}\t{}", p.display(), read(&preprocess_image(&raw, implied_len(&raw))?)?);
    }
    if let Some(m) = &a.manifest {
        let data = Dataset::load(m)?;
        let pairs = data
            .items
            .iter()
            .map(|it| Ok((read(&it.image)?, it.sample.transcript.clone())))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let report = json!({
            "command": "recognize",
            "config": state.config,
            "checkpoint_sha256": sha,
            "manifest": m,
            "n": pairs.len(),
            "cer": cer(&pairs)?,
            "wer": wer(&pairs)?,
            "ned": ned(&pairs)?,
        });
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    if a.image.is_empty() && a.manifest.is_none() {
        return Err(Error::Empty("nothing to recognize (--image or --manifest)".into()).into());
    }
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs, seed: Option<u64>) -> anyhow::Result<serde_json::Value> {
    let (state, sha) = load_state(&a.checkpoint)?;
    let seed = seed.unwrap_or(state.config.seed);
    let font = font_for(&a.font, &state.config)?;
    let data = Dataset::load(&a.manifest)?;
    if data.len() < 2 {
        return Err(Error::Data("evaluation needs at least 2 samples".into()).into());
    }
    let samples = data.samples();
    let syn = state.synthesizer(&font);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fakes = Vec::with_capacity(data.len());
    for s in &samples {
        let idx = choose_style_indices(&samples, s.writer_id, state.config.style_size, &mut rng)?;
        let style: Vec<Tensor<f32>> = idx.iter().map(|&i| data.items[i].image.clone()).collect();
        fakes.push(syn.generate(&style, std::slice::from_ref(&s.transcript))?.remove(0));
    }
    let real: Vec<Tensor<f32>> = data.items.iter().map(|i| i.image.clone()).collect();
    let extractor = FeatureExtractor::new(seed);
    let fid_all = fid_real_vs_generated(&real, &fakes, &extractor)?;
    let pad = |v: &[Tensor<f32>]| v.iter().map(inkvit_core::dataio::pad_or_truncate_eval).collect::<Vec<_>>();
    let fr = extractor.extract(&pad(&real))?;
    let ff = extractor.extract(&pad(&fakes))?;
    let subset = a.kid_subset.min(data.len());
    let kid_est = kid(&fr, &ff, subset, a.kid_subsets, seed)?;
    let read = |img: &Tensor<f32>| -> anyhow::Result<String> {
        Ok(greedy_decode(&state.models.recog.logits(&state.recog, img)?, &state.charset))
    };
    let gen_pairs = fakes
        .iter()
        .zip(&samples)
        .map(|(f, s)| Ok((read(f)?, s.transcript.clone())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let real_pairs = real
        .iter()
        .zip(&samples)
        .map(|(r, s)| Ok((read(r)?, s.transcript.clone())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let four_way = match &a.split {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let split = SplitSpec::parse(&text, &data.registry)?;
            let grid = build_eval_grid(&split, &samples);
            let synth = StateSynth { state: &state, font: &font };
            let cells = eval_four_way(&data, &grid, &synth, &extractor, a.n_per_pool, state.config.style_size, seed)?;
            serde_json::to_value(cells)?
        }
        None => serde_json::Value::Null,
    };
    if let Some(d) = &a.diff_dump {
        let mut out = String::from("reference\tprediction\tsub\tins\tdel\n");
        for (p, r) in &gen_pairs {
            let pc: Vec<char> = p.chars().collect();
            let rc: Vec<char> = r.chars().collect();
            let e = edit_distance(&pc, &rc);
            out.push_str(&format!("{r}\t{p}\t{}\t{}\t{}\n", e.substitutions, e.insertions, e.deletions));
        }
        std::fs::write(d, out).map_err(|e| Error::io(d, e))?;
    }
    let report = json!({
        "command": "evaluate",
        "config": state.config,
        "checkpoint": a.checkpoint,
        "checkpoint_sha256": sha,
        "manifest": a.manifest,
        "n": data.len(),
        "feature_extractor": extractor.id(),
        "fid": fid_all,
        "kid": {"mean": kid_est.mean, "std": kid_est.std, "subset_size": subset, "n_subsets": a.kid_subsets},
        "cer": cer(&gen_pairs)?,
        "wer": wer(&gen_pairs)?,
        "ned": ned(&gen_pairs)?,
        "real_recognition": {"cer": cer(&real_pairs)?, "wer": wer(&real_pairs)?, "ned": ned(&real_pairs)?},
        "four_way": four_way,
    });
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(report)
}

/// Trains every cumulative variant and writes `ablation.json` under
/// `--out-dir`. Without a manifest in the configuration the synthetic
/// smoke corpus is written to `out_dir/corpus` and used.
pub fn cmd_ablate(a: &AblateArgs, seed: Option<u64>) -> anyhow::Result<serde_json::Value> {
    let base = resolve_config(&a.cfg, seed)?;
    let axes = a
        .axes
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| AblationAxis::parse(s.trim()))
        .collect::<inkvit_core::Result<Vec<_>>>()?;
    let font = load_hex_font(&base.font)?;
    let data = match &base.manifest {
        Some(m) => Dataset::load(m)?,
        None => {
            let dir = a.out_dir.join("corpus");
            let (samples, registry) = write_corpus(&font, &dir, 2, &SMOKE_WORDS, 1, base.seed)?;
            Dataset::from_samples(samples, registry)?
        }
    };
    let steps = a.steps.unwrap_or(base.steps);
    let reports = run_ablation(&base, &axes, &data, &font, steps, &a.out_dir)?;
    println!("{:<58} {:>10} {:>8} {:>8}", "variant", "FID", "CER(r)", "CER(g)");
    for r in &reports {
        println!("{:<58} {:>10.3} {:>8.2} {:>8.2}", r.label, r.fid, r.recognizer_cer, r.generated_cer);
    }
    let value = json!({
        "command": "ablate",
        "base_config": base,
        "base_config_hash": base.hash(),
        "steps": steps,
        "variants": reports,
    });
    write_json(&a.out_dir.join("ablation.json"), &value)?;
    Ok(value)
}

pub fn cmd_augment(a: &AugmentArgs, seed: Option<u64>) -> anyhow::Result<()> {
    if a.n <= 0 {
        return Err(Error::Config(format!("--n must be positive, got {}", a.n)).into());
    }
    let (state, sha) = load_state(&a.checkpoint)?;
    let seed = seed.unwrap_or(state.config.seed);
    let vocab = read_lines(&a.vocab_file)?;
    if vocab.is_empty() {
        return Err(Error::Empty(format!("vocabulary {} is empty", a.vocab_file.display())).into());
    }
    let manifest = a
        .manifest
        .clone()
        .or_else(|| state.config.manifest.clone())
        .ok_or_else(|| Error::Config("no style manifest (--manifest)".into()))?;
    let data = Dataset::load(&manifest)?;
    let font = font_for(&a.font, &state.config)?;
    let samples = data.samples();
    let writers: Vec<usize> = data.by_writer().into_keys().collect();
    let syn = state.synthesizer(&font);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut out = Vec::new();
    for i in 0..a.n as usize {
        let writer = writers[i % writers.len()];
        let word = vocab.choose(&mut rng).expect("vocab non-empty").clone();
        let idx = choose_style_indices(&samples, writer, state.config.style_size, &mut rng)?;
        let style: Vec<Tensor<f32>> = idx.iter().map(|&j| data.items[j].image.clone()).collect();
        let img = syn.generate(&style, std::slice::from_ref(&word))?.remove(0);
        let path = a.out_dir.join(format!("aug_{i:06}.pgm"));
        write_image(&path, &GrayImage::from_tensor(&img)?)?;
        out.push(Sample {
            image_path: path,
            transcript: word,
            writer_id: writer,
        });
    }
    let m = a.out_dir.join("manifest.jsonl");
    std::fs::write(&m, manifest_lines(&out, &data.registry, &a.out_dir)).map_err(|e| Error::io(&m, e))?;
    write_json(
        &a.out_dir.join("report.json"),
        &json!({
            "command": "augment",
            "config": state.config,
            "checkpoint_sha256": sha,
            "n": a.n,
            "vocab_file": a.vocab_file,
            "style_manifest": manifest,
        }),
    )?;
    println!("wrote {} images and {}", a.n, m.display());
    Ok(())
}

pub fn cmd_report_size(a: &ReportSizeArgs) -> anyhow::Result<SizeReport> {
    if let Some(ck) = &a.checkpoint {
        let (state, _) = load_state(ck)?;
        return Ok(SizeReport::of_state(&state));
    }
    let cfg = resolve_config(&a.cfg, None)?;
    let (_, (g, d, r, w)) = Models::build(&cfg, a.classes, a.writers)?;
    Ok(SizeReport::new(
        g.num_scalars(),
        w.num_scalars(),
        &[("Disc", d.num_scalars()), ("Recog", r.num_scalars())],
    ))
}

const MARGIN: usize = 4;

fn blit(dst: &mut GrayImage, src: &GrayImage, x0: usize, y0: usize) {
    for y in 0..src.height.min(dst.height.saturating_sub(y0)) {
        for x in 0..src.width.min(dst.width.saturating_sub(x0)) {
            dst.pixels[(y0 + y) * dst.width + x0 + x] = src.pixels[y * src.width + x];
        }
    }
}

/// Draws `text` with the glyph bitmaps, clipped to `max_w` pixels.
fn draw_label(dst: &mut GrayImage, font: &GlyphTable, text: &str, x0: usize, y0: usize, max_w: usize) -> anyhow::Result<()> {
    let (_, glyphs) = tokenize(font, text)?;
    for (i, g) in glyphs.iter().enumerate() {
        for r in 0..GLYPH_SIZE {
            for c in 0..GLYPH_SIZE {
                let x = i * GLYPH_SIZE + c;
                if g.get(r, c) && x < max_w && x0 + x < dst.width && y0 + r < dst.height {
                    dst.pixels[(y0 + r) * dst.width + x0 + x] = 0;
                }
            }
        }
    }
    Ok(())
}

/// Rows are style sources, columns texts; every cell is padded with white
/// to the widest generated image. Row labels `S1..` sit in the left margin
/// and the texts in the top margin.
pub fn render_grid(
    state: &TrainState,
    font: &GlyphTable,
    styles: &[Vec<Tensor<f32>>],
    texts: &[String],
) -> anyhow::Result<GrayImage> {
    if styles.is_empty() || texts.is_empty() {
        bail!(Error::Empty("grid needs at least one style and one text".into()));
    }
    let syn = state.synthesizer(font);
    let cells: Vec<Vec<GrayImage>> = styles
        .iter()
        .map(|s| {
            syn.generate(s, texts)?
                .iter()
                .map(|t| Ok(GrayImage::from_tensor(t)?))
                .collect::<anyhow::Result<Vec<_>>>()
        })
        .collect::<anyhow::Result<_>>()?;
    let cell_w = cells.iter().flatten().map(|c| c.width).max().unwrap_or(0);
    let cell_h = cells.iter().flatten().map(|c| c.height).max().unwrap_or(0);
    let left = GLYPH_SIZE * (format!("S{}", styles.len()).chars().count()) + 2 * MARGIN;
    let top = GLYPH_SIZE + 2 * MARGIN;
    let width = left + texts.len() * (cell_w + MARGIN);
    let height = top + styles.len() * (cell_h + MARGIN);
    let mut out = GrayImage::filled(width, height, 255);
    for (j, t) in texts.iter().enumerate() {
        draw_label(&mut out, font, t, left + j * (cell_w + MARGIN), MARGIN, cell_w)?;
    }
    for (i, row) in cells.iter().enumerate() {
        let y = top + i * (cell_h + MARGIN);
        draw_label(&mut out, font, &format!("S{}", i + 1), MARGIN, y + (cell_h.saturating_sub(GLYPH_SIZE)) / 2, left)?;
        for (j, c) in row.iter().enumerate() {
            blit(&mut out, c, left + j * (cell_w + MARGIN), y);
        }
    }
    Ok(out)
}

pub fn cmd_grid(a: &GridArgs) -> anyhow::Result<()> {
    let (state, sha) = load_state(&a.checkpoint)?;
    let font = font_for(&a.font, &state.config)?;
    let styles = a.style.iter().map(|p| style_source(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let img = render_grid(&state, &font, &styles, &a.text)?;
    write_image(&a.out, &img)?;
    let mut sidecar = a.out.as_os_str().to_owned();
    sidecar.push(".json");
    write_json(
        Path::new(&sidecar),
        &json!({
            "command": "grid",
            "config": state.config,
            "checkpoint_sha256": sha,
            "styles": a.style,
            "texts": a.text,
            "width": img.width,
            "height": img.height,
        }),
    )?;
    println!("wrote {}x{} grid to {}", img.width, img.height, a.out.display());
    Ok(())
}
