//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Every check compares the library against an
//! oracle written here from first principles.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use inkvit_cli::{cmd_ablate, cmd_report_size, AblateArgs, ConfigArgs, ReportSizeArgs};
use inkvit_core::checkpoint::file_sha256;
use inkvit_core::config::{BalanceConfig, RunConfig};
use inkvit_core::dataio::{pad_or_truncate_eval, Dataset};
use inkvit_core::discriminator::Discriminator;
use inkvit_core::experiments::{generate_per_writer, generated_pairs, recognizer_pairs, writer_divergence};
use inkvit_core::generator::{GenConfig, Generator};
use inkvit_core::glyphs::{bundled_font_path, load_hex_font, render_char, render_text};
use inkvit_core::gradcheck::{finite_diff_check, finite_diff_check_coords};
use inkvit_core::metrics::{cer, edit_distance, fid, kid, mmd2_unbiased, ned, wer, FeatureSet};
use inkvit_core::nnblocks::{BlockConfig, Cpe, DecoderBlock, EncoderBlock, TokenGrid};
use inkvit_core::recognizer::{recognition_loss, Charset, Recognizer};
use inkvit_core::synth::write_smoke_corpus;
use inkvit_core::training::{balance_gradients, fit, make_batch, Batch, Phase, TrainData, TrainState};
use inkvit_core::writerid::WriterId;
use inkvit_core::{Builder, ParamStore, Tape, Tensor, Var};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit_s as f64 {
        Ok(())
    } else {
        Err(format!("runtime {:.1}s over {limit_s}s", elapsed.as_secs_f64()))
    }
}

// ---------------------------------------------------------------- glyphs

fn nibble(c: u8) -> u8 {
    match c {
        b'0'..=b'9' => c - b'0',
        b'a'..=b'f' => c - b'a' + 10,
        b'A'..=b'F' => c - b'A' + 10,
        _ => panic!("not hex: {c}"),
    }
}

/// 16×16 pixel grid from a `.hex` payload, decoded one nibble at a time.
/// Half-width (32-digit) glyphs occupy columns 4..12.
fn decode_hex(payload: &str) -> Vec<u8> {
    let bits: Vec<u8> = payload
        .bytes()
        .flat_map(|c| {
            let v = nibble(c);
            (0..4).rev().map(move |k| (v >> k) & 1)
        })
        .collect();
    let mut out = vec![0u8; 256];
    let (row_w, left) = if payload.len() == 32 { (8, 4) } else { (16, 0) };
    for r in 0..16 {
        for c in 0..row_w {
            out[r * 16 + left + c] = bits[r * row_w + c];
        }
    }
    out
}

fn c1_glyphs() -> Outcome {
    let t0 = Instant::now();
    let path = bundled_font_path();
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let oracle: BTreeMap<u32, Vec<u8>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (cp, hex) = l.trim().split_once(':').unwrap();
            (u32::from_str_radix(cp, 16).unwrap(), decode_hex(hex))
        })
        .collect();
    let table = load_hex_font(&path).map_err(|e| e.to_string())?;
    let cps: Vec<u32> = oracle.keys().copied().collect();
    let picked: Vec<u32> = cps.choose_multiple(&mut ChaCha8Rng::seed_from_u64(1), 100).copied().collect();
    let mut mismatches = 0;
    for &cp in &picked {
        let bmp = render_char(&table, char::from_u32(cp).unwrap()).map_err(|e| e.to_string())?;
        if bmp.flatten().to_vec() != oracle[&cp] {
            mismatches += 1;
        }
    }
    within(t0.elapsed(), 5)?;
    check(
        picked.len() == 100 && mismatches == 0 && table.len() == oracle.len(),
        format!("{} glyphs, 100 sampled, {mismatches} mismatches, {:.2}s", table.len(), t0.elapsed().as_secs_f64()),
    )
}

// ---------------------------------------------------------------- gradients

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn built<M>(seed: u64, f: impl FnOnce(&mut Builder<'_>) -> M) -> (M, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut Builder::new(&mut store, &mut rng, "t"));
    // zero-initialized biases and unit gains would hide paths
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for v in store.values_mut() {
        for x in v.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    (m, store)
}

/// Max relative error of d/dx Σ w⊙g(x) over every coordinate of a random x.
fn input_check(seed: u64, shape: &[usize], g: impl for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Var<'t, f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(shape, &mut rng);
    let probe = {
        let tape = Tape::new();
        g(&tape, tape.constant(x.clone())).shape()
    };
    let w = rand_tensor(&probe, &mut rng);
    finite_diff_check(
        |t| {
            let tape = Tape::new();
            let v = tape.var(t.clone());
            let out = g(&tape, v).mul(tape.constant(w.clone())).sum();
            (out.item(), tape.backward(out).get_or_zeros(v))
        },
        &x,
        EPS,
    )
}

fn c2_gradients() -> Outcome {
    let t0 = Instant::now();
    let cfg = BlockConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        n_layers: 1,
        dropout: 0.0,
    };
    let font = load_hex_font(bundled_font_path()).map_err(|e| e.to_string())?;
    let mut worst: HashMap<&str, f64> = HashMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..5u64 {
        let (enc, es) = built(10 + seed, |b| EncoderBlock::new(b, "enc", &cfg));
        note(
            "encoder_block",
            input_check(seed, &[6, 8], |tape, x| enc.forward(&es.bind(tape, false), TokenGrid::new(x, (2, 3))).tokens),
        );

        let (dec, ds) = built(20 + seed, |b| DecoderBlock::new(b, "dec", &cfg));
        let mem = rand_tensor(&[5, 8], &mut ChaCha8Rng::seed_from_u64(30 + seed));
        note(
            "decoder_block",
            input_check(seed, &[3, 8], |tape, x| {
                let m = tape.constant(mem.clone());
                dec.forward(&ds.bind(tape, false), x, m, m).unwrap()
            }),
        );
        let q = rand_tensor(&[3, 8], &mut ChaCha8Rng::seed_from_u64(40 + seed));
        note(
            "decoder_block",
            input_check(seed, &[5, 8], |tape, m| dec.forward(&ds.bind(tape, false), tape.constant(q.clone()), m, m).unwrap()),
        );

        let (cpe, cs) = built(50 + seed, |b| Cpe::new(b, "cpe", 8));
        note(
            "cpe",
            input_check(seed, &[6, 8], |tape, x| {
                cpe.forward(&cs.bind(tape, false), TokenGrid::new(x, (2, 3))).unwrap().tokens
            }),
        );

        let (d, dstore) = Discriminator::init(4, 60 + seed);
        note(
            "discriminate",
            input_check(seed, &[32, 32], |tape, x| d.discriminate(&dstore.bind(tape, false), x).unwrap()),
        );

        // CTC on raw logits, then through the recognizer on sampled pixels
        let charset = Charset::new(vec!['a', 'b', 'c']).unwrap();
        let z = rand_tensor(&[7, 4], &mut ChaCha8Rng::seed_from_u64(70 + seed)).scale(2.0);
        note(
            "recognition_loss",
            finite_diff_check(
                |t| {
                    let tape = Tape::new();
                    let v = tape.var(t.clone());
                    let l = recognition_loss(v, "abb", &charset).unwrap();
                    (l.item(), tape.backward(l).get_or_zeros(v))
                },
                &z,
                EPS,
            ),
        );
        let (rec, rstore) = Recognizer::init(&cfg, 4, true, true, 80 + seed);
        let img = rand_tensor(&[32, 32], &mut ChaCha8Rng::seed_from_u64(90 + seed));
        let coords: Vec<usize> = (0..24).map(|i| (i * 331 + seed as usize * 17) % img.numel()).collect();
        note(
            "recognition_loss",
            finite_diff_check_coords(
                |t| {
                    let tape = Tape::new();
                    let v = tape.var(t.clone());
                    let logits = rec.recognize(&rstore.bind(&tape, false), v).unwrap();
                    let l = recognition_loss(logits, "ab", &charset).unwrap();
                    (l.item(), tape.backward(l).get_or_zeros(v))
                },
                &img,
                EPS,
                &coords,
            ),
        );

        // style image → writer-id tokens → generator → weighted pixel sum
        let gcfg = GenConfig {
            block: BlockConfig { d_model: 16, d_ff: 16, ..cfg },
            n_scales: 1 + (seed as usize % 2),
            min_channels: 4,
            ..GenConfig::default()
        };
        let (gen, gstore) = Generator::init(&gcfg, 100 + seed).map_err(|e| e.to_string())?;
        let (wid, wstore) = WriterId::init(&gcfg.block, 2, true, true, 110 + seed);
        let content = render_text::<f64>(&font, "ab", 16).map_err(|e| e.to_string())?;
        let style = rand_tensor(&[32, 32], &mut ChaCha8Rng::seed_from_u64(120 + seed));
        let w = rand_tensor(&[32, 32], &mut ChaCha8Rng::seed_from_u64(130 + seed));
        let coords: Vec<usize> = (0..16).map(|i| (i * 523 + seed as usize * 11) % style.numel()).collect();
        note(
            "generate",
            finite_diff_check_coords(
                |t| {
                    let tape = Tape::new();
                    let v = tape.var(t.clone());
                    let e = wid.embed_style(&wstore.bind(&tape, false), &[v]).unwrap();
                    let img = gen.generate_one(&gstore.bind(&tape, false), &content, e.tokens).unwrap();
                    let out = img.mul(tape.constant(w.clone())).sum();
                    (out.item(), tape.backward(out).get_or_zeros(v))
                },
                &style,
                EPS,
                &coords,
            ),
        );
    }
    within(t0.elapsed(), 120)?;
    let mut keys: Vec<_> = worst.iter().collect();
    keys.sort_by(|a, b| a.0.cmp(b.0));
    let detail = keys.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    check(
        keys.len() == 6 && keys.iter().all(|(_, &v)| v < TOL),
        format!("5 seeds, max rel err: {detail}; {:.1}s", t0.elapsed().as_secs_f64()),
    )
}

// ---------------------------------------------------------------- CTC

/// −log Σ over all C^T frame paths that collapse to `labels`.
fn ctc_brute(logits: &[f64], t: usize, c: usize, labels: &[usize]) -> f64 {
    let lp: Vec<f64> = (0..t)
        .flat_map(|f| {
            let row = &logits[f * c..(f + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter().map(move |v| v - z).collect::<Vec<_>>()
        })
        .collect();
    let mut total = 0.0;
    for code in 0..c.pow(t as u32) {
        let path: Vec<usize> = (0..t).map(|f| code / c.pow(f as u32) % c).collect();
        let mut out = Vec::new();
        let mut prev = usize::MAX;
        for &k in &path {
            if k != prev && k != 0 {
                out.push(k);
            }
            prev = k;
        }
        if out == labels {
            total += path.iter().enumerate().map(|(f, &k)| lp[f * c + k]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

fn c3_ctc() -> Outcome {
    let t0 = Instant::now();
    let symbols = ['a', 'b', 'c'];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut n, mut infeasible, mut worst) = (0usize, 0usize, 0.0f64);
    for size in 1..=3 {
        let charset = Charset::new(symbols[..size].to_vec()).unwrap();
        let c = size + 1;
        for t in 1..=4 {
            for len in 0..=2usize {
                for code in 0..size.pow(len as u32) {
                    let labels: Vec<usize> = (0..len).map(|i| code / size.pow(i as u32) % size + 1).collect();
                    let word: String = labels.iter().map(|&k| symbols[k - 1]).collect();
                    for _ in 0..3 {
                        let logits: Vec<f64> = (0..t * c).map(|_| rng.random_range(-3.0..3.0)).collect();
                        let want = ctc_brute(&logits, t, c, &labels);
                        let tape = Tape::new();
                        let v = tape.constant(Tensor::from_vec(&[t, c], logits).unwrap());
                        n += 1;
                        match recognition_loss(v, &word, &charset) {
                            Ok(l) => worst = worst.max((l.item() - want).abs()),
                            // no path emits the word in t frames
                            Err(_) if want.is_infinite() => infeasible += 1,
                            Err(e) => return Err(format!("T={t} y={word:?}: {e}")),
                        }
                    }
                }
            }
        }
    }
    within(t0.elapsed(), 30)?;
    check(
        worst < 1e-6,
        format!("{n} instances ({infeasible} infeasible, rejected), max |Δ| {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- edit distance

fn lev(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let key = (a.len(), b.len());
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let (ia, ib) = (a.len() - 1, b.len() - 1);
    let v = (lev(&a[..ia], b, memo) + 1)
        .min(lev(a, &b[..ib], memo) + 1)
        .min(lev(&a[..ia], &b[..ib], memo) + usize::from(a[ia] != b[ib]));
    memo.insert(key, v);
    v
}

fn c4_edit() -> Outcome {
    let mut strings: Vec<Vec<u8>> = vec![vec![]];
    let mut frontier = strings.clone();
    for _ in 0..6 {
        frontier = frontier
            .iter()
            .flat_map(|s| (0..3u8).map(move |c| [s.as_slice(), &[c]].concat()))
            .collect();
        strings.extend(frontier.iter().cloned());
    }
    let mut bad = 0usize;
    for a in &strings {
        for b in &strings {
            let e = edit_distance(a, b);
            let mut memo = HashMap::new();
            let want = lev(a, b, &mut memo);
            if e.total() != want || e.insertions + b.len() != e.deletions + a.len() || e.ref_len != b.len() {
                bad += 1;
            }
        }
    }
    let pair = |p: &str, r: &str| vec![(p.to_string(), r.to_string())];
    let kit = edit_distance(&['k', 'i', 't', 't', 'e', 'n'], &['s', 'i', 't', 't', 'i', 'n', 'g']).total();
    let c = cer(&pair("kitten", "sitting")).unwrap();
    let w = wer(&pair("the cat sat", "the cat sit down")).unwrap();
    let n = ned(&pair("kitten", "sitting")).unwrap();
    let spots = kit == 3 && c == 300.0 / 7.0 && w == 50.0 && n == 300.0 / 7.0;
    check(
        bad == 0 && spots,
        format!(
            "{} pairs, {bad} disagreements; kitten/sitting={kit}, CER {c:.4}, WER {w:.1}, NED {n:.4}",
            strings.len() * strings.len()
        ),
    )
}

// ---------------------------------------------------------------- FID / KID

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(n: usize, d: usize, mean: &[f64], sd: f64, rng: &mut ChaCha8Rng) -> FeatureSet {
    let data = (0..n * d)
        .map(|i| mean[i % d] + sd * normal(rng))
        .collect::<Vec<f64>>();
    FeatureSet::new(n, d, data, "gauss").unwrap()
}

fn c5_fid() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = gaussian(300, 8, &[0.0; 8], 1.0, &mut rng);
    let self_fid = fid(&a, &a).map_err(|e| e.to_string())?;
    let n = 50_000;
    let u1 = gaussian(n, 1, &[0.0], 1.0, &mut rng);
    let u2 = gaussian(n, 1, &[0.0], 2.0, &mut rng);
    // (σ₁ − σ₂)² = 1
    let uni = fid(&u1, &u2).map_err(|e| e.to_string())?;
    let s1 = gaussian(n, 4, &[0.0; 4], 1.0, &mut rng);
    let s2 = gaussian(n, 4, &[0.5; 4], 1.0, &mut rng);
    // ‖μ‖² = 4 · 0.25
    let shift = fid(&s1, &s2).map_err(|e| e.to_string())?;
    within(t0.elapsed(), 60)?;
    check(
        self_fid <= 1e-6 && (uni - 1.0).abs() < 0.1 && (shift - 1.0).abs() < 0.05,
        format!("fid(A,A) {self_fid:.1e}, univariate {uni:.4} (want 1±0.1), shifted {shift:.4} (want 1±0.05)"),
    )
}

/// Cubic polynomial kernel written out for the 2-D hand case.
fn k2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] * b[0] + a[1] * b[1]) / 2.0 + 1.0).powi(3)
}

/// Expanded unbiased MMD² for X = {(1,0), (0,2)}, Y = {(1,1), (−1,0.5)}.
const MMD_2X2: f64 = -6.015625;

fn c6_kid() -> Outcome {
    let mut ests = Vec::new();
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let x = gaussian(60, 4, &[0.0; 4], 1.0, &mut rng);
        let y = gaussian(60, 4, &[0.0; 4], 1.0, &mut rng);
        ests.push(kid(&x, &y, 30, 4, seed).map_err(|e| e.to_string())?.mean);
    }
    let m = ests.iter().sum::<f64>() / ests.len() as f64;
    let sd = (ests.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (ests.len() - 1) as f64).sqrt();
    let se = sd / (ests.len() as f64).sqrt();

    let (x1, x2, y1, y2) = ([1.0, 0.0], [0.0, 2.0], [1.0, 1.0], [-1.0, 0.5]);
    let expanded = (k2(x1, x2) + k2(x2, x1)) / 2.0 + (k2(y1, y2) + k2(y2, y1)) / 2.0
        - 2.0 * (k2(x1, y1) + k2(x1, y2) + k2(x2, y1) + k2(x2, y2)) / 4.0;
    let lib = mmd2_unbiased(&[&x1, &x2], &[&y1, &y2]);
    let fx = FeatureSet::from_rows(&[x1.to_vec(), x2.to_vec()], "hand").unwrap();
    let fy = FeatureSet::from_rows(&[y1.to_vec(), y2.to_vec()], "hand").unwrap();
    let via_kid = kid(&fx, &fy, 2, 1, 0).map_err(|e| e.to_string())?.mean;
    check(
        m.abs() < 3.0 * se
            && (expanded - MMD_2X2).abs() < 1e-12
            && (lib - expanded).abs() < 1e-9
            && (via_kid - expanded).abs() < 1e-9,
        format!("mean over 200 seeds {m:.2e} (3·SE {:.2e}); 2×2 case {lib} vs {expanded}", 3.0 * se),
    )
}

// ---------------------------------------------------------------- balancing

fn pop_std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn c7_balance() -> Outcome {
    let cfg = BalanceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(8..600);
        let sa = 10f64.powf(rng.random_range(-4.0..2.0));
        let sr = 10f64.powf(rng.random_range(-4.0..3.0));
        let sw = 10f64.powf(rng.random_range(-4.0..3.0));
        let mut draw = |scale: f64, shift: f64| {
            Tensor::from_vec(&[n], (0..n).map(|_| shift + scale * normal(&mut rng)).collect::<Vec<f64>>()).unwrap()
        };
        let a = draw(sa, 0.0);
        let r = draw(sr, sr * 0.3);
        let w = draw(sw, -sw * 0.1);
        let zero = Tensor::zeros(&[n]);
        let sigma_d = pop_std(a.data());
        let diff = |c: &Tensor<f64>| c.data().iter().zip(a.data()).map(|(c, a)| c - a).collect::<Vec<f64>>();
        let (full, _) = balance_gradients(&a, &r, &w, &cfg).map_err(|e| e.to_string())?;
        let (only_r, _) = balance_gradients(&a, &r, &zero, &cfg).map_err(|e| e.to_string())?;
        let (only_w, _) = balance_gradients(&a, &zero, &w, &cfg).map_err(|e| e.to_string())?;
        let (gr, gw) = (diff(&only_r), diff(&only_w));
        worst = worst.max((pop_std(&gr) / sigma_d - cfg.alpha).abs());
        worst = worst.max((pop_std(&gw) / sigma_d - cfg.beta).abs());
        let sum_err = diff(&full)
            .iter()
            .zip(gr.iter().zip(&gw))
            .map(|(f, (r, w))| (f - r - w).abs() / sigma_d)
            .fold(0.0, f64::max);
        worst = worst.max(sum_err);
    }
    check(worst < 1e-6, format!("100 fuzzed tensors, max ratio deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- phases

fn tiny_state(dir: &Path) -> (TrainData, TrainState) {
    let font = load_hex_font(bundled_font_path()).unwrap();
    let (samples, reg) = write_smoke_corpus(&font, dir, 0).unwrap();
    let full = Dataset::from_samples(samples, reg).unwrap();
    let mut cfg = RunConfig::smoke();
    cfg.batch_size = 1;
    let charset = Charset::from_texts(full.items.iter().map(|i| i.sample.transcript.as_str()));
    let state = TrainState::new(cfg, charset, full.registry.tags.clone()).unwrap();
    (TrainData::new(&full, None, font).unwrap(), state)
}

fn c8_phases() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (td, mut s) = tiny_state(dir.path());
    let mut fails = Vec::new();
    let mut expect = |ok: bool, what: &str| {
        if !ok {
            fails.push(what.to_string());
        }
    };
    let before = s.clone();
    let b = make_batch(&td, &s.config, 0, Phase::Generator).map_err(|e| e.to_string())?;
    s.generator_step(&td, &b).map_err(|e| e.to_string())?;
    expect(s.gen != before.gen, "generator step left G unchanged");
    expect(s.disc == before.disc, "generator step moved D");
    expect(s.recog == before.recog, "generator step moved R");
    expect(s.wid == before.wid, "generator step moved W");
    expect(s.opt_wid == before.opt_wid && s.opt_disc == before.opt_disc, "generator step moved critic optimizer state");

    let mid = s.clone();
    let b = make_batch(&td, &s.config, 0, Phase::Critic).map_err(|e| e.to_string())?;
    s.critic_step(&td, &b).map_err(|e| e.to_string())?;
    expect(s.gen == mid.gen && s.opt_gen == mid.opt_gen, "critic step moved G");
    expect(s.disc != mid.disc && s.recog != mid.recog && s.wid != mid.wid, "critic step left D/R/W unchanged");

    let mid = s.clone();
    s.critic_step(&td, &Batch { reals: vec![], ..b }).map_err(|e| e.to_string())?;
    expect(s.disc != mid.disc, "fakes-only critic step left D unchanged");
    expect(s.gen == mid.gen && s.recog == mid.recog && s.wid == mid.wid, "fakes-only critic step moved G/R/W");
    if fails.is_empty() {
        Ok("bit-exact parameter diffs after G, D/R/W and fakes-only steps".into())
    } else {
        Err(fails.join("; "))
    }
}

// ---------------------------------------------------------------- geometry

fn c9_geometry() -> Outcome {
    let font = load_hex_font(bundled_font_path()).map_err(|e| e.to_string())?;
    let mut fails = Vec::new();
    let gcfg = GenConfig {
        block: BlockConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 16,
            n_layers: 1,
            dropout: 0.0,
        },
        min_channels: 4,
        ..GenConfig::default()
    };
    let (gen, store) = Generator::init(&gcfg, 9).map_err(|e| e.to_string())?;
    let letters: String = ('a'..='z').collect();
    for l in 1..=20 {
        let content = render_text::<f64>(&font, &letters[..l], 16).map_err(|e| e.to_string())?;
        let tape = Tape::new();
        let style = tape.constant(rand_tensor(&[6, 16], &mut ChaCha8Rng::seed_from_u64(l as u64)));
        let img = gen.generate_one(&store.bind(&tape, false), &content, style).map_err(|e| e.to_string())?;
        if img.shape() != [32, 16 * l] {
            fails.push(format!("L={l} gave {:?}", img.shape()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for w in [1, 5, 64, 127, 128, 129, 200, 333] {
        let img = rand_tensor(&[32, w], &mut rng);
        let p = pad_or_truncate_eval(&img);
        let ok_shape = p.shape() == [32, 128];
        let ok_idem = pad_or_truncate_eval(&p) == p;
        let ok_fill = (0..32).all(|r| {
            (0..128).all(|c| {
                let v = p.data()[r * 128 + c];
                if c < w {
                    v == img.data()[r * w + c]
                } else {
                    v == 1.0
                }
            })
        });
        if !(ok_shape && ok_idem && ok_fill) {
            fails.push(format!("eval padding at W={w}"));
        }
    }
    let bc = BlockConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 16,
        n_layers: 1,
        dropout: 0.0,
    };
    let (rec, rstore) = Recognizer::init(&bc, 5, true, true, 9);
    for w in [4, 7, 16, 33, 64, 130] {
        let z = rec.logits(&rstore, &rand_tensor(&[32, w], &mut rng)).map_err(|e| e.to_string())?;
        if z.shape() != [w / 4, 5] {
            fails.push(format!("recognizer W={w} gave {:?}", z.shape()));
        }
    }
    let (d, dstore) = Discriminator::init(4, 9);
    for w in [16, 32, 48, 160, 320] {
        let tape = Tape::new();
        let s = d
            .discriminate(&dstore.bind(&tape, false), tape.constant(rand_tensor(&[32, w], &mut rng)))
            .map_err(|e| e.to_string())?;
        if s.numel() != 2 * (w / 16) {
            fails.push(format!("critic W={w} gave {} patches", s.numel()));
        }
    }
    if fails.is_empty() {
        Ok("width 16·L for L=1..20, eval pad idempotent with +1 fill, T=⌊W/4⌋, Np=2·(W/16)".into())
    } else {
        Err(fails.join("; "))
    }
}

// ---------------------------------------------------------------- smoke training

fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
    let den: f64 = (0..ys.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    num / den
}

fn smoke_run(corpus: &Path, out: &Path) -> Result<(TrainState, Duration), String> {
    let mut cfg = RunConfig::smoke();
    cfg.manifest = Some(corpus.join("manifest.jsonl"));
    let t0 = Instant::now();
    let state = fit(&cfg, out, None).map_err(|e| e.to_string())?;
    Ok((state, t0.elapsed()))
}

fn c10_smoke() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus");
    let font = load_hex_font(bundled_font_path()).map_err(|e| e.to_string())?;
    write_smoke_corpus(&font, &corpus, 0).map_err(|e| e.to_string())?;
    let (state, took) = smoke_run(&corpus, &dir.path().join("a"))?;
    within(took, 30 * 60)?;

    let hinge: Vec<f64> = std::fs::read_to_string(dir.path().join("a/metrics.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["critic"]["d_hinge"].as_f64().unwrap())
        .collect();
    let fifth = hinge.len() / 5;
    let head = hinge[..fifth].iter().sum::<f64>() / fifth as f64;
    let tail = hinge[hinge.len() - fifth..].iter().sum::<f64>() / fifth as f64;
    let slope = least_squares_slope(&hinge);
    let a_ok = slope < 0.0 && tail < head;

    let data = Dataset::load(corpus.join("manifest.jsonl")).map_err(|e| e.to_string())?;
    let real_cer = cer(&recognizer_pairs(&state, &data).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let b_ok = real_cer < 20.0;

    let words: Vec<String> = inkvit_core::synth::SMOKE_WORDS.iter().map(|s| s.to_string()).collect();
    let generated = generate_per_writer(&state, &font, &data, &words, state.config.style_size).map_err(|e| e.to_string())?;
    let gen_cer = cer(&generated_pairs(&state, &generated).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let div = writer_divergence(&generated, 0, 1).map_err(|e| e.to_string())?;
    let c_ok = div > 0.05;

    let (_, took_b) = smoke_run(&corpus, &dir.path().join("b"))?;
    let sha_a = file_sha256(dir.path().join("a/last.ckpt")).map_err(|e| e.to_string())?;
    let sha_b = file_sha256(dir.path().join("b/last.ckpt")).map_err(|e| e.to_string())?;
    let log_a = std::fs::read(dir.path().join("a/metrics.jsonl")).map_err(|e| e.to_string())?;
    let log_b = std::fs::read(dir.path().join("b/metrics.jsonl")).map_err(|e| e.to_string())?;
    let d_ok = sha_a == sha_b && log_a == log_b;

    println!("      info: recognizer CER on generated training words {gen_cer:.1}%");
    check(
        a_ok && b_ok && c_ok && d_ok && state.step == 2000,
        format!(
            "{} steps in {:.0}s / {:.0}s; (a) d_hinge {head:.3} → {tail:.3}, slope {slope:.2e} [{}] \
             (b) CER on training words {real_cer:.1}% [{}] (c) writer MAD {div:.3} [{}] (d) checkpoints {} [{}]",
            state.step,
            took.as_secs_f64(),
            took_b.as_secs_f64(),
            if a_ok { "ok" } else { "FAIL" },
            if b_ok { "ok" } else { "FAIL" },
            if c_ok { "ok" } else { "FAIL" },
            if sha_a == sha_b { "identical" } else { "differ" },
            if d_ok { "ok" } else { "FAIL" },
        ),
    )
}

// ---------------------------------------------------------------- ablation

fn c11_ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let args = AblateArgs {
        cfg: ConfigArgs {
            config: None,
            preset: Some("smoke".into()),
        },
        axes: vec!["vit_generator".into(), "multi_scale".into(), "vit_recognizer_writerid".into()],
        steps: Some(200),
        out_dir: dir.path().to_path_buf(),
    };
    let v = cmd_ablate(&args, None).map_err(|e| format!("{e:#}"))?;
    let variants = v["variants"].as_array().cloned().unwrap_or_default();
    let flags: Vec<(bool, u64, bool, bool)> = variants
        .iter()
        .map(|r| {
            let c = &r["config"];
            (
                c["generator"]["use_vit"].as_bool().unwrap(),
                c["generator"]["n_scales"].as_u64().unwrap(),
                c["recognizer"]["use_vit"].as_bool().unwrap(),
                c["writerid"]["use_vit"].as_bool().unwrap(),
            )
        })
        .collect();
    let order = [(false, 1, false, false), (true, 1, false, false), (true, 2, false, false), (true, 2, true, true)];
    let finite = variants.iter().all(|r| {
        r["fid"].as_f64().is_some_and(f64::is_finite)
            && r["recognizer_cer"].as_f64().is_some_and(f64::is_finite)
            && r["final_step"]["step"].as_u64() == Some(200)
            && r["final_step"]["generator"]["total"].as_f64().is_some_and(f64::is_finite)
    });
    let labels: Vec<&str> = variants.iter().filter_map(|r| r["label"].as_str()).collect();
    check(
        flags == order && finite && dir.path().join("ablation.json").exists(),
        format!("{} variants: {}", variants.len(), labels.join(" | ")),
    )
}

// ---------------------------------------------------------------- size

fn c12_size() -> Outcome {
    let args = ReportSizeArgs {
        checkpoint: None,
        cfg: ConfigArgs {
            config: None,
            preset: Some("large".into()),
        },
        writers: 339,
        classes: 80,
        json: false,
    };
    let r = cmd_report_size(&args).map_err(|e| format!("{e:#}"))?;
    let total = r.total_mb();
    let (lo, hi) = (42.6 / 2.0, 42.6 * 2.0);
    check(
        (lo..=hi).contains(&total),
        format!("Gen {:.2} MB + Enc {:.2} MB = {total:.2} MB (window {lo:.1}..{hi:.1})", r.rows[0].mb, r.rows[1].mb),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("1 glyph oracle", c1_glyphs),
        ("2 gradient suite", c2_gradients),
        ("3 CTC oracle", c3_ctc),
        ("4 edit-distance oracle", c4_edit),
        ("5 FID analytics", c5_fid),
        ("6 KID unbiasedness", c6_kid),
        ("7 gradient balancing", c7_balance),
        ("8 phase isolation", c8_phases),
        ("9 geometry laws", c9_geometry),
        ("10 smoke training", c10_smoke),
        ("11 ablation harness", c11_ablation),
        ("12 size report", c12_size),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(d) => println!("PASS  criterion {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  criterion {name}: {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
