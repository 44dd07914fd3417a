//! FID, KID, edit-distance rates and the four-pool evaluation protocol.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Tape};
use crate::dataio::{choose_style_indices, pad_or_truncate_eval, Dataset, EvalGrid, Pool, Sample, EVAL_WIDTH, IMG_HEIGHT};
use crate::error::{Error, Result};
use crate::nnblocks::Conv2d;
use crate::params::{Builder, ParamStore};
use crate::tensor::Tensor;

/// `n × d` feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>, extractor_id: impl Into<String>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Shape(format!("{n}x{d} features need {} values, got {}", n * d, data.len())));
        }
        Ok(Self {
            n,
            d,
            data,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], extractor_id: impl Into<String>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        Self::new(rows.len(), d, rows.concat(), extractor_id)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.data)
    }

    fn check(&self, min_rows: usize) -> Result<()> {
        if self.n < min_rows {
            return Err(Error::Data(format!("need at least {min_rows} feature rows, got {}", self.n)));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(())
    }
}

fn moments(f: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let x = f.matrix();
    let mu = DVector::from_iterator(f.d, x.column_iter().map(|c| c.mean()));
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centred.transpose() * &centred / (f.n as f64 - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to the two sets (unbiased
/// covariances).
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    a.check(2)?;
    b.check(2)?;
    if a.d != b.d {
        return Err(Error::Shape(format!("feature widths differ: {} vs {}", a.d, b.d)));
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let sa = psd_sqrt(&cov_a);
    let mut m = &sa * &cov_b * &sa;
    m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (&mu_a - &mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD between two equal-sized sets under the cubic
/// polynomial kernel.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let m = x.len() as f64;
    let n = y.len() as f64;
    let mut kxx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kxx += poly_kernel(x[i], x[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                kyy += poly_kernel(y[i], y[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for a in x {
        for b in y {
            kxy += poly_kernel(a, b);
        }
    }
    kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidEstimate {
    pub mean: f64,
    /// Standard deviation of the per-subset estimates.
    pub std: f64,
}

pub fn kid(a: &FeatureSet, b: &FeatureSet, subset_size: usize, n_subsets: usize, seed: u64) -> Result<KidEstimate> {
    a.check(2)?;
    b.check(2)?;
    if a.d != b.d {
        return Err(Error::Shape(format!("feature widths differ: {} vs {}", a.d, b.d)));
    }
    if subset_size < 2 || subset_size > a.n.min(b.n) {
        return Err(Error::Config(format!(
            "subset size {subset_size} must be in 2..={}",
            a.n.min(b.n)
        )));
    }
    if n_subsets == 0 {
        return Err(Error::Config("need at least one subset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ests: Vec<f64> = (0..n_subsets)
        .map(|_| {
            let xi = sample(&mut rng, a.n, subset_size);
            let yi = sample(&mut rng, b.n, subset_size);
            let x: Vec<&[f64]> = xi.iter().map(|i| a.row(i)).collect();
            let y: Vec<&[f64]> = yi.iter().map(|i| b.row(i)).collect();
            mmd2_unbiased(&x, &y)
        })
        .collect();
    let mean = ests.iter().sum::<f64>() / ests.len() as f64;
    let var = ests.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / ests.len() as f64;
    Ok(KidEstimate { mean, std: var.sqrt() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn rate(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(Error::Data("reference is empty".into()));
        }
        Ok(self.total() as f64 / self.ref_len as f64)
    }
}

/// Unit-cost Levenshtein alignment of `pred` against `reference`. The
/// backtrace prefers substitution/match, then deletion, then insertion.
pub fn edit_distance<S: PartialEq>(pred: &[S], reference: &[S]) -> EditCounts {
    let (n, m) = (reference.len(), pred.len());
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[at(i, 0)] = i;
    }
    for j in 0..=m {
        dp[at(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[at(i - 1, j - 1)] + usize::from(reference[i - 1] != pred[j - 1]);
            let del = dp[at(i - 1, j)] + 1;
            let ins = dp[at(i, j - 1)] + 1;
            dp[at(i, j)] = sub.min(del).min(ins);
        }
    }
    let mut c = EditCounts {
        ref_len: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[at(i, j)];
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != pred[j - 1]);
            if dp[at(i - 1, j - 1)] + mismatch == here {
                c.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[at(i - 1, j)] + 1 == here {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Character error rate over all pairs `(prediction, reference)`, ×100.
pub fn cer(pairs: &[(String, String)]) -> Result<f64> {
    pooled_rate(pairs, |p, r| edit_distance(&chars(p), &chars(r)))
}

/// Word error rate over whitespace-separated words, ×100.
pub fn wer(pairs: &[(String, String)]) -> Result<f64> {
    pooled_rate(pairs, |p, r| edit_distance(&words(p), &words(r)))
}

fn pooled_rate(pairs: &[(String, String)], f: impl Fn(&str, &str) -> EditCounts) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no prediction pairs".into()));
    }
    let mut errs = 0;
    let mut total = 0;
    for (p, r) in pairs {
        let c = f(p, r);
        if c.ref_len == 0 {
            return Err(Error::Data(format!("empty reference for prediction {p:?}")));
        }
        errs += c.total();
        total += c.ref_len;
    }
    Ok(100.0 * errs as f64 / total as f64)
}

/// Mean of `dist / max(|p|, |r|)` over pairs, ×100.
pub fn ned(pairs: &[(String, String)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no prediction pairs".into()));
    }
    let mut acc = 0.0;
    for (p, r) in pairs {
        let (pc, rc) = (chars(p), chars(r));
        if rc.is_empty() {
            return Err(Error::Data(format!("empty reference for prediction {p:?}")));
        }
        acc += edit_distance(&pc, &rc).total() as f64 / pc.len().max(rc.len()) as f64;
    }
    Ok(100.0 * acc / pairs.len() as f64)
}

/// Fixed random conv net: four stride-2 stages, global average pooling,
/// 256-d output. Never trained.
pub struct FeatureExtractor {
    convs: Vec<Conv2d>,
    params: ParamStore<f32>,
    pub seed: u64,
}

pub const FEATURE_DIM: usize = 256;

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng, "features");
        let widths = [1, 32, 64, 128, FEATURE_DIM];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut b, &format!("conv{i}"), w[0], w[1], (3, 3), Conv2dSpec::new((2, 2), (1, 1))))
            .collect();
        Self {
            convs,
            params: store.cast(),
            seed,
        }
    }

    pub fn id(&self) -> String {
        format!("randconv4-gap-{}-seed{}", FEATURE_DIM, self.seed)
    }

    pub fn features(&self, img: &Tensor<f32>) -> Result<Vec<f64>> {
        if img.shape() != [IMG_HEIGHT, EVAL_WIDTH] {
            return Err(Error::Shape(format!(
                "feature extractor expects [32, 128], got {:?}",
                img.shape()
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let mut x = tape.constant(img.clone()).reshape(&[1, 1, IMG_HEIGHT, EVAL_WIDTH]);
        for c in &self.convs {
            x = c.forward(&p, x).relu();
        }
        let (h, w) = (x.dim(2), x.dim(3));
        let pooled = x.reshape(&[FEATURE_DIM, h * w]).mean_axis(1).value();
        Ok(pooled.to_f64_vec())
    }

    pub fn extract(&self, images: &[Tensor<f32>]) -> Result<FeatureSet> {
        let rows = images
            .iter()
            .map(|im| self.features(im))
            .collect::<Result<Vec<_>>>()?;
        FeatureSet::new(images.len(), FEATURE_DIM, rows.concat(), self.id())
    }
}

pub fn default_feature_extractor(images: &[Tensor<f32>], seed: u64) -> Result<FeatureSet> {
    FeatureExtractor::new(seed).extract(images)
}

/// What a synthesizer is asked to produce for one evaluation cell.
pub struct SynthRequest<'a> {
    /// Index of the real sample whose writer and word are being imitated.
    pub sample_index: usize,
    pub writer_id: usize,
    pub text: &'a str,
    pub style_images: Vec<Tensor<f32>>,
}

pub trait ImageSynth {
    /// A `[32, W]` image in `[-1, 1]`.
    fn synthesize(&self, req: &SynthRequest<'_>) -> Result<Tensor<f32>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolCell {
    pub pool: String,
    pub n_real: usize,
    pub fid: Option<f64>,
}

/// For each pool, synthesizes `n_per_pool` images imitating pool samples
/// (cycling through them in order) and reports FID against the pool's real
/// images. Cells come in the order IV-S, IV-U, OOV-S, OOV-U.
pub fn eval_four_way(
    data: &Dataset,
    grid: &EvalGrid,
    synth: &dyn ImageSynth,
    extractor: &FeatureExtractor,
    n_per_pool: usize,
    style_size: usize,
    seed: u64,
) -> Result<Vec<PoolCell>> {
    if n_per_pool == 0 {
        return Err(Error::Config("n_per_pool must be positive".into()));
    }
    let samples: Vec<Sample> = data.samples();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::with_capacity(4);
    for pool in Pool::ALL {
        let idx = grid.pool(pool);
        if idx.len() < 2 {
            if idx.is_empty() {
                log::warn!("pool {} is empty; cell reported absent", pool.label());
            } else {
                log::warn!("pool {} has a single sample; FID undefined", pool.label());
            }
            cells.push(PoolCell {
                pool: pool.label().into(),
                n_real: idx.len(),
                fid: None,
            });
            continue;
        }
        let real: Vec<Tensor<f32>> = idx.iter().map(|&i| pad_or_truncate_eval(&data.items[i].image)).collect();
        let fake = (0..n_per_pool)
            .map(|k| {
                let si = idx[k % idx.len()];
                let s = &samples[si];
                let style = choose_style_indices(&samples, s.writer_id, style_size, &mut rng)?;
                let req = SynthRequest {
                    sample_index: si,
                    writer_id: s.writer_id,
                    text: &s.transcript,
                    style_images: style.iter().map(|&i| data.items[i].image.clone()).collect(),
                };
                Ok(pad_or_truncate_eval(&synth.synthesize(&req)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let fr = extractor.extract(&real)?;
        let ff = extractor.extract(&fake)?;
        cells.push(PoolCell {
            pool: pool.label().into(),
            n_real: idx.len(),
            fid: Some(fid(&fr, &ff)?),
        });
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    use std::collections::HashMap;

    fn gaussian(n: usize, d: usize, mean: &[f64], sd: f64, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, sd).unwrap();
        let data = (0..n * d).map(|k| mean[k % d] + nd.sample(&mut rng)).collect();
        FeatureSet::new(n, d, data, "test").unwrap()
    }

    #[test]
    fn fid_identity_and_symmetry() {
        let a = gaussian(300, 5, &[0.0; 5], 1.0, 1);
        let b = gaussian(200, 5, &[0.5; 5], 2.0, 2);
        assert!(fid(&a, &a).unwrap() < 1e-6);
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8, "{ab} {ba}");
    }

    #[test]
    fn fid_closed_form_cases() {
        let a = gaussian(50_000, 1, &[0.0], 1.0, 3);
        let b = gaussian(50_000, 1, &[0.0], 2.0, 4);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 0.1);
        let a = gaussian(50_000, 4, &[0.0; 4], 1.0, 5);
        let b = gaussian(50_000, 4, &[1.0, 0.0, 0.0, 0.0], 1.0, 6);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 0.05);
    }

    #[test]
    fn fid_errors() {
        let one = FeatureSet::new(1, 2, vec![0.0, 1.0], "t").unwrap();
        let two = FeatureSet::new(2, 2, vec![0.0, 1.0, 2.0, 3.0], "t").unwrap();
        assert!(fid(&one, &two).is_err());
        let bad = FeatureSet::new(2, 2, vec![0.0, f64::NAN, 2.0, 3.0], "t").unwrap();
        assert!(fid(&bad, &two).is_err());
    }

    #[test]
    fn mmd_matches_expanded_sum() {
        let (x1, x2, y1, y2) = (0.3f64, -1.2f64, 0.7f64, 2.0f64);
        let k = |a: f64, b: f64| (a * b + 1.0).powi(3);
        let oracle = (k(x1, x2) + k(x2, x1)) / 2.0 + (k(y1, y2) + k(y2, y1)) / 2.0
            - 2.0 * (k(x1, y1) + k(x1, y2) + k(x2, y1) + k(x2, y2)) / 4.0;
        let got = mmd2_unbiased(&[&[x1], &[x2]], &[&[y1], &[y2]]);
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn kid_deterministic_and_validated() {
        let a = gaussian(150, 3, &[0.0; 3], 1.0, 7);
        let b = gaussian(150, 3, &[0.0; 3], 1.0, 8);
        assert_eq!(kid(&a, &b, 100, 10, 1).unwrap(), kid(&a, &b, 100, 10, 1).unwrap());
        assert!(kid(&a, &b, 1, 10, 1).is_err());
        assert!(kid(&a, &b, 151, 10, 1).is_err());
    }

    fn memo_oracle(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let v = if a[0] == b[0] {
            memo_oracle(&a[1..], &b[1..], memo)
        } else {
            1 + memo_oracle(&a[1..], b, memo)
                .min(memo_oracle(a, &b[1..], memo))
                .min(memo_oracle(&a[1..], &b[1..], memo))
        };
        memo.insert((a.len(), b.len()), v);
        v
    }

    #[test]
    fn edit_distance_spot_values() {
        assert_eq!(edit_distance(&chars("abc"), &chars("abc")).total(), 0);
        assert_eq!(edit_distance(&chars("kitten"), &chars("sitting")).total(), 3);
        let c = edit_distance(&chars(""), &chars("ab"));
        assert_eq!((c.deletions, c.total()), (2, 2));
        assert_eq!(c.rate().unwrap(), 1.0);
        let c = edit_distance(&chars("abx"), &chars("ab"));
        assert_eq!(c.insertions, 1);
    }

    #[test]
    fn edit_distance_against_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let la = rng.random_range(0..7);
            let lb = rng.random_range(0..7);
            let a: Vec<u8> = (0..la).map(|_| rng.random_range(0..3)).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.random_range(0..3)).collect();
            let c = edit_distance(&a, &b);
            assert_eq!(c.total(), memo_oracle(&a, &b, &mut HashMap::new()));
            assert_eq!(c.ref_len, b.len());
        }
    }

    #[test]
    fn rates() {
        let p = |a: &str, b: &str| vec![(a.to_string(), b.to_string())];
        assert_eq!(cer(&p("ab", "ad")).unwrap(), 50.0);
        assert_eq!(ned(&p("ab", "ad")).unwrap(), 50.0);
        assert_eq!(wer(&p("ab", "ad")).unwrap(), 100.0);
        assert_eq!(ned(&p("", "abc")).unwrap(), 100.0);
        assert!(cer(&p("a", "")).is_err());
        assert!(cer(&[]).is_err());
        let pairs = vec![
            ("the cat".to_string(), "the hat".to_string()),
            ("dog".to_string(), "dogs".to_string()),
        ];
        let doubled: Vec<_> = pairs.iter().chain(&pairs).cloned().collect();
        assert_eq!(cer(&pairs).unwrap(), cer(&doubled).unwrap());
        assert_eq!(wer(&pairs).unwrap(), wer(&doubled).unwrap());
        assert_eq!(ned(&pairs).unwrap(), ned(&doubled).unwrap());
    }

    #[test]
    fn extractor_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(&[32, 128], (0..4096).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
        };
        let (a, b) = (img(&mut rng), img(&mut rng));
        let f = default_feature_extractor(&[a.clone(), b], 3).unwrap();
        assert_eq!((f.n, f.d), (2, 256));
        assert_ne!(f.row(0), f.row(1));
        assert_eq!(default_feature_extractor(&[a.clone()], 3).unwrap().row(0), f.row(0));
        assert!(default_feature_extractor(&[Tensor::zeros(&[32, 100])], 3).is_err());
    }
}
