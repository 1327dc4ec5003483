//! Analysis of trained models: phoneme-sliced latent averages, exact t-SNE,
//! silhouette scores, attention profiles and the relative-time comparison of
//! attention between two models per manner class.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{Manner, PhonemeAlignment, PhonemeInventory};
use crate::error::{Error, Result};
use crate::metrics::{bootstrap_ci, BootstrapCi};
use crate::model::{AttentionRecord, LatentRecord};
use crate::numerics::Tensor;

/// Time-averaged latent of one phoneme token.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeEmbedding {
    pub symbol: String,
    pub utterance: String,
    pub vector: Vec<f64>,
}

/// Frames `[⌊start·rate⌋, ⌊end·rate⌋)`, or the single frame containing
/// `start` when that range is empty.
fn core_frames(start: f64, end: f64, rate_hz: f64) -> (usize, usize) {
    let a = (start * rate_hz).floor().max(0.0) as usize;
    let b = (end * rate_hz).floor().max(0.0) as usize;
    (a, b.max(a + 1))
}

pub fn extract_phoneme_latents(latents: &LatentRecord, alignment: &PhonemeAlignment, rate_hz: f64) -> Result<Vec<PhonemeEmbedding>> {
    let t = latents.values.rows();
    let d = latents.values.cols();
    alignment
        .intervals()
        .iter()
        .map(|iv| {
            let (a, b) = core_frames(iv.start, iv.end, rate_hz);
            if b > t {
                return Err(Error::Alignment(format!(
                    "{}: interval {} [{}, {}) s needs frames up to {b}, latent has {t}",
                    latents.utterance, iv.symbol, iv.start, iv.end
                )));
            }
            let mut vector = vec![0.0; d];
            for f in a..b {
                for (v, &x) in vector.iter_mut().zip(latents.values.row(f)) {
                    *v += x;
                }
            }
            let n = (b - a) as f64;
            vector.iter_mut().for_each(|v| *v /= n);
            Ok(PhonemeEmbedding {
                symbol: iv.symbol.clone(),
                utterance: latents.utterance.clone(),
                vector,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneResult {
    /// `[N, 2]`
    pub coords: Tensor,
    pub perplexity: f64,
    /// Set when the requested perplexity had to be lowered.
    pub warning: Option<String>,
    /// Entropy (nats) of each calibrated conditional distribution.
    pub entropies: Vec<f64>,
    pub kl_after_exaggeration: f64,
    pub kl_final: f64,
}

const MIN_BANDWIDTH: f64 = 1e-12;
const ENTROPY_TOL: f64 = 1e-10;

/// Conditional distribution of row `i` at precision `beta`, and its entropy.
fn conditional(d2: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = d2
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(d2).enumerate() {
        if j == i {
            *o = 0.0;
            continue;
        }
        let e = (-beta * (v - dmin)).exp();
        *o = e;
        sum += e;
        weighted += e * (v - dmin);
    }
    out.iter_mut().for_each(|o| *o /= sum);
    sum.ln() + beta * weighted / sum
}

/// Bisection on the precision so each conditional has entropy `ln(perplexity)`.
fn calibrate(d2: &[f64], n: usize, perplexity: f64) -> (Vec<f64>, Vec<f64>) {
    let target = perplexity.ln();
    let beta_cap = 1.0 / (2.0 * MIN_BANDWIDTH * MIN_BANDWIDTH);
    let mut p = vec![0.0; n * n];
    let mut entropies = Vec::with_capacity(n);
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        let out = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut h = conditional(row, i, beta, out);
        for _ in 0..500 {
            if (h - target).abs() < ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            if beta >= beta_cap {
                beta = beta_cap;
                h = conditional(row, i, beta, out);
                break;
            }
            h = conditional(row, i, beta, out);
        }
        entropies.push(h);
    }
    (p, entropies)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b.max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// Student-t affinities; returns normalized Q and the unnormalized kernel.
fn affinities(y: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[2 * i] - y[2 * j];
            let dy = y[2 * i + 1] - y[2 * j + 1];
            let k = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = k;
            num[j * n + i] = k;
            sum += 2.0 * k;
        }
    }
    let q = num.iter().map(|&k| k / sum).collect();
    (q, num)
}

/// Exact t-SNE of the rows of `x` (`[N, d]`).
pub fn tsne(x: &Tensor, cfg: &TsneConfig) -> Result<TsneResult> {
    let n = x.rows();
    if x.rank() != 2 || n < 4 {
        return Err(Error::Config(format!("t-SNE needs an [N, d] matrix with N ≥ 4, got {:?}", x.shape())));
    }
    if !(cfg.perplexity > 0.0) || cfg.iterations == 0 {
        return Err(Error::Config("t-SNE needs positive perplexity and iterations".into()));
    }
    let mut perplexity = cfg.perplexity;
    let mut warning = None;
    if (n as f64) <= 3.0 * perplexity {
        perplexity = (((n - 1) / 3) as f64).max(1.0);
        warning = Some(format!(
            "perplexity {} too large for {n} points; lowered to {perplexity}",
            cfg.perplexity
        ));
    }

    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }
    let (cond, entropies) = calibrate(&d2, n, perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-300);
        }
        p[i * n + i] = 0.0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let mut velocity = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut grad = vec![0.0; 2 * n];
    let mut kl_after_exaggeration = f64::NAN;
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iterations { 0.5 } else { 0.8 };
        let (q, num) = affinities(&y, n);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let m = 4.0 * (exaggeration * p[i * n + j] - q[i * n + j]) * num[i * n + j];
                grad[2 * i] += m * (y[2 * i] - y[2 * j]);
                grad[2 * i + 1] += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
        }
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (velocity[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(0.01)
            };
            velocity[k] = momentum * velocity[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += velocity[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + c] -= mean);
        }
        if it + 1 == cfg.exaggeration_iterations {
            kl_after_exaggeration = kl(&p, &affinities(&y, n).0);
        }
    }
    let kl_final = kl(&p, &affinities(&y, n).0);
    if kl_after_exaggeration.is_nan() {
        kl_after_exaggeration = kl_final;
    }
    Ok(TsneResult {
        coords: Tensor::new(vec![n, 2], y)?,
        perplexity,
        warning,
        entropies,
        kl_after_exaggeration,
        kl_final,
    })
}

/// Mean silhouette coefficient of `points` (`[N, k]`) under `labels`;
/// points alone in their cluster score 0.
pub fn silhouette_score(points: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = points.rows();
    if labels.len() != n || n < 2 {
        return Err(Error::Config(format!("silhouette needs ≥ 2 points and one label each ({n} points, {} labels)", labels.len())));
    }
    let dist = |i: usize, j: usize| {
        points
            .row(i)
            .iter()
            .zip(points.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::Config("silhouette needs at least two clusters".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![(0.0, 0usize); clusters.len()];
        for j in 0..n {
            if j != i {
                let c = clusters.binary_search(&labels[j]).expect("known label");
                sums[c].0 += dist(i, j);
                sums[c].1 += 1;
            }
        }
        let own = clusters.binary_search(&labels[i]).expect("known label");
        if sums[own].1 == 0 {
            continue;
        }
        let a = sums[own].0 / sums[own].1 as f64;
        let b = sums
            .iter()
            .enumerate()
            .filter(|&(c, s)| c != own && s.1 > 0)
            .map(|(_, s)| s.0 / s.1 as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}

/// Population z-score; all zeros when the standard deviation is below 1e-12.
pub fn zscore(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if !(std >= 1e-12) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - mean) / std).collect()
}

/// Head- and query-averaged attention received by each key, z-scored.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProfile {
    pub utterance: String,
    pub per_key: Vec<f64>,
    pub rate_hz: f64,
}

pub fn attention_profile(rec: &AttentionRecord, rate_hz: f64) -> Result<AttentionProfile> {
    let shape = rec.weights.shape();
    if shape.len() != 3 || shape[1] != shape[2] || shape[1] == 0 {
        return Err(Error::Dimension {
            op: "attention_profile",
            left: shape.to_vec(),
            right: vec![0, 0, 0],
        });
    }
    let (h, t) = (shape[0], shape[1]);
    let mut per_key = vec![0.0; t];
    for row in rec.weights.data().chunks(t) {
        for (k, &w) in per_key.iter_mut().zip(row) {
            *k += w;
        }
    }
    per_key.iter_mut().for_each(|k| *k /= (h * t) as f64);
    Ok(AttentionProfile {
        utterance: rec.utterance.clone(),
        per_key: zscore(&per_key),
        rate_hz,
    })
}

/// Profile slice of one phoneme token, core interval plus context.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeWeights {
    pub symbol: String,
    pub weights: Vec<f64>,
}

/// For each interval, the core frames extended by `⌊context·rate⌋` frames
/// on each side, clamped to the profile.
pub fn phoneme_attention(profile: &AttentionProfile, alignment: &PhonemeAlignment, context_ms: f64) -> Vec<PhonemeWeights> {
    let t = profile.per_key.len();
    let extra = (context_ms / 1000.0 * profile.rate_hz).floor().max(0.0) as usize;
    alignment
        .intervals()
        .iter()
        .filter_map(|iv| {
            let (a, b) = core_frames(iv.start, iv.end, profile.rate_hz);
            let lo = a.saturating_sub(extra).min(t);
            let hi = (b + extra).min(t);
            (lo < hi).then(|| PhonemeWeights {
                symbol: iv.symbol.clone(),
                weights: profile.per_key[lo..hi].to_vec(),
            })
        })
        .collect()
}

/// Means over `bins` equal relative-time bins; empty bins are linearly
/// interpolated from the nearest non-empty neighbours (held at the ends).
pub fn bin_relative_time(weights: &[f64], bins: usize) -> Vec<f64> {
    let l = weights.len();
    assert!(l >= 1 && bins >= 1, "binning needs at least one frame and one bin");
    let mut sums = vec![(0.0, 0usize); bins];
    for (i, &w) in weights.iter().enumerate() {
        let b = (i * bins / l).min(bins - 1);
        sums[b].0 += w;
        sums[b].1 += 1;
    }
    let filled: Vec<(usize, f64)> = sums
        .iter()
        .enumerate()
        .filter(|(_, s)| s.1 > 0)
        .map(|(b, s)| (b, s.0 / s.1 as f64))
        .collect();
    (0..bins)
        .map(|b| {
            let right = filled.iter().position(|&(fb, _)| fb >= b).unwrap_or(filled.len() - 1);
            let (rb, rv) = filled[right];
            if rb == b || right == 0 || rb < b {
                return rv;
            }
            let (lb, lv) = filled[right - 1];
            lv + (rv - lv) * (b - lb) as f64 / (rb - lb) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffOptions {
    pub context_ms: f64,
    pub bins: usize,
    pub iterations: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for DiffOptions {
    fn default() -> Self {
        Self {
            context_ms: 25.0,
            bins: 10,
            iterations: 1000,
            seed: 0,
            level: 0.95,
        }
    }
}

/// Binned absolute attention difference of one phoneme token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDiff {
    pub utterance: String,
    pub symbol: String,
    pub manner: Manner,
    pub diff: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDiff {
    pub manner: Manner,
    pub n_tokens: usize,
    /// Per-bin mean over tokens; `None` when the class has no tokens.
    pub mean: Option<Vec<f64>>,
    pub ci: Option<Vec<BootstrapCi>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffReport {
    pub options: DiffOptions,
    pub classes: Vec<ClassDiff>,
    pub tokens: Vec<TokenDiff>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contrast {
    pub estimate: f64,
    pub ci: BootstrapCi,
}

impl DiffReport {
    pub fn class(&self, manner: Manner) -> &ClassDiff {
        self.classes.iter().find(|c| c.manner == manner).expect("every manner is reported")
    }

    /// Mean over 1-based bins `early` minus mean over bins `late`, with a
    /// bootstrap interval over the class's tokens.
    pub fn contrast(&self, manner: Manner, early: (usize, usize), late: (usize, usize)) -> Result<Contrast> {
        let bins = self.options.bins;
        for (a, b) in [early, late] {
            if a < 1 || a > b || b > bins {
                return Err(Error::Config(format!("bin range {a}..={b} outside 1..={bins}")));
            }
        }
        let tokens: Vec<&TokenDiff> = self.tokens.iter().filter(|t| t.manner == manner).collect();
        if tokens.is_empty() {
            return Err(Error::UndefinedRate(format!("no {manner} tokens")));
        }
        let value = |t: &TokenDiff| {
            let m = |(a, b): (usize, usize)| t.diff[a - 1..b].iter().sum::<f64>() / (b - a + 1) as f64;
            m(early) - m(late)
        };
        let values: Vec<f64> = tokens.iter().map(|t| value(t)).collect();
        let mean = |idx: &[usize]| Some(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64);
        let all: Vec<usize> = (0..values.len()).collect();
        Ok(Contrast {
            estimate: mean(&all).expect("non-empty"),
            ci: bootstrap_ci(values.len(), mean, self.options.iterations, self.options.seed, self.options.level)?,
        })
    }

    /// `manner,bin,mean,ci_low,ci_high,n_tokens` with 1-based bins.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("manner,bin,mean,ci_low,ci_high,n_tokens\n");
        for c in &self.classes {
            for b in 0..self.options.bins {
                match (&c.mean, &c.ci) {
                    (Some(m), Some(ci)) => {
                        let _ = writeln!(s, "{},{},{},{},{},{}", c.manner, b + 1, m[b], ci[b].low, ci[b].high, c.n_tokens);
                    }
                    _ => {
                        let _ = writeln!(s, "{},{},NA,NA,NA,0", c.manner, b + 1);
                    }
                }
            }
        }
        s
    }
}

/// Per-token `|binned_a − binned_m|`, averaged per manner class with
/// per-bin bootstrap intervals over tokens.
pub fn cross_model_difference(
    profiles_a: &[AttentionProfile],
    profiles_m: &[AttentionProfile],
    alignments: &[PhonemeAlignment],
    inventory: &PhonemeInventory,
    options: &DiffOptions,
) -> Result<DiffReport> {
    if profiles_a.len() != profiles_m.len() || profiles_a.len() != alignments.len() {
        return Err(Error::Alignment(format!(
            "{} / {} profiles for {} alignments",
            profiles_a.len(),
            profiles_m.len(),
            alignments.len()
        )));
    }
    let mut tokens = Vec::new();
    for ((a, m), al) in profiles_a.iter().zip(profiles_m).zip(alignments) {
        if a.rate_hz != m.rate_hz || a.per_key.len() != m.per_key.len() {
            return Err(Error::Alignment(format!(
                "{}: profiles differ in frame rate ({} vs {} Hz) or length ({} vs {})",
                a.utterance,
                a.rate_hz,
                m.rate_hz,
                a.per_key.len(),
                m.per_key.len()
            )));
        }
        let wa = phoneme_attention(a, al, options.context_ms);
        let wm = phoneme_attention(m, al, options.context_ms);
        for (x, y) in wa.iter().zip(&wm) {
            let phoneme = inventory
                .get(&x.symbol)
                .ok_or_else(|| Error::Alignment(format!("symbol {:?} is not in the inventory", x.symbol)))?;
            let (bx, by) = (bin_relative_time(&x.weights, options.bins), bin_relative_time(&y.weights, options.bins));
            tokens.push(TokenDiff {
                utterance: a.utterance.clone(),
                symbol: x.symbol.clone(),
                manner: phoneme.manner,
                diff: bx.iter().zip(&by).map(|(p, q)| (p - q).abs()).collect(),
            });
        }
    }
    let mut classes = Vec::new();
    for manner in Manner::ALL {
        let members: Vec<&TokenDiff> = tokens.iter().filter(|t| t.manner == manner).collect();
        if members.is_empty() {
            classes.push(ClassDiff {
                manner,
                n_tokens: 0,
                mean: None,
                ci: None,
            });
            continue;
        }
        let n = members.len();
        let mean: Vec<f64> = (0..options.bins)
            .map(|b| members.iter().map(|t| t.diff[b]).sum::<f64>() / n as f64)
            .collect();
        let ci = (0..options.bins)
            .map(|b| {
                bootstrap_ci(
                    n,
                    |idx| Some(idx.iter().map(|&i| members[i].diff[b]).sum::<f64>() / idx.len() as f64),
                    options.iterations,
                    options.seed,
                    options.level,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassDiff {
            manner,
            n_tokens: n,
            mean: Some(mean),
            ci: Some(ci),
        });
    }
    Ok(DiffReport {
        options: options.clone(),
        classes,
        tokens,
    })
}

/// `symbol,utterance,x,y`
pub fn projection_csv(embeddings: &[PhonemeEmbedding], coords: &Tensor) -> String {
    let mut s = String::from("symbol,utterance,x,y\n");
    for (i, e) in embeddings.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", e.symbol, e.utterance, coords.at2(i, 0), coords.at2(i, 1));
    }
    s
}
