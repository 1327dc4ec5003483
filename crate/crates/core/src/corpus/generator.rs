use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Chunk, FeatureSequence, Interval, Modality, PhonemeAlignment, PhonemeInventory};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

// Independent random streams, so that e.g. changing the lead or the video
// noise leaves the phoneme sequences and the audio untouched.
const STREAM_PROTOTYPES: u64 = 1;
const STREAM_SEQUENCES: u64 = 2;
const STREAM_AUDIO_NOISE: u64 = 3;
const STREAM_VIDEO_NOISE: u64 = 4;

/// Parameters of the synthetic paired-modality corpus.
///
/// Every phoneme gets a random acoustic and a random articulatory prototype
/// (entries drawn from N(0, 1)); a silence prototype covers the padding.
/// Audio frames show the prototype of the phoneme active at the frame time;
/// video frames show the prototype active `lead_ms` later, smoothed by a
/// centered moving average of `coarticulation_window` frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub inventory: PhonemeInventory,
    pub num_chunks: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    pub min_duration_ms: f64,
    pub max_duration_ms: f64,
    /// Silence before the first and after the last phoneme.
    pub padding_ms: f64,
    pub audio_rate_hz: f64,
    pub video_rate_hz: f64,
    pub feature_dim: usize,
    pub audio_noise: f64,
    pub video_noise: f64,
    /// Pairs whose second member reuses the first member's acoustic prototype.
    pub audio_confusable: Vec<(String, String)>,
    /// Pairs whose articulatory prototypes are pulled together.
    pub video_confusable: Vec<(String, String)>,
    /// 0 makes a video-confusable pair identical, 1 leaves it independent.
    pub video_pair_separation: f64,
    pub lead_ms: f64,
    pub coarticulation_window: usize,
    pub train_fraction: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let pairs = |v: &[(&str, &str)]| v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        Self {
            inventory: PhonemeInventory::default(),
            num_chunks: 400,
            min_phones: 5,
            max_phones: 9,
            min_duration_ms: 60.0,
            max_duration_ms: 140.0,
            padding_ms: 100.0,
            audio_rate_hz: 50.0,
            video_rate_hz: 99.0,
            feature_dim: 32,
            audio_noise: 1.0,
            video_noise: 1.0,
            audio_confusable: pairs(&[("t", "k")]),
            video_confusable: pairs(&[("p", "b"), ("t", "d"), ("k", "g"), ("s", "z"), ("ch", "jh")]),
            video_pair_separation: 0.0,
            lead_ms: 30.0,
            coarticulation_window: 5,
            train_fraction: 0.7,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.inventory.len() < 2 {
            return bad("the generator needs at least two phonemes to avoid adjacent repeats".into());
        }
        if self.min_phones == 0 || self.min_phones > self.max_phones {
            return bad(format!("phone count range {}..={} is empty", self.min_phones, self.max_phones));
        }
        if !(self.audio_rate_hz > 0.0 && self.video_rate_hz > 0.0) {
            return bad("frame rates must be positive".into());
        }
        if !(self.min_duration_ms > 0.0 && self.min_duration_ms <= self.max_duration_ms) {
            return bad(format!(
                "duration range {}..{} ms is empty",
                self.min_duration_ms, self.max_duration_ms
            ));
        }
        let slowest = self.audio_rate_hz.min(self.video_rate_hz);
        if self.min_duration_ms / 1000.0 * slowest < 1.0 {
            return bad(format!(
                "minimum phoneme duration {} ms is shorter than one frame at {slowest} Hz",
                self.min_duration_ms
            ));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be ≥ 1".into());
        }
        if !(self.audio_noise >= 0.0 && self.video_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.padding_ms >= 0.0 && self.lead_ms >= 0.0 && self.lead_ms <= self.padding_ms) {
            return bad(format!(
                "need 0 ≤ lead_ms ({}) ≤ padding_ms ({})",
                self.lead_ms, self.padding_ms
            ));
        }
        if !(0.0..=1.0).contains(&self.video_pair_separation) {
            return bad("video_pair_separation must lie in [0, 1]".into());
        }
        if self.coarticulation_window == 0 {
            return bad("coarticulation_window must be ≥ 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        for (a, b) in self.audio_confusable.iter().chain(&self.video_confusable) {
            for s in [a, b] {
                if self.inventory.label(s).is_none() {
                    return bad(format!("confusable symbol {s:?} is not in the inventory"));
                }
            }
        }
        Ok(())
    }

    /// Symbols that share an acoustic prototype with another symbol.
    pub fn audio_confusable_symbols(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (a, b) in &self.audio_confusable {
            for s in [a, b] {
                if !out.contains(s) {
                    out.push(s.clone());
                }
            }
        }
        out
    }
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Row 0 is silence, row `label` is that phoneme.
struct Prototypes {
    audio: Vec<Vec<f64>>,
    video: Vec<Vec<f64>>,
}

fn prototypes(spec: &GeneratorSpec, seed: u64) -> Prototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_PROTOTYPES);
    let n = spec.inventory.len() + 1;
    let mut audio = gaussian_rows(&mut rng, n, spec.feature_dim);
    let mut video = gaussian_rows(&mut rng, n, spec.feature_dim);
    let label = |s: &str| spec.inventory.label(s).expect("validated");
    for (a, b) in &spec.audio_confusable {
        audio[label(b)] = audio[label(a)].clone();
    }
    let sep = spec.video_pair_separation;
    for (a, b) in &spec.video_confusable {
        let (la, lb) = (label(a), label(b));
        video[lb] = video[la]
            .iter()
            .zip(&video[lb])
            .map(|(&u, &w)| u + sep * (w - u))
            .collect();
    }
    Prototypes { audio, video }
}

/// Label active at time `t`, 0 outside every interval.
fn active(intervals: &[(usize, f64, f64)], t: f64) -> usize {
    intervals
        .iter()
        .find(|&&(_, s, e)| s <= t && t < e)
        .map_or(0, |&(l, _, _)| l)
}

/// Deterministic synthetic corpus; chunk `i` has id `chunk{i:04}`.
pub fn generate_synthetic_corpus(spec: &GeneratorSpec, seed: u64) -> Result<Vec<Chunk>> {
    spec.validate()?;
    let protos = prototypes(spec, seed);
    let stream = |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    let mut seq_rng = stream(STREAM_SEQUENCES);
    let mut audio_rng = stream(STREAM_AUDIO_NOISE);
    let mut video_rng = stream(STREAM_VIDEO_NOISE);
    let d = spec.feature_dim;
    let n_phon = spec.inventory.len();
    let pad = spec.padding_ms / 1000.0;
    let lead = spec.lead_ms / 1000.0;

    let mut chunks = Vec::with_capacity(spec.num_chunks);
    for i in 0..spec.num_chunks {
        let n = seq_rng.random_range(spec.min_phones..=spec.max_phones);
        let mut intervals = Vec::with_capacity(n);
        let mut t = pad;
        let mut prev = 0;
        for _ in 0..n {
            let label = loop {
                let l = seq_rng.random_range(1..=n_phon);
                if l != prev {
                    break l;
                }
            };
            let dur = seq_rng.random_range(spec.min_duration_ms..=spec.max_duration_ms) / 1000.0;
            intervals.push((label, t, t + dur));
            t += dur;
            prev = label;
        }
        let total = t + pad;

        let audio_len = (total * spec.audio_rate_hz).ceil() as usize;
        let mut audio = Vec::with_capacity(audio_len * d);
        for f in 0..audio_len {
            let proto = &protos.audio[active(&intervals, f as f64 / spec.audio_rate_hz)];
            audio.extend(proto.iter().map(|&p| p + spec.audio_noise * audio_rng.sample::<f64, _>(StandardNormal)));
        }

        let video_len = (total * spec.video_rate_hz).ceil() as usize;
        let shown: Vec<usize> = (0..video_len)
            .map(|f| active(&intervals, f as f64 / spec.video_rate_hz + lead))
            .collect();
        let w = spec.coarticulation_window;
        let mut video = Vec::with_capacity(video_len * d);
        for f in 0..video_len {
            let lo = f.saturating_sub((w - 1) / 2);
            let hi = (f + w / 2).min(video_len - 1);
            let count = (hi - lo + 1) as f64;
            let start = video.len();
            video.resize(start + d, 0.0);
            for &l in &shown[lo..=hi] {
                for (o, &p) in video[start..].iter_mut().zip(&protos.video[l]) {
                    *o += p / count;
                }
            }
            for o in &mut video[start..] {
                *o += spec.video_noise * video_rng.sample::<f64, _>(StandardNormal);
            }
        }

        let alignment = PhonemeAlignment::new(
            intervals
                .iter()
                .map(|&(l, s, e)| Interval {
                    symbol: spec.inventory.by_label(l).expect("label in range").symbol.clone(),
                    start: s,
                    end: e,
                })
                .collect(),
        )?;
        chunks.push(Chunk::new(
            format!("chunk{i:04}"),
            FeatureSequence::new(Modality::Audio, spec.audio_rate_hz, Tensor::new(vec![audio_len, d], audio)?)?,
            FeatureSequence::new(Modality::Video, spec.video_rate_hz, Tensor::new(vec![video_len, d], video)?)?,
            alignment,
            &spec.inventory,
        )?);
    }
    Ok(chunks)
}

/// Seeded shuffle, then the first `round(fraction · n)` chunks train.
pub fn split_train_test(chunks: Vec<Chunk>, train_fraction: f64, seed: u64) -> Result<(Vec<Chunk>, Vec<Chunk>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut chunks = chunks;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chunks.shuffle(&mut rng);
    let n_train = (train_fraction * chunks.len() as f64).round() as usize;
    let test = chunks.split_off(n_train);
    Ok((chunks, test))
}
