//! Paired acoustic/articulatory data: feature sequences, phoneme alignments,
//! chunking of speech segments, rate matching and modality fusion, plus a
//! seeded synthetic corpus generator and the on-disk corpus format.

mod generator;
mod inventory;
mod store;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use generator::{generate_synthetic_corpus, split_train_test, GeneratorSpec};
pub use inventory::{Manner, Phoneme, PhonemeInventory, Place};
pub use store::{read_corpus, write_corpus, Corpus, CorpusManifest, ManifestChunk, Split, CORPUS_MANIFEST};

use crate::ctc::LabelSequence;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Video,
    Fused,
}

/// Which features a recognizer consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputModality {
    Audio,
    Video,
    Multimodal,
}

impl InputModality {
    pub const ALL: [InputModality; 3] = [InputModality::Audio, InputModality::Video, InputModality::Multimodal];

    pub fn name(self) -> &'static str {
        match self {
            InputModality::Audio => "audio",
            InputModality::Video => "video",
            InputModality::Multimodal => "multimodal",
        }
    }
}

impl fmt::Display for InputModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputModality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?} (audio, video or multimodal)")))
    }
}

/// A `T × D` feature matrix sampled at `rate_hz`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub rate_hz: f64,
    pub frames: Tensor,
}

impl FeatureSequence {
    pub fn new(modality: Modality, rate_hz: f64, frames: Tensor) -> Result<Self> {
        if !(rate_hz > 0.0) {
            return Err(Error::Config(format!("frame rate must be positive, got {rate_hz}")));
        }
        if frames.rank() != 2 || frames.rows() == 0 {
            return Err(Error::Config(format!("feature sequences need T ≥ 1 rows, got shape {:?}", frames.shape())));
        }
        Ok(Self { modality, rate_hz, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.frames.cols()
    }
}

/// Linear interpolation of every channel onto `target_len` frames spread
/// over the same normalized time span, endpoints preserved. The frame rate
/// scales so that total duration is unchanged.
pub fn resample_linear(x: &FeatureSequence, target_len: usize) -> Result<FeatureSequence> {
    if target_len == 0 {
        return Err(Error::Config("resample target length must be ≥ 1".into()));
    }
    let src_len = x.len();
    if target_len == src_len {
        return Ok(x.clone());
    }
    let width = x.width();
    let src = x.frames.data();
    let mut out = Vec::with_capacity(target_len * width);
    for j in 0..target_len {
        let pos = if target_len == 1 || src_len == 1 {
            0.0
        } else {
            (j * (src_len - 1)) as f64 / (target_len - 1) as f64
        };
        let i0 = (pos.floor() as usize).min(src_len - 1);
        let frac = pos - i0 as f64;
        let a = &src[i0 * width..(i0 + 1) * width];
        if frac == 0.0 || i0 + 1 == src_len {
            out.extend_from_slice(a);
        } else {
            let b = &src[(i0 + 1) * width..(i0 + 2) * width];
            out.extend(a.iter().zip(b).map(|(&u, &v)| (u + (v - u) * frac).clamp(u.min(v), u.max(v))));
        }
    }
    let rate = x.rate_hz * target_len as f64 / src_len as f64;
    FeatureSequence::new(x.modality, rate, Tensor::new(vec![target_len, width], out)?)
}

/// Frame-wise concatenation `[audio | video]` into a width-`2D` sequence.
pub fn fuse(audio: &FeatureSequence, video: &FeatureSequence) -> Result<FeatureSequence> {
    if audio.len() != video.len() {
        return Err(Error::Alignment(format!(
            "cannot fuse {} audio frames with {} video frames; resample first",
            audio.len(),
            video.len()
        )));
    }
    if audio.width() != video.width() {
        return Err(Error::Dimension {
            op: "fuse",
            left: audio.frames.shape().to_vec(),
            right: video.frames.shape().to_vec(),
        });
    }
    let d = audio.width();
    let mut data = Vec::with_capacity(audio.len() * 2 * d);
    for t in 0..audio.len() {
        data.extend_from_slice(audio.frames.row(t));
        data.extend_from_slice(video.frames.row(t));
    }
    FeatureSequence::new(Modality::Fused, video.rate_hz, Tensor::new(vec![audio.len(), 2 * d], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(String, f64, f64)", into = "(String, f64, f64)")]
pub struct Interval {
    pub symbol: String,
    pub start: f64,
    pub end: f64,
}

impl From<(String, f64, f64)> for Interval {
    fn from((symbol, start, end): (String, f64, f64)) -> Self {
        Self { symbol, start, end }
    }
}

impl From<Interval> for (String, f64, f64) {
    fn from(i: Interval) -> Self {
        (i.symbol, i.start, i.end)
    }
}

/// Time-sorted, non-overlapping phoneme intervals in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhonemeAlignment {
    intervals: Vec<Interval>,
}

impl PhonemeAlignment {
    pub fn new(intervals: Vec<Interval>) -> Result<Self> {
        for (i, iv) in intervals.iter().enumerate() {
            if !(iv.start.is_finite() && iv.end.is_finite() && iv.start >= 0.0 && iv.start < iv.end) {
                return Err(Error::Alignment(format!(
                    "interval {i} ({}, {}, {}) must satisfy 0 ≤ start < end",
                    iv.symbol, iv.start, iv.end
                )));
            }
            if i > 0 && intervals[i - 1].end > iv.start {
                return Err(Error::Alignment(format!("interval {i} overlaps or precedes interval {}", i - 1)));
            }
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn end(&self) -> f64 {
        self.intervals.last().map_or(0.0, |i| i.end)
    }

    pub fn validate_symbols(&self, inventory: &PhonemeInventory) -> Result<()> {
        for iv in &self.intervals {
            inventory.require_label(&iv.symbol)?;
        }
        Ok(())
    }

    pub fn labels(&self, inventory: &PhonemeInventory) -> Result<LabelSequence> {
        let labels = self
            .intervals
            .iter()
            .map(|iv| inventory.require_label(&iv.symbol))
            .collect::<Result<Vec<_>>>()?;
        LabelSequence::new(labels)
    }

    /// Tab-separated `symbol start end` lines.
    pub fn to_tsv(&self) -> String {
        self.intervals
            .iter()
            .map(|iv| format!("{}\t{}\t{}\n", iv.symbol, iv.start, iv.end))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut intervals = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad time {s:?}", n + 1)))
            };
            match fields.as_slice() {
                [sym, start, end] => intervals.push(Interval {
                    symbol: sym.trim().to_string(),
                    start: parse(start)?,
                    end: parse(end)?,
                }),
                _ => return Err(Error::Format(format!("line {}: expected 3 tab-separated fields", n + 1))),
            }
        }
        Self::new(intervals)
    }
}

/// One utterance of paired audio/video features with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub id: String,
    pub audio: FeatureSequence,
    pub video: FeatureSequence,
    pub alignment: PhonemeAlignment,
    pub transcript: LabelSequence,
}

impl Chunk {
    pub fn new(id: String, audio: FeatureSequence, video: FeatureSequence, alignment: PhonemeAlignment, inventory: &PhonemeInventory) -> Result<Self> {
        let transcript = alignment.labels(inventory)?;
        let chunk = Self {
            id,
            audio,
            video,
            alignment,
            transcript,
        };
        let duration = chunk.duration();
        if chunk.alignment.end() > duration + 1e-9 {
            return Err(Error::Alignment(format!(
                "chunk {}: alignment ends at {} s beyond its {} s duration",
                chunk.id,
                chunk.alignment.end(),
                duration
            )));
        }
        Ok(chunk)
    }

    /// Duration in seconds as covered by the video stream.
    pub fn duration(&self) -> f64 {
        self.video.len() as f64 / self.video.rate_hz
    }

    /// Model input at the video frame rate: audio is upsampled to the video
    /// frame count; multimodal input is `[audio | video]`.
    pub fn features(&self, modality: InputModality) -> Result<FeatureSequence> {
        let audio = || resample_linear(&self.audio, self.video.len());
        match modality {
            InputModality::Audio => audio(),
            InputModality::Video => Ok(self.video.clone()),
            InputModality::Multimodal => fuse(&audio()?, &self.video),
        }
    }

    pub fn input_width(&self, modality: InputModality) -> usize {
        match modality {
            InputModality::Audio => self.audio.width(),
            InputModality::Video => self.video.width(),
            InputModality::Multimodal => self.audio.width() + self.video.width(),
        }
    }
}

/// Groups speech segments into chunks no longer than `max_len` seconds.
///
/// Segments longer than `max_len` are first split at the latest word
/// boundary within `max_len` of the piece start (repeatedly); the resulting
/// pieces are then merged left to right while the merged span (first start
/// to last end) stays within `max_len`.
pub fn chunk_segments(segments: &[(f64, f64)], word_boundaries: &[f64], max_len: f64) -> Result<Vec<(f64, f64)>> {
    const TOL: f64 = 1e-9;
    if !(max_len > 0.0) {
        return Err(Error::Config(format!("max chunk length must be positive, got {max_len}")));
    }
    for (i, &(s, e)) in segments.iter().enumerate() {
        if !(s < e) || (i > 0 && segments[i - 1].1 > s) {
            return Err(Error::Config(format!("segments must be sorted and non-overlapping (segment {i})")));
        }
    }
    if word_boundaries.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("word boundaries must be sorted".into()));
    }

    let mut pieces = Vec::new();
    for &(start, end) in segments {
        let mut s = start;
        while end - s > max_len + TOL {
            let cut = word_boundaries
                .iter()
                .copied()
                .rfind(|&b| b > s + TOL && b < end - TOL && b <= s + max_len + TOL);
            match cut {
                Some(b) => {
                    pieces.push((s, b));
                    s = b;
                }
                None => {
                    return Err(Error::UnsplittableSegment { start, end, max_len });
                }
            }
        }
        pieces.push((s, end));
    }

    let mut chunks: Vec<(f64, f64)> = Vec::new();
    for (s, e) in pieces {
        match chunks.last_mut() {
            Some(last) if e - last.0 <= max_len + TOL => last.1 = e,
            _ => chunks.push((s, e)),
        }
    }
    Ok(chunks)
}
