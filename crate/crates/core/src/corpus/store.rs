//! Corpus directories:
//!
//! ```text
//! manifest.json               inventory, generator spec, per-chunk metadata
//! features/{id}.audio.mmt     MMT1 blobs
//! features/{id}.video.mmt
//! alignments/{id}.tsv         symbol, start_s, end_s
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Chunk, FeatureSequence, GeneratorSpec, Modality, PhonemeAlignment, PhonemeInventory};
use crate::ctc::LabelSequence;
use crate::error::{Error, Result};
use crate::numerics::io::{load_tensor, save_tensor};

pub const CORPUS_MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestChunk {
    pub id: String,
    pub split: Split,
    pub duration_s: f64,
    pub audio_rate_hz: f64,
    pub video_rate_hz: f64,
    pub audio_frames: usize,
    pub video_frames: usize,
    pub audio_file: String,
    pub video_file: String,
    pub alignment_file: String,
    pub alignment: PhonemeAlignment,
    pub transcript: LabelSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: Option<u64>,
    pub generator: Option<GeneratorSpec>,
    pub inventory: PhonemeInventory,
    pub chunks: Vec<ManifestChunk>,
}

/// An inventory with its train and test chunks.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: Option<u64>,
    pub generator: Option<GeneratorSpec>,
    pub inventory: PhonemeInventory,
    pub train: Vec<Chunk>,
    pub test: Vec<Chunk>,
}

impl Corpus {
    /// Generates and splits a synthetic corpus.
    pub fn synthetic(spec: &GeneratorSpec, seed: u64) -> Result<Self> {
        let chunks = super::generate_synthetic_corpus(spec, seed)?;
        let (train, test) = super::split_train_test(chunks, spec.train_fraction, seed)?;
        Ok(Self {
            seed: Some(seed),
            generator: Some(spec.clone()),
            inventory: spec.inventory.clone(),
            train,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[Chunk] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn total_duration(&self) -> f64 {
        self.train.iter().chain(&self.test).map(Chunk::duration).sum()
    }
}

pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("features"))?;
    fs::create_dir_all(dir.join("alignments"))?;
    let mut chunks = Vec::new();
    for (split, list) in [(Split::Train, &corpus.train), (Split::Test, &corpus.test)] {
        for c in list {
            let audio_file = format!("features/{}.audio.mmt", c.id);
            let video_file = format!("features/{}.video.mmt", c.id);
            let alignment_file = format!("alignments/{}.tsv", c.id);
            save_tensor(dir.join(&audio_file), &c.audio.frames)?;
            save_tensor(dir.join(&video_file), &c.video.frames)?;
            fs::write(dir.join(&alignment_file), c.alignment.to_tsv())?;
            chunks.push(ManifestChunk {
                id: c.id.clone(),
                split,
                duration_s: c.duration(),
                audio_rate_hz: c.audio.rate_hz,
                video_rate_hz: c.video.rate_hz,
                audio_frames: c.audio.len(),
                video_frames: c.video.len(),
                audio_file,
                video_file,
                alignment_file,
                alignment: c.alignment.clone(),
                transcript: c.transcript.clone(),
            });
        }
    }
    let manifest = CorpusManifest {
        seed: corpus.seed,
        generator: corpus.generator.clone(),
        inventory: corpus.inventory.clone(),
        chunks,
    };
    fs::write(dir.join(CORPUS_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(dir.join(CORPUS_MANIFEST))?)?;
    let mut corpus = Corpus {
        seed: manifest.seed,
        generator: manifest.generator,
        inventory: manifest.inventory,
        train: Vec::new(),
        test: Vec::new(),
    };
    for m in manifest.chunks {
        let audio = FeatureSequence::new(Modality::Audio, m.audio_rate_hz, load_tensor(dir.join(&m.audio_file))?)?;
        let video = FeatureSequence::new(Modality::Video, m.video_rate_hz, load_tensor(dir.join(&m.video_file))?)?;
        if audio.len() != m.audio_frames || video.len() != m.video_frames {
            return Err(Error::Format(format!("chunk {}: frame counts disagree with the manifest", m.id)));
        }
        let chunk = Chunk::new(m.id, audio, video, m.alignment, &corpus.inventory)?;
        if chunk.transcript != m.transcript {
            return Err(Error::Format(format!("chunk {}: transcript disagrees with its alignment", chunk.id)));
        }
        match m.split {
            Split::Train => corpus.train.push(chunk),
            Split::Test => corpus.test.push(chunk),
        }
    }
    Ok(corpus)
}
