//! `analyze` command: latent projections, attention profiles and the
//! cross-model attention difference.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use mmphone::corpus::{Chunk, Corpus, Manner};
use mmphone::interpret::{
    attention_profile, cross_model_difference, extract_phoneme_latents, projection_csv, silhouette_score, tsne,
    AttentionProfile, DiffOptions, DiffReport, PhonemeEmbedding, TsneConfig,
};
use mmphone::model::{Capture, Checkpoint, Mode};
use mmphone::Tensor;

use crate::config::{AnalysisConfig, ExperimentConfig};
use crate::{check_vocabulary, checkpoint_modality, load_checkpoint, load_corpus, prepare_out_dir, svg, usage, write};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyzeMode {
    Latents,
    Attention,
    Diff,
}

impl FromStr for AnalyzeMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latents" => Ok(Self::Latents),
            "attention" => Ok(Self::Attention),
            "diff" => Ok(Self::Diff),
            _ => Err(usage(format!("unknown analysis mode {s:?} (expected latents, attention or diff)"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AnalyzeSummary {
    pub files: Vec<PathBuf>,
    /// Latents mode: silhouette of each projection against manner classes.
    pub silhouettes: Vec<(String, Option<f64>)>,
    /// Diff mode.
    pub diff: Option<DiffReport>,
}

struct Loaded {
    tag: String,
    ckpt: Checkpoint,
}

/// Distinct file tags: the modality name, suffixed with its position when repeated.
fn tags(ckpts: &[Checkpoint]) -> Result<Vec<String>> {
    let names: Vec<String> = ckpts
        .iter()
        .map(|c| checkpoint_modality(c).map(|m| m.name().to_string()))
        .collect::<Result<_>>()?;
    Ok(names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if names.iter().filter(|m| *m == n).count() > 1 {
                format!("{n}{}", i + 1)
            } else {
                n.clone()
            }
        })
        .collect())
}

fn frame_rate(chunk: &Chunk) -> f64 {
    chunk.video.rate_hz
}

pub fn analyze(
    cfg: &ExperimentConfig,
    seed: u64,
    corpus_dir: &Path,
    checkpoints: &[PathBuf],
    mode: AnalyzeMode,
    out: &Path,
    force: bool,
) -> Result<AnalyzeSummary> {
    if checkpoints.is_empty() {
        return Err(usage("analyze needs at least one checkpoint"));
    }
    if mode == AnalyzeMode::Diff && checkpoints.len() != 2 {
        return Err(usage(format!(
            "diff mode compares exactly two checkpoints (audio,multimodal); got {}",
            checkpoints.len()
        )));
    }
    let corpus = load_corpus(corpus_dir)?;
    let ckpts: Vec<Checkpoint> = checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<_>>()?;
    for c in &ckpts {
        check_vocabulary(c, &corpus)?;
    }
    let loaded: Vec<Loaded> = tags(&ckpts)?
        .into_iter()
        .zip(ckpts)
        .map(|(tag, ckpt)| Loaded { tag, ckpt })
        .collect();
    prepare_out_dir(out, force, &[])?;
    match mode {
        AnalyzeMode::Latents => latents(&cfg.analysis, seed, &corpus, &loaded, out),
        AnalyzeMode::Attention => attention(&cfg.analysis, &corpus, &loaded, out),
        AnalyzeMode::Diff => diff(&cfg.analysis, seed, &corpus, &loaded, out),
    }
}

fn latents(a: &AnalysisConfig, seed: u64, corpus: &Corpus, models: &[Loaded], out: &Path) -> Result<AnalyzeSummary> {
    let mut summary = AnalyzeSummary::default();
    let manners: Vec<String> = Manner::ALL.iter().map(|m| m.name().to_string()).collect();
    for m in models {
        let modality = checkpoint_modality(&m.ckpt)?;
        let mut embeddings: Vec<PhonemeEmbedding> = Vec::new();
        for chunk in &corpus.test {
            if a.max_tokens.is_some_and(|n| embeddings.len() >= n) {
                break;
            }
            let x = chunk.features(modality)?;
            let inf = m.ckpt.model.forward(&chunk.id, &x.frames, Mode::Eval, Capture { latents: true, attention: false })?;
            let rec = inf.latents.first().ok_or_else(|| usage("model has no Conformer layers to take latents from"))?;
            embeddings.extend(extract_phoneme_latents(rec, &chunk.alignment, frame_rate(chunk))?);
        }
        if let Some(n) = a.max_tokens {
            embeddings.truncate(n);
        }
        if embeddings.len() < 2 {
            return Err(usage("too few phoneme tokens for a projection"));
        }
        let width = embeddings[0].vector.len();
        let data: Vec<f64> = embeddings.iter().flat_map(|e| e.vector.iter().copied()).collect();
        let x = Tensor::new(vec![embeddings.len(), width], data)?;
        let res = tsne(
            &x,
            &TsneConfig {
                perplexity: a.perplexity,
                iterations: a.tsne_iterations,
                seed,
                ..TsneConfig::default()
            },
        )?;
        if let Some(w) = &res.warning {
            eprintln!("{}: {w}", m.tag);
        }
        let classes: Vec<usize> = embeddings
            .iter()
            .map(|e| {
                let manner = corpus.inventory.get(&e.symbol).expect("vocabulary checked").manner;
                Manner::ALL.iter().position(|&x| x == manner).expect("manner listed")
            })
            .collect();
        let distinct = classes.iter().collect::<std::collections::BTreeSet<_>>().len();
        let sil = if distinct >= 2 { Some(silhouette_score(&res.coords, &classes)?) } else { None };
        summary.silhouettes.push((m.tag.clone(), sil));

        let csv = out.join(format!("latents_{}.csv", m.tag));
        write(&csv, &projection_csv(&embeddings, &res.coords))?;
        let points: Vec<(f64, f64, usize)> = (0..embeddings.len())
            .map(|i| (res.coords.at2(i, 0), res.coords.at2(i, 1), classes[i]))
            .collect();
        let fig = out.join(format!("latents_{}.svg", m.tag));
        write(&fig, &svg::scatter(&format!("{} latents by manner", m.tag), &points, &manners))?;
        summary.files.extend([csv, fig]);
    }
    Ok(summary)
}

/// Head-averaged attention of the configured layer for every test utterance.
fn attention_maps(a: &AnalysisConfig, corpus: &Corpus, ckpt: &Checkpoint) -> Result<Vec<(AttentionProfile, Tensor)>> {
    let modality = checkpoint_modality(ckpt)?;
    let layers = ckpt.model.config.num_layers;
    if layers == 0 {
        return Err(usage("model has no attention layers"));
    }
    let layer = a.attention_layer.unwrap_or(layers - 1);
    if layer >= layers {
        return Err(usage(format!("attention_layer {layer} but the model has {layers} layers")));
    }
    corpus
        .test
        .iter()
        .map(|chunk| {
            let x = chunk.features(modality)?;
            let inf = ckpt.model.forward(&chunk.id, &x.frames, Mode::Eval, Capture { attention: true, latents: false })?;
            let rec = inf.attention.into_iter().find(|r| r.layer == layer).expect("every layer is captured");
            let profile = attention_profile(&rec, frame_rate(chunk))?;
            let (h, t) = (rec.weights.shape()[0], rec.weights.shape()[1]);
            let mut mean = vec![0.0; t * t];
            for head in rec.weights.data().chunks(t * t) {
                for (m, w) in mean.iter_mut().zip(head) {
                    *m += w / h as f64;
                }
            }
            Ok((profile, Tensor::new(vec![t, t], mean)?))
        })
        .collect()
}

fn attention(a: &AnalysisConfig, corpus: &Corpus, models: &[Loaded], out: &Path) -> Result<AnalyzeSummary> {
    let mut summary = AnalyzeSummary::default();
    let wanted: Vec<String> = if a.heatmap_utterances.is_empty() {
        corpus.test.first().map(|c| vec![c.id.clone()]).unwrap_or_default()
    } else {
        a.heatmap_utterances.clone()
    };
    for id in &wanted {
        if !corpus.test.iter().any(|c| &c.id == id) {
            return Err(usage(format!("heatmap utterance {id} is not in the test split")));
        }
    }
    for m in models {
        let maps = attention_maps(a, corpus, &m.ckpt)?;
        let mut csv = String::from("utterance,frame,time_s,weight\n");
        for (p, _) in &maps {
            for (f, w) in p.per_key.iter().enumerate() {
                let _ = writeln!(csv, "{},{},{},{}", p.utterance, f, f as f64 / p.rate_hz, w);
            }
        }
        let path = out.join(format!("attention_{}.csv", m.tag));
        write(&path, &csv)?;
        summary.files.push(path);
        for id in &wanted {
            let (_, map) = maps.iter().find(|(p, _)| &p.utterance == id).expect("checked above");
            let t = map.rows();
            let fig = out.join(format!("attention_{}_{id}.svg", m.tag));
            write(&fig, &svg::heatmap(&format!("{} attention, {id}", m.tag), "key frame", "query frame", t, t, map.data()))?;
            summary.files.push(fig);
        }
    }
    Ok(summary)
}

fn diff(a: &AnalysisConfig, seed: u64, corpus: &Corpus, models: &[Loaded], out: &Path) -> Result<AnalyzeSummary> {
    let profiles = |m: &Loaded| -> Result<Vec<AttentionProfile>> {
        Ok(attention_maps(a, corpus, &m.ckpt)
            .with_context(|| format!("attention of the {} model", m.tag))?
            .into_iter()
            .map(|(p, _)| p)
            .collect())
    };
    let (pa, pm) = (profiles(&models[0])?, profiles(&models[1])?);
    let alignments: Vec<_> = corpus.test.iter().map(|c| c.alignment.clone()).collect();
    let report = cross_model_difference(
        &pa,
        &pm,
        &alignments,
        &corpus.inventory,
        &DiffOptions {
            context_ms: a.context_ms,
            bins: a.bins,
            iterations: a.bootstrap_iterations,
            seed,
            level: 0.95,
        },
    )?;
    let mut summary = AnalyzeSummary::default();
    let csv = out.join("diff.csv");
    write(&csv, &report.to_csv())?;

    let mut contrast = String::from("manner,early_mean_minus_late_mean,ci_low,ci_high,n_tokens\n");
    for c in &report.classes {
        if c.n_tokens == 0 {
            let _ = writeln!(contrast, "{},NA,NA,NA,0", c.manner);
            continue;
        }
        let k = report.contrast(c.manner, a.early_bins, a.late_bins)?;
        let _ = writeln!(contrast, "{},{},{},{},{}", c.manner, k.estimate, k.ci.low, k.ci.high, c.n_tokens);
    }
    let contrast_path = out.join("diff_contrast.csv");
    write(&contrast_path, &contrast)?;

    let present: Vec<_> = report.classes.iter().filter(|c| c.mean.is_some()).collect();
    let series: Vec<(String, Vec<f64>)> = present
        .iter()
        .map(|c| (c.manner.to_string(), c.mean.clone().expect("filtered")))
        .collect();
    let title = format!("|{} - {}| attention by relative time", models[0].tag, models[1].tag);
    let lines = out.join("diff.svg");
    write(&lines, &svg::lines(&title, "relative-time bin", "mean |difference|", &series))?;
    let grid: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let heat = out.join("diff_heatmap.svg");
    write(&heat, &svg::heatmap(&title, "relative-time bin", "manner class", series.len(), a.bins, &grid))?;
    summary.files.extend([csv, contrast_path, lines, heat]);
    summary.diff = Some(report);
    Ok(summary)
}
