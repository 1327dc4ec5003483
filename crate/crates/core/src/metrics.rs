//! Phoneme error rates: Levenshtein alignment, overall / per-phoneme /
//! per-class rates, and percentile bootstrap intervals over utterances.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Manner, Place, PhonemeInventory};
use crate::ctc::LabelSequence;
use crate::error::{Error, Result};

pub const DEFAULT_BOOTSTRAP_ITERATIONS: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

/// Unit-cost Levenshtein table, `(n + 1) × (m + 1)` row-major.
fn table(r: &[usize], h: &[usize]) -> Vec<usize> {
    let m = h.len() + 1;
    let mut d = vec![0; (r.len() + 1) * m];
    for j in 0..m {
        d[j] = j;
    }
    for i in 1..=r.len() {
        d[i * m] = i;
        for j in 1..m {
            let sub = d[(i - 1) * m + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i * m + j] = sub.min(d[(i - 1) * m + j] + 1).min(d[i * m + j - 1] + 1);
        }
    }
    d
}

/// Backtrace from the end; each step reports `(ref index, op)` with ops
/// preferred in the order substitution/match, deletion, insertion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Match,
    Substitution,
    Deletion,
    Insertion,
}

fn backtrace(r: &[usize], h: &[usize]) -> Vec<(Option<usize>, Step)> {
    let d = table(r, h);
    let m = h.len() + 1;
    let (mut i, mut j) = (r.len(), h.len());
    let mut steps = Vec::new();
    while i > 0 || j > 0 {
        let here = d[i * m + j];
        if i > 0 && j > 0 {
            let same = r[i - 1] == h[j - 1];
            if d[(i - 1) * m + j - 1] + usize::from(!same) == here {
                steps.push((Some(i - 1), if same { Step::Match } else { Step::Substitution }));
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * m + j] + 1 == here {
            steps.push((Some(i - 1), Step::Deletion));
            i -= 1;
        } else {
            steps.push((None, Step::Insertion));
            j -= 1;
        }
    }
    steps.reverse();
    steps
}

pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> EditCounts {
    let mut c = EditCounts::default();
    for (_, step) in backtrace(reference, hypothesis) {
        match step {
            Step::Match => {}
            Step::Substitution => c.substitutions += 1,
            Step::Deletion => c.deletions += 1,
            Step::Insertion => c.insertions += 1,
        }
    }
    c.distance = c.substitutions + c.deletions + c.insertions;
    c
}

fn check_pairs(refs: &[LabelSequence], hyps: &[LabelSequence]) -> Result<()> {
    if refs.len() != hyps.len() {
        return Err(Error::Config(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    Ok(())
}

/// Σ edit distance / Σ reference length.
pub fn per(refs: &[LabelSequence], hyps: &[LabelSequence]) -> Result<f64> {
    check_pairs(refs, hyps)?;
    let errors: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r.as_slice(), h.as_slice()).distance)
        .sum();
    let total: usize = refs.iter().map(LabelSequence::len).sum();
    if total == 0 {
        return Err(Error::UndefinedRate("every reference is empty".into()));
    }
    Ok(errors as f64 / total as f64)
}

/// How errors are charged to a target phoneme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Attribution {
    /// The whole utterance's edit distance counts for every phoneme it contains.
    #[default]
    WholeSequence,
    /// Only substitutions and deletions of the target's own reference tokens count.
    Aligned,
}

/// Per-utterance sufficient statistics for phoneme-level rates.
#[derive(Clone, Debug)]
struct UttStats {
    distance: usize,
    ref_len: usize,
    /// label → (occurrences in ref, aligned errors on those tokens)
    counts: BTreeMap<usize, (usize, usize)>,
}

fn utt_stats(r: &[usize], h: &[usize]) -> UttStats {
    let steps = backtrace(r, h);
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &l in r {
        counts.entry(l).or_default().0 += 1;
    }
    let mut distance = 0;
    for (i, step) in steps {
        if step != Step::Match {
            distance += 1;
        }
        if let (Some(i), Step::Substitution | Step::Deletion) = (i, step) {
            counts.get_mut(&r[i]).expect("ref token").1 += 1;
        }
    }
    UttStats {
        distance,
        ref_len: r.len(),
        counts,
    }
}

/// Rate for a set of targets over the utterances `idx` (with repetition).
fn set_rate(stats: &[UttStats], idx: impl Iterator<Item = usize>, targets: &[usize], mode: Attribution) -> Option<f64> {
    let (mut num, mut den) = (0usize, 0usize);
    for i in idx {
        let s = &stats[i];
        let occ: usize = targets.iter().filter_map(|t| s.counts.get(t)).map(|c| c.0).sum();
        if occ == 0 {
            continue;
        }
        den += occ;
        num += match mode {
            Attribution::WholeSequence => s.distance,
            Attribution::Aligned => targets.iter().filter_map(|t| s.counts.get(t)).map(|c| c.1).sum(),
        };
    }
    (den > 0).then(|| num as f64 / den as f64)
}

fn overall_rate(stats: &[UttStats], idx: impl Iterator<Item = usize>) -> Option<f64> {
    let (mut num, mut den) = (0usize, 0usize);
    for i in idx {
        num += stats[i].distance;
        den += stats[i].ref_len;
    }
    (den > 0).then(|| num as f64 / den as f64)
}

fn all_stats(refs: &[LabelSequence], hyps: &[LabelSequence]) -> Vec<UttStats> {
    refs.iter().zip(hyps).map(|(r, h)| utt_stats(r.as_slice(), h.as_slice())).collect()
}

/// Σ edit distance over utterances containing `target` ÷ occurrences of
/// `target` in them; `None` when the target never occurs.
pub fn per_phoneme(refs: &[LabelSequence], hyps: &[LabelSequence], target: usize) -> Result<Option<f64>> {
    per_phoneme_set(refs, hyps, &[target], Attribution::WholeSequence)
}

/// [`per_phoneme`] generalized to a set of targets and an attribution mode.
pub fn per_phoneme_set(refs: &[LabelSequence], hyps: &[LabelSequence], targets: &[usize], mode: Attribution) -> Result<Option<f64>> {
    check_pairs(refs, hyps)?;
    let stats = all_stats(refs, hyps);
    Ok(set_rate(&stats, 0..stats.len(), targets, mode))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ClassAxis {
    Manner,
    Place,
}

impl ClassAxis {
    pub fn name(self) -> &'static str {
        match self {
            ClassAxis::Manner => "manner",
            ClassAxis::Place => "place",
        }
    }

    /// Class names in a fixed order.
    pub fn classes(self) -> Vec<&'static str> {
        match self {
            ClassAxis::Manner => Manner::ALL.iter().map(|m| m.name()).collect(),
            ClassAxis::Place => Place::ALL.iter().map(|p| p.name()).collect(),
        }
    }

    fn of(self, inventory: &PhonemeInventory, label: usize) -> &'static str {
        let p = inventory.by_label(label).expect("label in inventory");
        match self {
            ClassAxis::Manner => p.manner.name(),
            ClassAxis::Place => p.place.name(),
        }
    }
}

/// Unweighted mean of the defined rates of each class's members.
/// `rates[i]` belongs to label `i + 1`.
pub fn per_class(rates: &[Option<f64>], inventory: &PhonemeInventory, axis: ClassAxis) -> Vec<(&'static str, Option<f64>)> {
    axis.classes()
        .into_iter()
        .map(|class| {
            let members: Vec<f64> = rates
                .iter()
                .enumerate()
                .filter(|(i, _)| axis.of(inventory, i + 1) == class)
                .filter_map(|(_, r)| *r)
                .collect();
            let mean = (!members.is_empty()).then(|| members.iter().sum::<f64>() / members.len() as f64);
            (class, mean)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    /// Replicates on which the statistic was undefined.
    pub dropped: usize,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over `n` items: replicate `r` draws `n` indices
/// with replacement from a generator seeded with `seed + r`.
pub fn bootstrap_ci<F>(n: usize, statistic: F, iterations: usize, seed: u64, level: f64) -> Result<BootstrapCi>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if n == 0 {
        return Err(Error::Config("bootstrap needs at least one item".into()));
    }
    if iterations == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("bootstrap needs iterations ≥ 1 and level in (0, 1), got {iterations}, {level}")));
    }
    let mut values = Vec::with_capacity(iterations);
    let mut idx = vec![0; n];
    for r in 0..iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        for x in idx.iter_mut() {
            *x = rng.random_range(0..n);
        }
        if let Some(v) = statistic(&idx) {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(Error::UndefinedRate("statistic undefined on every bootstrap replicate".into()));
    }
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        low: quantile(&values, tail),
        high: quantile(&values, 1.0 - tail),
        dropped: iterations - values.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub scope: &'static str,
    pub key: String,
    pub rate: Option<f64>,
    pub ci: Option<BootstrapCi>,
    /// Utterances (overall), reference tokens (phoneme, class).
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerReport {
    pub overall_per: f64,
    pub rows: Vec<ReportRow>,
    pub n_utterances: usize,
    pub bootstrap_iterations: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportOptions {
    pub iterations: usize,
    pub seed: u64,
    pub level: f64,
    pub attribution: Attribution,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_BOOTSTRAP_ITERATIONS,
            seed: 0,
            level: 0.95,
            attribution: Attribution::WholeSequence,
        }
    }
}

impl PerReport {
    pub fn build(refs: &[LabelSequence], hyps: &[LabelSequence], inventory: &PhonemeInventory, opts: ReportOptions) -> Result<Self> {
        let overall_per = per(refs, hyps)?;
        let stats = all_stats(refs, hyps);
        let n = stats.len();
        let ci = |f: &dyn Fn(&[usize]) -> Option<f64>| bootstrap_ci(n, f, opts.iterations, opts.seed, opts.level).ok();
        let mut rows = vec![ReportRow {
            scope: "overall",
            key: "all".into(),
            rate: Some(overall_per),
            ci: ci(&|idx| overall_rate(&stats, idx.iter().copied())),
            n,
        }];

        let labels: Vec<usize> = (1..=inventory.len()).collect();
        let occurrences = |l: usize| stats.iter().filter_map(|s| s.counts.get(&l)).map(|c| c.0).sum::<usize>();
        let rates: Vec<Option<f64>> = labels
            .iter()
            .map(|&l| set_rate(&stats, 0..n, &[l], opts.attribution))
            .collect();
        for (&l, &rate) in labels.iter().zip(&rates) {
            rows.push(ReportRow {
                scope: "phoneme",
                key: inventory.by_label(l).expect("label").symbol.clone(),
                rate,
                ci: rate.and_then(|_| ci(&|idx| set_rate(&stats, idx.iter().copied(), &[l], opts.attribution))),
                n: occurrences(l),
            });
        }
        for axis in [ClassAxis::Manner, ClassAxis::Place] {
            for (class, rate) in per_class(&rates, inventory, axis) {
                let members: Vec<usize> = labels.iter().copied().filter(|&l| axis.of(inventory, l) == class).collect();
                let class_stat = |idx: &[usize]| {
                    let r: Vec<f64> = members
                        .iter()
                        .filter_map(|&l| set_rate(&stats, idx.iter().copied(), &[l], opts.attribution))
                        .collect();
                    (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
                };
                rows.push(ReportRow {
                    scope: axis.name(),
                    key: class.to_string(),
                    rate,
                    ci: rate.and_then(|_| ci(&class_stat)),
                    n: members.iter().map(|&l| occurrences(l)).sum(),
                });
            }
        }
        Ok(Self {
            overall_per,
            rows,
            n_utterances: n,
            bootstrap_iterations: opts.iterations,
            seed: opts.seed,
        })
    }

    pub fn row(&self, scope: &str, key: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.scope == scope && r.key == key)
    }

    /// `scope,key,rate,ci_low,ci_high,n`; undefined values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut s = String::from("scope,key,rate,ci_low,ci_high,n\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.scope,
                r.key,
                fmt(r.rate),
                fmt(r.ci.map(|c| c.low)),
                fmt(r.ci.map(|c| c.high)),
                r.n
            );
        }
        s
    }
}

/// Bootstrap CI of the rate over a set of target phonemes.
pub fn per_phoneme_set_ci(
    refs: &[LabelSequence],
    hyps: &[LabelSequence],
    targets: &[usize],
    mode: Attribution,
    iterations: usize,
    seed: u64,
    level: f64,
) -> Result<BootstrapCi> {
    check_pairs(refs, hyps)?;
    let stats = all_stats(refs, hyps);
    bootstrap_ci(stats.len(), |idx| set_rate(&stats, idx.iter().copied(), targets, mode), iterations, seed, level)
}

#[cfg(test)]
mod tests;
