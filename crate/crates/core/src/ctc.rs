//! Connectionist temporal classification: log-space forward–backward loss
//! with its analytic gradient, greedy decoding and a path-enumeration oracle.
//!
//! The blank symbol is always index 0; phoneme labels are `1..=vocab`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SeqLayout, Tape, Tensor, Var};

pub const BLANK: usize = 0;

/// Longest input the brute-force oracle will enumerate.
pub const BRUTEFORCE_MAX_FRAMES: usize = 12;

/// Ordered phoneme indices, never containing the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.contains(&BLANK) {
            return Err(Error::Config("label sequences cannot contain the blank index 0".into()));
        }
        Ok(Self(labels))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of adjacent equal labels; each forces a blank between them.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Fewest frames that can emit this sequence.
    pub fn min_frames(&self) -> usize {
        self.len() + self.adjacent_repeats()
    }
}

impl TryFrom<Vec<usize>> for LabelSequence {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelSequence> for Vec<usize> {
    fn from(l: LabelSequence) -> Self {
        l.0
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

fn extended(labels: &LabelSequence) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels.as_slice() {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

fn check_inputs(frames: usize, classes: usize, labels: &LabelSequence) -> Result<()> {
    if let Some(&bad) = labels.as_slice().iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("label {bad} outside a vocabulary of {classes} classes")));
    }
    if frames == 0 || frames < labels.min_frames() {
        return Err(Error::InfeasibleAlignment {
            frames,
            labels: labels.len(),
            repeats: labels.adjacent_repeats(),
        });
    }
    Ok(())
}

/// Log forward variables `ln α_t(s)` over the blank-interleaved label
/// sequence, for `log_probs` stored row-major as `frames × classes`.
pub fn forward_variables(log_probs: &[f64], frames: usize, classes: usize, labels: &LabelSequence) -> Result<Vec<Vec<f64>>> {
    check_inputs(frames, classes, labels)?;
    let ext = extended(labels);
    let s_len = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    alpha[0][0] = log_probs[ext[0]];
    if s_len > 1 {
        alpha[0][1] = log_probs[ext[1]];
    }
    for t in 1..frames {
        let row = &log_probs[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let prev = &alpha[t - 1];
            let stay = prev[s];
            let step = if s >= 1 { prev[s - 1] } else { f64::NEG_INFINITY };
            let skip = if can_skip(&ext, s) { prev[s - 2] } else { f64::NEG_INFINITY };
            let acc = lse3(stay, step, skip);
            alpha[t][s] = if acc == f64::NEG_INFINITY { acc } else { acc + row[ext[s]] };
        }
    }
    Ok(alpha)
}

/// Negative log-likelihood of `labels` and its gradient with respect to every
/// entry of `log_probs` (treated as free inputs).
pub fn ctc_forward_backward(log_probs: &[f64], frames: usize, classes: usize, labels: &LabelSequence) -> Result<(f64, Vec<f64>)> {
    let alpha = forward_variables(log_probs, frames, classes, labels)?;
    let ext = extended(labels);
    let s_len = ext.len();
    let last = &alpha[frames - 1];
    let log_p = if s_len > 1 { lse2(last[s_len - 1], last[s_len - 2]) } else { last[0] };
    if !log_p.is_finite() {
        return Err(Error::Numeric(format!("CTC likelihood underflowed ({log_p})")));
    }

    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    let lrow = &log_probs[(frames - 1) * classes..frames * classes];
    beta[frames - 1][s_len - 1] = lrow[ext[s_len - 1]];
    if s_len > 1 {
        beta[frames - 1][s_len - 2] = lrow[ext[s_len - 2]];
    }
    for t in (0..frames - 1).rev() {
        let row = &log_probs[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let next = &beta[t + 1];
            let stay = next[s];
            let step = if s + 1 < s_len { next[s + 1] } else { f64::NEG_INFINITY };
            let skip = if s + 2 < s_len && can_skip(&ext, s + 2) { next[s + 2] } else { f64::NEG_INFINITY };
            let acc = lse3(stay, step, skip);
            beta[t][s] = if acc == f64::NEG_INFINITY { acc } else { acc + row[ext[s]] };
        }
    }

    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        let row = &log_probs[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let ab = alpha[t][s] + beta[t][s];
            if ab == f64::NEG_INFINITY {
                continue;
            }
            let k = ext[s];
            grad[t * classes + k] -= (ab - row[k] - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// Per-utterance CTC losses `[batch]` for a padded batch of log-probabilities
/// `[batch·t_max, classes]`. Differentiable with respect to `log_probs`.
pub fn ctc_loss_batch(tape: &mut Tape, log_probs: Var, labels: &[LabelSequence], layout: &SeqLayout) -> Result<Var> {
    let lp = tape.value(log_probs);
    if lp.rank() != 2 || lp.rows() != layout.rows() || labels.len() != layout.batch_size() {
        return Err(Error::Dimension {
            op: "ctc_loss_batch",
            left: lp.shape().to_vec(),
            right: vec![layout.batch_size(), layout.t_max, labels.len()],
        });
    }
    let classes = lp.cols();
    let block = layout.t_max * classes;
    let mut losses = Vec::with_capacity(labels.len());
    let mut local = vec![0.0; lp.numel()];
    for (b, (lab, &len)) in labels.iter().zip(&layout.lengths).enumerate() {
        let rows = &lp.data()[b * block..b * block + len * classes];
        let (loss, grad) = ctc_forward_backward(rows, len, classes, lab)?;
        losses.push(loss);
        local[b * block..b * block + len * classes].copy_from_slice(&grad);
    }
    Ok(tape.grouped(log_probs, losses, local, layout.t_max))
}

/// CTC loss of one utterance, `log_probs` being `T × classes`. The result has
/// shape `[1]`.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, labels: &LabelSequence) -> Result<Var> {
    let frames = tape.value(log_probs).rows();
    ctc_loss_batch(tape, log_probs, std::slice::from_ref(labels), &SeqLayout::single(frames))
}

/// Removes adjacent repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Probability of `labels` by summing over every frame-label path whose
/// collapse equals `labels`. `probs` is `T × classes` (plain probabilities).
pub fn ctc_bruteforce(probs: &Tensor, labels: &LabelSequence) -> Result<f64> {
    let frames = probs.rows();
    if frames > BRUTEFORCE_MAX_FRAMES {
        return Err(Error::EnumerationBound {
            frames,
            bound: BRUTEFORCE_MAX_FRAMES,
        });
    }
    let classes = probs.cols();
    let target = labels.as_slice();
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    // odometer over all classes^frames paths
    loop {
        if collapse(&path) == target {
            total += path.iter().enumerate().map(|(t, &k)| probs.at2(t, k)).product::<f64>();
        }
        let mut t = 0;
        loop {
            if t == frames {
                return Ok(total);
            }
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

/// Per-frame argmax (ties to the lowest index), then [`collapse`].
pub fn greedy_decode(log_probs: &Tensor) -> LabelSequence {
    let classes = log_probs.cols();
    let path: Vec<usize> = log_probs
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    LabelSequence(collapse(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(v: &[usize]) -> LabelSequence {
        LabelSequence::new(v.to_vec()).unwrap()
    }

    fn random_log_probs(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Tensor {
        let mut data = Vec::with_capacity(frames * classes);
        for _ in 0..frames {
            let row: Vec<f64> = (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lse = row.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        Tensor::new(vec![frames, classes], data).unwrap()
    }

    fn loss_of(lp: &Tensor, lab: &LabelSequence) -> Result<f64> {
        Ok(ctc_forward_backward(lp.data(), lp.rows(), lp.cols(), lab)?.0)
    }

    #[test]
    fn single_frame_single_label() {
        let lp = Tensor::new(vec![1, 3], vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]).unwrap();
        let loss = loss_of(&lp, &labels(&[2])).unwrap();
        assert!((loss + 0.3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_uniform_matches_hand_enumeration() {
        let lp = Tensor::full(&[2, 2], 0.5f64.ln());
        let loss = loss_of(&lp, &labels(&[1])).unwrap();
        assert!((loss - 0.287682).abs() < 1e-6);
        assert!((loss + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_lengths_are_errors() {
        let lp = Tensor::full(&[2, 3], (1.0f64 / 3.0).ln());
        assert!(matches!(loss_of(&lp, &labels(&[1, 2, 1])), Err(Error::InfeasibleAlignment { .. })));
        // a repeat needs a separating blank: [1,1] needs 3 frames
        assert!(matches!(loss_of(&lp, &labels(&[1, 1])), Err(Error::InfeasibleAlignment { repeats: 1, .. })));
        let probs = lp.map(f64::exp);
        assert_eq!(ctc_bruteforce(&probs, &labels(&[1, 2, 1])).unwrap(), 0.0);
    }

    #[test]
    fn bruteforce_edge_cases() {
        let probs = Tensor::new(vec![1, 3], vec![0.6, 0.3, 0.1]).unwrap();
        assert!((ctc_bruteforce(&probs, &labels(&[])).unwrap() - 0.6).abs() < 1e-15);
        let big = Tensor::full(&[13, 2], 0.5);
        assert!(matches!(ctc_bruteforce(&big, &labels(&[1])), Err(Error::EnumerationBound { .. })));
    }

    #[test]
    fn blank_is_not_a_label() {
        assert!(LabelSequence::new(vec![1, 0]).is_err());
        assert!(serde_json::from_str::<LabelSequence>("[0]").is_err());
    }

    #[test]
    fn matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 200 {
            let frames = rng.random_range(1..=6);
            let classes = rng.random_range(2..=5);
            let n = rng.random_range(0..=3);
            let lab = labels(&(0..n).map(|_| rng.random_range(1..classes)).collect::<Vec<_>>());
            let lp = random_log_probs(&mut rng, frames, classes);
            let p = ctc_bruteforce(&lp.map(f64::exp), &lab).unwrap();
            match loss_of(&lp, &lab) {
                Ok(loss) => {
                    assert!((loss + p.ln()).abs() < 1e-9, "loss {loss} vs {}", -p.ln());
                    checked += 1;
                }
                Err(Error::InfeasibleAlignment { .. }) => assert_eq!(p, 0.0),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let frames = rng.random_range(4..=6);
            let lab = labels(&[1, 2, 2][..rng.random_range(1..=3)]);
            let lp = random_log_probs(&mut rng, frames, 4);
            let (_, grad) = ctc_forward_backward(lp.data(), frames, 4, &lab).unwrap();
            let h = 1e-5;
            for i in 0..lp.numel() {
                let mut plus = lp.clone();
                plus.data_mut()[i] += h;
                let mut minus = lp.clone();
                minus.data_mut()[i] -= h;
                let numeric = (loss_of(&plus, &lab).unwrap() - loss_of(&minus, &lab).unwrap()) / (2.0 * h);
                let err = crate::numerics::gradcheck::rel_err(grad[i], numeric);
                assert!(err < 1e-6, "rel err {err}");
            }
        }
    }

    #[test]
    fn relabeling_leaves_loss_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let perm = [0usize, 3, 1, 2];
        for _ in 0..50 {
            let lp = random_log_probs(&mut rng, 6, 4);
            let lab = labels(&[1, 3, 3]);
            let mut permuted = lp.clone();
            for t in 0..6 {
                for k in 0..4 {
                    permuted.data_mut()[t * 4 + perm[k]] = lp.at2(t, k);
                }
            }
            let plab = labels(&lab.as_slice().iter().map(|&l| perm[l]).collect::<Vec<_>>());
            assert_eq!(loss_of(&lp, &lab).unwrap().to_bits(), loss_of(&permuted, &plab).unwrap().to_bits());
        }
    }

    #[test]
    fn forward_mass_never_exceeds_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let lp = random_log_probs(&mut rng, 6, 4);
            let alpha = forward_variables(lp.data(), 6, 4, &labels(&[2, 1])).unwrap();
            for step in alpha {
                let mass: f64 = step.iter().map(|a| a.exp()).sum();
                assert!(mass <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn tape_loss_backpropagates_through_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let a = random_log_probs(&mut rng, 5, 3);
        let b = random_log_probs(&mut rng, 3, 3);
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        data.extend(std::iter::repeat_n(-9.0, 2 * 3));
        let layout = SeqLayout::batch(vec![5, 3]);
        let mut tape = Tape::new();
        let lp = tape.param(Tensor::new(vec![10, 3], data).unwrap());
        let labs = [labels(&[1, 2]), labels(&[2])];
        let losses = ctc_loss_batch(&mut tape, lp, &labs, &layout).unwrap();
        let v = tape.value(losses).data().to_vec();
        assert!((v[0] - loss_of(&a, &labs[0]).unwrap()).abs() < 1e-12);
        assert!((v[1] - loss_of(&b, &labs[1]).unwrap()).abs() < 1e-12);
        let total = tape.sum(losses);
        tape.backward(total).unwrap();
        let g = tape.grad(lp).unwrap();
        assert!(g.data()[24..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn greedy_collapse_rules() {
        let frames = |path: &[usize]| {
            let mut data = vec![-5.0; path.len() * 3];
            for (t, &k) in path.iter().enumerate() {
                data[t * 3 + k] = 0.0;
            }
            Tensor::new(vec![path.len(), 3], data).unwrap()
        };
        assert_eq!(greedy_decode(&frames(&[1, 1, 0, 2, 2])).as_slice(), &[1, 2]);
        assert!(greedy_decode(&frames(&[0, 0, 0])).is_empty());
        assert_eq!(greedy_decode(&frames(&[1, 0, 1])).as_slice(), &[1, 1]);
        let tie = Tensor::new(vec![1, 3], vec![0.0, 0.0, -1.0]).unwrap();
        assert!(greedy_decode(&tie).is_empty());
    }
}
