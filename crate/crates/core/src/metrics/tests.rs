use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn ls(v: &[usize]) -> LabelSequence {
    LabelSequence::new(v.to_vec()).unwrap()
}

/// Plain exponential recursion over the three edit operations.
fn brute_distance(r: &[usize], h: &[usize]) -> usize {
    match (r, h) {
        ([], _) => h.len(),
        (_, []) => r.len(),
        ([a, rr @ ..], [b, hh @ ..]) => {
            let sub = brute_distance(rr, hh) + usize::from(a != b);
            let del = brute_distance(rr, h) + 1;
            let ins = brute_distance(r, hh) + 1;
            sub.min(del).min(ins)
        }
    }
}

fn random_seq(rng: &mut ChaCha8Rng, max_len: usize, vocab: usize) -> Vec<usize> {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| rng.random_range(1..=vocab)).collect()
}

#[test]
fn edit_distance_examples() {
    assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]).distance, 0);
    let c = edit_distance(&[1, 2, 3], &[1, 3]);
    assert_eq!((c.distance, c.deletions, c.substitutions, c.insertions), (1, 1, 0, 0));
    let c = edit_distance(&[], &[1, 2]);
    assert_eq!((c.distance, c.insertions), (2, 2));
    // Ties prefer substitution over a deletion + insertion pair.
    let c = edit_distance(&[1], &[2]);
    assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 0, 0));
    let c = edit_distance(&[1, 2], &[2, 1]);
    assert_eq!((c.distance, c.substitutions), (2, 2));
    // Then deletion over insertion.
    let c = edit_distance(&[1, 2], &[3]);
    assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 1, 0));
}

#[test]
fn per_examples() {
    let refs = [ls(&[1, 2, 3, 4])];
    assert_eq!(per(&refs, &refs).unwrap(), 0.0);
    assert_eq!(per(&refs, &[ls(&[1, 2])]).unwrap(), 0.5);
    // Empty references add their hypothesis length to the numerator only.
    assert_eq!(per(&[ls(&[1, 2]), ls(&[])], &[ls(&[1, 2]), ls(&[5])]).unwrap(), 0.5);
    assert!(matches!(per(&[ls(&[])], &[ls(&[1])]), Err(Error::UndefinedRate(_))));
    assert!(per(&refs, &[]).is_err());
}

#[test]
fn per_phoneme_examples() {
    let inv = PhonemeInventory::default();
    let (aa, t, iy, k) = (
        inv.label("aa").unwrap(),
        inv.label("t").unwrap(),
        inv.label("iy").unwrap(),
        inv.label("k").unwrap(),
    );
    let refs = [ls(&[aa, t]), ls(&[t, iy])];
    let hyps = [ls(&[aa, t]), ls(&[k, iy])];
    assert_eq!(per_phoneme(&refs, &hyps, t).unwrap(), Some(0.5));
    assert_eq!(per_phoneme(&refs, &hyps, aa).unwrap(), Some(0.0));
    assert_eq!(per_phoneme(&refs, &hyps, inv.label("m").unwrap()).unwrap(), None);
    assert_eq!(per_phoneme(&refs, &refs, t).unwrap(), Some(0.0));
    // The quoted rule charges the /t/ substitution to /iy/ as well; the
    // aligned variant does not.
    assert_eq!(per_phoneme(&refs, &hyps, iy).unwrap(), Some(1.0));
    assert_eq!(per_phoneme_set(&refs, &hyps, &[iy], Attribution::Aligned).unwrap(), Some(0.0));
    assert_eq!(per_phoneme_set(&refs, &hyps, &[t], Attribution::Aligned).unwrap(), Some(0.5));
}

#[test]
fn single_occurrence_target_errors_give_rate_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for _ in 0..20 {
        let mut r: Vec<usize> = (0..5).map(|_| rng.random_range(2..=9)).collect();
        let pos = rng.random_range(0..5);
        r[pos] = 1;
        let mut h = r.clone();
        h[pos] = 10;
        refs.push(ls(&r));
        hyps.push(ls(&h));
    }
    assert_eq!(per_phoneme(&refs, &hyps, 1).unwrap(), Some(1.0));
}

#[test]
fn per_class_examples() {
    let inv = PhonemeInventory::default();
    let mut rates = vec![None; inv.len()];
    rates[inv.label("t").unwrap() - 1] = Some(0.2);
    rates[inv.label("s").unwrap() - 1] = Some(0.4);
    rates[inv.label("y").unwrap() - 1] = Some(0.7);
    let place = per_class(&rates, &inv, ClassAxis::Place);
    let get = |v: &[(&str, Option<f64>)], k: &str| v.iter().find(|(c, _)| *c == k).unwrap().1;
    assert!((get(&place, "coronal").unwrap() - 0.3).abs() < 1e-15);
    assert_eq!(get(&place, "other"), Some(0.7));
    assert_eq!(get(&place, "labial"), None);
    let manner = per_class(&rates, &inv, ClassAxis::Manner);
    assert_eq!(get(&manner, "stop"), Some(0.2));
    assert_eq!(get(&manner, "nasal"), None);
}

#[test]
fn oracle_agreement_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for _ in 0..1000 {
        let r = random_seq(&mut rng, 6, 4);
        let h = random_seq(&mut rng, 6, 4);
        let c = edit_distance(&r, &h);
        assert_eq!(c.distance, brute_distance(&r, &h), "{r:?} {h:?}");
        assert_eq!(c.distance, c.substitutions + c.deletions + c.insertions);
        refs.push(ls(&r));
        hyps.push(ls(&h));
    }
    let num: usize = refs.iter().zip(&hyps).map(|(r, h)| brute_distance(r.as_slice(), h.as_slice())).sum();
    let den: usize = refs.iter().map(|r| r.len()).sum();
    assert_eq!(per(&refs, &hyps).unwrap(), num as f64 / den as f64);
    for t in 1..=4 {
        let (mut n, mut d) = (0, 0);
        for (r, h) in refs.iter().zip(&hyps) {
            let occ = r.as_slice().iter().filter(|&&x| x == t).count();
            if occ > 0 {
                n += brute_distance(r.as_slice(), h.as_slice());
                d += occ;
            }
        }
        assert_eq!(per_phoneme(&refs, &hyps, t).unwrap(), Some(n as f64 / d as f64));
    }
}

#[test]
fn bootstrap_examples() {
    let refs: Vec<_> = (0..10).map(|i| ls(&[1 + i % 3, 2])).collect();
    let ci = per_phoneme_set_ci(&refs, &refs, &[1], Attribution::WholeSequence, 200, 1, 0.95).unwrap();
    assert_eq!((ci.low, ci.high), (0.0, 0.0));

    let hyps: Vec<_> = (0..10).map(|i| if i % 4 == 0 { ls(&[2]) } else { ls(&[1 + i % 3, 2]) }).collect();
    let a = PerReport::build(&refs, &hyps, &PhonemeInventory::default(), ReportOptions { iterations: 300, seed: 5, ..Default::default() }).unwrap();
    let b = PerReport::build(&refs, &hyps, &PhonemeInventory::default(), ReportOptions { iterations: 300, seed: 5, ..Default::default() }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv(), b.to_csv());

    // Undefined replicates are dropped and counted.
    let ci = bootstrap_ci(3, |idx| (!idx.contains(&0)).then_some(1.0), 500, 0, 0.95).unwrap();
    assert!(ci.dropped > 0 && ci.dropped < 500);
    assert!(bootstrap_ci(3, |_| None, 10, 0, 0.95).is_err());
    assert!(bootstrap_ci(0, |_| Some(1.0), 10, 0, 0.95).is_err());
}

#[test]
fn wider_level_gives_wider_interval() {
    let vals: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64).collect();
    let mean = |idx: &[usize]| Some(idx.iter().map(|&i| vals[i]).sum::<f64>() / idx.len() as f64);
    for seed in 0..5 {
        let narrow = bootstrap_ci(vals.len(), mean, 500, seed, 0.9).unwrap();
        let wide = bootstrap_ci(vals.len(), mean, 500, seed, 0.99).unwrap();
        assert!(wide.low <= narrow.low && narrow.high <= wide.high);
    }
}

#[test]
fn overall_ci_usually_contains_point_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let inv = PhonemeInventory::default();
    let mut hits = 0;
    for inst in 0..200 {
        let n = rng.random_range(5..30);
        let refs: Vec<_> = (0..n).map(|_| ls(&random_seq(&mut rng, 8, 20)[..]).clone()).filter(|r| !r.is_empty()).collect();
        let hyps: Vec<_> = refs
            .iter()
            .map(|r| {
                let v: Vec<usize> = r.as_slice().iter().map(|&x| if rng.random_bool(0.2) { 1 + x % 20 } else { x }).collect();
                ls(&v)
            })
            .collect();
        if refs.is_empty() {
            hits += 1;
            continue;
        }
        let rep = PerReport::build(&refs, &hyps, &inv, ReportOptions { iterations: 200, seed: inst, ..Default::default() }).unwrap();
        let row = rep.row("overall", "all").unwrap();
        let ci = row.ci.unwrap();
        hits += usize::from(ci.low <= rep.overall_per && rep.overall_per <= ci.high);
    }
    assert!(hits >= 190, "{hits}/200");
}

#[test]
fn report_csv_layout() {
    let inv = PhonemeInventory::default();
    let refs = [ls(&[1, 2, 3]), ls(&[4, 18])];
    let hyps = [ls(&[1, 2]), ls(&[4, 18])];
    let rep = PerReport::build(&refs, &hyps, &inv, ReportOptions { iterations: 50, ..Default::default() }).unwrap();
    let csv = rep.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "scope,key,rate,ci_low,ci_high,n");
    assert!(lines[1].starts_with("overall,all,0.2,"));
    assert_eq!(lines.len(), 1 + 1 + 20 + 7 + 4);
    assert!(csv.contains("\nphoneme,m,NA,NA,NA,0\n"));
    assert_eq!(rep.row("phoneme", "p").unwrap().rate, Some(1.0));
    assert_eq!(rep.row("phoneme", "iy").unwrap().rate, Some(0.0));
    assert_eq!(rep.row("manner", "nasal").unwrap().rate, None);
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(
        a in prop::collection::vec(1usize..5, 0..7),
        b in prop::collection::vec(1usize..5, 0..7),
        c in prop::collection::vec(1usize..5, 0..7),
    ) {
        let d = |x: &[usize], y: &[usize]| edit_distance(x, y).distance;
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &b) == 0, a == b);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
    }

    #[test]
    fn per_ignores_utterance_order(
        pairs in prop::collection::vec((prop::collection::vec(1usize..6, 1..6), prop::collection::vec(1usize..6, 0..6)), 1..10),
        rot in 0usize..10,
    ) {
        let refs: Vec<_> = pairs.iter().map(|p| ls(&p.0)).collect();
        let hyps: Vec<_> = pairs.iter().map(|p| ls(&p.1)).collect();
        let k = rot % refs.len();
        let mut r2 = refs.clone();
        let mut h2 = hyps.clone();
        r2.rotate_left(k);
        h2.rotate_left(k);
        r2.reverse();
        h2.reverse();
        prop_assert_eq!(per(&refs, &hyps).unwrap(), per(&r2, &h2).unwrap());
    }
}
