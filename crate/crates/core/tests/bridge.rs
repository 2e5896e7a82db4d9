use panther_core::bridge::oracle::brute_force_oracle;
use panther_core::bridge::{
    format_index_lists, prune_multiturn, prune_pair, sequence_length_report, IndexedTokens, PruneReport,
};
use panther_core::numerics::{cosine_similarity, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `k` turns of `n×d` tokens sharing a base, each perturbed with noise of a
/// random scale so that cosines spread around the interesting thresholds.
fn correlated_turns(k: usize, n: usize, d: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Tensor::randn(&[n, d], 1.0, &mut rng);
    (0..k)
        .map(|_| {
            let scale = rng.random_range(0.0..0.6);
            let noise = Tensor::randn(&[n, d], scale, &mut rng);
            let mut t = base.clone();
            for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
                *a += b;
            }
            t
        })
        .collect()
}

fn cos_at(a: &Tensor, b: &Tensor, i: usize) -> f64 {
    cosine_similarity(a.row(i), b.row(i), 1e-12).unwrap()
}

/// Per spatial index: turn `k` keeps `i` iff it differs enough from turn 0
/// and from every intermediate turn that itself kept `i`.
fn column_oracle(turns: &[Tensor], tau: f64) -> Vec<Vec<usize>> {
    let n = turns[0].rows();
    let mut kept: Vec<Vec<bool>> = vec![vec![true; n]];
    for k in 1..turns.len() {
        let row = (0..n)
            .map(|i| {
                cos_at(&turns[0], &turns[k], i) <= tau
                    && (1..k).all(|s| !kept[s][i] || cos_at(&turns[s], &turns[k], i) <= tau)
            })
            .collect();
        kept.push(row);
    }
    kept.iter()
        .map(|r| (0..n).filter(|&i| r[i]).collect())
        .collect()
}

fn retained(pruned: &[IndexedTokens]) -> Vec<Vec<usize>> {
    pruned.iter().map(|t| t.idx().to_vec()).collect()
}

#[test]
fn identical_pair_is_fully_pruned_and_tau_one_keeps_all() {
    let t = correlated_turns(1, 6, 4, 1).remove(0);
    let cur = IndexedTokens::full(t.clone()).unwrap();
    assert!(prune_pair(&cur, &cur, 0.95).unwrap().is_empty());
    let other = IndexedTokens::full(correlated_turns(1, 6, 4, 2).remove(0)).unwrap();
    assert_eq!(prune_pair(&other, &cur, 1.0).unwrap(), other);
}

#[test]
fn only_common_indices_are_compared() {
    let row = |v: [f64; 2]| v.to_vec();
    let cur_rows = [row([1.0, 0.0]), row([1.0, 0.0]), row([0.0, 1.0])];
    let ref_rows = [row([1.0, 0.0]), row([1.0, 0.0]), row([1.0, 0.0])];
    let cur = IndexedTokens::new(vec![10, 15, 16], Tensor::from_rows(&cur_rows).unwrap(), 20).unwrap();
    let reference = IndexedTokens::new(vec![10, 16, 17], Tensor::from_rows(&ref_rows).unwrap(), 20).unwrap();
    let out = prune_pair(&cur, &reference, 0.95).unwrap();
    // 10 identical to the reference, 15 unmatched, 16 orthogonal
    assert_eq!(out.idx(), &[15, 16]);
    assert_eq!(out.emb().row(0), &[1.0, 0.0]);
    assert_eq!(out.emb().row(1), &[0.0, 1.0]);
}

#[test]
fn width_mismatch_and_empty_input_are_errors() {
    let a = IndexedTokens::full(Tensor::zeros(&[3, 2])).unwrap();
    let b = IndexedTokens::full(Tensor::zeros(&[3, 4])).unwrap();
    assert!(prune_pair(&a, &b, 0.9).is_err());
    assert!(prune_multiturn(&[], 0.9).is_err());
    assert!(brute_force_oracle(&[], 0.9).is_err());
    assert!(prune_multiturn(&[Tensor::zeros(&[3, 2]), Tensor::zeros(&[4, 2])], 0.9).is_err());
    assert!(IndexedTokens::new(vec![2, 1], Tensor::zeros(&[2, 2]), 4).is_err());
    assert!(IndexedTokens::new(vec![1, 4], Tensor::zeros(&[2, 2]), 4).is_err());
}

#[test]
fn single_turn_is_untouched() {
    let turns = correlated_turns(1, 5, 3, 3);
    let out = prune_multiturn(&turns, 0.5).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].idx(), &[0, 1, 2, 3, 4]);
    assert_eq!(out[0].emb(), &turns[0]);
}

#[test]
fn identical_turns_cascade_to_empty() {
    let t = correlated_turns(1, 8, 4, 4).remove(0);
    let out = prune_multiturn(&[t.clone(), t.clone(), t], 0.95).unwrap();
    assert_eq!(out[0].len(), 8);
    assert!(out[1].is_empty() && out[2].is_empty());
}

#[test]
fn threshold_flips_exactly_at_known_cosine() {
    let c: f64 = 0.96;
    let reference = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let cur = Tensor::from_rows(&[vec![c, (1.0 - c * c).sqrt()]]).unwrap();
    let cos = cosine_similarity(cur.row(0), reference.row(0), 1e-12).unwrap();
    assert!((cos - c).abs() < 1e-15);
    let kept = |tau: f64| prune_multiturn(&[reference.clone(), cur.clone()], tau).unwrap()[1].len();
    assert_eq!(kept(cos), 1);
    assert_eq!(kept(cos - 1e-12), 0);
    assert_eq!(kept(0.97), 1);
    assert_eq!(kept(0.95), 0);
}

/// Turn 1 keeps the token only under the looser threshold and then, as the
/// reference, prunes turn 2's token, which turn 0 alone would not have.
#[test]
fn reference_chain_can_break_monotonicity_from_turn_two() {
    let at = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin()];
    let turns: Vec<Tensor> = [0.0, 18.5, 30.0]
        .iter()
        .map(|&a| Tensor::from_rows(&[at(a)]).unwrap())
        .collect();
    let strict = retained(&prune_multiturn(&turns, 0.90).unwrap());
    let loose = retained(&prune_multiturn(&turns, 0.97).unwrap());
    assert_eq!(strict, vec![vec![0], vec![], vec![0]]);
    assert_eq!(loose, vec![vec![0], vec![0], vec![]]);
    assert_eq!(brute_force_oracle(&turns, 0.97).unwrap(), prune_multiturn(&turns, 0.97).unwrap());
}

#[test]
fn zero_norm_tokens_are_retained() {
    let z = Tensor::zeros(&[2, 3]);
    let out = prune_multiturn(&[z.clone(), z], 0.0).unwrap();
    assert_eq!(out[1].len(), 2);
}

#[test]
fn reference_encoder_length_dilemma() {
    let turns: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(&[576, 1])).collect();
    let report = sequence_length_report(&turns, &[10, 12, 9, 11], 1.0).unwrap();
    assert_eq!(report.visual_before(), 2304);
    assert!(report.visual_before() > 2048);
    assert_eq!(report.total_before(), 2304 + 42);
    assert_eq!(report.total_after(), report.total_before());
}

#[test]
fn report_csv_matches_header() {
    let r = PruneReport {
        tau: 0.95,
        retained: vec![4, 1, 0],
        tokens_per_turn: 4,
        text_tokens: 20,
    };
    let cols = PruneReport::CSV_HEADER.split(',').count();
    assert_eq!(r.csv_row().split(',').count(), cols);
    assert_eq!(r.csv_row(), "0.95,3,4,20,12,5,32,25,4;1;0");
}

#[test]
fn index_lists_format() {
    let turns = vec![Tensor::zeros(&[3, 1]), Tensor::zeros(&[3, 1])];
    let out = prune_multiturn(&turns, 1.0).unwrap();
    assert_eq!(format_index_lists(&out), "0,1,2\n0,1,2\n");
}

#[test]
fn fuzzed_against_oracle_with_spread_thresholds() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut pruned_somewhere = 0;
    for case in 0..300 {
        let k = rng.random_range(2..=5);
        let n = rng.random_range(4..=16);
        let tau = [0.90, 0.95, 0.97, 1.0][case % 4];
        let turns = correlated_turns(k, n, 8, case as u64);
        let fast = prune_multiturn(&turns, tau).unwrap();
        assert_eq!(fast, brute_force_oracle(&turns, tau).unwrap(), "case {case}");
        if fast.iter().any(|t| t.len() < n) {
            pruned_somewhere += 1;
        }
    }
    assert!(pruned_somewhere > 100, "{pruned_somewhere}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_oracle_and_column_rule(k in 1usize..6, n in 1usize..12, seed in any::<u64>(), tau in 0.85f64..1.0) {
        let turns = correlated_turns(k, n, 8, seed);
        let fast = prune_multiturn(&turns, tau).unwrap();
        prop_assert_eq!(&fast, &brute_force_oracle(&turns, tau).unwrap());
        prop_assert_eq!(retained(&fast), column_oracle(&turns, tau));
    }

    #[test]
    fn retained_rows_are_untouched_input_rows(k in 2usize..6, n in 1usize..12, seed in any::<u64>(), tau in 0.85f64..1.0) {
        let turns = correlated_turns(k, n, 8, seed);
        let out = prune_multiturn(&turns, tau).unwrap();
        prop_assert_eq!(out[0].len(), n);
        for (t, p) in turns.iter().zip(&out) {
            for (r, &i) in p.idx().iter().enumerate() {
                prop_assert_eq!(p.emb().row(r), t.row(i));
            }
        }
    }

    #[test]
    fn first_pruned_turn_is_monotone_in_tau(k in 2usize..6, n in 1usize..12, seed in any::<u64>(), a in 0.8f64..1.0, b in 0.8f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let turns = correlated_turns(k, n, 8, seed);
        let small = retained(&prune_multiturn(&turns, lo).unwrap());
        let large = retained(&prune_multiturn(&turns, hi).unwrap());
        prop_assert!(small[1].iter().all(|i| large[1].contains(i)));
    }

    #[test]
    fn tau_at_least_one_is_identity(k in 1usize..6, n in 1usize..12, seed in any::<u64>(), tau in 1.0f64..2.0) {
        let turns = correlated_turns(k, n, 8, seed);
        for (t, p) in turns.iter().zip(prune_multiturn(&turns, tau).unwrap()) {
            prop_assert_eq!(p.emb(), t);
        }
    }

    #[test]
    fn decisions_are_local_to_their_index(k in 2usize..6, n in 2usize..12, seed in any::<u64>(), tau in 0.85f64..1.0, victim in any::<prop::sample::Index>()) {
        let turns = correlated_turns(k, n, 8, seed);
        let v = victim.index(n);
        let mut noisy = turns.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for t in &mut noisy {
            let d = t.cols();
            for x in &mut t.data_mut()[v * d..(v + 1) * d] {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        let before = retained(&prune_multiturn(&turns, tau).unwrap());
        let after = retained(&prune_multiturn(&noisy, tau).unwrap());
        for (b, a) in before.iter().zip(&after) {
            let strip = |xs: &Vec<usize>| xs.iter().copied().filter(|&i| i != v).collect::<Vec<_>>();
            prop_assert_eq!(strip(b), strip(a));
        }
    }
}
