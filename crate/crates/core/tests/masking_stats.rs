//! Monte Carlo and exhaustive checks on mask generation.

use std::collections::HashMap;

use mft_core::masking::{hybrid_mask, hybrid_mask_traced, kept_count, single_mask, DEFAULT_RATIO_SET};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn row_key(row: &[u8]) -> u32 {
    row.iter().enumerate().map(|(i, &b)| (b as u32) << i).sum()
}

fn chi_square_uniform(counts: &HashMap<u32, usize>, categories: usize, total: usize) -> f64 {
    let expected = total as f64 / categories as f64;
    let stat: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum::<f64>()
        + (categories - counts.len()) as f64 * expected;
    1.0 - ChiSquared::new((categories - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn single_mask_subsets_are_uniform_at_l8() {
    let plan = single_mask(20_000, 8, 0.5, 2024).unwrap();
    let mut counts = HashMap::new();
    let mut per_token = [0usize; 8];
    for i in 0..plan.batch {
        let row = plan.row(i);
        *counts.entry(row_key(row)).or_insert(0) += 1;
        for (t, &b) in row.iter().enumerate() {
            per_token[t] += b as usize;
        }
    }
    assert_eq!(counts.len(), 70, "all C(8,4) subsets occur");
    for c in per_token {
        let f = c as f64 / 20_000.0;
        assert!((f - 0.5).abs() < 0.02, "token frequency {f}");
    }
    let p = chi_square_uniform(&counts, 70, 20_000);
    assert!(p > 0.001, "chi-square p = {p}");
}

#[test]
fn hybrid_subsets_are_uniform_at_l8() {
    let plan = hybrid_mask(20_000, 8, &[0.5], 77).unwrap();
    let mut counts = HashMap::new();
    for i in 0..plan.batch {
        *counts.entry(row_key(plan.row(i))).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 70);
    let p = chi_square_uniform(&counts, 70, 20_000);
    assert!(p > 0.001, "chi-square p = {p}");
}

#[test]
fn single_and_one_ratio_hybrid_agree_in_distribution() {
    let n = 20_000;
    let a = single_mask(n, 8, 0.5, 5).unwrap();
    let b = hybrid_mask(n, 8, &[0.5], 6).unwrap();
    let mut ca: HashMap<u32, usize> = HashMap::new();
    let mut cb: HashMap<u32, usize> = HashMap::new();
    for i in 0..n {
        *ca.entry(row_key(a.row(i))).or_insert(0) += 1;
        *cb.entry(row_key(b.row(i))).or_insert(0) += 1;
    }
    // two-sample homogeneity over the 70 subsets
    let mut stat = 0.0;
    let mut cats = 0;
    for key in ca.keys().chain(cb.keys()).copied().collect::<std::collections::BTreeSet<_>>() {
        let (x, y) = (*ca.get(&key).unwrap_or(&0) as f64, *cb.get(&key).unwrap_or(&0) as f64);
        let e = (x + y) / 2.0;
        stat += (x - e).powi(2) / e + (y - e).powi(2) / e;
        cats += 1;
    }
    let p = 1.0 - ChiSquared::new((cats - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.001, "homogeneity p = {p}");
}

#[test]
fn default_ratio_frequencies() {
    let plan = hybrid_mask(40_000, 16, &DEFAULT_RATIO_SET, 99).unwrap();
    for r in DEFAULT_RATIO_SET {
        let f = plan.sampled_ratios.iter().filter(|&&s| s == r).count() as f64 / 40_000.0;
        assert!((f - 0.25).abs() < 0.01, "ratio {r} drawn with frequency {f}");
    }
}

#[test]
fn exhaustive_row_sums_small_l() {
    let ratio_sets: [&[f64]; 3] = [&DEFAULT_RATIO_SET, &[0.1, 0.3, 0.9, 1.0], &[0.6, 0.7, 0.8, 0.95]];
    for l in 1..=10 {
        for seed in 0..1000u64 {
            let set = ratio_sets[(seed % 3) as usize];
            let (plan, trace) = hybrid_mask_traced(4, l, set, seed).unwrap();
            for i in 0..4 {
                let sum: usize = plan.row(i).iter().map(|&b| b as usize).sum();
                assert_eq!(sum, plan.kept_counts[i]);
                assert_eq!(plan.kept_counts[i], kept_count(l, plan.sampled_ratios[i]));
                assert!(set.contains(&plan.sampled_ratios[i]));
                let shuffle = &trace.ids_shuffle.data()[i * l..(i + 1) * l];
                let restore = &trace.ids_restore.data()[i * l..(i + 1) * l];
                for j in 0..l {
                    assert_eq!(shuffle[restore[j]], j);
                    assert_eq!(restore[shuffle[j]], j);
                }
            }
            let single = single_mask(2, l, set[0], seed).unwrap();
            for i in 0..2 {
                let sum: usize = single.row(i).iter().map(|&b| b as usize).sum();
                assert_eq!(sum, kept_count(l, set[0]));
            }
        }
    }
}

#[test]
fn kept_counts_follow_truncation() {
    assert_eq!(kept_count(196, 0.75), 49);
    assert_eq!(kept_count(64, 0.95), 3);
    assert_eq!(kept_count(10, 0.9), 1);
    assert_eq!(kept_count(8, 1.0), 0);
    assert_eq!(kept_count(7, 0.5), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn large_l_rows_sum_to_kept_counts(l in 11usize..300, seed in any::<u64>(), batch in 1usize..8) {
        let (plan, trace) = hybrid_mask_traced(batch, l, &DEFAULT_RATIO_SET, seed).unwrap();
        for i in 0..batch {
            let sum: usize = plan.row(i).iter().map(|&b| b as usize).sum();
            prop_assert_eq!(sum, plan.kept_counts[i]);
            let restore = &trace.ids_restore.data()[i * l..(i + 1) * l];
            let shuffle = &trace.ids_shuffle.data()[i * l..(i + 1) * l];
            prop_assert!((0..l).all(|j| shuffle[restore[j]] == j));
        }
    }

    #[test]
    fn plans_reproduce_from_seed(seed in any::<u64>(), ratio in 0.0f64..=1.0) {
        prop_assert_eq!(single_mask(5, 20, ratio, seed).unwrap(), single_mask(5, 20, ratio, seed).unwrap());
        prop_assert_eq!(hybrid_mask(5, 20, &DEFAULT_RATIO_SET, seed).unwrap(), hybrid_mask(5, 20, &DEFAULT_RATIO_SET, seed).unwrap());
    }
}
