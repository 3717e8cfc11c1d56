use proptest::prelude::*;
use splitfed::data::{iid_partition, label_skew_partition, quantity_skew_partition, synth_blobs, vertical_partition};

/// Upper 0.1% point of chi-square with 3 degrees of freedom.
const CHI2_3DF_999: f64 = 16.266;

#[test]
fn iid_shards_follow_the_global_label_mix() {
    let data = synth_blobs(4000, 4, 6, 3.0, 17).unwrap();
    let mut global = [0f64; 4];
    for &y in data.labels() {
        global[y] += 1.0;
    }
    for seed in 0..10 {
        let plan = iid_partition(data.len(), 4, seed).unwrap();
        for k in 0..4 {
            let idx = plan.indices(k).unwrap();
            let mut counts = [0f64; 4];
            for &i in idx {
                counts[data.labels()[i]] += 1.0;
            }
            let chi2: f64 = (0..4)
                .map(|c| {
                    let expected = global[c] / data.len() as f64 * idx.len() as f64;
                    (counts[c] - expected).powi(2) / expected
                })
                .sum();
            assert!(chi2 < CHI2_3DF_999, "seed {seed} client {k}: chi2 {chi2}");
        }
    }
}

#[test]
fn well_separated_blobs_are_linearly_separable() {
    let data = synth_blobs(2000, 5, 8, 6.0, 3).unwrap();
    let d = data.sample_len();
    let mut means = vec![vec![0f64; d]; 5];
    let mut counts = [0usize; 5];
    for i in 0..data.len() {
        let y = data.labels()[i];
        counts[y] += 1;
        for (m, &v) in means[y].iter_mut().zip(data.sample(i)) {
            *m += f64::from(v);
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    // nearest class mean is a linear rule: argmax of w_c . x + b_c
    let correct = (0..data.len())
        .filter(|&i| {
            let x = data.sample(i);
            let score = |m: &[f64]| {
                let dot: f64 = m.iter().zip(x).map(|(a, &b)| a * f64::from(b)).sum();
                dot - 0.5 * m.iter().map(|a| a * a).sum::<f64>()
            };
            let best = (0..5).max_by(|&a, &b| score(&means[a]).total_cmp(&score(&means[b]))).unwrap();
            best == data.labels()[i]
        })
        .count();
    assert!(correct as f64 / data.len() as f64 >= 0.99, "{correct}/{}", data.len());
}

#[test]
fn blobs_are_reproducible_and_balanced() {
    let a = synth_blobs(1000, 4, 3, 2.0, 8).unwrap();
    let b = synth_blobs(1000, 4, 3, 2.0, 8).unwrap();
    assert_eq!(a.features(), b.features());
    assert_eq!(a.labels(), b.labels());
    for c in 0..4 {
        let n = a.labels().iter().filter(|&&y| y == c).count();
        assert_eq!(n, 250);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn label_skew_confines_classes(cpc in 1usize..4, k in 2usize..6, seed in any::<u64>()) {
        let data = synth_blobs(600, 4, 2, 1.0, seed).unwrap();
        prop_assume!(k * cpc >= 4);
        let plan = label_skew_partition(data.labels(), 4, k, cpc, seed).unwrap();
        let mut seen = vec![false; data.len()];
        for c in 0..k {
            let idx = plan.indices(c).unwrap();
            let mut classes: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            classes.sort_unstable();
            classes.dedup();
            prop_assert!(classes.len() <= cpc);
            for &i in idx {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn quantity_skew_honours_sizes(sizes in prop::collection::vec(1usize..50, 1..6), seed in any::<u64>()) {
        let total: usize = sizes.iter().sum();
        let plan = quantity_skew_partition(total + 7, sizes.len(), &sizes, seed).unwrap();
        prop_assert_eq!(plan.shard_sizes(), sizes);
    }

    #[test]
    fn vertical_ranges_tile_the_features(d in 1usize..40, k in 1usize..8, seed in any::<u64>()) {
        prop_assume!(k <= d);
        let plan = vertical_partition(d, k, seed).unwrap();
        let mut next = 0;
        for c in 0..k {
            let r = plan.feature_range(c).unwrap();
            prop_assert_eq!(r.start, next);
            prop_assert!(!r.is_empty());
            next = r.end;
        }
        prop_assert_eq!(next, d);
    }
}
