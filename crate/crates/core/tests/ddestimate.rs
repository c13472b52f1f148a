use itemcf::ddestimate::{
    ball_counts, denoise_distance, estimate, item_dd, Binarize, DdHistogram, DdOptions, PlantedCorpus, RadiusGrid,
    RatingsCorpus,
};
use proptest::prelude::*;

/// Expected disagreement rate of two items at distance `d` when every
/// rating is flipped with probability `delta`.
fn forward(d: f64, delta: f64) -> f64 {
    2.0 * delta * (1.0 - delta) + d * (1.0 - 2.0 * delta).powi(2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn denoising_inverts_the_noise_map(d in 0.0f64..=1.0, delta in 0.0f64..0.49) {
        let (back, clamped) = denoise_distance(forward(d, delta), delta).unwrap();
        prop_assert!(!clamped);
        prop_assert!((back - d).abs() < 1e-12 / (1.0 - 2.0 * delta).powi(2), "{back} vs {d}");
    }
}

proptest! {
    #[test]
    fn out_of_range_estimates_are_clamped(delta in 0.01f64..0.45, below in 1e-6f64..0.01) {
        let floor = 2.0 * delta * (1.0 - delta);
        prop_assert_eq!(denoise_distance(floor - below, delta).unwrap(), (0.0, true));
        let ceil = forward(1.0, delta);
        prop_assert_eq!(denoise_distance(ceil + below, delta).unwrap(), (1.0, true));
    }

    #[test]
    fn ball_counts_grow_with_radius(dists in prop::collection::vec(0.0f64..=1.0, 0..200), points in 2usize..60) {
        let grid = RadiusGrid::uniform(points);
        let counts = ball_counts(&dists, grid);
        prop_assert_eq!(counts.len(), points);
        prop_assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*counts.last().unwrap(), dists.len() + 1);
        for (k, &c) in counts.iter().enumerate() {
            let brute = 1 + dists.iter().filter(|&&x| x <= k as f64 / (points - 1) as f64 + 1e-12).count();
            prop_assert_eq!(c, brute);
        }
        prop_assert!(item_dd(&counts) >= 0.0);
    }

    #[test]
    fn histogram_keeps_every_value(values in prop::collection::vec(0.0f64..8.0, 1..100), width in 0.05f64..2.0) {
        let h = DdHistogram::new(&values, width, 1);
        prop_assert_eq!(h.counts.iter().sum::<usize>(), values.len());
        prop_assert_eq!(h.edges.len(), h.counts.len() + 1);
        let fullest = *h.counts.iter().max().unwrap();
        let bin = ((h.mode / width) - 0.5).round() as usize;
        prop_assert_eq!(h.counts[bin], fullest);
    }
}

#[test]
fn ill_posed_noise_levels_are_rejected() {
    for delta in [0.5, 0.7, -0.1] {
        assert!(denoise_distance(0.3, delta).is_err());
    }
}

#[test]
fn doubling_counts_give_dimension_one() {
    // N_r doubles each time r does
    let counts: Vec<usize> = (0..=8).map(|k| k.max(1)).collect();
    assert_eq!(item_dd(&counts), 1.0);
    assert_eq!(item_dd(&[1, 1, 1, 1, 1]), 0.0);
}

#[test]
fn planted_clusters_recover_log2_k() {
    for (k, flip) in [(4usize, 0.0), (8, 0.0), (8, 0.1)] {
        let corpus = PlantedCorpus::new(k, 160, 800, flip, 3).generate().unwrap();
        let report = estimate(&corpus, &DdOptions { delta: flip, ..Default::default() }).unwrap();
        let target = (k as f64).log2();
        assert!(
            (report.histogram.mode - target).abs() <= report.histogram.bin_width,
            "K={k} flip={flip}: mode {} vs {target}",
            report.histogram.mode
        );
        assert_eq!(report.n_items, 160);
        assert_eq!(report.pairs_retained + report.pairs_skipped, 160 * 159 / 2);
    }
}

#[test]
fn csv_ratings_binarize_and_round_trip() {
    let text = "user_id,item_id,rating\na,x,5\na,y,1\nb,x,4\nb,y,3.5\n";
    let c = RatingsCorpus::from_csv(text.as_bytes(), Binarize::by_name("movielens").unwrap()).unwrap();
    assert_eq!((c.n_users(), c.n_items(), c.n_ratings()), (2, 2, 4));
    let mut out = Vec::new();
    c.write_csv(&mut out).unwrap();
    let back = RatingsCorpus::from_csv(out.as_slice(), Binarize::Above(0.0)).unwrap();
    assert_eq!((back.n_users(), back.n_items(), back.n_ratings()), (2, 2, 4));
    assert_eq!(c.rating(1, 1), Some(-1));
    for u in 0..2 {
        for i in 0..2 {
            assert_eq!(back.rating(u, i), c.rating(u, i));
        }
    }
}
