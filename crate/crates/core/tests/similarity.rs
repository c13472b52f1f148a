use itemcf::itemspace::{gamma_distance, FiniteMixture, ItemId, ItemMeasure, ItemType};
use itemcf::similarity::{
    block_cap, make_partition, q_sample_size, reject_threshold, similar, split_block, ScaleKnobs, SimOracle,
    TheoryConstants,
};
use proptest::prelude::*;
use rayon::prelude::*;

proptest! {
    #[test]
    fn reject_threshold_is_least_count_reaching_nine_tenths_eps(q in 1u64..200_000, eps in 0.001f64..=1.0) {
        let k = reject_threshold(q, eps);
        prop_assert!(k as f64 / q as f64 >= 0.9 * eps);
        if k > 0 {
            prop_assert!(((k - 1) as f64 / q as f64) < 0.9 * eps);
        }
    }

    #[test]
    fn q_grows_as_eps_delta_shrink_and_d_grows(
        e1 in 0.01f64..=1.0, e2 in 0.01f64..=1.0,
        l1 in 0.001f64..0.99, l2 in 0.001f64..0.99,
        d1 in 0.0f64..8.0, d2 in 0.0f64..8.0,
    ) {
        let (e_lo, e_hi) = (e1.min(e2), e1.max(e2));
        let (l_lo, l_hi) = (l1.min(l2), l1.max(l2));
        let (d_lo, d_hi) = (d1.min(d2), d1.max(d2));
        prop_assert!(q_sample_size(e_lo, 0.1, 1.0).unwrap() >= q_sample_size(e_hi, 0.1, 1.0).unwrap());
        prop_assert!(q_sample_size(0.2, l_lo, 1.0).unwrap() >= q_sample_size(0.2, l_hi, 1.0).unwrap());
        prop_assert!(q_sample_size(0.2, 0.1, d_hi).unwrap() >= q_sample_size(0.2, 0.1, d_lo).unwrap());
    }

    #[test]
    fn split_respects_block_bounds(n in 1usize..2000, eps in 0.005f64..=1.0) {
        let block: Vec<ItemId> = (0..n as u32).map(ItemId).collect();
        let parts = split_block(block.clone(), eps);
        prop_assert_eq!(parts.concat(), block);
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        if n as f64 > 1.0 / eps {
            prop_assert!(hi as f64 <= 1.0 / eps + 1e-9, "{sizes:?}");
            // the lower bound holds whenever some chunking can meet both bounds
            let cap = block_cap(eps);
            let feasible = (1..=n).any(|c| n.div_ceil(c) <= cap && (n / c) as f64 >= 1.0 / (2.0 * eps) - 1e-9);
            if feasible {
                prop_assert!(lo as f64 >= 1.0 / (2.0 * eps) - 1e-9, "{sizes:?}");
            }
        } else {
            prop_assert_eq!(parts.len(), 1);
        }
    }

    #[test]
    fn schedule_plateaus_once_two_to_minus_tau_drops_below_eps_n(
        d in 0.0f64..4.0, nu in 0.01f64..0.24, log_n in 2u32..12, extra in 0u32..40,
    ) {
        let k = TheoryConstants::paper(d, nu, 10usize.pow(log_n)).unwrap();
        let first = (-k.eps_n().log2()).ceil().max(1.0) as u32;
        let (a, b) = (first, first + 1 + extra);
        prop_assert_eq!(k.eps_tau(a).to_bits(), k.eps_tau(b).to_bits());
        prop_assert_eq!(k.m_tau(a).to_bits(), k.m_tau(b).to_bits());
        prop_assert_eq!(k.d_tau(a).to_bits(), k.d_tau(b).to_bits());
    }

    #[test]
    fn partitions_keep_blocks_within_size_bounds(seed in 0u64..10_000, k in 1usize..6, m in 0u64..300) {
        use rand::Rng;
        let n = 40;
        let mut rng = itemcf::rng::derive_rng(seed, 7);
        let types: Vec<ItemType> = (0..k).map(|_| ItemType::from_fn(n, |_| rng.gen_bool(0.3))).collect();
        let measure = ItemMeasure::FiniteMixture(FiniteMixture::uniform(n, types).unwrap());
        let mut consts = TheoryConstants::paper(1.0, 0.1, n).unwrap();
        consts.scale.similar = 0.01;
        consts.scale.net_wait = 0.05;
        let eps = [0.1, 0.15, 0.25, 0.3][seed as usize % 4];
        let mut oracle = SimOracle::new(measure, seed).with_batch_sampling(true);
        let p = make_partition(m, eps, 0.1, &consts, &mut oracle, seed).unwrap();
        prop_assert!(p.n_items() as u64 <= m);
        prop_assert_eq!(p.n_items() as u64, p.assigned);
        prop_assert_eq!(p.assigned + p.discarded, m);
        for b in &p.blocks {
            prop_assert!(!b.is_empty());
            prop_assert!(b.len() <= p.max_block_size());
            prop_assert!(b.len() as f64 <= 1.0 / eps + 1e-9);
        }
        let mut items: Vec<ItemId> = p.blocks.concat();
        let total = items.len();
        items.sort();
        items.dedup();
        prop_assert_eq!(items.len(), total);
    }
}

#[test]
fn accuracy_constant_at_nu_one_tenth() {
    let k = TheoryConstants::paper(1.0, 0.1, 1000).unwrap();
    assert_eq!(k.c(), 0.1 / 2960.0);
    assert!((k.c() - 3.3784e-5).abs() < 1e-9);
}

#[test]
fn scale_knobs_multiply_their_formula_only() {
    let paper = TheoryConstants::paper(2.0, 0.1, 10_000).unwrap();
    let mut knobs = ScaleKnobs::paper();
    knobs.similar = 0.5;
    let scaled = TheoryConstants::new(2.0, 0.1, 10_000, knobs).unwrap();
    let raw = 630.0 * 3.0 / 0.2 * 10f64.ln();
    assert_eq!(paper.q(0.2, 0.1).unwrap(), raw.ceil() as u64);
    assert_eq!(scaled.q(0.2, 0.1).unwrap(), (0.5 * raw).ceil() as u64);
    assert_eq!(paper.eps_n(), scaled.eps_n());
    assert_eq!(paper.m_tau(3), scaled.m_tau(3));
    assert_eq!(paper.max_wait(0.2, 0.1), scaled.max_wait(0.2, 0.1));
}

/// A pair of types exactly `flips/N` apart.
fn planted_pair(n: usize, flips: usize) -> (ItemType, ItemType) {
    let base = ItemType::from_likes(n, 0..n / 2);
    let mut other = base.clone();
    for u in 0..flips {
        other.set(u, !other.likes(u));
    }
    (base, other)
}

#[test]
fn similar_false_accepts_decay_with_distance() {
    let (n, eps, delta, d) = (100, 0.2, 0.1, 1.0);
    let consts = TheoryConstants::paper(d, 0.1, n).unwrap();
    let trials = 1000u64;
    for k in [1usize, 2, 4] {
        let (a, b) = planted_pair(n, (k as f64 * eps * n as f64).round() as usize);
        assert!((gamma_distance(&a, &b).unwrap() - k as f64 * eps).abs() < 1e-12);
        let accepted: usize = (0..trials)
            .into_par_iter()
            .map(|t| {
                let m = ItemMeasure::FiniteMixture(FiniteMixture::new(n, vec![a.clone()], vec![1.0]).unwrap());
                let mut o = SimOracle::new(m, 50_000 * k as u64 + t).with_batch_sampling(true);
                let (i, j) = (o.insert(a.clone()), o.insert(b.clone()));
                similar(i, j, eps, delta, &consts, &mut o).unwrap() as usize
            })
            .sum();
        let rate = accepted as f64 / trials as f64;
        let kf = k as f64;
        let bound = delta / 4.0 * (1.0 / (4.0 * kf)).powf(d) / (kf * kf);
        let se = (bound * (1.0 - bound) / trials as f64).sqrt();
        assert!(rate <= bound + 3.0 * se, "k={k}: rate {rate} > {bound} + 3·{se}");
    }
}

#[test]
fn similar_accepts_identical_and_rejects_antipodal_items() {
    let n = 60;
    let consts = TheoryConstants::paper(1.0, 0.1, n).unwrap();
    let (a, _) = planted_pair(n, 0);
    let (_, far) = planted_pair(n, n);
    for seed in 0..20 {
        let m = ItemMeasure::FiniteMixture(FiniteMixture::new(n, vec![a.clone()], vec![1.0]).unwrap());
        let mut o = SimOracle::new(m, seed);
        let (i, j, k) = (o.insert(a.clone()), o.insert(a.clone()), o.insert(far.clone()));
        assert!(similar(i, j, 0.3, 0.1, &consts, &mut o).unwrap());
        assert!(!similar(i, k, 0.3, 0.1, &consts, &mut o).unwrap());
    }
}
