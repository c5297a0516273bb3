use approx::assert_abs_diff_eq;
use game_lattice::dynkin::{
    continuation, extract_strategies, solve, FilteredLattice, LatticeBuilder, LatticeDoc,
};
use game_lattice::oracle::{american_value, random_lattice, RandomLatticeSpec};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lattice_from_seed(seed: u64) -> FilteredLattice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_lattice(&mut rng, &RandomLatticeSpec::default())
}

/// Relabels ids at random and, optionally, shuffles node and child order.
fn relabel(lattice: &FilteredLattice, seed: u64, reorder_children: bool) -> FilteredLattice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut doc: LatticeDoc = lattice.to_doc(usize::MAX).unwrap();
    let mut ids: Vec<u64> = (0..doc.nodes.len() as u64).map(|i| 1000 + 7 * i).collect();
    ids.shuffle(&mut rng);
    doc.root = ids[doc.root as usize];
    for node in &mut doc.nodes {
        node.id = ids[node.id as usize];
        for t in &mut node.transitions {
            t.0 = ids[t.0 as usize];
        }
        if reorder_children {
            node.transitions.shuffle(&mut rng);
        }
    }
    doc.nodes.shuffle(&mut rng);
    FilteredLattice::from_doc(&doc).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn sandwich_and_median_form(seed in any::<u64>()) {
        let lat = lattice_from_seed(seed);
        let res = solve(&lat);
        for id in 0..lat.len() as u32 {
            let node = lat.node(id);
            let j = res.values[id as usize];
            prop_assert!(node.lower <= j && j <= node.upper);
            if lat.is_terminal(id) {
                prop_assert_eq!(j, node.lower);
                prop_assert!(res.buyer_stop[id as usize]);
            } else {
                let c = continuation(&lat, &res.values, id);
                let min_of_max = node.upper.min(node.lower.max(c));
                let max_of_min = node.lower.max(node.upper.min(c));
                prop_assert_eq!(min_of_max, max_of_min);
                prop_assert_eq!(j, min_of_max);
                prop_assert_eq!(res.buyer_stop[id as usize], j == node.lower);
                prop_assert_eq!(res.seller_cancel[id as usize], j == node.upper);
            }
        }
    }

    #[test]
    fn raising_payoffs_never_lowers_value(seed in any::<u64>(), bump_seed in any::<u64>()) {
        let lat = lattice_from_seed(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(bump_seed);
        let raised = lat
            .with_payoffs(|_, n| {
                let lower = n.lower + if rng.gen_bool(0.5) { rng.gen_range(0.0..0.5) } else { 0.0 };
                let upper = (n.upper + if rng.gen_bool(0.5) { rng.gen_range(0.0..0.5) } else { 0.0 }).max(lower);
                (lower, upper)
            })
            .unwrap();
        prop_assert!(solve(&raised).value() >= solve(&lat).value() - 1e-12);
    }

    #[test]
    fn huge_penalty_gives_snell_envelope(seed in any::<u64>()) {
        let lat = lattice_from_seed(seed).with_payoffs(|_, n| (n.lower, 1e6)).unwrap();
        let v = solve(&lat).value();
        prop_assert!((v - american_value(&lat)).abs() <= 1e-12);
    }

    #[test]
    fn equal_bounds_collapse_to_root_payoff(seed in any::<u64>()) {
        let lat = lattice_from_seed(seed).with_payoffs(|_, n| (n.lower, n.lower)).unwrap();
        let res = solve(&lat);
        prop_assert_eq!(res.value(), lat.node(lat.root()).lower);
        let s = extract_strategies(&lat, &res);
        prop_assert!(s.buyer.stops_at(lat.root()) && s.seller.stops_at(lat.root()));
    }

    #[test]
    fn value_depends_only_on_distribution(seed in any::<u64>(), perm in any::<u64>()) {
        let lat = lattice_from_seed(seed);
        let v = solve(&lat).value();
        // same child order: bit-exact
        prop_assert_eq!(solve(&relabel(&lat, perm, false)).value().to_bits(), v.to_bits());
        // reordered children: equal up to rounding
        prop_assert!((solve(&relabel(&lat, perm, true)).value() - v).abs() <= 1e-12);
    }
}

/// A recombining binomial lattice wide enough to take the parallel path.
fn wide_lattice(n: u32) -> FilteredLattice {
    let mut b = LatticeBuilder::new();
    let mut ids = Vec::new();
    let mut next = 0u32;
    for k in 0..=n {
        let layer: Vec<u32> = (0..=k).map(|i| next + i).collect();
        next += k + 1;
        ids.push(layer);
    }
    for k in 0..=n {
        for i in 0..=k {
            let x = (i as f64 - k as f64 / 2.0) * 0.01;
            let lower = (1.0 - x.exp()).max(0.0);
            let transitions: Vec<(u32, f64)> = if k == n {
                vec![]
            } else {
                vec![
                    (ids[k as usize + 1][i as usize], 0.45),
                    (ids[k as usize + 1][i as usize + 1], 0.55),
                ]
            };
            b.add_node(k, lower, lower + 0.003, transitions);
        }
    }
    b.build(0).unwrap()
}

#[test]
fn solve_is_identical_across_worker_counts() {
    let lat = wide_lattice(5000);
    let pool = |w| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .unwrap()
    };
    let one = pool(1).install(|| solve(&lat));
    let four = pool(4).install(|| solve(&lat));
    assert_eq!(one, four);
    assert!(one.value() > 0.0);
}

#[test]
fn one_step_strategies() {
    let mut b = LatticeBuilder::new();
    b.add_node(0, 1.0, 1.5, [(1, 0.5), (2, 0.5)]);
    b.add_node(1, 0.8, 0.9, []);
    b.add_node(1, 1.6, 1.7, []);
    let lat = b.build(0).unwrap();
    let res = solve(&lat);
    assert_abs_diff_eq!(res.value(), 1.2, epsilon = 1e-12);
    let s = extract_strategies(&lat, &res);
    assert!(!s.buyer.stops_at(0) && s.buyer.stops_at(1) && s.buyer.stops_at(2));
    assert!(!s.seller.stops_at(0));
}
