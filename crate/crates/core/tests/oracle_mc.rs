use approx::assert_abs_diff_eq;
use game_lattice::dynkin::{extract_strategies, solve, LatticeBuilder, StoppingRule};
use game_lattice::lattice::{build_exact, ModelLattice};
use game_lattice::model::{step_params, JumpLaw, MertonParams};
use game_lattice::oracle::{
    american_value, enumerate_game_value, mc_price, mc_terminal_mean, random_lattice, saddle_check,
    Kernel, McConfig, RandomLatticeSpec, RulePair,
};
use game_lattice::payoff::{PayoffKind, PayoffSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn crr(r: f64) -> MertonParams {
    MertonParams {
        s0: 1.0,
        sigma: 0.2,
        r,
        lambda: 0.0,
        horizon: 1.0,
        jump_law: JumpLaw::identity(),
    }
}

fn jumpy() -> MertonParams {
    MertonParams {
        lambda: 0.8,
        jump_law: JumpLaw::from_relative(&[(-0.2, 0.7), (0.15, 0.3)]).unwrap(),
        ..crr(0.06)
    }
}

fn optimal_rules(ml: &ModelLattice) -> (f64, RulePair) {
    let res = solve(&ml.lattice);
    let s = extract_strategies(&ml.lattice, &res);
    (
        res.value(),
        RulePair {
            seller: s.seller,
            buyer: s.buyer,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(250))]

    #[test]
    fn enumeration_matches_solver_under_both_kernels(seed in any::<u64>(), dyadic in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lat = random_lattice(&mut rng, &RandomLatticeSpec { dyadic, ..RandomLatticeSpec::default() });
        let v = solve(&lat).value();
        let h = enumerate_game_value(&lat, Kernel::H).unwrap();
        let j = enumerate_game_value(&lat, Kernel::J).unwrap();
        for g in [h, j] {
            if dyadic {
                prop_assert_eq!(g.inf_sup, v);
                prop_assert_eq!(g.sup_inf, v);
            } else {
                prop_assert!((g.inf_sup - v).abs() <= 1e-12 && (g.sup_inf - v).abs() <= 1e-12);
            }
        }
        let american = lat.with_payoffs(|_, n| (n.lower, 1e6)).unwrap();
        let g = enumerate_game_value(&american, Kernel::H).unwrap();
        prop_assert!((g.inf_sup - american_value(&american)).abs() <= 1e-12);
    }
}

#[test]
fn zero_penalty_price_is_constant() {
    let p = jumpy();
    let pay = PayoffSpec::new(
        PayoffKind::Russian {
            floor: 1.2,
            delta: 0.0,
        },
        0.06,
    )
    .unwrap();
    let ml = build_exact(&p, &pay, 5).unwrap();
    let rules = RulePair {
        seller: StoppingRule::at_horizon(&ml.lattice),
        buyer: StoppingRule::immediate(&ml.lattice),
    };
    for kernel in [Kernel::H, Kernel::J] {
        let est = mc_price(&p, &pay, &ml, &rules, kernel, &McConfig::new(1000, 3)).unwrap();
        assert_eq!(est.estimate, 1.2);
        assert_eq!(est.std_error, 0.0);
    }
    // psi = phi everywhere: the saddle check sees the constant under every deviation
    let res = solve(&ml.lattice);
    let report = saddle_check(&p, &pay, &ml, &res, Kernel::J, &McConfig::new(500, 9), 5).unwrap();
    assert!(report.passed());
    for e in report
        .buyer_deviations
        .iter()
        .chain(&report.seller_deviations)
    {
        assert_eq!(e.estimate, 1.2);
    }
}

#[test]
fn crr_put_mc_matches_dp_value() {
    let p = crr(0.05);
    let pay = PayoffSpec::new(
        PayoffKind::GamePut {
            strike: 1.0,
            delta: 0.05,
        },
        0.05,
    )
    .unwrap();
    let ml = build_exact(&p, &pay, 8).unwrap();
    let (v, rules) = optimal_rules(&ml);
    for kernel in [Kernel::H, Kernel::J] {
        let est = mc_price(&p, &pay, &ml, &rules, kernel, &McConfig::new(100_000, 11)).unwrap();
        assert!(
            (est.estimate - v).abs() <= 3.0 * est.std_error,
            "{kernel:?}: {} vs {v} (se {})",
            est.estimate,
            est.std_error
        );
    }
}

#[test]
fn terminal_mean_is_initial_price() {
    let p = jumpy();
    for n in [1, 10, 50] {
        let step = step_params(&p, n).unwrap();
        for antithetic in [false, true] {
            let cfg = McConfig {
                n_paths: 100_000,
                seed: 5,
                antithetic,
            };
            let est = mc_terminal_mean(&p, &step, &cfg).unwrap();
            assert!(
                (est.estimate - p.s0).abs() <= 3.0 * est.std_error,
                "n = {n}: {est:?}"
            );
        }
    }
}

#[test]
fn simulation_is_reproducible_across_workers() {
    let p = jumpy();
    let pay = PayoffSpec::new(PayoffKind::Asian { delta: 0.03 }, 0.06).unwrap();
    let ml = build_exact(&p, &pay, 6).unwrap();
    let (_, rules) = optimal_rules(&ml);
    let cfg = McConfig::new(20_000, 42);
    let pool = |w| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .unwrap()
    };
    let one = pool(1).install(|| mc_price(&p, &pay, &ml, &rules, Kernel::J, &cfg).unwrap());
    let four = pool(4).install(|| mc_price(&p, &pay, &ml, &rules, Kernel::J, &cfg).unwrap());
    assert_eq!(one, four);
    let other = mc_price(&p, &pay, &ml, &rules, Kernel::J, &McConfig::new(20_000, 43)).unwrap();
    assert_ne!(one.estimate, other.estimate);
    let spread = 3.0 * (one.std_error + other.std_error);
    assert!((one.estimate - other.estimate).abs() <= spread);
}

#[test]
fn saddle_check_on_jump_model() {
    let p = jumpy();
    let pay = PayoffSpec::new(
        PayoffKind::Russian {
            floor: 1.05,
            delta: 0.04,
        },
        0.06,
    )
    .unwrap();
    let ml = build_exact(&p, &pay, 6).unwrap();
    let res = solve(&ml.lattice);
    let report = saddle_check(
        &p,
        &pay,
        &ml,
        &res,
        Kernel::H,
        &McConfig::new(50_000, 1),
        10,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_abs_diff_eq!(report.value, res.value());
}

#[test]
fn tie_lattice_settles_per_kernel() {
    // root: lower = upper, so both flags are set at the root
    let mut b = LatticeBuilder::new();
    b.add_node(0, 1.0, 1.0, [(1, 0.5), (2, 0.5)]);
    b.add_node(1, 0.0, 3.0, []);
    b.add_node(1, 4.0, 5.0, []);
    let lat = b.build(0).unwrap();
    for kernel in [Kernel::H, Kernel::J] {
        let g = enumerate_game_value(&lat, kernel).unwrap();
        assert_eq!((g.inf_sup, g.sup_inf), (1.0, 1.0));
    }
}
