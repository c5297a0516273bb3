use approx::assert_abs_diff_eq;
use game_lattice::dynkin::solve;
use game_lattice::lattice::{
    binomial_tails, build, build_exact, build_quantized, EnginePolicy, ModelLattice, QuantGrid,
};
use game_lattice::model::{step_params, JumpLaw, MertonParams};
use game_lattice::payoff::{PayoffKind, PayoffSpec};
use proptest::prelude::*;

fn merton(sigma: f64, r: f64, lambda: f64, law: JumpLaw) -> MertonParams {
    MertonParams {
        s0: 1.0,
        sigma,
        r,
        lambda,
        horizon: 1.0,
        jump_law: law,
    }
}

fn russian(m: f64, delta: f64, r: f64) -> PayoffSpec {
    PayoffSpec::new(PayoffKind::Russian { floor: m, delta }, r).unwrap()
}

fn quantized(q: u32, eps_tail: f64) -> EnginePolicy {
    EnginePolicy::Quantized { q, eps_tail }
}

/// `(time, price, lower, upper)` of every node, sorted.
fn node_table(ml: &ModelLattice) -> Vec<(u32, f64, f64, f64)> {
    let mut rows: Vec<_> = ml
        .states
        .iter()
        .zip(ml.lattice.nodes())
        .map(|(s, n)| (n.time, s.price, n.lower, n.upper))
        .collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rows
}

#[test]
fn unit_quantum_matches_exact_engine_node_for_node() {
    let p = merton(0.2, 0.0, 0.0, JumpLaw::identity());
    for m in [0.9, 1.0, 1.2] {
        let pay = russian(m, 0.05, 0.0);
        let exact = build_exact(&p, &pay, 8).unwrap();
        let quant = build(&p, &pay, 8, &quantized(1, 1e-9)).unwrap();
        assert_eq!(exact.lattice.len(), quant.lattice.len(), "M = {m}");
        for (e, q) in node_table(&exact).iter().zip(node_table(&quant)) {
            assert_eq!(e.0, q.0);
            for (x, y) in [(e.1, q.1), (e.2, q.2), (e.3, q.3)] {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(
            solve(&exact.lattice).value(),
            solve(&quant.lattice).value(),
            epsilon = 1e-12
        );
    }
}

#[test]
fn zero_jump_cap_reduces_to_diffusion_grid() {
    let law = JumpLaw::single(-0.2).unwrap();
    let jumpy = merton(0.2, 0.06, 0.1, law);
    let plain = merton(0.2, 0.06, 0.0, JumpLaw::identity());
    let pay = PayoffSpec::new(
        PayoffKind::GamePut {
            strike: 1.0,
            delta: 0.05,
        },
        0.06,
    )
    .unwrap();
    let n = 20;
    // eps_tail above P(at least one jump) forces j_max = 0
    let capped = build(&jumpy, &pay, n, &quantized(4, 0.5)).unwrap();
    let reference = build(&plain, &pay, n, &quantized(4, 1e-9)).unwrap();
    assert_eq!(capped.meta.quantization.as_ref().unwrap().j_max, 0);
    assert_eq!(capped.lattice.len(), reference.lattice.len());
    let prices = |ml: &ModelLattice| {
        node_table(ml)
            .iter()
            .map(|r| (r.0, r.1))
            .collect::<Vec<_>>()
    };
    assert_eq!(prices(&capped), prices(&reference));
    let step = step_params(&jumpy, n).unwrap();
    for id in 0..capped.lattice.len() as u32 {
        let edges = capped.lattice.transitions(id);
        if !edges.is_empty() {
            assert_eq!(edges.len(), 2);
            let mut probs: Vec<f64> = edges.iter().map(|t| t.prob).collect();
            probs.sort_by(f64::total_cmp);
            let mut expected = [step.p_up, 1.0 - step.p_up];
            expected.sort_by(f64::total_cmp);
            assert_eq!(probs, expected);
        }
    }
}

#[test]
fn probability_is_conserved_and_redirected_mass_matches_tails() {
    let law = JumpLaw::from_relative(&[(-0.2, 0.6), (0.1, 0.4)]).unwrap();
    let p = merton(0.25, 0.05, 3.0, law);
    let pay = russian(1.1, 0.02, 0.05);
    let n = 24;
    for policy in [EnginePolicy::Exact, quantized(4, 1e-9), quantized(2, 1e-3)] {
        if matches!(policy, EnginePolicy::Exact) {
            // exact engine has no jump cap; keep it small
            let ml = build(&p, &pay, 8, &policy).unwrap();
            for mass in ml.lattice.layer_probabilities() {
                assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-10);
            }
            continue;
        }
        let ml = build(&p, &pay, n, &policy).unwrap();
        for mass in ml.lattice.layer_probabilities() {
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-10);
        }
        let meta = ml.meta.quantization.clone().unwrap();
        let step = ml.step;
        assert!(meta.tail_mass <= meta.eps_tail);
        assert_abs_diff_eq!(
            meta.tail_mass,
            binomial_tails(n, step.jump_prob)[meta.j_max],
            epsilon = 1e-15
        );
        // mass redirected at step k is P(capped at k) * jump_prob, and a path is capped once
        // it has seen j_max jumps
        let reach = ml.lattice.reach_probabilities();
        let redirected: f64 = (0..ml.lattice.len())
            .filter(|&id| ml.states[id].capped && !ml.lattice.is_terminal(id as u32))
            .map(|id| reach[id] * step.jump_prob)
            .sum();
        let expected: f64 = (0..n)
            .map(|k| {
                let at_least = if meta.j_max == 0 {
                    1.0
                } else {
                    binomial_tails(k, step.jump_prob)
                        .get(meta.j_max - 1)
                        .copied()
                        .unwrap_or(0.0)
                };
                at_least * step.jump_prob
            })
            .sum();
        assert_abs_diff_eq!(redirected, expected, epsilon = 1e-12);
    }
}

#[test]
fn crr_put_has_binomial_layers() {
    let p = merton(0.3, 0.04, 0.0, JumpLaw::identity());
    let pay = PayoffSpec::new(
        PayoffKind::GamePut {
            strike: 1.0,
            delta: 0.1,
        },
        0.04,
    )
    .unwrap();
    let ml = build_exact(&p, &pay, 12).unwrap();
    for k in 0..=12 {
        assert_eq!(ml.lattice.layer(k).len(), k as usize + 1);
    }
}

#[test]
fn builds_are_deterministic_across_runs_and_workers() {
    let law = JumpLaw::single(-0.2).unwrap();
    let p = merton(0.2, 0.06, 0.5, law);
    let pay = russian(1.1, 0.02, 0.06);
    let pool = |w| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .unwrap()
    };
    for (n, policy) in [(9, EnginePolicy::Exact), (60, quantized(4, 1e-9))] {
        let a = pool(1).install(|| build(&p, &pay, n, &policy).unwrap());
        let b = pool(4).install(|| build(&p, &pay, n, &policy).unwrap());
        let c = build(&p, &pay, n, &policy).unwrap();
        assert_eq!(a.lattice, b.lattice);
        assert_eq!(a.lattice, c.lattice);
        assert_eq!(
            solve(&a.lattice).value().to_bits(),
            solve(&b.lattice).value().to_bits()
        );
    }
}

#[test]
fn quantized_engine_tracks_exact_engine() {
    let law = JumpLaw::single(-0.2).unwrap();
    let p = merton(0.2, 0.06, 0.1, law);
    let pay = russian(1.1, 0.02, 0.06);
    let exact = solve(&build_exact(&p, &pay, 10).unwrap().lattice).value();
    let grid = QuantGrid::new(&step_params(&p, 10).unwrap(), &p.jump_law, 4, 1e-9).unwrap();
    let quant = solve(&build_quantized(&p, &pay, 10, &grid).unwrap().lattice).value();
    assert!(
        (quant - exact).abs() <= 0.005 * exact,
        "exact {exact}, quantized {quant}"
    );
}

fn payoff_strategy() -> impl Strategy<Value = PayoffKind> {
    prop_oneof![
        (0.5..1.5f64, 0.0..0.2f64).prop_map(|(floor, delta)| PayoffKind::Russian { floor, delta }),
        (0.5..1.5f64, 0.0..0.2f64)
            .prop_map(|(strike, delta)| PayoffKind::GamePut { strike, delta }),
        (0.5..1.5f64, 0.0..0.2f64)
            .prop_map(|(strike, delta)| PayoffKind::GameCall { strike, delta }),
        (0.0..0.2f64).prop_map(|delta| PayoffKind::Asian { delta }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn states_are_positive_and_statistics_monotone(
        sigma in 0.1..0.5f64,
        r in 0.0..0.1f64,
        lambda in 0.0..2.0f64,
        u in -0.5..0.3f64,
        kind in payoff_strategy(),
        n in 1usize..9,
        exact in any::<bool>(),
    ) {
        let p = merton(sigma, r, lambda, JumpLaw::single(u).unwrap());
        let pay = PayoffSpec::new(kind, r).unwrap();
        let policy = if exact { EnginePolicy::Exact } else { quantized(3, 1e-6) };
        let Ok(ml) = build(&p, &pay, n, &policy) else { return Ok(()) };
        let res = solve(&ml.lattice);
        let root = ml.lattice.node(ml.lattice.root());
        prop_assert!(root.lower <= res.value() && res.value() <= root.upper && res.value() >= 0.0);
        for id in 0..ml.lattice.len() as u32 {
            let s = &ml.states[id as usize];
            prop_assert!(s.price > 0.0 && s.price.is_finite());
            for t in ml.lattice.transitions(id) {
                let child = &ml.states[t.child as usize];
                if !s.statistic.is_nan() {
                    prop_assert!(child.statistic >= s.statistic);
                }
            }
        }
    }
}
