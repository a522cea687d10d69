use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lsdf::case::{branch_parameter_summary, builtin_case, NetworkCase};
use lsdf::evaluation::{evaluate, FactorMatrix};
use lsdf::lsdf::{fit, solve_lsdf, NormalEquations, SolveOptions};
use lsdf::ptdf::compute_ptdf;
use lsdf::sampling::{generate_samples, SampleSet};

/// Random connected network: a spanning tree over `n` buses plus `extra`
/// chords, described as case JSON. Bus ids are sparse and unordered.
fn network_json(n: usize, extra: usize, seed: u64, tree_only: bool) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<u64> = (0..n).map(|i| 10 * i as u64 + 3 + (i as u64 % 3)).collect();
    let mut buses = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let kind = if i == 0 { "slack" } else if i % 3 == 1 { "pv" } else { "pq" };
        let load = if i == 0 { 0.0 } else { rng.random_range(0.0..60.0) };
        buses.push(format!(
            r#"{{"id": {id}, "kind": "{kind}", "p_load_max": {load}, "q_load_max": {}}}"#,
            load * 0.3
        ));
    }
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((rng.random_range(0..i), i));
    }
    if !tree_only {
        for _ in 0..extra {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                edges.push((a, b));
            }
        }
    }
    let branches: Vec<String> = edges
        .iter()
        .map(|&(a, b)| {
            let x = rng.random_range(0.02..0.3);
            let r = x * rng.random_range(0.05..0.4);
            let tap = if rng.random_bool(0.2) { rng.random_range(0.95..1.05) } else { 1.0 };
            format!(
                r#"{{"from": {}, "to": {}, "r": {r}, "x": {x}, "b": {}, "tap": {tap}}}"#,
                ids[a],
                ids[b],
                rng.random_range(0.0..0.05)
            )
        })
        .collect();
    let gens: Vec<String> = (0..n)
        .filter(|i| i % 3 == 1 || *i == 0)
        .map(|i| format!(r#"{{"bus": {}, "p_set": {}, "v_set": 1.0}}"#, ids[i], rng.random_range(10.0..40.0)))
        .collect();
    format!(
        r#"{{"name": "net{seed}", "base_mva": 100, "buses": [{}], "branches": [{}], "generators": [{}]}}"#,
        buses.join(","),
        branches.join(","),
        gens.join(",")
    )
}

fn network(n: usize, extra: usize, seed: u64) -> NetworkCase {
    NetworkCase::from_json(&network_json(n, extra, seed, false)).unwrap()
}

fn synthetic_set(n: usize, m: usize, k: usize, seed: u64, noise: f64) -> (SampleSet, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let scenarios = (0..k)
        .map(|index| {
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
            let flows = (0..m)
                .map(|l| (0..n).map(|i| truth[(l, i)] * p[i]).sum::<f64>() + noise * rng.random_range(-1.0..1.0))
                .collect();
            lsdf::sampling::Scenario {
                index,
                eta_a: 1.0,
                p_inj: p,
                p_branch: flows,
                v_mag: vec![],
                theta: vec![],
                load_p: vec![],
                load_q: vec![],
            }
        })
        .collect();
    let set = SampleSet {
        scenarios,
        r: 0.0,
        seed,
        method: lsdf::sampling::SamplingMethod::Random { jitter: 0.0 },
        case_name: "synthetic".into(),
        case_hash: "synthetic".into(),
        rejected_count: 0,
        n_buses: n,
        n_branches: m / 2,
    };
    (set, truth)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn case_json_round_trip(n in 2usize..9, extra in 0usize..5, seed in any::<u64>()) {
        let case = network(n, extra, seed);
        let back = NetworkCase::from_json(&case.to_json()).unwrap();
        prop_assert_eq!(&back, &case);
        prop_assert_eq!(back.hash(), case.hash());
    }

    #[test]
    fn bus_index_is_a_bijection(n in 2usize..9, seed in any::<u64>()) {
        let case = network(n, 2, seed);
        for i in 0..case.n_buses() {
            prop_assert_eq!(case.bus_index(case.external_id(i)), Some(i));
        }
    }

    #[test]
    fn branch_summary_covers_every_branch(n in 2usize..9, extra in 0usize..5, seed in any::<u64>()) {
        let case = network(n, extra, seed);
        let summary = branch_parameter_summary(&case);
        let count: usize = summary.iter().map(|s| s.count).sum();
        prop_assert_eq!(count, case.n_branches());
        let weighted: f64 = summary.iter().map(|s| s.count as f64 * s.mean_x).sum();
        let direct: f64 = case.branches().iter().map(|b| b.x).sum();
        prop_assert!((weighted - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn ptdf_superposition(n in 2usize..9, extra in 0usize..5, seed in any::<u64>(),
                          a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let case = network(n, extra, seed);
        let ptdf = compute_ptdf(&case, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let p1: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let p2: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let mix: Vec<f64> = p1.iter().zip(&p2).map(|(x, y)| a * x + b * y).collect();
        let (f1, f2, fm) = (ptdf.predict(&p1).unwrap(), ptdf.predict(&p2).unwrap(), ptdf.predict(&mix).unwrap());
        for l in 0..fm.len() {
            let expect = a * f1[l] + b * f2[l];
            prop_assert!((fm[l] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn ptdf_tree_entries_are_unit(n in 2usize..10, seed in any::<u64>()) {
        let case = NetworkCase::from_json(&network_json(n, 0, seed, true)).unwrap();
        let ptdf = compute_ptdf(&case, None).unwrap();
        for &v in ptdf.values.iter() {
            let off = [0.0, 1.0, -1.0].iter().map(|t: &f64| (v - t).abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(off <= 1e-12, "entry {}", v);
        }
    }

    #[test]
    fn ptdf_balanced_flows_ignore_slack_choice(n in 3usize..9, extra in 0usize..5, seed in any::<u64>(), s in 0usize..9) {
        let case = network(n, extra, seed);
        let other = s % n;
        let base = compute_ptdf(&case, None).unwrap();
        let moved = compute_ptdf(&case, Some(other)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let total: f64 = p.iter().sum();
        p[0] -= total;
        let (fa, fb) = (base.predict(&p).unwrap(), moved.predict(&p).unwrap());
        for (x, y) in fa.iter().zip(&fb) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn lsdf_scale_invariance(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let (set, _) = synthetic_set(6, 8, 30, seed, 0.5);
        let x = fit(&set).unwrap();
        let mut scaled = set.clone();
        for s in &mut scaled.scenarios {
            s.p_inj.iter_mut().for_each(|v| *v *= scale);
            s.p_branch.iter_mut().for_each(|v| *v *= scale);
        }
        let xs = fit(&scaled).unwrap();
        prop_assert!((&xs.values - &x.values).norm() <= 1e-9 * x.values.norm());
    }

    #[test]
    fn lsdf_stationarity_and_optimality(seed in any::<u64>(), bump in -1e-3f64..1e-3) {
        let (set, _) = synthetic_set(5, 6, 25, seed, 2.0);
        let ne = NormalEquations::from_samples(&set).unwrap();
        let x = solve_lsdf(&ne, SolveOptions::default()).unwrap();
        for l in 0..6 {
            let xl = x.values.row(l).transpose();
            let residual = ne.a() * &xl - ne.b().column(l);
            prop_assert!(residual.norm() <= 1e-8 * ne.b().column(l).norm());
        }
        let model = |values: DMatrix<f64>| FactorMatrix { tag: "m".into(), values, case_hash: "synthetic".into() };
        let best = evaluate(&model(x.values.clone()), &set).unwrap().sse;
        let mut moved = x.values.clone();
        moved[(seed as usize % 6, (seed as usize / 6) % 5)] += bump;
        let other = evaluate(&model(moved), &set).unwrap().sse;
        prop_assert!(best <= other * (1.0 + 1e-12));
    }

    #[test]
    fn evaluation_is_permutation_invariant(seed in any::<u64>()) {
        let (set, truth) = synthetic_set(4, 6, 40, seed, 3.0);
        let model = FactorMatrix { tag: "t".into(), values: truth, case_hash: "synthetic".into() };
        let mut shuffled = set.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::seq::SliceRandom;
        shuffled.scenarios.shuffle(&mut rng);
        let (a, b) = (evaluate(&model, &set).unwrap(), evaluate(&model, &shuffled).unwrap());
        prop_assert!((a.avg_err - b.avg_err).abs() <= 1e-9 * a.avg_err);
        prop_assert_eq!(a.max_err, b.max_err);
        for (x, y) in a.per_branch_end.iter().zip(&b.per_branch_end) {
            prop_assert_eq!(x.max_abs_err, y.max_abs_err);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sampling_is_reproducible_and_bounded(seed in any::<u64>(), r in 0.0f64..0.6) {
        let case = builtin_case("case5").unwrap().unwrap();
        let a = generate_samples(&case, r, 16, seed).unwrap();
        let b = generate_samples(&case, r, 16, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for s in &a.scenarios {
            prop_assert!(s.eta_a >= 1.0 - r && s.eta_a <= 1.0);
            for (i, bus) in case.buses().iter().enumerate() {
                let max = bus.p_load_max;
                let (lo, hi) = ((1.0 - r) * 0.95 * max, 1.05 * max);
                prop_assert!(s.load_p[i] >= lo.min(hi) - 1e-12 && s.load_p[i] <= hi.max(lo) + 1e-12);
            }
            // Losses equal net injection into the branch network.
            prop_assert!((s.total_loss() - s.injection_sum()).abs() <= 1e-9);
        }
    }

    #[test]
    fn sampling_ignores_thread_count(seed in any::<u64>()) {
        let case = builtin_case("case14").unwrap().unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| generate_samples(&case, 0.4, 70, seed).unwrap())
        };
        let one = run(1);
        let three = run(3);
        prop_assert_eq!(&one, &three);
        let x1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| fit(&one).unwrap());
        let x3 = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| fit(&one).unwrap());
        prop_assert_eq!(x1.values, x3.values);
    }
}

#[test]
fn bus_conservation_on_random_networks() {
    for seed in 0..20 {
        let case = network(7, 3, seed);
        let sol = lsdf::acpf::solve_nominal(&case).unwrap();
        assert!(sol.converged, "seed {seed}");
        let mut net = vec![0.0; case.n_buses()];
        for (l, br) in case.branches().iter().enumerate() {
            net[br.from_bus] += sol.p_from[l];
            net[br.to_bus] += sol.p_to[l];
        }
        for (a, b) in net.iter().zip(&sol.p_inj) {
            assert!((a - b).abs() / case.base_mva() <= 1e-6);
        }
    }
}
