//! Acceptance checks. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (bypassing the test harness capture) before asserting.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lsdf::acpf::solve_nominal;
use lsdf::case::{builtin_case, BusKind, NetworkCase};
use lsdf::evaluation::{compare_sets, convergence_study, evaluate, FactorMatrix};
use lsdf::lsdf::{
    column_sum_check, fit, predict_lsdf, solve_lsdf, total_loss_prediction, NormalEquations,
    SolveOptions,
};
use lsdf::ptdf::{compute_ptdf, predict_ptdf};
use lsdf::sampling::{enumerate_grid_samples, generate_samples, split_train_test};

/// Total loss of the 14-bus case at nominal load from an independent
/// Newton solver (pypower `runpf`, mismatch tolerance 1e-10), MW.
const CASE14_REFERENCE_LOSS: f64 = 13.393272357898612;

fn case(name: &str) -> NetworkCase {
    builtin_case(name).unwrap().unwrap()
}

fn report(n: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr();
    writeln!(err, "criterion {n}: {verdict} - {title} ({detail})").unwrap();
}

#[test]
fn criterion_1_two_bus_worked_example() {
    let start = Instant::now();
    let c = case("case2");
    let mut failures = Vec::new();

    let nominal = solve_nominal(&c).unwrap();
    let ptdf = compute_ptdf(&c, None).unwrap();
    let (from, to) = predict_ptdf(&ptdf, &nominal.p_inj).unwrap();
    let ptdf_err = [(from[0] - nominal.p_from[0]).abs(), (to[0] - nominal.p_to[0]).abs()];
    if (ptdf_err[0] - 10.0).abs() > 1e-6 || ptdf_err[1] > 1e-6 {
        failures.push(format!("PTDF errors {ptdf_err:?}, expected [10, 0]"));
    }

    let (train, test) = split_train_test(&c, 0.4, 40, 40, (7, 8)).unwrap();
    let x = fit(&train).unwrap();
    let expected = [[1.0, 0.0], [0.0, 1.0]];
    for (r, row) in expected.iter().enumerate() {
        for (i, &e) in row.iter().enumerate() {
            if (x.values[(r, i)] - e).abs() > 1e-3 {
                failures.push(format!("X[{r},{i}] = {}", x.values[(r, i)]));
            }
        }
    }
    let mut worst_flow = 0.0_f64;
    let mut worst_loss = 0.0_f64;
    for s in test.scenarios.iter().chain([&nominal_scenario(&nominal)]) {
        let pred = predict_lsdf(&x, &s.p_inj).unwrap();
        for (p, t) in pred.iter().zip(&s.p_branch) {
            worst_flow = worst_flow.max((p - t).abs());
        }
        worst_loss = worst_loss.max(((pred[0] + pred[1]) - (s.p_branch[0] + s.p_branch[1])).abs());
    }
    if worst_flow >= 0.01 {
        failures.push(format!("LSDF flow error {worst_flow} MW"));
    }
    if worst_loss >= 0.01 {
        failures.push(format!("LSDF loss error {worst_loss} MW"));
    }
    let elapsed = start.elapsed().as_secs_f64();
    if elapsed >= 1.0 {
        failures.push(format!("took {elapsed:.2} s"));
    }
    let pass = failures.is_empty();
    report(
        1,
        "two-bus worked example",
        pass,
        &format!(
            "PTDF err from/to {:.6}/{:.6} MW, LSDF max flow err {worst_flow:.2e} MW, loss err {worst_loss:.2e} MW, {elapsed:.2} s{}",
            ptdf_err[0],
            ptdf_err[1],
            failure_suffix(&failures)
        ),
    );
    assert!(pass, "{failures:?}");
}

fn nominal_scenario(sol: &lsdf::acpf::PowerFlowSolution) -> lsdf::sampling::Scenario {
    lsdf::sampling::Scenario {
        index: usize::MAX,
        eta_a: 1.0,
        p_inj: sol.p_inj.clone(),
        p_branch: sol.branch_end_flows(),
        v_mag: sol.v_mag.clone(),
        theta: sol.theta.clone(),
        load_p: Vec::new(),
        load_q: Vec::new(),
    }
}

fn failure_suffix(failures: &[String]) -> String {
    if failures.is_empty() {
        String::new()
    } else {
        format!("; {}", failures.join("; "))
    }
}

#[test]
fn criterion_2_total_loss_identity() {
    let mut failures = Vec::new();
    let mut details = Vec::new();
    for name in ["case5", "case24_ieee_rts", "case30", "case57", "case118"] {
        let start = Instant::now();
        let c = case(name);
        let n = c.n_buses();
        let (train, test) = split_train_test(&c, 0.4, 20 * n, 20 * n, (21, 22)).unwrap();
        let x = fit(&train).unwrap();
        let active = n - x.excluded_buses.len();
        if x.regularization_used || x.rank_of_a != active {
            failures.push(format!(
                "{name}: rank {} of {active} active buses, regularized {}",
                x.rank_of_a, x.regularization_used
            ));
            continue;
        }
        let mut worst_loss = 0.0_f64;
        for s in &test.scenarios {
            let predicted = total_loss_prediction(&x, &s.p_inj).unwrap();
            worst_loss = worst_loss.max((predicted - s.injection_sum()).abs());
        }
        let deviation = column_sum_check(&x);
        let worst_col = (0..n)
            .filter(|i| !x.excluded_buses.contains(i))
            .map(|i| deviation[i].abs())
            .fold(0.0, f64::max);
        let elapsed = start.elapsed().as_secs_f64();
        details.push(format!(
            "{name}: loss {worst_loss:.1e} MW, column sum {worst_col:.1e}, {} transit buses, {elapsed:.1} s",
            x.excluded_buses.len()
        ));
        if worst_loss > 1e-4 {
            failures.push(format!("{name}: loss identity off by {worst_loss} MW"));
        }
        if worst_col > 1e-6 {
            failures.push(format!("{name}: column sum off by {worst_col}"));
        }
        if elapsed >= 60.0 {
            failures.push(format!("{name}: took {elapsed:.1} s"));
        }
    }
    let pass = failures.is_empty();
    report(2, "total-loss identity", pass, &(details.join("; ") + &failure_suffix(&failures)));
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_3_lsdf_vs_ptdf_errors() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut details = Vec::new();
    for name in ["case30", "case57", "case118"] {
        let c = case(name);
        let n = c.n_buses();
        let (train, test) = split_train_test(&c, 0.4, 20 * n, 20 * n, (7, 8)).unwrap();
        let cmp = compare_sets(&c, &train, &test).unwrap();
        let ratio = cmp.ptdf.avg_err / cmp.lsdf.avg_err;
        details.push(format!(
            "{name}: LSDF {:.4} MW, PTDF {:.4} MW, x{ratio:.0}",
            cmp.lsdf.avg_err, cmp.ptdf.avg_err
        ));
        if cmp.lsdf.avg_err > 0.1 {
            failures.push(format!("{name}: LSDF avg error {} MW", cmp.lsdf.avg_err));
        }
        if ratio < 10.0 {
            failures.push(format!("{name}: PTDF/LSDF ratio {ratio}"));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    if elapsed >= 600.0 {
        failures.push(format!("took {elapsed:.0} s"));
    }
    let pass = failures.is_empty();
    report(
        3,
        "LSDF vs PTDF average error",
        pass,
        &format!("{}; {elapsed:.1} s{}", details.join("; "), failure_suffix(&failures)),
    );
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_4_training_optimality() {
    let mut failures = Vec::new();
    let mut details = Vec::new();
    for name in ["case2", "case5", "case14", "case24_ieee_rts", "case30", "case57"] {
        let c = case(name);
        let n = c.n_buses();
        let (train, test) = split_train_test(&c, 0.4, 20 * n, 5 * n, (31, 32)).unwrap();
        let cmp = compare_sets(&c, &train, &test).unwrap();
        let slack = 1e-9 * cmp.ptdf_train_sse.abs();
        details.push(format!(
            "{name}: {:.3e} <= {:.3e}",
            cmp.lsdf_train_sse, cmp.ptdf_train_sse
        ));
        if cmp.lsdf_train_sse > cmp.ptdf_train_sse + slack {
            failures.push(format!(
                "{name}: LSDF SSE {} > PTDF SSE {}",
                cmp.lsdf_train_sse, cmp.ptdf_train_sse
            ));
        }
    }
    let pass = failures.is_empty();
    report(4, "training-set optimality", pass, &(details.join("; ") + &failure_suffix(&failures)));
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_5_sample_count_convergence() {
    let start = Instant::now();
    let c = case("case5");
    let n = c.n_buses();
    let reference = enumerate_grid_samples(&c, 0.5, 50).unwrap();
    let schedule = [n, 2 * n, 5 * n, 10 * n, 20 * n];
    let curve = convergence_study(&reference, &schedule, 2024).unwrap();
    let at = |k: usize| curve.points.iter().find(|p| p.k == k).unwrap();
    let rel = (at(10 * n).ci - curve.reference_ci).abs() / curve.reference_ci;
    let elapsed = start.elapsed().as_secs_f64();
    let mut failures = Vec::new();
    if rel > 0.02 {
        failures.push(format!("CI at 10N off by {:.2}%", 100.0 * rel));
    }
    if elapsed >= 120.0 {
        failures.push(format!("took {elapsed:.0} s"));
    }
    let pass = failures.is_empty();
    let curve_text: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("K={} CI={:.4} dist={:.3e}", p.k, p.ci, p.factor_distance))
        .collect();
    report(
        5,
        "sample-count convergence",
        pass,
        &format!(
            "reference {} grid points, CI {:.4}; {}; 10N deviation {:.3}%, {elapsed:.1} s{}",
            curve.reference_k,
            curve.reference_ci,
            curve_text.join(", "),
            100.0 * rel,
            failure_suffix(&failures)
        ),
    );
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_6_exact_recovery() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, m) = (12, 30);
    let truth = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let mut ne = NormalEquations::new(n, m);
    for _ in 0..3 * n {
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let flows: Vec<f64> = (0..m).map(|l| (0..n).map(|i| truth[(l, i)] * p[i]).sum()).collect();
        ne.accumulate(&p, &flows).unwrap();
    }
    let x = solve_lsdf(&ne, SolveOptions::default()).unwrap();
    let rel = (&x.values - &truth).norm() / truth.norm();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = rel <= 1e-8 && elapsed < 10.0 && !x.regularization_used;
    report(
        6,
        "exact recovery of a known factor matrix",
        pass,
        &format!("relative Frobenius error {rel:.2e}, rank {}, {elapsed:.3} s", x.rank_of_a),
    );
    assert!(pass);
}

#[test]
fn criterion_7_solver_correctness() {
    let mut failures = Vec::new();
    let mut details = Vec::new();
    for name in ["case5", "case14", "case24_ieee_rts", "case30", "case57", "case118", "case300"] {
        let c = case(name);
        let sol = solve_nominal(&c).unwrap();
        if !sol.converged || sol.max_mismatch > 1e-8 {
            failures.push(format!("{name}: converged {} mismatch {}", sol.converged, sol.max_mismatch));
            continue;
        }
        let conservation = conservation_error(&c, &sol);
        details.push(format!(
            "{name}: {} it, mismatch {:.1e}, conservation {conservation:.1e}",
            sol.iterations, sol.max_mismatch
        ));
        if conservation > 1e-6 {
            failures.push(format!("{name}: conservation error {conservation} p.u."));
        }
        if name == "case14" {
            let rel = (sol.total_loss() - CASE14_REFERENCE_LOSS).abs() / CASE14_REFERENCE_LOSS;
            details.push(format!("case14 loss {:.6} MW vs reference ({:.1e} rel)", sol.total_loss(), rel));
            if rel > 0.005 {
                failures.push(format!("case14 loss {} MW", sol.total_loss()));
            }
        }
    }
    let pass = failures.is_empty();
    report(7, "AC power flow correctness", pass, &(details.join("; ") + &failure_suffix(&failures)));
    assert!(pass, "{failures:?}");
}

/// Largest per-bus imbalance in p.u.: branch-end flows against the bus
/// injection (P and Q), and the injection against the schedule on buses
/// where it is fixed.
fn conservation_error(c: &NetworkCase, sol: &lsdf::acpf::PowerFlowSolution) -> f64 {
    let n = c.n_buses();
    let base = c.base_mva();
    let (mut p_net, mut q_net) = (vec![0.0; n], vec![0.0; n]);
    for (l, br) in c.branches().iter().enumerate() {
        p_net[br.from_bus] += sol.p_from[l];
        p_net[br.to_bus] += sol.p_to[l];
        q_net[br.from_bus] += sol.q_from[l];
        q_net[br.to_bus] += sol.q_to[l];
    }
    let mut gen = vec![0.0; n];
    for g in c.generators().iter().filter(|g| g.in_service) {
        gen[g.bus] += g.p_set;
    }
    let mut worst = 0.0_f64;
    for (i, bus) in c.buses().iter().enumerate() {
        worst = worst.max((p_net[i] - sol.p_inj[i]).abs() / base);
        worst = worst.max((q_net[i] - sol.q_inj[i]).abs() / base);
        if bus.kind != BusKind::Slack {
            let scheduled = gen[i] - bus.p_load_max;
            worst = worst.max((sol.p_inj[i] + sol.p_shunt[i] - scheduled).abs() / base);
        }
    }
    worst
}

#[test]
fn criterion_8_property_spot_checks() {
    let mut failures = Vec::new();

    // PTDF superposition.
    let c = case("case30");
    let ptdf = compute_ptdf(&c, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<f64> = (0..c.n_buses()).map(|_| rng.random_range(-50.0..50.0)).collect();
    let b: Vec<f64> = (0..c.n_buses()).map(|_| rng.random_range(-50.0..50.0)).collect();
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
    let (fa, fb, fs) = (ptdf.predict(&a).unwrap(), ptdf.predict(&b).unwrap(), ptdf.predict(&sum).unwrap());
    let sup = (0..fa.len()).map(|l| (fs[l] - (2.0 * fa[l] - 3.0 * fb[l])).abs()).fold(0.0, f64::max);
    if sup > 1e-9 {
        failures.push(format!("superposition residual {sup}"));
    }

    // Radial network: entries in {0, ±1}.
    let tree = NetworkCase::from_json(
        r#"{"name": "tree", "base_mva": 100,
            "buses": [{"id": 1, "kind": "slack"}, {"id": 2, "kind": "pq"}, {"id": 3, "kind": "pq"},
                      {"id": 4, "kind": "pq"}, {"id": 5, "kind": "pq"}],
            "branches": [{"from": 1, "to": 2, "x": 0.1}, {"from": 2, "to": 3, "x": 0.3},
                         {"from": 4, "to": 2, "x": 0.07}, {"from": 1, "to": 5, "x": 0.2}],
            "generators": [{"bus": 1}]}"#,
    )
    .unwrap();
    let tp = compute_ptdf(&tree, None).unwrap();
    let off = tp
        .values
        .iter()
        .map(|v| [0.0_f64, 1.0, -1.0].iter().map(|t| (v - t).abs()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    if off > 1e-12 {
        failures.push(format!("tree PTDF entry off by {off}"));
    }

    // LSDF scale invariance.
    let c5 = case("case5");
    let train = generate_samples(&c5, 0.4, 100, 3).unwrap();
    let x = fit(&train).unwrap();
    let mut scaled = train.clone();
    for s in &mut scaled.scenarios {
        s.p_inj.iter_mut().for_each(|v| *v *= 7.5);
        s.p_branch.iter_mut().for_each(|v| *v *= 7.5);
    }
    let xs = fit(&scaled).unwrap();
    let scale_rel = (&xs.values - &x.values).norm() / x.values.norm();
    if scale_rel > 1e-9 {
        failures.push(format!("scale invariance {scale_rel}"));
    }

    // Sampling reproducibility and load bounds.
    let c14 = case("case14");
    let r = 0.3;
    let s1 = generate_samples(&c14, r, 60, 99).unwrap();
    let s2 = generate_samples(&c14, r, 60, 99).unwrap();
    if s1 != s2 {
        failures.push("same seed gave different sample sets".into());
    }
    let mut bound_violations = 0;
    for s in &s1.scenarios {
        for (i, bus) in c14.buses().iter().enumerate() {
            let max = bus.p_load_max;
            let lo = (1.0 - r) * 0.95 * max;
            let hi = 1.05 * max;
            let (lo, hi) = if max >= 0.0 { (lo, hi) } else { (hi, lo) };
            if s.load_p[i] < lo - 1e-12 || s.load_p[i] > hi + 1e-12 {
                bound_violations += 1;
            }
        }
        if s.eta_a < 1.0 - r || s.eta_a > 1.0 {
            bound_violations += 1;
        }
    }
    if bound_violations > 0 {
        failures.push(format!("{bound_violations} load bound violations"));
    }

    // Both models scored on the same footing.
    let test = generate_samples(&c5, 0.4, 20, 4).unwrap();
    let lsdf_rep = evaluate(&FactorMatrix::from_lsdf(&x), &test).unwrap();
    let ptdf_rep = evaluate(&compute_ptdf(&c5, None).unwrap().expanded(), &test).unwrap();
    if lsdf_rep.per_branch_end.len() != ptdf_rep.per_branch_end.len() {
        failures.push("report shapes differ".into());
    }

    let pass = failures.is_empty();
    report(
        8,
        "property spot checks",
        pass,
        &format!(
            "superposition {sup:.1e}, tree {off:.1e}, scale {scale_rel:.1e}, {} scenarios in bounds{}",
            s1.k(),
            failure_suffix(&failures)
        ),
    );
    assert!(pass, "{failures:?}");
}
