use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::json;

use lsdf::acpf::solve_nominal;
use lsdf::case::{branch_parameter_summary, validate as check_case, NetworkCase};
use lsdf::evaluation::{
    compare_sets, convergence_study, evaluate as score, factor_histogram, worst_branch_drilldown,
    write_convergence_csv, write_histogram_csv, write_report_csv, write_table, Drilldown,
    ErrorReport, FactorMatrix,
};
use lsdf::lsdf::{fit_with, read_lsdf, write_lsdf, LsdfMatrix, SolveOptions};
use lsdf::ptdf::compute_ptdf;
use lsdf::sampling::{
    enumerate_grid_samples, generate_samples_with, read_sample_set, write_sample_set, SampleSet,
    SamplingConfig,
};

use crate::exit;
use crate::options::{
    load_case, run_tag, CaseArg, CompareArgs, ConvergeArgs, EvaluateArgs, FitArgs, PtdfArgs,
    SampleArgs,
};

fn create(dir: &Path, sub: &str, name: &str) -> anyhow::Result<(PathBuf, BufWriter<File>)> {
    let dir = dir.join(sub);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok((path, BufWriter::new(file)))
}

fn finish(path: PathBuf, mut out: BufWriter<File>) -> anyhow::Result<()> {
    out.flush().with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json(dir: &Path, sub: &str, name: &str, value: &serde_json::Value) -> anyhow::Result<()> {
    let (path, mut out) = create(dir, sub, name)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    finish(path, out)
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    let file = File::open(path).map_err(|e| exit(2, format!("cannot open {}: {e}", path.display())))?;
    Ok(BufReader::new(file))
}

fn slack_index(case: &NetworkCase, slack: Option<u64>) -> anyhow::Result<Option<usize>> {
    slack
        .map(|id| case.bus_index(id).ok_or_else(|| exit(2, format!("case has no bus {id}"))))
        .transpose()
}

fn read_samples(case: &NetworkCase, path: &Path) -> anyhow::Result<SampleSet> {
    let set = read_sample_set(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    if set.case_hash != case.hash() {
        return Err(exit(
            2,
            format!("{} was drawn from a different case than {}", path.display(), case.name()),
        ));
    }
    Ok(set)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

pub fn validate(a: &CaseArg) -> anyhow::Result<u8> {
    let case = load_case(&a.case)?;
    let violations = check_case(&case);
    if !violations.is_empty() {
        for v in &violations {
            println!("violation: {v}");
        }
        return Ok(1);
    }
    println!(
        "{}: {} buses, {} branches, {} generators, slack bus {}",
        case.name(),
        case.n_buses(),
        case.n_branches(),
        case.generators().len(),
        case.slack_bus().map(|s| case.external_id(s)).unwrap_or_default()
    );
    println!("{:<12} {:>6} {:>10} {:>10} {:>10} {:>8}", "class", "count", "mean r", "mean x", "mean b", "x/r");
    for s in branch_parameter_summary(&case) {
        let ratio = s.mean_x_over_r.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<12} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>8}",
            format!("{:?}", s.class).to_lowercase(),
            s.count,
            s.mean_r,
            s.mean_x,
            s.mean_b,
            ratio
        );
    }
    Ok(0)
}

pub fn power_flow(a: &CaseArg) -> anyhow::Result<u8> {
    let case = load_case(&a.case)?;
    let sol = solve_nominal(&case)?;
    if !sol.converged {
        return Err(exit(
            3,
            format!(
                "power flow did not converge in {} iterations (mismatch {:.3e} p.u.)",
                sol.iterations, sol.max_mismatch
            ),
        ));
    }
    println!(
        "{}: converged in {} iterations{}, max mismatch {:.3e} p.u., total loss {:.6} MW",
        case.name(),
        sol.iterations,
        if sol.flat_start { " from flat start" } else { "" },
        sol.max_mismatch,
        sol.total_loss()
    );
    let (path, mut out) = create(&a.out_dir, "reports", &format!("{}_pf.csv", case.name()))?;
    writeln!(out, "branch,from_bus,to_bus,p_from_mw,p_to_mw,q_from_mvar,q_to_mvar,loss_mw")?;
    for (l, br) in case.branches().iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            l + 1,
            case.external_id(br.from_bus),
            case.external_id(br.to_bus),
            sol.p_from[l],
            sol.p_to[l],
            sol.q_from[l],
            sol.q_to[l],
            sol.p_from[l] + sol.p_to[l]
        )?;
    }
    finish(path, out)?;
    Ok(0)
}

pub fn sample(a: &SampleArgs) -> anyhow::Result<u8> {
    let case = load_case(&a.case.case)?;
    let (set, tag) = match a.grid {
        Some(points) => {
            let set = enumerate_grid_samples(&case, a.r, points)?;
            (set, format!("{}_R{}_grid{points}", case.name(), a.r))
        }
        None => {
            let seed = a.seed.expect("clap requires --seed without --grid");
            let k = a.k.resolve(case.n_buses());
            let mut config = SamplingConfig::new(a.r, k, seed);
            if a.freeze_eta {
                config = config.frozen();
            }
            (generate_samples_with(&case, &config)?, run_tag(&case, a.r, k, seed))
        }
    };
    println!("{}: {} scenarios, {} rejected attempts", case.name(), set.k(), set.rejected_count);
    let (path, mut out) = create(&a.case.out_dir, "samples", &format!("{tag}.csv"))?;
    write_sample_set(&set, &case, &mut out)?;
    finish(path, out)?;
    Ok(0)
}

pub fn ptdf(a: &PtdfArgs) -> anyhow::Result<u8> {
    let case = load_case(&a.case.case)?;
    let ptdf = compute_ptdf(&case, slack_index(&case, a.slack)?)?;
    let name = match a.slack {
        Some(id) => format!("{}_ptdf_slack{id}.csv", case.name()),
        None => format!("{}_ptdf.csv", case.name()),
    };
    println!(
        "{}: {}×{} PTDF, reference bus {}",
        case.name(),
        ptdf.n_branches(),
        ptdf.n_buses(),
        case.external_id(ptdf.slack_bus)
    );
    let (path, mut out) = create(&a.case.out_dir, "factors", &name)?;
    ptdf.write_csv(&case, &mut out)?;
    finish(path, out)?;
    Ok(0)
}

fn save_factors(x: &LsdfMatrix, case: &NetworkCase, dir: &Path, stem: &str) -> anyhow::Result<()> {
    let (csv_path, mut csv) = create(dir, "factors", &format!("{stem}_lsdf.csv"))?;
    let (json_path, mut json) = create(dir, "factors", &format!("{stem}_lsdf.json"))?;
    write_lsdf(x, case, &mut csv, &mut json)?;
    finish(csv_path, csv)?;
    finish(json_path, json)
}

fn describe_fit(case: &NetworkCase, x: &LsdfMatrix) {
    let excluded: Vec<u64> = x.excluded_buses.iter().map(|&i| case.external_id(i)).collect();
    println!(
        "rank of A {} over {} active buses, regularization {}, transit buses {:?}",
        x.rank_of_a,
        case.n_buses() - excluded.len(),
        if x.regularization_used { "used" } else { "not used" },
        excluded
    );
}

pub fn fit(a: &FitArgs) -> anyhow::Result<u8> {
    let case = load_case(&a.case.case)?;
    let set = read_samples(&case, &a.samples)?;
    let x = fit_with(&set, SolveOptions { ridge: a.ridge })?;
    describe_fit(&case, &x);
    save_factors(&x, &case, &a.case.out_dir, &file_stem(&a.samples))?;
    Ok(0)
}

fn print_drilldown(d: &Drilldown) {
    let pct = d.err_percent.map(|p| format!("{p:.2}%")).unwrap_or_else(|| "-".into());
    println!(
        "{} worst: branch {} ({}→{}) {} end, max err {:.6} MW ({pct} of {:.3} MW) in scenario {}, transformer {}, next to slack {}",
        d.model_tag,
        d.branch,
        d.from_bus,
        d.to_bus,
        d.direction,
        d.max_abs_err,
        d.true_flow,
        d.scenario,
        d.is_transformer,
        d.slack_adjacent
    );
}

fn write_report(dir: &Path, stem: &str, report: &ErrorReport) -> anyhow::Result<()> {
    let tag = report.model_tag.to_lowercase();
    let (path, mut out) = create(dir, "reports", &format!("{stem}_{tag}_errors.csv"))?;
    write_report_csv(report, &mut out)?;
    finish(path, out)
}

pub fn evaluate(a: &EvaluateArgs) -> anyhow::Result<u8> {
    let case = load_case(&a.case.case)?;
    let set = read_samples(&case, &a.samples)?;
    let model = match &a.factors {
        Some(path) => {
            let sidecar = path.with_extension("json");
            let x = read_lsdf(open(path)?, open(&sidecar)?)
                .with_context(|| format!("reading {}", path.display()))?;
            if x.case_hash() != Some(case.hash()) {
                return Err(exit(2, format!("{} was fitted on a different case", path.display())));
            }
            FactorMatrix::from_lsdf(&x)
        }
        None => compute_ptdf(&case, slack_index(&case, a.slack)?)?.expanded(),
    };
    let report = score(&model, &set)?;
    println!(
        "{} on {} scenarios: avg err {:.6} MW, max err {:.6} MW",
        report.model_tag,
        set.k(),
        report.avg_err,
        report.max_err
    );
    let drill = worst_branch_drilldown(&report, &case);
    if let Some(d) = &drill {
        print_drilldown(d);
    }
    let stem = file_stem(&a.samples);
    write_report(&a.case.out_dir, &stem, &report)?;
    let tag = report.model_tag.to_lowercase();
    write_json(
        &a.case.out_dir,
        "reports",
        &format!("{stem}_{tag}_summary.json"),
        &json!({ "report": report, "worst": drill }),
    )?;
    Ok(0)
}

pub fn compare(a: &CompareArgs) -> anyhow::Result<u8> {
    let case = load_case(&a.case.case)?;
    let n = case.n_buses();
    let k_train = a.k.resolve(n);
    let k_test = a.k_test.unwrap_or(a.k).resolve(n);
    let test_seed = a.test_seed.unwrap_or(a.seed.wrapping_add(1));
    if test_seed == a.seed {
        return Err(exit(2, "training and test seeds must differ"));
    }
    let dir = &a.case.out_dir;
    let train = generate_samples_with(&case, &SamplingConfig::new(a.r, k_train, a.seed))?;
    let test = generate_samples_with(&case, &SamplingConfig::new(a.r, k_test, test_seed))?;
    let train_tag = run_tag(&case, a.r, k_train, a.seed);
    let test_tag = run_tag(&case, a.r, k_test, test_seed);
    for (set, tag) in [(&train, &train_tag), (&test, &test_tag)] {
        let (path, mut out) = create(dir, "samples", &format!("{tag}.csv"))?;
        write_sample_set(set, &case, &mut out)?;
        finish(path, out)?;
    }

    let cmp = compare_sets(&case, &train, &test)?;
    describe_fit(&case, &cmp.factors);
    save_factors(&cmp.factors, &case, dir, &train_tag)?;
    let ptdf = compute_ptdf(&case, None)?;

    let mut table = Vec::new();
    write_table(std::slice::from_ref(&cmp.row), &mut table)?;
    print!("{}", String::from_utf8_lossy(&table));
    println!(
        "training SSE: LSDF {:.6e} MW², PTDF {:.6e} MW²",
        cmp.lsdf_train_sse, cmp.ptdf_train_sse
    );
    let drills: Vec<Drilldown> = [&cmp.lsdf, &cmp.ptdf]
        .iter()
        .filter_map(|r| worst_branch_drilldown(r, &case))
        .collect();
    drills.iter().for_each(print_drilldown);

    let stem = format!("{train_tag}_test{test_seed}");
    write_report(dir, &stem, &cmp.lsdf)?;
    write_report(dir, &stem, &cmp.ptdf)?;
    let hist_lsdf = factor_histogram(&cmp.factors.values, a.bin_width)?;
    let hist_ptdf = factor_histogram(&ptdf.values, a.bin_width)?;
    for (hist, tag) in [(&hist_lsdf, "lsdf"), (&hist_ptdf, "ptdf")] {
        let (path, mut out) = create(dir, "reports", &format!("{stem}_{tag}_histogram.csv"))?;
        write_histogram_csv(hist, &mut out)?;
        finish(path, out)?;
    }
    let (path, mut out) = create(dir, "reports", &format!("{stem}_table.txt"))?;
    out.write_all(&table)?;
    finish(path, out)?;
    write_json(
        dir,
        "reports",
        &format!("{stem}_summary.json"),
        &json!({
            "row": cmp.row,
            "lsdf_train_sse": cmp.lsdf_train_sse,
            "ptdf_train_sse": cmp.ptdf_train_sse,
            "rank_of_a": cmp.rank_of_a,
            "regularization_used": cmp.regularization_used,
            "worst": drills,
            "factor_range": {
                "lsdf": [hist_lsdf.min, hist_lsdf.max],
                "ptdf": [hist_ptdf.min, hist_ptdf.max],
            },
            "lsdf": cmp.lsdf,
            "ptdf": cmp.ptdf,
        }),
    )?;
    Ok(0)
}

pub fn converge(a: &ConvergeArgs) -> anyhow::Result<u8> {
    let case = load_case(&a.case.case)?;
    let n = case.n_buses();
    let (reference, ref_tag) = match a.grid {
        Some(points) => (enumerate_grid_samples(&case, a.r, points)?, format!("grid{points}")),
        None => {
            let k = a.reference.resolve(n);
            let set = generate_samples_with(&case, &SamplingConfig::new(a.r, k, a.seed))?;
            (set, format!("K{k}"))
        }
    };
    let schedule: Vec<usize> = a.schedule.0.iter().map(|c| c.resolve(n)).collect();
    let curve = convergence_study(&reference, &schedule, a.seed)?;
    println!("reference: {} scenarios, CI {:.6}", curve.reference_k, curve.reference_ci);
    println!("{:>8} {:>12} {:>14} {:>16}", "K", "CI", "avg err MW", "distance");
    for p in &curve.points {
        println!("{:>8} {:>12.6} {:>14.6} {:>16.6e}", p.k, p.ci, p.avg_err, p.factor_distance);
    }
    let name = format!("{}_R{}_{ref_tag}_seed{}_converge.csv", case.name(), a.r, a.seed);
    let (path, mut out) = create(&a.case.out_dir, "reports", &name)?;
    write_convergence_csv(&curve, &mut out)?;
    finish(path, out)?;
    Ok(0)
}
