//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr (outside the test harness capture) and then asserts.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use clap::Parser;
use tbptt_core::analysis::{analyze_instance, estimate_stability, turnpike_errors, InstanceAnalysis};
use tbptt_core::autodiff::{fd_gradient_from, loss_grad_from, relative_error};
use tbptt_core::benchmark::{solve_all, OptConfig, SolvedInstance};
use tbptt_core::cli::{self, Cli, CellReport};
use tbptt_core::data::{extract, gen_synthetic, make_plan, TimeSeriesDataset};
use tbptt_core::linalg::Vector;
use tbptt_core::rng;
use tbptt_core::rnn::{init_params, Activation, CellKind, CellSpec, Params};
use tbptt_core::training::{batch_gradient, full_batch_gradient, full_batch_objective, train, OptimizerKind, TrainConfig, TrainMode};

const SYNTH_SEED: u64 = 1;
const SYNTH_NOISE: f64 = 0.1;
const T: usize = 100;
const N: usize = 21;
const RHO: f64 = 0.999;
const STABILITY_PAIRS: usize = 200;

fn report(id: &str, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] {id}: {verdict} {}", detail.as_ref());
}

fn sci(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn synthetic() -> TimeSeriesDataset {
    gen_synthetic(SYNTH_SEED, T, SYNTH_NOISE).unwrap().0
}

fn bench_config() -> OptConfig {
    OptConfig {
        spectral_bound: Some(RHO),
        ..OptConfig::default()
    }
}

struct Sweep {
    cells: Vec<SweepCell>,
    secs: f64,
}

struct SweepCell {
    m: usize,
    solved: SolvedInstance,
    analysis: InstanceAnalysis,
}

/// Benchmark sweep over m ∈ {0, 2, ..., 20} on the synthetic system, shared
/// by several criteria.
fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let started = Instant::now();
        let ds = synthetic();
        let plan = make_plan(T, N, 1).unwrap();
        assert_eq!(plan.count(), 80);
        let spec = CellSpec::linear(1, 1, 1);
        let cfg = bench_config();
        let cells = (0..=20)
            .step_by(2)
            .map(|m| {
                let solved = solve_all(&ds, &plan, m, &spec, &cfg).unwrap();
                let analysis = analyze_instance(&solved, &ds, &plan, m, STABILITY_PAIRS, 0).unwrap();
                SweepCell { m, solved, analysis }
            })
            .collect();
        Sweep {
            cells,
            secs: started.elapsed().as_secs_f64(),
        }
    })
}

fn random_spec(r: &mut rng::SeededRng, kind: CellKind) -> CellSpec {
    let pick = |r: &mut rng::SeededRng, lo: usize, hi: usize| lo + (rng::uniform(r, 0.0, (hi - lo + 1) as f64) as usize).min(hi - lo);
    let (d_x, d_h, d_y) = (pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 2));
    match kind {
        CellKind::Linear => CellSpec::linear(d_x, d_h, d_y),
        CellKind::Elman => CellSpec::elman(d_x, d_h, d_y, Activation::Tanh),
        CellKind::Lstm => CellSpec::lstm(d_x, d_h, d_y),
    }
}

fn random_series(r: &mut rng::SeededRng, len: usize, dim: usize) -> Vec<Vector> {
    (0..len)
        .map(|_| Vector::new((0..dim).map(|_| rng::standard_normal(r)).collect()))
        .collect()
}

#[test]
fn c01_gradient_matches_central_differences() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for (k, kind) in [CellKind::Linear, CellKind::Elman, CellKind::Lstm].into_iter().enumerate() {
        for i in 0..20u64 {
            let mut r = rng::stream(1000 * k as u64 + i, 77);
            let spec = random_spec(&mut r, kind);
            let n = 2 + (rng::uniform(&mut r, 0.0, 15.0) as usize).min(14);
            let m = (rng::uniform(&mut r, 0.0, n as f64) as usize).min(n - 1);
            let params = init_params(&spec, i).unwrap();
            let ds = TimeSeriesDataset::new("fd", random_series(&mut r, n, spec.d_x), random_series(&mut r, n, spec.d_y)).unwrap();
            let plan = make_plan(n, n, 1).unwrap();
            let seg = extract(&ds, &plan, 0).unwrap();
            let h0: Vec<f64> = (0..spec.state_dim()).map(|_| 0.5 * rng::standard_normal(&mut r)).collect();
            let (_, g) = loss_grad_from(&params, &h0, &seg, m).unwrap();
            let fd = fd_gradient_from(&params, &h0, &seg, m, 1e-5).unwrap();
            let analytic: Vec<f64> = g.d_theta.iter().chain(g.d_h0.iter()).copied().collect();
            let numeric: Vec<f64> = fd.d_theta.iter().chain(fd.d_h0.iter()).copied().collect();
            worst = worst.max(relative_error(&analytic, &numeric, 1e-12));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst < 1e-6 && secs < 30.0;
    report("1 gradient check", pass, format!("worst relative error {worst:.2e} (< 1e-6), {secs:.1} s (< 30 s)"));
    assert!(pass);
}

#[test]
fn c02a_turnpike_errors_decay() {
    let cells = &sweep().cells;
    let terminal: Vec<f64> = cells.iter().map(|c| *c.analysis.star_vs_bench.e.last().unwrap()).collect();
    let decays_in_j = cells.iter().all(|c| {
        let e = &c.analysis.star_vs_bench.e;
        e.last().unwrap() <= e.first().unwrap()
    });
    let decreasing_in_m = terminal.windows(2).all(|w| w[1] <= w[0]);
    let pass = decays_in_j && decreasing_in_m;
    report(
        "2a e_j curves",
        pass,
        format!("e_N <= e_(m+1) for every m: {decays_in_j}; terminal e_N non-increasing in m: {decreasing_in_m}; e_N = {}", sci(&terminal)),
    );
    assert!(pass);
}

#[test]
fn c02b_performance_regret_vanishes() {
    let Sweep { cells, secs } = sweep();
    let regret: Vec<(usize, f64)> = cells.iter().map(|c| (c.m, c.analysis.regret.performance_regret)).collect();
    let base = regret[0].1;
    let late: Vec<f64> = regret.iter().filter(|(m, _)| *m >= 12).map(|(_, r)| r / base).collect();
    let worst_late = late.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let decays = regret.last().unwrap().1 < base;
    let pass = base > 0.0 && decays && worst_late < 0.05;
    report(
        "2b performance regret",
        pass,
        format!(
            "regret(m) = {}; max over m >= 12 relative to m = 0: {worst_late:.3} (< 0.05); sweep time {secs:.0} s",
            sci(&regret.iter().map(|r| r.1).collect::<Vec<_>>())
        ),
    );
    assert!(pass);
}

#[test]
fn c03_turnpike_sum_is_window_independent() {
    let ds = synthetic();
    let spec = CellSpec::linear(1, 1, 1);
    let m = 5;
    let sums: Vec<f64> = [11, 21, 41]
        .into_iter()
        .map(|n| {
            let plan = make_plan(T, n, 1).unwrap();
            let solved = solve_all(&ds, &plan, m, &spec, &bench_config()).unwrap();
            turnpike_errors(&solved.tbptt, &solved.unconstrained, &ds, &plan, m).unwrap().sum_e
        })
        .collect();
    let hi = sums.iter().copied().fold(0.0, f64::max);
    let lo = sums.iter().copied().fold(f64::INFINITY, f64::min);
    let ratio = hi / lo;
    let pass = ratio < 2.0;
    report("3 turnpike N-independence", pass, format!("sum_e for N = 11, 21, 41: {}; max/min = {ratio:.3} (< 2)", sci(&sums)));
    assert!(pass);
}

#[test]
fn c04_training_regret_bound() {
    let mut checked = 0;
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut pass = true;
    for c in &sweep().cells {
        let r = &c.analysis.regret;
        if !(r.converged && c.solved.unconstrained.converged && c.analysis.epsilon.satisfied_strict) {
            continue;
        }
        checked += 1;
        worst = worst.max(r.training_regret / r.training_bound);
        pass &= r.training_regret <= 10.0 * r.training_bound;
    }
    pass &= checked > 0;
    report("4 training regret bound", pass, format!("{checked} cells checked; max (V* - V^b) / bound = {worst:.2e} (<= 10)"));
    assert!(pass);
}

#[test]
fn c05_performance_regret_bound() {
    let mut checked = 0;
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut pass = true;
    for c in &sweep().cells {
        let r = &c.analysis.regret;
        let Some(rhs) = r.performance_bound else { continue };
        if !(r.converged && c.solved.unconstrained.converged && c.analysis.epsilon.satisfied_strict) {
            continue;
        }
        checked += 1;
        worst = worst.max(r.performance_regret / rhs);
        pass &= r.performance_regret <= 10.0 * rhs;
    }
    pass &= checked > 0;
    report("5 performance regret bound", pass, format!("{checked} cells checked; max regret / bound = {worst:.2e} (<= 10)"));
    assert!(pass);
}

#[test]
fn c06_stability_certification() {
    let ds = synthetic();
    let specs = [
        CellSpec::linear(1, 2, 1),
        CellSpec::elman(1, 3, 1, Activation::Tanh),
        CellSpec::lstm(1, 3, 1),
    ];
    let mut lambdas = Vec::new();
    let mut pass = true;
    for (k, spec) in specs.into_iter().enumerate() {
        for mode in [TrainMode::ZeroInit, TrainMode::Stateful] {
            let cfg = TrainConfig {
                cell: spec,
                window: N,
                burn_in: 4,
                stride: 1,
                batch_size: 16,
                optimizer: OptimizerKind::adam(1e-2),
                epochs: 30,
                seed: k as u64,
                spectral_bound: Some(RHO),
                mode,
                early_stop: false,
            };
            let log = train(&ds, &cfg).unwrap();
            let est = estimate_stability(&log.params, &ds, 50, 0).unwrap();
            pass &= est.passed && est.lambda < 1.0;
            lambdas.push(est.lambda);
        }
    }
    let mut exact_err: f64 = 0.0;
    for a in [0.9, -0.5, 0.99, 0.3] {
        let p = Params::new(CellSpec::linear(1, 1, 1), Vector::new(vec![a, 0.8, 1.1])).unwrap();
        let est = estimate_stability(&p, &ds, 20, 3).unwrap();
        exact_err = exact_err.max((est.lambda - f64::abs(a)).abs());
    }
    pass &= exact_err < 1e-4;
    report(
        "6 stability certification",
        pass,
        format!("projected runs lambda = {lambdas:.4?} (all passed, < 1); scalar closed form max |lambda - |a|| = {exact_err:.1e} (< 1e-4)"),
    );
    assert!(pass);
}

#[test]
fn c07_optimizer_direction() {
    let spec = CellSpec::elman(2, 3, 1, Activation::Tanh);
    let mut r = rng::stream(7, 7);
    let t_len = 39;
    let ds = TimeSeriesDataset::new("opt", random_series(&mut r, t_len, 2), random_series(&mut r, t_len, 1)).unwrap();
    let plan = make_plan(t_len, 8, 1).unwrap();
    let m = 3;
    let params = init_params(&spec, 5).unwrap();
    let (_, full) = full_batch_gradient(&params, &ds, &plan, m).unwrap();
    let h = 1e-6;
    let fd: Vec<f64> = (0..params.len())
        .map(|k| {
            let mut p = params.clone();
            p.theta_mut()[k] += h;
            let plus = full_batch_objective(&p, &ds, &plan, m).unwrap();
            p.theta_mut()[k] -= 2.0 * h;
            let minus = full_batch_objective(&p, &ds, &plan, m).unwrap();
            (plus - minus) / (2.0 * h)
        })
        .collect();
    let fd_err = relative_error(full.as_slice(), &fd, 1e-12);

    let segments: Vec<usize> = (0..plan.count()).collect();
    assert_eq!(segments.len() % 8, 0);
    let mut avg = vec![0.0; params.len()];
    let batches = segments.chunks(8).count() as f64;
    for batch in segments.chunks(8) {
        let (_, g) = batch_gradient(&params, &ds, &plan, batch, m, None).unwrap();
        avg.iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b / batches);
    }
    let unbiased_err = relative_error(&avg, full.as_slice(), 1.0);
    let pass = fd_err < 1e-5 && unbiased_err < 1e-10;
    report(
        "7 optimizer sanity",
        pass,
        format!("full-batch vs finite differences {fd_err:.1e} (< 1e-5); batch average vs full batch {unbiased_err:.1e} (< 1e-10)"),
    );
    assert!(pass);
}

#[test]
fn c08_feasible_set_ordering() {
    let spec = CellSpec::elman(1, 2, 1, Activation::Tanh);
    let cfg = OptConfig {
        restarts: 3,
        max_iters: 5_000,
        spectral_bound: Some(RHO),
        ..OptConfig::default()
    };
    let mut failures = Vec::new();
    for i in 0..10u64 {
        let (ds, _) = gen_synthetic(100 + i, 40, SYNTH_NOISE).unwrap();
        let plan = make_plan(40, 10, 2).unwrap();
        let m = (i as usize) % 5;
        let s = solve_all(&ds, &plan, m, &spec, &OptConfig { seed: i, ..cfg.clone() }).unwrap();
        let ok = s.unconstrained.objective <= s.coupled.objective + 1e-7 && s.unconstrained.objective <= s.tbptt.objective + 1e-7;
        if !ok {
            failures.push(format!(
                "instance {i}: V_inf {:.6e}, V_b {:.6e}, V* {:.6e} (local minimum)",
                s.unconstrained.objective, s.coupled.objective, s.tbptt.objective
            ));
        }
    }
    let pass = failures.len() <= 1;
    report("8 feasible-set ordering", pass, format!("{} of 10 instances violate the ordering (<= 1) {failures:?}", failures.len()));
    assert!(pass);
}

/// Input/output record of a noisy Wiener system: slow second-order linear
/// dynamics followed by a saturating output nonlinearity, recorded after the
/// initial transient has died out.
fn write_wiener_csv(path: &Path, len: usize) {
    let mut r = rng::stream(2024, 9);
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["u", "y"]).unwrap();
    let (mut x1, mut x2) = (0.0, 0.0);
    for t in 0..len + 200 {
        let u = rng::standard_normal(&mut r);
        x1 = 0.92 * x1 + 0.4 * u;
        x2 = 0.85 * x2 + 0.3 * x1;
        let y = (0.8 * x2).tanh() + 0.02 * rng::standard_normal(&mut r);
        if t >= 200 {
            w.write_record([u.to_string(), y.to_string()]).unwrap();
        }
    }
    w.flush().unwrap();
}

#[test]
fn c09_desk_scale_burn_in_helps() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("wiener.csv");
    write_wiener_csv(&csv, 2_400);
    let out = dir.path().join("runs");
    let args = [
        "tbptt", "--out", out.to_str().unwrap(), "sweep", "--data", csv.to_str().unwrap(), "--rows", "2000", "--holdout", "400",
        "--inputs", "u", "--targets", "y", "--cell", "lstm", "--hidden", "4", "--N", "24", "--m", "0,4,8,12", "--stride", "2",
        "--batch", "32", "--opt", "adam", "--lr", "0.01", "--epochs", "15", "--seed", "0",
    ];
    let outcome = cli::run(Cli::try_parse_from(args).unwrap()).unwrap();
    let mut reader = csv::Reader::from_path(outcome.output_dir.join("report.csv")).unwrap();
    let rows: Vec<CellReport> = reader.deserialize().map(Result::unwrap).collect();
    assert!(rows.iter().all(CellReport::is_ok));
    let base = rows.iter().find(|r| r.m == 0).unwrap();
    let best = rows
        .iter()
        .filter(|r| r.m > 0)
        .min_by(|a, b| a.test_mse.partial_cmp(&b.test_mse).unwrap())
        .unwrap();
    let mut table = String::from("\n  dataset | N | m | train MSE | test MSE\n");
    for r in [base, best] {
        table.push_str(&format!(
            "  wiener  | {} | {:2} | {:.4e} | {:.4e}\n",
            r.window,
            r.m,
            r.train_mse.unwrap(),
            r.test_mse.unwrap()
        ));
    }
    let pass = best.test_mse.unwrap() <= base.test_mse.unwrap();
    report("9 desk-scale LSTM", pass, format!("m* = {} test MSE <= m = 0 test MSE{table}", best.m));
    assert!(pass);
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

/// Log lines without their timing field.
fn numeric_log(contents: &str) -> Vec<serde_json::Value> {
    contents
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_s");
            v
        })
        .collect()
}

fn numeric_report(contents: &str) -> Vec<CellReport> {
    let mut reader = csv::Reader::from_reader(contents.as_bytes());
    reader
        .deserialize::<CellReport>()
        .map(|r| CellReport {
            wall_time_s: 0.0,
            ..r.unwrap()
        })
        .collect()
}

#[test]
fn c10_reruns_are_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let commands: [&[&str]; 4] = [
        &["synth", "--T", "60", "--test", "20", "--seed", "4"],
        &["train", "--cell", "lstm", "--hidden", "2", "--T", "60", "--T-test", "20", "--N", "10", "--m", "3", "--epochs", "5", "--rho", "0.9"],
        &["sweep", "--cell", "elman", "--hidden", "2", "--T", "60", "--N", "10,15", "--m", "0,4", "--epochs", "4", "--mode", "stateful"],
        &["benchmark", "--T", "40", "--N", "8", "--stride", "2", "--m", "0,3", "--restarts", "2", "--max-iters", "2000"],
    ];
    let mut mismatches = Vec::new();
    for cmd in commands {
        let run_in = |root: &Path| {
            let mut args = vec!["tbptt", "--out", root.to_str().unwrap()];
            args.extend_from_slice(cmd);
            cli::run(Cli::try_parse_from(args).unwrap()).unwrap().output_dir
        };
        let a = run_in(&tmp.path().join("a"));
        let b = run_in(&tmp.path().join("b"));
        // and once more from the first run's manifest, over its own outputs
        let manifest = a.join(cli::MANIFEST_FILE);
        let before: Vec<(String, String)> = files(&a).into_iter().map(|f| (f.clone(), read(&a, &f))).collect();
        let c = cli::run(Cli::try_parse_from(["tbptt", "rerun", manifest.to_str().unwrap()]).unwrap()).unwrap().output_dir;
        assert_eq!(c, a);
        for (name, contents) in before {
            for (label, other) in [("second run", &b), ("manifest rerun", &c)] {
                let again = read(other, &name);
                let same = match name.rsplit('/').next().unwrap() {
                    cli::MANIFEST_FILE => true,
                    "log.jsonl" => numeric_log(&contents) == numeric_log(&again),
                    "report.csv" if cmd[0] != "benchmark" => numeric_report(&contents) == numeric_report(&again),
                    _ => contents == again,
                };
                if !same {
                    mismatches.push(format!("{} {name} ({label})", cmd[0]));
                }
            }
        }
    }
    let pass = mismatches.is_empty();
    report("10 determinism", pass, format!("synth, train, sweep, benchmark rerun bit-exactly; mismatches: {mismatches:?}"));
    assert!(pass);
}

/// Relative paths of all files below `dir`.
fn files(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    out
}
