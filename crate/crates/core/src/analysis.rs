//! Evaluation: truncated MSE over the whole sequence, empirical incremental
//! stability constants, turnpike errors between solutions, the ε condition,
//! the constructive bound constants and regret reports.

use serde::{Deserialize, Serialize};

use crate::autodiff::masked_mse;
use crate::benchmark::{LiftedSolution, Variant};
use crate::data::{SegmentationPlan, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::linalg::{norm, sq_dist};
use crate::rng;
use crate::rnn::{forward, HiddenState, Params};

/// `(1/(T-m)) Σ_{t>m} ‖y_t - y^d_t‖²` for the full sequence started at `h0`.
pub fn performance(params: &Params, h0: &HiddenState, dataset: &TimeSeriesDataset, m: usize) -> Result<f64> {
    if m >= dataset.len() {
        return Err(Error::OutOfRange {
            what: "burn-in",
            index: m,
            valid: format!("0..{}", dataset.len()),
        });
    }
    let traj = forward(params, h0, &dataset.inputs)?;
    masked_mse(&traj.outputs, &dataset.targets, m)
}

/// Empirical `(C, λ)` with `‖Δy_t‖ ≤ C λ^t ‖Δh_0‖` over the sampled pairs
/// (`t = 1, 2, ...` counts steps after the initial state).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    pub c: f64,
    pub lambda: f64,
    /// Largest relative amount by which a sample exceeded the least-squares
    /// envelope before `C` was raised to cover it.
    pub max_violation: f64,
    pub num_pairs_tested: usize,
    pub passed: bool,
}

/// Ratios below this are indistinguishable from round-off and are treated
/// as already converged.
const RATIO_FLOOR: f64 = 1e-8;

/// Samples pairs of initial states uniformly from a ball of radius twice the
/// largest hidden-state norm seen along the data (radius 1 if that is zero),
/// runs both from a random start position to the end of the data, and fits
/// the envelope of `r_t = ‖Δy_t‖ / ‖Δh_0‖`: the slope of a least-squares line
/// through the per-step maxima of `log r_t` gives λ, then `C` is raised until
/// every sample is covered. Identical pairs are skipped.
pub fn estimate_stability(params: &Params, dataset: &TimeSeriesDataset, num_pairs: usize, seed: u64) -> Result<StabilityEstimate> {
    let spec = params.spec();
    let sd = spec.state_dim();
    let reference = forward(params, &HiddenState::zeros(sd), &dataset.inputs)?;
    let h_max = reference.hidden.iter().map(|h| norm(h)).fold(0.0, f64::max);
    let radius = if h_max > 0.0 { 2.0 * h_max } else { 1.0 };
    let mut r = rng::stream(seed, rng::PURPOSE_STABILITY);
    let t_len = dataset.len();
    let max_start = t_len / 2;

    let mut samples: Vec<(usize, f64)> = Vec::new();
    let mut tested = 0;
    for _ in 0..num_pairs {
        let h1 = sample_ball(&mut r, sd, radius);
        let h2 = sample_ball(&mut r, sd, radius);
        let start = (rng::uniform(&mut r, 0.0, (max_start + 1) as f64) as usize).min(max_start);
        let dh = norm(&h1.iter().zip(&h2).map(|(a, b)| a - b).collect::<Vec<_>>());
        if dh == 0.0 {
            continue;
        }
        tested += 1;
        let xs = &dataset.inputs[start..];
        let y1 = forward(params, &HiddenState::from(h1), xs)?.outputs;
        let y2 = forward(params, &HiddenState::from(h2), xs)?.outputs;
        for (k, (a, b)) in y1.iter().zip(&y2).enumerate() {
            let ratio = sq_dist(a, b).sqrt() / dh;
            if ratio >= RATIO_FLOOR {
                samples.push((k + 1, ratio));
            }
        }
    }
    Ok(fit_envelope(&samples, tested))
}

fn sample_ball(r: &mut rng::SeededRng, dim: usize, radius: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| rng::standard_normal(r)).collect();
    let len = norm(&dir);
    let scale = radius * rng::uniform(r, 0.0, 1.0).powf(1.0 / dim as f64) / len.max(f64::MIN_POSITIVE);
    dir.iter().map(|v| v * scale).collect()
}

/// Envelope fit of `(t, r_t)` samples; see [`estimate_stability`].
pub fn fit_envelope(samples: &[(usize, f64)], num_pairs: usize) -> StabilityEstimate {
    let t_max = samples.iter().map(|s| s.0).max().unwrap_or(0);
    let mut env = vec![f64::NEG_INFINITY; t_max + 1];
    for &(t, ratio) in samples {
        env[t] = env[t].max(ratio.ln());
    }
    let points: Vec<(f64, f64)> = env
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(t, v)| (t as f64, *v))
        .collect();
    if points.is_empty() {
        // every difference vanished immediately: trivially contractive
        return StabilityEstimate {
            c: 0.0,
            lambda: f64::MIN_POSITIVE,
            max_violation: 0.0,
            num_pairs_tested: num_pairs,
            passed: num_pairs > 0,
        };
    }
    let (slope, intercept) = if points.len() == 1 {
        (0.0, points[0].1)
    } else {
        let n = points.len() as f64;
        let mt = points.iter().map(|p| p.0).sum::<f64>() / n;
        let mv = points.iter().map(|p| p.1).sum::<f64>() / n;
        let stt: f64 = points.iter().map(|p| (p.0 - mt).powi(2)).sum();
        let stv: f64 = points.iter().map(|p| (p.0 - mt) * (p.1 - mv)).sum();
        let slope = stv / stt;
        (slope, mv - slope * mt)
    };
    let lambda = slope.exp().clamp(f64::MIN_POSITIVE, 1.0);
    let log_lambda = lambda.ln();
    let log_c = samples
        .iter()
        .map(|&(t, ratio)| ratio.ln() - t as f64 * log_lambda)
        .fold(f64::NEG_INFINITY, f64::max);
    let c = log_c.exp();
    StabilityEstimate {
        c,
        lambda,
        max_violation: ((log_c - intercept).exp() - 1.0).max(0.0),
        num_pairs_tested: num_pairs,
        passed: num_pairs > 0 && lambda < 1.0,
    }
}

/// Worst case over several estimates: largest `C` and λ.
pub fn combine(estimates: &[StabilityEstimate]) -> StabilityEstimate {
    StabilityEstimate {
        c: estimates.iter().map(|e| e.c).fold(0.0, f64::max),
        lambda: estimates.iter().map(|e| e.lambda).fold(f64::MIN_POSITIVE, f64::max),
        max_violation: estimates.iter().map(|e| e.max_violation).fold(0.0, f64::max),
        num_pairs_tested: estimates.iter().map(|e| e.num_pairs_tested).sum(),
        passed: !estimates.is_empty() && estimates.iter().all(|e| e.passed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnpikeReport {
    pub reference: Variant,
    pub burn_in: usize,
    /// `e[k]` belongs to step `j = m + 1 + k` (1-based within a segment).
    pub e: Vec<f64>,
    pub sum_e: f64,
}

/// `e_j = (1/S) Σ_i ‖y^a_{j|i} - y^b_{j|i}‖²` for every `j = 1..N`.
pub fn output_errors(a: &LiftedSolution, b: &LiftedSolution, dataset: &TimeSeriesDataset, plan: &SegmentationPlan) -> Result<Vec<f64>> {
    if a.params.spec().d_y != b.params.spec().d_y {
        return Err(Error::dim("solution outputs", a.params.spec().d_y, b.params.spec().d_y));
    }
    let ya = a.segment_outputs(dataset, plan)?;
    let yb = b.segment_outputs(dataset, plan)?;
    let s = plan.count() as f64;
    Ok((0..plan.window)
        .map(|j| ya.iter().zip(&yb).map(|(p, q)| sq_dist(&p[j], &q[j])).sum::<f64>() / s)
        .collect())
}

pub fn turnpike_errors(
    a: &LiftedSolution,
    b: &LiftedSolution,
    dataset: &TimeSeriesDataset,
    plan: &SegmentationPlan,
    m: usize,
) -> Result<TurnpikeReport> {
    if m >= plan.window {
        return Err(Error::OutOfRange {
            what: "burn-in",
            index: m,
            valid: format!("0..{}", plan.window),
        });
    }
    let e = output_errors(a, b, dataset, plan)?[m..].to_vec();
    Ok(TurnpikeReport {
        reference: b.variant,
        burn_in: m,
        sum_e: e.iter().sum(),
        e,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonCheck {
    pub cross_term: f64,
    pub sq_norm: f64,
    /// `None` means any ε > 1 works.
    pub epsilon_max: Option<f64>,
    pub satisfied_strict: bool,
    /// ε used for the dependent constants: 2 when unbounded, otherwise
    /// `min(epsilon_max, 2)`.
    pub epsilon_used: f64,
}

impl EpsilonCheck {
    pub fn from_terms(cross_term: f64, sq_norm: f64) -> Self {
        let epsilon_max = (sq_norm > 0.0 && cross_term < 0.0).then(|| sq_norm / -cross_term);
        let satisfied_strict = sq_norm == 0.0 || cross_term > -sq_norm;
        EpsilonCheck {
            cross_term,
            sq_norm,
            epsilon_max,
            satisfied_strict,
            epsilon_used: epsilon_max.map_or(2.0, |e| e.min(2.0)),
        }
    }
}

/// Compares the zero-started solution `star` with the unconstrained
/// reference `inf` over the steps after the burn-in:
/// `cross = Σ 2(y^∞ - y^d)ᵀ(y* - y^∞)`, `sq = Σ ‖y* - y^∞‖²`.
pub fn epsilon_check(
    star: &LiftedSolution,
    inf: &LiftedSolution,
    dataset: &TimeSeriesDataset,
    plan: &SegmentationPlan,
    m: usize,
) -> Result<EpsilonCheck> {
    let ys = star.segment_outputs(dataset, plan)?;
    let yi = inf.segment_outputs(dataset, plan)?;
    let mut cross = 0.0;
    let mut sq = 0.0;
    for (i, (a, b)) in ys.iter().zip(&yi).enumerate() {
        let targets = &dataset.targets[plan.range(i)];
        for j in m..plan.window {
            for k in 0..a[j].len() {
                let diff = a[j][k] - b[j][k];
                cross += 2.0 * (b[j][k] - targets[j][k]) * diff;
                sq += diff * diff;
            }
        }
    }
    Ok(EpsilonCheck::from_terms(cross, sq))
}

/// Ranges observed along the data and the solutions' trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedSets {
    pub max_output_norm: f64,
    pub max_target_norm: f64,
    pub h_bar: f64,
}

pub fn observe(solutions: &[&LiftedSolution], dataset: &TimeSeriesDataset, plan: &SegmentationPlan) -> Result<ObservedSets> {
    let mut obs = ObservedSets {
        max_output_norm: 0.0,
        max_target_norm: dataset.targets.iter().map(|y| y.norm()).fold(0.0, f64::max),
        h_bar: 0.0,
    };
    for sol in solutions {
        let states = sol.segment_initial_states(dataset, plan)?;
        for (i, h0) in states.iter().enumerate() {
            let traj = forward(&sol.params, h0, &dataset.inputs[plan.range(i)])?;
            obs.h_bar = traj.hidden.iter().map(|h| norm(h)).fold(obs.h_bar, f64::max);
            obs.max_output_norm = traj.outputs.iter().map(|y| y.norm()).fold(obs.max_output_norm, f64::max);
        }
    }
    Ok(obs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub l_l: f64,
    pub h_bar: f64,
    pub c: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub c_bar: f64,
    pub k: f64,
    pub c1: f64,
    pub c2: f64,
    pub e1: f64,
    pub e2: f64,
    /// False when λ ≥ 1 or ε ≤ 1; the dependent constants are then infinite.
    pub finite: bool,
}

impl BoundConstants {
    /// `C̄ = L_l C h̄ λ/(1-λ)`, `K = C̄ ε/(ε-1)`, `c1 = C² h̄²`,
    /// `c2 = c1 λ²/(1-λ²)`, `E1 = 2 max(c2, 4K)`, `E2 = L_l √E1`.
    pub fn from_parts(l_l: f64, h_bar: f64, c: f64, lambda: f64, epsilon: f64) -> Self {
        let c1 = c * c * h_bar * h_bar;
        if !(lambda < 1.0) || !(epsilon > 1.0) {
            return BoundConstants {
                l_l,
                h_bar,
                c,
                lambda,
                epsilon,
                c_bar: f64::INFINITY,
                k: f64::INFINITY,
                c1,
                c2: f64::INFINITY,
                e1: f64::INFINITY,
                e2: f64::INFINITY,
                finite: false,
            };
        }
        let c_bar = l_l * c * h_bar * lambda / (1.0 - lambda);
        let k = c_bar * epsilon / (epsilon - 1.0);
        let c2 = c1 * lambda * lambda / (1.0 - lambda * lambda);
        let e1 = 2.0 * c2.max(4.0 * k);
        BoundConstants {
            l_l,
            h_bar,
            c,
            lambda,
            epsilon,
            c_bar,
            k,
            c1,
            c2,
            e1,
            e2: l_l * e1.sqrt(),
            finite: true,
        }
    }
}

/// `L_l = 2(max‖y‖ + max‖y^d‖)` and `h̄` from the observed sets, `C`, λ
/// from the stability estimate, ε from the check.
pub fn bound_constants(stab: &StabilityEstimate, eps: &EpsilonCheck, observed: &ObservedSets) -> BoundConstants {
    let l_l = 2.0 * (observed.max_output_norm + observed.max_target_norm);
    let epsilon = if eps.satisfied_strict { eps.epsilon_used } else { 1.0 };
    BoundConstants::from_parts(l_l, observed.h_bar, stab.c, stab.lambda, epsilon)
}

/// `C̄ λ^m / (N - m)`.
pub fn training_bound(c_bar: f64, lambda: f64, m: usize, window: usize) -> f64 {
    c_bar * lambda.powi(m as i32) / (window - m) as f64
}

/// `((S-1) λ^{2 o_min} + S λ^m) / (T - m)`, the quantity under the root.
pub fn performance_bound_radicand(lambda: f64, m: usize, segments: usize, min_overlap: usize, t_len: usize) -> f64 {
    ((segments as f64 - 1.0) * lambda.powi(2 * min_overlap as i32) + segments as f64 * lambda.powi(m as i32))
        / (t_len - m) as f64
}

pub fn performance_bound(e2: f64, lambda: f64, m: usize, segments: usize, min_overlap: usize, t_len: usize) -> f64 {
    e2 * performance_bound_radicand(lambda, m, segments, min_overlap, t_len).sqrt()
}

/// One (N, m) cell of a regret study; flat so it maps to one CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub window: usize,
    pub burn_in: usize,
    pub segments: usize,
    pub t_len: usize,
    pub min_overlap: usize,
    pub v_star: f64,
    pub v_bench: f64,
    pub training_regret: f64,
    pub p_star: f64,
    pub p_bench: f64,
    pub performance_regret: f64,
    pub c: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub c_bar: f64,
    pub k: f64,
    pub e2: f64,
    pub training_bound: f64,
    /// Absent when `m > o_min`.
    pub performance_bound: Option<f64>,
    pub training_bound_violated: bool,
    pub performance_bound_violated: bool,
    pub converged: bool,
}

pub fn regret_report(
    star: &LiftedSolution,
    bench: &LiftedSolution,
    dataset: &TimeSeriesDataset,
    plan: &SegmentationPlan,
    m: usize,
    constants: &BoundConstants,
) -> Result<RegretReport> {
    if star.variant != Variant::Tbptt || bench.variant != Variant::Coupled {
        return Err(Error::Config("regret compares a tbptt solution with a coupled one".into()));
    }
    let sd = star.params.spec().state_dim();
    let p_star = performance(&star.params, &HiddenState::zeros(sd), dataset, m)?;
    let p_bench = performance(&bench.params, &bench.initial_state(), dataset, m)?;
    let (lambda, n, s, t) = (constants.lambda, plan.window, plan.count(), plan.t_len);
    let t1 = if constants.finite {
        training_bound(constants.c_bar, lambda, m, n)
    } else {
        f64::INFINITY
    };
    let t2 = (m <= plan.min_overlap).then(|| {
        if constants.finite {
            performance_bound(constants.e2, lambda, m, s, plan.min_overlap, t)
        } else {
            f64::INFINITY
        }
    });
    let training_regret = star.objective - bench.objective;
    let performance_regret = p_star - p_bench;
    Ok(RegretReport {
        window: n,
        burn_in: m,
        segments: s,
        t_len: t,
        min_overlap: plan.min_overlap,
        v_star: star.objective,
        v_bench: bench.objective,
        training_regret,
        p_star,
        p_bench,
        performance_regret,
        c: constants.c,
        lambda,
        epsilon: constants.epsilon,
        c_bar: constants.c_bar,
        k: constants.k,
        e2: constants.e2,
        training_bound: t1,
        performance_bound: t2,
        training_bound_violated: training_regret > t1,
        performance_bound_violated: t2.is_some_and(|b| performance_regret > b),
        converged: star.converged && bench.converged,
    })
}

/// CSV with a header and one row per report.
pub fn reports_to_csv(reports: &[RegretReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Everything derived from one solved instance: stability of all three
/// solutions, the ε check, constants, turnpike errors and the regret row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnalysis {
    pub stability: StabilityEstimate,
    pub epsilon: EpsilonCheck,
    pub observed: ObservedSets,
    pub constants: BoundConstants,
    pub star_vs_bench: TurnpikeReport,
    pub star_vs_inf: TurnpikeReport,
    pub bench_vs_inf: TurnpikeReport,
    pub regret: RegretReport,
}

pub fn analyze_instance(
    solved: &crate::benchmark::SolvedInstance,
    dataset: &TimeSeriesDataset,
    plan: &SegmentationPlan,
    m: usize,
    num_pairs: usize,
    seed: u64,
) -> Result<InstanceAnalysis> {
    let (star, bench, inf) = (&solved.tbptt, &solved.coupled, &solved.unconstrained);
    let stability = combine(&[
        estimate_stability(&star.params, dataset, num_pairs, seed)?,
        estimate_stability(&bench.params, dataset, num_pairs, seed)?,
        estimate_stability(&inf.params, dataset, num_pairs, seed)?,
    ]);
    let epsilon = epsilon_check(star, inf, dataset, plan, m)?;
    let observed = observe(&[star, bench, inf], dataset, plan)?;
    let constants = bound_constants(&stability, &epsilon, &observed);
    Ok(InstanceAnalysis {
        star_vs_bench: turnpike_errors(star, bench, dataset, plan, m)?,
        star_vs_inf: turnpike_errors(star, inf, dataset, plan, m)?,
        bench_vs_inf: turnpike_errors(bench, inf, dataset, plan, m)?,
        regret: regret_report(star, bench, dataset, plan, m, &constants)?,
        stability,
        epsilon,
        observed,
        constants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{solve_all, OptConfig};
    use crate::data::{gen_synthetic, make_plan};
    use crate::linalg::Vector;
    use crate::rnn::{init_params, CellSpec};

    fn scalar(a: f64, b: f64, c: f64) -> Params {
        Params::new(CellSpec::linear(1, 1, 1), Vector::new(vec![a, b, c])).unwrap()
    }

    fn series(ys: &[f64]) -> TimeSeriesDataset {
        let xs = ys.iter().map(|_| Vector::new(vec![0.0])).collect();
        TimeSeriesDataset::new("t", xs, ys.iter().map(|y| Vector::new(vec![*y])).collect()).unwrap()
    }

    #[test]
    fn performance_examples() {
        // zero input, h0 = 1, a = 1, c = 1: outputs are all 1
        let p = scalar(1.0, 0.0, 1.0);
        let h0 = HiddenState::from(vec![1.0]);
        assert_eq!(performance(&p, &h0, &series(&[1.0, 1.0, 1.0]), 0).unwrap(), 0.0);
        // errors (·, 1, 2)
        let ds = series(&[5.0, 0.0, -1.0]);
        assert_eq!(performance(&p, &h0, &ds, 1).unwrap(), 2.5);
        assert_eq!(performance(&p, &h0, &ds, 2).unwrap(), 4.0);
        assert!(performance(&p, &h0, &ds, 3).is_err());
        // m = 0 is the plain MSE
        let mse = (16.0 + 1.0 + 4.0) / 3.0;
        assert_eq!(performance(&p, &h0, &ds, 0).unwrap(), mse);
    }

    #[test]
    fn scalar_linear_stability_is_exact() {
        let (ds, _) = gen_synthetic(1, 100, 0.1).unwrap();
        for (a, c) in [(0.9, 1.3), (-0.5, 0.7), (0.99, -2.0)] {
            let est = estimate_stability(&scalar(a, 0.8, c), &ds, 20, 3).unwrap();
            assert!((est.lambda - f64::abs(a)).abs() < 1e-6, "lambda {} for a = {a}", est.lambda);
            assert!((est.c - f64::abs(c)).abs() < 1e-6 * f64::abs(c), "C {} for c = {c}", est.c);
            assert!(est.passed);
        }
    }

    #[test]
    fn degenerate_pairs_are_skipped() {
        let samples = vec![(1, 0.5), (2, 0.25), (3, 0.125)];
        let a = fit_envelope(&samples, 1);
        assert!((a.lambda - 0.5).abs() < 1e-12);
        assert!((a.c - 1.0).abs() < 1e-12);
        let b = fit_envelope(&[], 0);
        assert!(!b.passed);
    }

    #[test]
    fn unstable_model_fails() {
        let (ds, _) = gen_synthetic(1, 50, 0.1).unwrap();
        let est = estimate_stability(&scalar(1.05, 0.5, 1.0), &ds, 10, 1).unwrap();
        assert_eq!(est.lambda, 1.0);
        assert!(!est.passed);
    }

    #[test]
    fn lstm_stability_is_deterministic() {
        let (ds, _) = gen_synthetic(2, 80, 0.1).unwrap();
        let p = init_params(&CellSpec::lstm(1, 3, 1), 4).unwrap();
        let a = estimate_stability(&p, &ds, 16, 9).unwrap();
        assert_eq!(a, estimate_stability(&p, &ds, 16, 9).unwrap());
        assert_eq!(a.num_pairs_tested, 16);
    }

    #[test]
    fn bound_constant_arithmetic() {
        let b = BoundConstants::from_parts(2.0, 1.0, 1.0, 0.5, 2.0);
        assert!((b.c_bar - 2.0).abs() < 1e-15);
        assert!((b.k - 4.0).abs() < 1e-15);
        // c2 = 0.25 / 0.75 < 4K, so E1 = 8K
        assert!((b.e1 - 32.0).abs() < 1e-12);
        assert!((b.e2 - 2.0 * 32f64.sqrt()).abs() < 1e-12);
        let tiny = BoundConstants::from_parts(2.0, 1.0, 1.0, 1e-12, 2.0);
        assert!(tiny.c_bar < 1e-11);
        let bad = BoundConstants::from_parts(2.0, 1.0, 1.0, 1.0, 2.0);
        assert!(!bad.finite && bad.k.is_infinite());
        assert!(!BoundConstants::from_parts(2.0, 1.0, 1.0, 0.5, 1.0).finite);
    }

    #[test]
    fn performance_bound_radicand_plug_in() {
        let r = performance_bound_radicand(0.9, 12, 80, 20, 100);
        let expect = (79.0 * 0.9f64.powi(40) + 80.0 * 0.9f64.powi(12)) / 88.0;
        assert!((r - expect).abs() < 1e-15);
        assert!((r - 0.2700).abs() < 5e-4);
        assert!((r.sqrt() - 0.5196).abs() < 5e-4);
        assert!((training_bound(2.0, 0.5, 2, 6) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn epsilon_conventions() {
        let same = EpsilonCheck::from_terms(0.0, 0.0);
        assert!(same.satisfied_strict && same.epsilon_max.is_none());
        assert_eq!(same.epsilon_used, 2.0);
        let ok = EpsilonCheck::from_terms(-1.0, 4.0);
        assert_eq!(ok.epsilon_max, Some(4.0));
        assert!(ok.satisfied_strict);
        assert_eq!(ok.epsilon_used, 2.0);
        let tight = EpsilonCheck::from_terms(-2.0, 3.0);
        assert_eq!(tight.epsilon_used, 1.5);
        let fail = EpsilonCheck::from_terms(-5.0, 4.0);
        assert!(!fail.satisfied_strict);
    }

    #[test]
    fn solved_instance_checks() {
        let (ds, _) = gen_synthetic(3, 60, 0.1).unwrap();
        let plan = make_plan(60, 12, 1).unwrap();
        let cfg = OptConfig {
            restarts: 2,
            max_iters: 5_000,
            warmup_iters: 300,
            ..OptConfig::default()
        };
        let m = 3;
        let solved = solve_all(&ds, &plan, m, &CellSpec::linear(1, 1, 1), &cfg).unwrap();
        let self_cmp = turnpike_errors(&solved.coupled, &solved.coupled, &ds, &plan, m).unwrap();
        assert!(self_cmp.e.iter().all(|e| *e == 0.0));
        assert_eq!(self_cmp.e.len(), 12 - m);
        let same = epsilon_check(&solved.tbptt, &solved.tbptt, &ds, &plan, m).unwrap();
        assert_eq!(same.sq_norm, 0.0);
        assert!(same.satisfied_strict);

        let a = analyze_instance(&solved, &ds, &plan, m, 16, 1).unwrap();
        assert!((a.star_vs_inf.sum_e - a.star_vs_inf.e.iter().sum::<f64>()).abs() < 1e-15);
        // Young's inequality relation between the three comparisons
        assert!(a.star_vs_bench.sum_e <= 2.0 * a.star_vs_inf.sum_e + 2.0 * a.bench_vs_inf.sum_e + 1e-15);
        let row = reports_to_csv(std::slice::from_ref(&a.regret)).unwrap();
        assert_eq!(row.lines().count(), 2);
        assert!(row.starts_with("window,burn_in,"));
    }

    #[test]
    fn identical_solutions_have_zero_regret() {
        let (ds, _) = gen_synthetic(4, 40, 0.1).unwrap();
        let plan = make_plan(40, 10, 1).unwrap();
        let p = scalar(0.5, 0.5, 0.5);
        let star = LiftedSolution {
            variant: Variant::Tbptt,
            burn_in: 2,
            params: p.clone(),
            init_states: vec![],
            objective: 0.3,
            converged: true,
            grad_norm: 0.0,
            iterations: 0,
            restart: 0,
            bounded: true,
        };
        let bench = LiftedSolution {
            variant: Variant::Coupled,
            init_states: vec![HiddenState::zeros(1)],
            ..star.clone()
        };
        let k = BoundConstants::from_parts(1.0, 1.0, 1.0, 0.5, 2.0);
        let r = regret_report(&star, &bench, &ds, &plan, 2, &k).unwrap();
        assert_eq!(r.training_regret, 0.0);
        assert_eq!(r.performance_regret, 0.0);
        assert!(!r.training_bound_violated && !r.performance_bound_violated);
    }
}
