//! Full-batch solvers for the three ways of initializing segments:
//!
//! * `Tbptt`: every segment starts from zero; only θ is optimized.
//! * `Coupled`: all segments lie on one trajectory started from a free
//!   initial state `h_0`, so segment `i` starts from that trajectory's state
//!   at `s_i`; θ and `h_0` are optimized.
//! * `Unconstrained`: every segment has its own free initial state.
//!
//! All share the objective `(1/S) Σ_i L_i` with burn-in `m`. Each restart runs
//! an Adam warm-up and then a spectral projected gradient method
//! (Barzilai–Borwein steps with a nonmonotone Armijo line search); the
//! projection scales the recurrent weights onto the spectral-norm ball.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Workspace;
use crate::data::{extract, SegmentationPlan, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Vector};
use crate::rnn::{forward, init_params, run_into, CellSpec, HiddenState, Params};
use crate::training::{project_block, Optimizer, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tbptt,
    Coupled,
    Unconstrained,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Tbptt, Variant::Coupled, Variant::Unconstrained];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tbptt => "tbptt",
            Variant::Coupled => "coupled",
            Variant::Unconstrained => "unconstrained",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tbptt" => Ok(Variant::Tbptt),
            "coupled" => Ok(Variant::Coupled),
            "unconstrained" => Ok(Variant::Unconstrained),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected tbptt, coupled or unconstrained)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub restarts: usize,
    /// Iteration budget of the projected-gradient phase, per restart.
    pub max_iters: usize,
    /// Stop when `‖P(z - ∇f) - z‖∞` falls below this.
    pub grad_tol: f64,
    pub spectral_bound: Option<f64>,
    pub seed: u64,
    pub warmup_iters: usize,
    pub warmup_lr: f64,
    /// Length of the nonmonotone line-search memory.
    pub memory: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            restarts: 8,
            max_iters: 20_000,
            grad_tol: 1e-8,
            spectral_bound: Some(0.999),
            seed: 0,
            warmup_iters: 1_000,
            warmup_lr: 1e-2,
            memory: 10,
        }
    }
}

impl OptConfig {
    fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Config("at least one restart is required".into()));
        }
        if !(self.grad_tol > 0.0) || !(self.warmup_lr > 0.0) || self.memory == 0 {
            return Err(Error::Config("tolerance, warm-up step and memory must be positive".into()));
        }
        if let Some(rho) = self.spectral_bound {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Config(format!("spectral bound must lie in (0, 1] (got {rho})")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftedSolution {
    pub variant: Variant,
    pub burn_in: usize,
    pub params: Params,
    /// Empty for `Tbptt`, the free `h_0` for `Coupled`, one state per
    /// segment for `Unconstrained`.
    pub init_states: Vec<HiddenState>,
    pub objective: f64,
    pub converged: bool,
    /// Projected-gradient residual `‖P(z - ∇f) - z‖∞` at the solution.
    pub grad_norm: f64,
    pub iterations: usize,
    pub restart: usize,
    /// Outputs finite and within ten times the data range, states finite.
    pub bounded: bool,
}

/// Starting point for a solve, typically taken from another variant's
/// solution.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmStart {
    pub params: Params,
    pub initial_state: HiddenState,
    pub segment_states: Vec<HiddenState>,
}

impl LiftedSolution {
    /// State the full-sequence forward pass starts from.
    pub fn initial_state(&self) -> HiddenState {
        match self.variant {
            Variant::Coupled => self.init_states[0].clone(),
            Variant::Unconstrained if !self.init_states.is_empty() => self.init_states[0].clone(),
            _ => HiddenState::zeros(self.params.spec().state_dim()),
        }
    }

    /// Initial state of every segment under this solution's variant.
    pub fn segment_initial_states(&self, dataset: &TimeSeriesDataset, plan: &SegmentationPlan) -> Result<Vec<HiddenState>> {
        let sd = self.params.spec().state_dim();
        match self.variant {
            Variant::Tbptt => Ok(vec![HiddenState::zeros(sd); plan.count()]),
            Variant::Coupled => {
                let traj = forward(&self.params, &self.init_states[0], &dataset.inputs)?;
                Ok(plan.starts.iter().map(|s| traj.hidden[*s].clone()).collect())
            }
            Variant::Unconstrained => {
                if self.init_states.len() != plan.count() {
                    return Err(Error::dim("segment states", plan.count(), self.init_states.len()));
                }
                Ok(self.init_states.clone())
            }
        }
    }

    /// Per-segment output sequences `y_{j|i}`.
    pub fn segment_outputs(&self, dataset: &TimeSeriesDataset, plan: &SegmentationPlan) -> Result<Vec<Vec<Vector>>> {
        let states = self.segment_initial_states(dataset, plan)?;
        states
            .iter()
            .enumerate()
            .map(|(i, h0)| Ok(forward(&self.params, h0, extract(dataset, plan, i)?.inputs)?.outputs))
            .collect()
    }

    pub fn warm_start(&self, dataset: &TimeSeriesDataset, plan: &SegmentationPlan) -> Result<WarmStart> {
        Ok(WarmStart {
            params: self.params.clone(),
            initial_state: self.initial_state(),
            segment_states: self.segment_initial_states(dataset, plan)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// The reduced problem in the stacked variable `z = [θ; u]`. Free initial
/// states are stored as `u = h / √S`, which puts their curvature on the same
/// scale as that of θ (each state only enters one `1/S`-weighted term).
struct Problem<'a> {
    variant: Variant,
    dataset: &'a TimeSeriesDataset,
    plan: &'a SegmentationPlan,
    m: usize,
    spec: CellSpec,
    n_theta: usize,
    state_dim: usize,
    n_states: usize,
    state_scale: f64,
    bound: Option<f64>,
    recurrent: (Range<usize>, usize, usize),
}

impl<'a> Problem<'a> {
    fn new(
        variant: Variant,
        dataset: &'a TimeSeriesDataset,
        plan: &'a SegmentationPlan,
        m: usize,
        spec: &CellSpec,
        bound: Option<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        if plan.t_len != dataset.len() {
            return Err(Error::dim("segmentation plan length", dataset.len(), plan.t_len));
        }
        if dataset.d_x() != spec.d_x || dataset.d_y() != spec.d_y {
            return Err(Error::dim(
                "dataset vs. cell",
                format!("d_x = {}, d_y = {}", spec.d_x, spec.d_y),
                format!("d_x = {}, d_y = {}", dataset.d_x(), dataset.d_y()),
            ));
        }
        if m >= plan.window {
            return Err(Error::Config(format!(
                "burn-in m = {m} must be at most N - 1 = {}",
                plan.window - 1
            )));
        }
        let n_states = match variant {
            Variant::Tbptt => 0,
            Variant::Coupled => 1,
            Variant::Unconstrained => plan.count(),
        };
        Ok(Problem {
            variant,
            dataset,
            plan,
            m,
            spec: *spec,
            n_theta: spec.num_params(),
            state_dim: spec.state_dim(),
            n_states,
            state_scale: (plan.count() as f64).sqrt(),
            bound,
            recurrent: Params::zeros(*spec)?.recurrent_range(),
        })
    }

    fn dim(&self) -> usize {
        self.n_theta + self.n_states * self.state_dim
    }

    fn params(&self, z: &[f64]) -> Params {
        Params::new(self.spec, Vector::new(z[..self.n_theta].to_vec())).expect("length matches")
    }

    /// Initial state `k` in model units.
    fn state_into(&self, z: &[f64], k: usize, out: &mut Vec<f64>) {
        let o = self.n_theta + k * self.state_dim;
        out.clear();
        out.extend(z[o..o + self.state_dim].iter().map(|u| u * self.state_scale));
    }

    fn state(&self, z: &[f64], k: usize) -> Vec<f64> {
        let mut h = Vec::new();
        self.state_into(z, k, &mut h);
        h
    }

    fn project(&self, z: &mut [f64]) -> Result<()> {
        if let Some(rho) = self.bound {
            let (range, rows, cols) = self.recurrent.clone();
            project_block(&mut z[range], rows, cols, rho)?;
        }
        Ok(())
    }

    /// Objective; summation order matches per-segment evaluation elsewhere.
    fn value(&self, z: &[f64]) -> Result<f64> {
        let theta = &z[..self.n_theta];
        let s = self.plan.count();
        let mut ws = Workspace::default();
        let mut h0 = vec![0.0; self.state_dim];
        let mut losses = Vec::with_capacity(s);
        match self.variant {
            Variant::Tbptt | Variant::Unconstrained => {
                for i in 0..s {
                    if self.variant == Variant::Unconstrained {
                        self.state_into(z, i, &mut h0);
                    }
                    let seg = extract(self.dataset, self.plan, i)?;
                    losses.push(ws.loss(&self.spec, theta, &h0, seg.inputs, seg.targets, self.m)?);
                }
            }
            Variant::Coupled => {
                self.state_into(z, 0, &mut h0);
                run_into(&self.spec, theta, &h0, &self.dataset.inputs, &mut ws.run, false)?;
                for i in 0..s {
                    losses.push(self.coupled_segment_loss(&ws, i)?);
                }
            }
        }
        Ok(losses.iter().sum::<f64>() / s as f64)
    }

    fn coupled_segment_loss(&self, ws: &Workspace, i: usize) -> Result<f64> {
        let r = self.plan.range(i);
        let d_y = self.spec.d_y;
        let targets = &self.dataset.targets[r.clone()];
        let n = targets.len();
        Ok((self.m..n)
            .map(|j| sq_dist(ws.run.output(d_y, r.start + j), &targets[j]))
            .sum::<f64>()
            / (n - self.m) as f64)
    }

    fn value_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let theta = &z[..self.n_theta];
        let s = self.plan.count();
        let inv_s = 1.0 / s as f64;
        let sd = self.state_dim;
        let mut grad = vec![0.0; self.dim()];
        let mut losses = Vec::with_capacity(s);
        let mut ws = Workspace::default();
        let mut h0 = vec![0.0; sd];
        let (g_theta, g_states) = grad.split_at_mut(self.n_theta);
        match self.variant {
            Variant::Tbptt | Variant::Unconstrained => {
                for i in 0..s {
                    if self.variant == Variant::Unconstrained {
                        self.state_into(z, i, &mut h0);
                    }
                    let seg = extract(self.dataset, self.plan, i)?;
                    let l = ws.loss_grad(&self.spec, theta, &h0, seg.inputs, seg.targets, self.m, inv_s, g_theta)?;
                    losses.push(l);
                    if self.variant == Variant::Unconstrained {
                        g_states[i * sd..(i + 1) * sd]
                            .iter_mut()
                            .zip(&ws.sweep.dh)
                            .for_each(|(a, b)| *a = b * self.state_scale);
                    }
                }
            }
            Variant::Coupled => {
                self.state_into(z, 0, &mut h0);
                run_into(&self.spec, theta, &h0, &self.dataset.inputs, &mut ws.run, true)?;
                let d_y = self.spec.d_y;
                let t_len = self.dataset.len();
                let mut cograds = vec![0.0; t_len * d_y];
                for i in 0..s {
                    losses.push(self.coupled_segment_loss(&ws, i)?);
                    let r = self.plan.range(i);
                    let targets = &self.dataset.targets[r.clone()];
                    let scale = inv_s * 2.0 / (targets.len() - self.m) as f64;
                    for (j, d) in targets.iter().enumerate().skip(self.m) {
                        let t = r.start + j;
                        let y = ws.run.output(d_y, t);
                        for k in 0..d_y {
                            cograds[t * d_y + k] += scale * (y[k] - d[k]);
                        }
                    }
                }
                *ws.cograds_mut() = cograds;
                ws.backward(&self.spec, theta, &self.dataset.inputs, g_theta);
                g_states
                    .iter_mut()
                    .zip(&ws.sweep.dh)
                    .for_each(|(a, b)| *a = b * self.state_scale);
            }
        }
        Ok((losses.iter().sum::<f64>() / s as f64, grad))
    }

    /// `‖P(z - g) - z‖∞`.
    fn stationarity(&self, z: &[f64], g: &[f64]) -> Result<f64> {
        let mut trial: Vec<f64> = z.iter().zip(g).map(|(a, b)| a - b).collect();
        self.project(&mut trial)?;
        Ok(trial.iter().zip(z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    fn pack(&self, params: &Params, initial: &[f64], segments: &[HiddenState]) -> Vec<f64> {
        let mut z = params.theta().to_vec();
        let unscale = |h: &[f64]| h.iter().map(|v| v / self.state_scale).collect::<Vec<_>>();
        match self.variant {
            Variant::Tbptt => {}
            Variant::Coupled => z.extend(unscale(initial)),
            Variant::Unconstrained => {
                if segments.len() == self.n_states {
                    segments.iter().for_each(|h| z.extend(unscale(h)));
                } else {
                    z.resize(self.dim(), 0.0);
                }
            }
        }
        z
    }
}

struct RunResult {
    z: Vec<f64>,
    value: f64,
    residual: f64,
    iterations: usize,
}

const STEP_MIN: f64 = 1e-12;
const STEP_MAX: f64 = 1e12;
const ARMIJO: f64 = 1e-4;

/// Evaluation where a blown-up forward pass counts as an infinite objective.
fn try_value_grad(problem: &Problem, z: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
    match problem.value_grad(z) {
        Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Ok(Some((f, g))),
        Ok(_) | Err(Error::NonFinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn adam_warmup(problem: &Problem, z: &mut Vec<f64>, cfg: &OptConfig) -> Result<()> {
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.warmup_lr), z.len());
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..cfg.warmup_iters {
        let Some((f, g)) = try_value_grad(problem, z)? else { break };
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, z.clone()));
        }
        opt.apply(z, &g);
        problem.project(z)?;
    }
    if let Some((f, bz)) = best {
        if try_value_grad(problem, z)?.is_none_or(|(fz, _)| fz > f) {
            *z = bz;
        }
    }
    Ok(())
}

fn spg(problem: &Problem, mut z: Vec<f64>, cfg: &OptConfig) -> Result<RunResult> {
    problem.project(&mut z)?;
    let Some((mut f, mut g)) = try_value_grad(problem, &z)? else {
        return Err(Error::NonFinite {
            context: "objective at solver start",
            t: 0,
        });
    };
    let mut history = vec![f];
    let mut residual = problem.stationarity(&z, &g)?;
    let cautious = |residual: f64| {
        if residual > 0.0 {
            (1.0 / residual).clamp(STEP_MIN, STEP_MAX)
        } else {
            1.0
        }
    };
    let mut alpha = cautious(residual);
    let mut stalled = false;
    let mut best = (f, z.clone(), residual);
    let mut iterations = 0;
    while iterations < cfg.max_iters && residual > cfg.grad_tol {
        iterations += 1;
        let mut target: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a - alpha * b).collect();
        problem.project(&mut target)?;
        let d: Vec<f64> = target.iter().zip(&z).map(|(a, b)| a - b).collect();
        let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            break;
        }
        let f_ref = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut lambda = 1.0;
        let accepted = loop {
            let trial: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + lambda * b).collect();
            match try_value_grad(problem, &trial)? {
                Some((ft, gt)) if ft <= f_ref + ARMIJO * lambda * slope => break Some((trial, ft, gt)),
                Some((ft, _)) => {
                    // safeguarded quadratic interpolation
                    let q = -0.5 * lambda * lambda * slope / (ft - f - lambda * slope);
                    lambda = if q >= 0.1 * lambda && q <= 0.9 * lambda { q } else { 0.5 * lambda };
                }
                None => lambda *= 0.5,
            }
            if lambda < 1e-20 {
                break None;
            }
        };
        let Some((z_new, f_new, g_new)) = accepted else { break };
        if z_new == z {
            // the accepted step vanished in rounding: retry once from a
            // cautious step length, then give up
            if stalled {
                break;
            }
            stalled = true;
            alpha = cautious(residual);
            continue;
        }
        stalled = false;
        let s: Vec<f64> = z_new.iter().zip(&z).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(g_new.iter().zip(&g)).map(|(a, (b, c))| a * (b - c)).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let yy: f64 = g_new.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum();
        // flat directions (sy ≤ 0) fall back to |s|/|y| instead of the
        // maximal step, which would only be backtracked again
        alpha = if sy > 0.0 {
            ss / sy
        } else if yy > 0.0 {
            (ss / yy).sqrt()
        } else {
            alpha
        }
        .clamp(STEP_MIN, STEP_MAX);
        z = z_new;
        f = f_new;
        g = g_new;
        residual = problem.stationarity(&z, &g)?;
        history.push(f);
        if history.len() > cfg.memory {
            history.remove(0);
        }
        if f < best.0 || (f == best.0 && residual < best.2) {
            best = (f, z.clone(), residual);
        }
    }
    // prefer the certified final iterate over a marginally lower uncertified one
    let (value, z, residual) = if residual <= cfg.grad_tol || f <= best.0 {
        (f, z, residual)
    } else {
        best
    };
    Ok(RunResult {
        z,
        value,
        residual,
        iterations,
    })
}

/// Solves one variant. Random restarts run an Adam warm-up before the
/// projected-gradient phase; warm starts go straight to the latter. The
/// lowest objective wins, ties going to the earliest start.
pub fn solve(
    variant: Variant,
    dataset: &TimeSeriesDataset,
    plan: &SegmentationPlan,
    m: usize,
    spec: &CellSpec,
    cfg: &OptConfig,
    warm: &[WarmStart],
) -> Result<LiftedSolution> {
    cfg.validate()?;
    let problem = Problem::new(variant, dataset, plan, m, spec, cfg.spectral_bound)?;
    let mut starts: Vec<(Vec<f64>, bool)> = (0..cfg.restarts as u64)
        .map(|k| {
            let p = init_params(spec, cfg.seed.wrapping_add(k))?;
            let zero = HiddenState::zeros(spec.state_dim());
            let segment_states = match variant {
                Variant::Unconstrained => {
                    let traj = forward(&p, &zero, &dataset.inputs)?;
                    plan.starts.iter().map(|s| traj.hidden[*s].clone()).collect()
                }
                _ => Vec::new(),
            };
            Ok((problem.pack(&p, &zero, &segment_states), true))
        })
        .collect::<Result<_>>()?;
    for w in warm {
        if w.params.spec() != spec {
            return Err(Error::Config("warm start has a different cell".into()));
        }
        starts.push((problem.pack(&w.params, &w.initial_state, &w.segment_states), false));
    }
    let runs: Vec<Result<RunResult>> = starts
        .into_par_iter()
        .map(|(mut z, random)| {
            problem.project(&mut z)?;
            if random {
                adam_warmup(&problem, &mut z, cfg)?;
            }
            spg(&problem, z, cfg)
        })
        .collect();
    let mut best: Option<(usize, RunResult)> = None;
    let mut first_err = None;
    for (k, run) in runs.into_iter().enumerate() {
        match run {
            Ok(r) => {
                if best.as_ref().is_none_or(|(_, b)| r.value < b.value) {
                    best = Some((k, r));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((restart, run)) = best else {
        return Err(first_err.expect("at least one start"));
    };
    let params = problem.params(&run.z);
    let init_states = (0..problem.n_states)
        .map(|k| HiddenState::from(problem.state(&run.z, k)))
        .collect();
    let mut sol = LiftedSolution {
        variant,
        burn_in: m,
        params,
        init_states,
        objective: problem.value(&run.z)?,
        converged: run.residual <= cfg.grad_tol,
        grad_norm: run.residual,
        iterations: run.iterations,
        restart,
        bounded: false,
    };
    sol.bounded = check_bounded(&sol, dataset, plan)?;
    Ok(sol)
}

fn check_bounded(sol: &LiftedSolution, dataset: &TimeSeriesDataset, plan: &SegmentationPlan) -> Result<bool> {
    let limit = 10.0 * dataset.max_abs().max(f64::MIN_POSITIVE);
    let states = match sol.segment_initial_states(dataset, plan) {
        Ok(s) => s,
        Err(Error::NonFinite { .. }) => return Ok(false),
        Err(e) => return Err(e),
    };
    for (i, h0) in states.iter().enumerate() {
        let traj = match forward(&sol.params, h0, extract(dataset, plan, i)?.inputs) {
            Ok(t) => t,
            Err(Error::NonFinite { .. }) => return Ok(false),
            Err(e) => return Err(e),
        };
        if traj.outputs.iter().any(|y| y.norm_inf() > limit) {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn solve_tbptt(dataset: &TimeSeriesDataset, plan: &SegmentationPlan, m: usize, spec: &CellSpec, cfg: &OptConfig) -> Result<LiftedSolution> {
    solve(Variant::Tbptt, dataset, plan, m, spec, cfg, &[])
}

pub fn solve_coupled(dataset: &TimeSeriesDataset, plan: &SegmentationPlan, m: usize, spec: &CellSpec, cfg: &OptConfig) -> Result<LiftedSolution> {
    solve(Variant::Coupled, dataset, plan, m, spec, cfg, &[])
}

pub fn solve_unconstrained(dataset: &TimeSeriesDataset, plan: &SegmentationPlan, m: usize, spec: &CellSpec, cfg: &OptConfig) -> Result<LiftedSolution> {
    solve(Variant::Unconstrained, dataset, plan, m, spec, cfg, &[])
}

/// Solutions of all three variants on one instance, each variant also
/// restarted from the others' solutions so that the feasible-set ordering
/// is not spoiled by a poor local minimum.
#[derive(Clone, Debug)]
pub struct SolvedInstance {
    pub tbptt: LiftedSolution,
    pub coupled: LiftedSolution,
    pub unconstrained: LiftedSolution,
}

pub fn solve_all(
    dataset: &TimeSeriesDataset,
    plan: &SegmentationPlan,
    m: usize,
    spec: &CellSpec,
    cfg: &OptConfig,
) -> Result<SolvedInstance> {
    let tbptt = solve_tbptt(dataset, plan, m, spec, cfg)?;
    let w_star = tbptt.warm_start(dataset, plan)?;
    let coupled = solve(Variant::Coupled, dataset, plan, m, spec, cfg, std::slice::from_ref(&w_star))?;
    let w_bench = coupled.warm_start(dataset, plan)?;
    let unconstrained = solve(Variant::Unconstrained, dataset, plan, m, spec, cfg, &[w_star, w_bench])?;
    Ok(SolvedInstance {
        tbptt,
        coupled,
        unconstrained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{relative_error, segment_loss};
    use crate::data::{gen_synthetic, make_plan, realizable_dataset};
    use crate::linalg::spectral_norm;
    use crate::rnn::Activation;
    use crate::training::full_batch_objective;

    fn quick() -> OptConfig {
        OptConfig {
            restarts: 3,
            max_iters: 5_000,
            warmup_iters: 300,
            ..OptConfig::default()
        }
    }

    fn fd_check(variant: Variant) {
        let (ds, _) = gen_synthetic(3, 30, 0.1).unwrap();
        let plan = make_plan(30, 8, 3).unwrap();
        let spec = CellSpec::elman(1, 2, 1, Activation::Tanh);
        let problem = Problem::new(variant, &ds, &plan, 2, &spec, None).unwrap();
        let p = init_params(&spec, 1).unwrap();
        let mut z = problem.pack(&p, &[0.3, -0.2], &[]);
        for (k, v) in z.iter_mut().enumerate().skip(p.len()) {
            *v = 0.1 * (k as f64).sin();
        }
        let (f, g) = problem.value_grad(&z).unwrap();
        assert_eq!(f, problem.value(&z).unwrap());
        let h = 1e-6;
        let fd: Vec<f64> = (0..z.len())
            .map(|k| {
                let mut a = z.clone();
                let mut b = z.clone();
                a[k] += h;
                b[k] -= h;
                (problem.value(&a).unwrap() - problem.value(&b).unwrap()) / (2.0 * h)
            })
            .collect();
        assert!(relative_error(&g, &fd, 1e-8) < 1e-6, "{variant:?}");
    }

    #[test]
    fn reduced_gradients_match_finite_differences() {
        for v in Variant::ALL {
            fd_check(v);
        }
    }

    #[test]
    fn coupled_reconstruction_matches_direct_segment_losses() {
        let (ds, _) = gen_synthetic(4, 60, 0.1).unwrap();
        let plan = make_plan(60, 21, 1).unwrap();
        let spec = CellSpec::linear(1, 1, 1);
        let sol = solve_coupled(&ds, &plan, 4, &spec, &quick()).unwrap();
        let states = sol.segment_initial_states(&ds, &plan).unwrap();
        let direct: Vec<f64> = states
            .iter()
            .enumerate()
            .map(|(i, h)| segment_loss(&sol.params, h, &extract(&ds, &plan, i).unwrap(), 4).unwrap())
            .collect();
        assert_eq!(direct.iter().sum::<f64>() / plan.count() as f64, sol.objective);
        // chaining: segment i starts where segment i-1 is after the shift
        for i in 1..plan.count() {
            let prev = forward(&sol.params, &states[i - 1], extract(&ds, &plan, i - 1).unwrap().inputs).unwrap();
            assert_eq!(prev.hidden[plan.starts[i] - plan.starts[i - 1]], states[i]);
        }
    }

    #[test]
    fn tbptt_objective_matches_training_objective() {
        let (ds, _) = gen_synthetic(5, 50, 0.1).unwrap();
        let plan = make_plan(50, 10, 1).unwrap();
        let sol = solve_tbptt(&ds, &plan, 3, &CellSpec::linear(1, 1, 1), &quick()).unwrap();
        assert_eq!(sol.objective, full_batch_objective(&sol.params, &ds, &plan, 3).unwrap());
        assert!(sol.init_states.is_empty());
        assert!(sol.converged, "residual {}", sol.grad_norm);
    }

    #[test]
    fn realizable_instance_is_solved_by_every_variant() {
        // fast decay, so zero-started segments are exact after the burn-in
        let gen = Params::new(CellSpec::linear(1, 1, 1), Vector::new(vec![0.2, 1.0, 1.0])).unwrap();
        let (ds, _) = realizable_dataset(&gen, 2, 40).unwrap();
        let plan = make_plan(40, 12, 1).unwrap();
        let sols = solve_all(&ds, &plan, 10, gen.spec(), &quick()).unwrap();
        for s in [&sols.tbptt, &sols.coupled, &sols.unconstrained] {
            assert!(s.objective < 1e-6, "{:?}: {}", s.variant, s.objective);
            assert!(s.bounded);
        }
        let outputs = sols.coupled.segment_outputs(&ds, &plan).unwrap();
        for (i, ys) in outputs.iter().enumerate() {
            let seg = extract(&ds, &plan, i).unwrap();
            for (y, d) in ys.iter().zip(seg.targets) {
                assert!((y[0] - d[0]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn feasible_set_ordering_on_synthetic_data() {
        let (ds, _) = gen_synthetic(7, 60, 0.1).unwrap();
        let plan = make_plan(60, 15, 1).unwrap();
        let sols = solve_all(&ds, &plan, 3, &CellSpec::linear(1, 1, 1), &quick()).unwrap();
        assert!(sols.unconstrained.objective <= sols.coupled.objective + 1e-7);
        assert!(sols.unconstrained.objective <= sols.tbptt.objective + 1e-7);
        assert_eq!(sols.unconstrained.init_states.len(), plan.count());
        assert_eq!(sols.coupled.init_states.len(), 1);
    }

    #[test]
    fn single_segment_coupled_equals_unconstrained() {
        let (ds, _) = gen_synthetic(8, 30, 0.1).unwrap();
        let plan = make_plan(30, 30, 1).unwrap();
        let spec = CellSpec::linear(1, 1, 1);
        let c = solve_coupled(&ds, &plan, 5, &spec, &quick()).unwrap();
        let u = solve_unconstrained(&ds, &plan, 5, &spec, &quick()).unwrap();
        assert!((c.objective - u.objective).abs() < 1e-9);
    }

    #[test]
    fn solutions_respect_spectral_bound() {
        let (ds, _) = gen_synthetic(9, 40, 0.1).unwrap();
        let plan = make_plan(40, 10, 2).unwrap();
        let mut cfg = quick();
        cfg.spectral_bound = Some(0.5);
        for v in Variant::ALL {
            let sol = solve(v, &ds, &plan, 1, &CellSpec::linear(1, 2, 1), &cfg, &[]).unwrap();
            assert!(spectral_norm(&sol.params.recurrent_matrix()).unwrap() <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn solve_is_deterministic_and_serializes() {
        let (ds, _) = gen_synthetic(10, 40, 0.1).unwrap();
        let plan = make_plan(40, 10, 1).unwrap();
        let spec = CellSpec::linear(1, 1, 1);
        let a = solve_unconstrained(&ds, &plan, 2, &spec, &quick()).unwrap();
        let b = solve_unconstrained(&ds, &plan, 2, &spec, &quick()).unwrap();
        assert_eq!(a, b);
        assert_eq!(LiftedSolution::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    #[test]
    fn rejects_invalid_burn_in() {
        let (ds, _) = gen_synthetic(1, 20, 0.1).unwrap();
        let plan = make_plan(20, 5, 1).unwrap();
        assert!(solve_tbptt(&ds, &plan, 5, &CellSpec::linear(1, 1, 1), &quick()).is_err());
    }
}
