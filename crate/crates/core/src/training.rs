//! Truncated BPTT training: mini-batch SGD or Adam over segment losses with
//! zero or chained initial states, full-sequence BPTT, and the spectral-norm
//! projection of the recurrent weights.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{loss_grad_from, segment_loss};
use crate::data::{extract, make_plan, SegmentationPlan, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm_slice, Vector};
use crate::rng;
use crate::rnn::{forward, init_params, CellSpec, HiddenState, Params};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(lr: f64) -> Self {
        OptimizerKind::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd { lr } => lr >= 0.0 && lr.is_finite(),
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0
                    && lr.is_finite()
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer together with its moment estimates.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        let moments = matches!(kind, OptimizerKind::Adam { .. });
        Optimizer {
            kind,
            first: if moments { vec![0.0; n] } else { Vec::new() },
            second: if moments { vec![0.0; n] } else { Vec::new() },
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// In-place update of `theta` given a gradient.
    pub fn apply(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.steps = self.steps.saturating_add(1);
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                theta.iter_mut().zip(grad).for_each(|(w, g)| *w -= lr * g);
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                for k in 0..theta.len() {
                    let g = grad[k];
                    self.first[k] = beta1 * self.first[k] + (1.0 - beta1) * g;
                    self.second[k] = beta2 * self.second[k] + (1.0 - beta2) * g * g;
                    let m_hat = self.first[k] / c1;
                    let v_hat = self.second[k] / c2;
                    theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every segment starts from the zero state; batches are shuffled.
    ZeroInit,
    /// Segments in chronological order, each started from the state its
    /// predecessor reaches at the shared time index.
    Stateful,
    /// A single segment spanning the whole sequence.
    FullBptt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub cell: CellSpec,
    pub window: usize,
    pub burn_in: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub seed: u64,
    pub spectral_bound: Option<f64>,
    pub mode: TrainMode,
    #[serde(default)]
    pub early_stop: bool,
}

/// Epochs without an objective improvement of at least [`EARLY_STOP_TOL`]
/// before training stops (when enabled).
pub const EARLY_STOP_PATIENCE: usize = 20;
pub const EARLY_STOP_TOL: f64 = 1e-10;

impl TrainConfig {
    /// Plan and validated settings for a dataset of length `t_len`.
    pub fn plan(&self, t_len: usize) -> Result<SegmentationPlan> {
        self.cell.validate()?;
        self.optimizer.validate()?;
        let plan = match self.mode {
            TrainMode::FullBptt => make_plan(t_len, t_len, 1)?,
            _ => make_plan(t_len, self.window, self.stride)?,
        };
        if self.burn_in >= plan.window {
            return Err(Error::Config(format!(
                "burn-in m = {} must be at most N - 1 = {}",
                self.burn_in,
                plan.window - 1
            )));
        }
        if self.mode != TrainMode::FullBptt && (self.batch_size == 0 || self.batch_size > plan.count()) {
            return Err(Error::Config(format!(
                "batch size must satisfy 1 <= b <= S (b = {}, S = {})",
                self.batch_size,
                plan.count()
            )));
        }
        if let Some(rho) = self.spectral_bound {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Config(format!("spectral bound must lie in (0, 1] (got {rho})")));
            }
        }
        Ok(plan)
    }

    fn check_dataset(&self, dataset: &TimeSeriesDataset) -> Result<SegmentationPlan> {
        if dataset.d_x() != self.cell.d_x || dataset.d_y() != self.cell.d_y {
            return Err(Error::dim(
                "dataset vs. cell",
                format!("d_x = {}, d_y = {}", self.cell.d_x, self.cell.d_y),
                format!("d_x = {}, d_y = {}", dataset.d_x(), dataset.d_y()),
            ));
        }
        self.plan(dataset.len())
    }

    /// Hex digest identifying the configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of the SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config_hash: String,
    pub seed: u64,
    pub initial_objective: f64,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub params: Params,
}

impl TrainLog {
    pub fn final_objective(&self) -> f64 {
        self.epochs.last().map_or(self.initial_objective, |e| e.objective)
    }

    /// One JSON object per epoch, stamped with the configuration hash and seed.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            config_hash: &'a str,
            seed: u64,
            #[serde(flatten)]
            record: &'a EpochRecord,
        }
        let mut out = String::new();
        for record in &self.epochs {
            out.push_str(&serde_json::to_string(&Line {
                config_hash: &self.config_hash,
                seed: self.seed,
                record,
            })?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Mean zero-state segment loss over all segments.
pub fn full_batch_objective(params: &Params, dataset: &TimeSeriesDataset, plan: &SegmentationPlan, m: usize) -> Result<f64> {
    let zero = vec![0.0; params.spec().state_dim()];
    let losses = (0..plan.count())
        .into_par_iter()
        .map(|i| segment_loss(params, &zero, &extract(dataset, plan, i)?, m))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / plan.count() as f64)
}

/// Mean zero-state segment loss and its gradient with respect to θ.
pub fn full_batch_gradient(params: &Params, dataset: &TimeSeriesDataset, plan: &SegmentationPlan, m: usize) -> Result<(f64, Vector)> {
    let all: Vec<usize> = (0..plan.count()).collect();
    batch_gradient(params, dataset, plan, &all, m, None)
}

/// Batch-averaged loss and θ-gradient. Segment `batch[k]` starts from
/// `init_states[k]` when given, from zero otherwise. Per-segment work runs
/// in parallel; the reduction is serial and in batch order.
pub fn batch_gradient(
    params: &Params,
    dataset: &TimeSeriesDataset,
    plan: &SegmentationPlan,
    batch: &[usize],
    m: usize,
    init_states: Option<&[HiddenState]>,
) -> Result<(f64, Vector)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if let Some(states) = init_states {
        if states.len() != batch.len() {
            return Err(Error::dim("batch initial states", batch.len(), states.len()));
        }
    }
    let zero = vec![0.0; params.spec().state_dim()];
    let parts = batch
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let h0 = init_states.map_or(&zero[..], |s| &s[k][..]);
            loss_grad_from(params, h0, &extract(dataset, plan, i)?, m)
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for ((l, g), &i) in parts.iter().zip(batch) {
        if let Some(component) = g.d_theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                epoch: None,
                segment: i,
                component,
            });
        }
        loss += l;
        grad.iter_mut().zip(g.d_theta.iter()).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|v| *v *= scale);
    Ok((loss * scale, Vector::new(grad)))
}

/// Scales the recurrent weights (the stacked gate blocks for LSTM) onto the
/// spectral-norm ball of radius `rho`. Returns whether anything changed.
pub fn project_in_place(params: &mut Params, rho: f64) -> Result<bool> {
    let (range, rows, cols) = params.recurrent_range();
    project_block(&mut params.theta_mut()[range], rows, cols, rho)
}

/// Scales a `rows × cols` block onto the spectral-norm ball of radius `rho`.
pub(crate) fn project_block(block: &mut [f64], rows: usize, cols: usize, rho: f64) -> Result<bool> {
    let sigma = spectral_norm_slice(rows, cols, block)?;
    if sigma > rho {
        let scale = rho / sigma;
        block.iter_mut().for_each(|w| *w *= scale);
        Ok(true)
    } else {
        Ok(false)
    }
}

pub fn project_stability(params: &Params, rho: f64) -> Result<Params> {
    let mut p = params.clone();
    project_in_place(&mut p, rho)?;
    Ok(p)
}

/// One optimizer step on the batch-averaged gradient, followed by the
/// projection when a spectral bound is configured.
pub fn sgd_step(
    params: &Params,
    dataset: &TimeSeriesDataset,
    plan: &SegmentationPlan,
    batch: &[usize],
    config: &TrainConfig,
    optimizer: &mut Optimizer,
) -> Result<Params> {
    let (_, grad) = batch_gradient(params, dataset, plan, batch, config.burn_in, None)?;
    apply_step(params, &grad, optimizer, config.spectral_bound)
}

fn apply_step(params: &Params, grad: &[f64], optimizer: &mut Optimizer, bound: Option<f64>) -> Result<Params> {
    let mut next = params.clone();
    optimizer.apply(next.theta_mut(), grad);
    if let Some(rho) = bound {
        project_in_place(&mut next, rho)?;
    }
    Ok(next)
}

/// Initial state of every segment when each one continues from its
/// predecessor: `h_{0|0} = 0` and `h_{0|i}` is the state segment `i - 1`
/// reaches at the start index of segment `i`.
pub fn chained_initial_states(params: &Params, dataset: &TimeSeriesDataset, plan: &SegmentationPlan) -> Result<Vec<HiddenState>> {
    let mut states = Vec::with_capacity(plan.count());
    states.push(HiddenState::zeros(params.spec().state_dim()));
    for i in 1..plan.count() {
        let next = advance(params, dataset, plan, i - 1, &states[i - 1])?;
        states.push(next);
    }
    Ok(states)
}

/// State reached by segment `prev` (started from `h0`) at the start of
/// segment `prev + 1`.
fn advance(params: &Params, dataset: &TimeSeriesDataset, plan: &SegmentationPlan, prev: usize, h0: &HiddenState) -> Result<HiddenState> {
    let shift = plan.starts[prev + 1] - plan.starts[prev];
    let seg = extract(dataset, plan, prev)?;
    let mut traj = forward(params, h0, &seg.inputs[..shift])?;
    Ok(traj.hidden.swap_remove(shift))
}

pub fn train(dataset: &TimeSeriesDataset, config: &TrainConfig) -> Result<TrainLog> {
    config.check_dataset(dataset)?;
    let params = init_params(&config.cell, config.seed)?;
    train_from(dataset, config, params)
}

/// Trains starting from the given parameters.
pub fn train_from(dataset: &TimeSeriesDataset, config: &TrainConfig, initial: Params) -> Result<TrainLog> {
    let plan = config.check_dataset(dataset)?;
    if initial.spec() != &config.cell {
        return Err(Error::Config("initial parameters do not match the configured cell".into()));
    }
    let m = config.burn_in;
    let mut params = initial;
    if let Some(rho) = config.spectral_bound {
        project_in_place(&mut params, rho)?;
    }
    let mut optimizer = Optimizer::new(config.optimizer, params.len());
    let mut shuffle_rng = rng::stream(config.seed, rng::PURPOSE_SHUFFLE);
    let batch_size = match config.mode {
        TrainMode::FullBptt => 1,
        _ => config.batch_size,
    };
    let initial_objective = full_batch_objective(&params, dataset, &plan, m)?;
    let mut log = TrainLog {
        config_hash: config.hash(),
        seed: config.seed,
        initial_objective,
        epochs: Vec::with_capacity(config.epochs),
        stopped_early: false,
        params: params.clone(),
    };
    let mut order: Vec<usize> = (0..plan.count()).collect();
    let with_epoch = |e: Error, epoch: usize| match e {
        Error::NonFiniteGradient { segment, component, .. } => Error::NonFiniteGradient {
            epoch: Some(epoch),
            segment,
            component,
        },
        other => other,
    };

    for epoch in 0..config.epochs {
        let started = Instant::now();
        match config.mode {
            TrainMode::ZeroInit | TrainMode::FullBptt => {
                order.shuffle(&mut shuffle_rng);
                for batch in order.chunks(batch_size) {
                    let (_, grad) = batch_gradient(&params, dataset, &plan, batch, m, None)
                        .map_err(|e| with_epoch(e, epoch))?;
                    params = apply_step(&params, &grad, &mut optimizer, config.spectral_bound)?;
                }
            }
            TrainMode::Stateful => {
                // init state used for the most recent segment, under the θ of its step
                let mut last: Option<(usize, HiddenState)> = None;
                for batch in order.chunks(batch_size) {
                    let mut states = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let h0 = match &last {
                            None => HiddenState::zeros(params.spec().state_dim()),
                            Some((prev, h)) => advance(&params, dataset, &plan, *prev, h)?,
                        };
                        last = Some((i, h0.clone()));
                        states.push(h0);
                    }
                    let (_, grad) = batch_gradient(&params, dataset, &plan, batch, m, Some(&states))
                        .map_err(|e| with_epoch(e, epoch))?;
                    params = apply_step(&params, &grad, &mut optimizer, config.spectral_bound)?;
                }
            }
        }
        let (objective, grad) = full_batch_gradient(&params, dataset, &plan, m)?;
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            objective,
            grad_norm: grad.norm(),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if config.early_stop && stalled(&log.epochs) {
            log.stopped_early = true;
            break;
        }
    }
    log.params = params;
    Ok(log)
}

fn stalled(records: &[EpochRecord]) -> bool {
    let n = records.len();
    if n <= EARLY_STOP_PATIENCE {
        return false;
    }
    let best_before = records[..n - EARLY_STOP_PATIENCE]
        .iter()
        .map(|r| r.objective)
        .fold(f64::INFINITY, f64::min);
    let best_recent = records[n - EARLY_STOP_PATIENCE..]
        .iter()
        .map(|r| r.objective)
        .fold(f64::INFINITY, f64::min);
    best_before - best_recent < EARLY_STOP_TOL
}
