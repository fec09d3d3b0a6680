//! Recurrent cells, their flattened parameter vector and forward evaluation.
//!
//! A network is a state update `h_t = f(h_{t-1}, x_t; θ)` followed by a linear
//! read-out `y_t = g(h_t, x_t; θ)`. Three cells are supported:
//!
//! * `Linear`: `h_t = W_hh h_{t-1} + W_xh x_t`, `y_t = W_hy h_t` (no biases).
//! * `Elman`: `h_t = φ(W_hh h_{t-1} + W_xh x_t + b_h)`, `y_t = W_hy h_t + b_y`.
//! * `Lstm`: gated cell with internal state `[c; h]` of length `2·d_h` and
//!   gate order (input, forget, cell, output). The read-out sees `h` only.
//!
//! θ is stored row-major, block by block, in the order given by [`Layout`].

use std::ops::{Deref, Range};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemv_acc, Matrix, Vector};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Linear,
    Elman,
    Lstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
            Activation::Identity => a,
        }
    }

    /// Derivative given the pre-activation `a` and its image `h = φ(a)`.
    /// ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellSpec {
    pub kind: CellKind,
    pub d_x: usize,
    pub d_h: usize,
    pub d_y: usize,
    pub activation: Activation,
    pub use_biases: bool,
}

impl CellSpec {
    pub fn linear(d_x: usize, d_h: usize, d_y: usize) -> Self {
        CellSpec {
            kind: CellKind::Linear,
            d_x,
            d_h,
            d_y,
            activation: Activation::Identity,
            use_biases: false,
        }
    }

    pub fn elman(d_x: usize, d_h: usize, d_y: usize, activation: Activation) -> Self {
        CellSpec {
            kind: CellKind::Elman,
            d_x,
            d_h,
            d_y,
            activation,
            use_biases: true,
        }
    }

    pub fn lstm(d_x: usize, d_h: usize, d_y: usize) -> Self {
        CellSpec {
            kind: CellKind::Lstm,
            d_x,
            d_h,
            d_y,
            activation: Activation::Tanh,
            use_biases: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_h == 0 || self.d_y == 0 {
            return Err(Error::Config(format!(
                "cell dimensions must be positive (d_x={}, d_h={}, d_y={})",
                self.d_x, self.d_h, self.d_y
            )));
        }
        if self.kind == CellKind::Linear
            && (self.activation != Activation::Identity || self.use_biases)
        {
            return Err(Error::Config(
                "a linear cell has identity activation and no biases".into(),
            ));
        }
        Ok(())
    }

    /// Length of the internal state vector (`2·d_h` for LSTM).
    pub fn state_dim(&self) -> usize {
        match self.kind {
            CellKind::Lstm => 2 * self.d_h,
            _ => self.d_h,
        }
    }

    fn gates(&self) -> usize {
        match self.kind {
            CellKind::Lstm => 4,
            _ => 1,
        }
    }

    pub fn layout(&self) -> Layout {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            blocks.push(Block {
                name,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        };
        let (d_x, d_h, d_y) = (self.d_x, self.d_h, self.d_y);
        match self.kind {
            CellKind::Lstm => {
                for g in LSTM_GATES {
                    push(format!("W_hh.{g}"), d_h, d_h);
                }
                for g in LSTM_GATES {
                    push(format!("W_xh.{g}"), d_h, d_x);
                }
                if self.use_biases {
                    for g in LSTM_GATES {
                        push(format!("b_h.{g}"), d_h, 1);
                    }
                }
            }
            _ => {
                push("W_hh".into(), d_h, d_h);
                push("W_xh".into(), d_h, d_x);
                if self.use_biases {
                    push("b_h".into(), d_h, 1);
                }
            }
        }
        push("W_hy".into(), d_y, d_h);
        if self.use_biases {
            push("b_y".into(), d_y, 1);
        }
        Layout { blocks }
    }

    pub fn num_params(&self) -> usize {
        let g = self.gates();
        let (d_x, d_h, d_y) = (self.d_x, self.d_h, self.d_y);
        let biases = if self.use_biases { g * d_h + d_y } else { 0 };
        g * d_h * d_h + g * d_h * d_x + d_y * d_h + biases
    }

    pub(crate) fn cache_len(&self) -> usize {
        match self.kind {
            CellKind::Linear => 0,
            CellKind::Elman => self.d_h,
            CellKind::Lstm => 5 * self.d_h,
        }
    }
}

/// LSTM gate order in the parameter layout.
pub const LSTM_GATES: [&str; 4] = ["i", "f", "g", "o"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<Block>,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Offsets of the blocks the cell kernels read, resolved once per call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Offsets {
    pub gates: usize,
    pub w_hh: usize,
    pub w_xh: usize,
    pub b_h: Option<usize>,
    pub w_hy: usize,
    pub b_y: Option<usize>,
}

impl Offsets {
    pub(crate) fn of(spec: &CellSpec) -> Self {
        let g = spec.gates();
        let (d_x, d_h, d_y) = (spec.d_x, spec.d_h, spec.d_y);
        let w_hh = 0;
        let w_xh = w_hh + g * d_h * d_h;
        let mut next = w_xh + g * d_h * d_x;
        let b_h = spec.use_biases.then(|| {
            let o = next;
            next += g * d_h;
            o
        });
        let w_hy = next;
        next += d_y * d_h;
        let b_y = spec.use_biases.then_some(next);
        Offsets {
            gates: g,
            w_hh,
            w_xh,
            b_h,
            w_hy,
            b_y,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Params {
    spec: CellSpec,
    layout: Layout,
    theta: Vector,
}

#[derive(Deserialize)]
struct ParamsDoc {
    spec: CellSpec,
    layout: Layout,
    theta: Vec<f64>,
}

impl<'de> Deserialize<'de> for Params {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = ParamsDoc::deserialize(d)?;
        let params =
            Params::new(doc.spec, Vector::new(doc.theta)).map_err(serde::de::Error::custom)?;
        if params.layout != doc.layout {
            return Err(serde::de::Error::custom(
                "parameter layout does not match the cell specification",
            ));
        }
        Ok(params)
    }
}

impl Params {
    pub fn new(spec: CellSpec, theta: Vector) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if theta.len() != layout.total() {
            return Err(Error::dim("Params::new", layout.total(), theta.len()));
        }
        Ok(Params {
            spec,
            layout,
            theta,
        })
    }

    pub fn zeros(spec: CellSpec) -> Result<Self> {
        Params::new(spec, Vector::zeros(spec.num_params()))
    }

    pub fn spec(&self) -> &CellSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn theta(&self) -> &Vector {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        self.theta.as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Same architecture, different parameter values.
    pub fn with_theta(&self, theta: Vector) -> Result<Params> {
        if theta.len() != self.theta.len() {
            return Err(Error::dim("Params::with_theta", self.theta.len(), theta.len()));
        }
        Ok(Params {
            spec: self.spec,
            layout: self.layout.clone(),
            theta,
        })
    }

    fn block_of(&self, name: &str) -> Result<&Block> {
        self.layout.get(name).ok_or_else(|| {
            Error::Config(format!("no parameter block named {name:?} in this cell"))
        })
    }

    pub fn block(&self, name: &str) -> Result<&[f64]> {
        let range = self.block_of(name)?.range();
        Ok(&self.theta[range])
    }

    pub fn block_matrix(&self, name: &str) -> Result<Matrix> {
        let b = self.block_of(name)?;
        Matrix::new(b.rows, b.cols, self.theta[b.range()].to_vec())
    }

    pub fn set_block(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let range = self.block_of(name)?.range();
        if values.len() != range.len() {
            return Err(Error::dim("Params::set_block", range.len(), values.len()));
        }
        self.theta.as_mut_slice()[range].copy_from_slice(values);
        Ok(())
    }

    /// Named weight matrices and bias columns in layout order.
    pub fn unpack(&self) -> Vec<(String, Matrix)> {
        self.layout
            .blocks
            .iter()
            .map(|b| {
                let m = Matrix::new(b.rows, b.cols, self.theta[b.range()].to_vec())
                    .expect("layout blocks have positive shape");
                (b.name.clone(), m)
            })
            .collect()
    }

    pub fn pack(spec: CellSpec, blocks: &[(String, Matrix)]) -> Result<Params> {
        let mut params = Params::zeros(spec)?;
        if blocks.len() != params.layout.blocks.len() {
            return Err(Error::dim(
                "Params::pack",
                params.layout.blocks.len(),
                blocks.len(),
            ));
        }
        for (name, m) in blocks {
            let b = params.block_of(name)?.clone();
            if m.shape() != (b.rows, b.cols) {
                return Err(Error::dim(
                    "Params::pack",
                    format!("{}x{}", b.rows, b.cols),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
            params.theta.as_mut_slice()[b.range()].copy_from_slice(m.data());
        }
        Ok(params)
    }

    /// Index range of the recurrent weights; for LSTM the four gate blocks
    /// form one contiguous `4·d_h x d_h` matrix.
    pub fn recurrent_range(&self) -> (Range<usize>, usize, usize) {
        let off = Offsets::of(&self.spec);
        let rows = off.gates * self.spec.d_h;
        let cols = self.spec.d_h;
        (off.w_hh..off.w_hh + rows * cols, rows, cols)
    }

    pub fn recurrent_matrix(&self) -> Matrix {
        let (range, rows, cols) = self.recurrent_range();
        Matrix::new(rows, cols, self.theta[range].to_vec()).expect("positive shape")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Params> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HiddenState(Vector);

impl HiddenState {
    pub fn new(h: Vector) -> Self {
        HiddenState(h)
    }

    pub fn zeros(dim: usize) -> Self {
        HiddenState(Vector::zeros(dim))
    }

    pub fn as_vector(&self) -> &Vector {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.0.as_mut_slice()
    }

    pub fn into_vector(self) -> Vector {
        self.0
    }
}

impl Deref for HiddenState {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for HiddenState {
    fn from(v: Vec<f64>) -> Self {
        HiddenState(Vector::new(v))
    }
}

/// States `h_0..h_T'` (index 0 is the initial state) and outputs `y_1..y_T'`
/// (stored at `outputs[t - 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub hidden: Vec<HiddenState>,
    pub outputs: Vec<Vector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// One state update. `cache` receives what the backward pass needs:
/// the pre-activation for Elman, the gate activations and `tanh(c)` for LSTM.
#[inline]
pub(crate) fn cell_step(
    spec: &CellSpec,
    off: &Offsets,
    theta: &[f64],
    h_prev: &[f64],
    x: &[f64],
    h_out: &mut [f64],
    cache: &mut [f64],
) {
    let (d_x, d_h) = (spec.d_x, spec.d_h);
    let rows = off.gates * d_h;
    match spec.kind {
        CellKind::Linear | CellKind::Elman => {
            let pre: &mut [f64] = if spec.kind == CellKind::Elman {
                &mut cache[..d_h]
            } else {
                &mut *h_out
            };
            pre.iter_mut().for_each(|p| *p = 0.0);
            gemv_acc(rows, d_h, &theta[off.w_hh..], h_prev, pre);
            gemv_acc(rows, d_x, &theta[off.w_xh..], x, pre);
            if let Some(b) = off.b_h {
                pre.iter_mut().zip(&theta[b..b + d_h]).for_each(|(p, b)| *p += b);
            }
            if spec.kind == CellKind::Elman {
                for (h, a) in h_out.iter_mut().zip(cache[..d_h].iter()) {
                    *h = spec.activation.apply(*a);
                }
            }
        }
        CellKind::Lstm => {
            let (c_prev, hh_prev) = h_prev.split_at(d_h);
            let (z, tanh_c) = cache.split_at_mut(4 * d_h);
            z.iter_mut().for_each(|p| *p = 0.0);
            gemv_acc(rows, d_h, &theta[off.w_hh..], hh_prev, z);
            gemv_acc(rows, d_x, &theta[off.w_xh..], x, z);
            if let Some(b) = off.b_h {
                z.iter_mut()
                    .zip(&theta[b..b + 4 * d_h])
                    .for_each(|(p, b)| *p += b);
            }
            let (c_out, hh_out) = h_out.split_at_mut(d_h);
            for k in 0..d_h {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[d_h + k]);
                let g = z[2 * d_h + k].tanh();
                let o = sigmoid(z[3 * d_h + k]);
                let c = f * c_prev[k] + i * g;
                let tc = c.tanh();
                z[k] = i;
                z[d_h + k] = f;
                z[2 * d_h + k] = g;
                z[3 * d_h + k] = o;
                tanh_c[k] = tc;
                c_out[k] = c;
                hh_out[k] = o * tc;
            }
        }
    }
}

/// Read-out `y = W_hy h + b_y`, where `h` is the visible part of the state.
#[inline]
pub(crate) fn emit(spec: &CellSpec, off: &Offsets, theta: &[f64], state: &[f64], y: &mut [f64]) {
    let visible = visible_state(spec, state);
    y.iter_mut().for_each(|v| *v = 0.0);
    gemv_acc(spec.d_y, spec.d_h, &theta[off.w_hy..], visible, y);
    if let Some(b) = off.b_y {
        y.iter_mut()
            .zip(&theta[b..b + spec.d_y])
            .for_each(|(v, b)| *v += b);
    }
}

#[inline]
pub(crate) fn visible_state<'a>(spec: &CellSpec, state: &'a [f64]) -> &'a [f64] {
    match spec.kind {
        CellKind::Lstm => &state[spec.d_h..],
        _ => state,
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn check_inputs(spec: &CellSpec, h0: &[f64], inputs: &[Vector]) -> Result<()> {
    if h0.len() != spec.state_dim() {
        return Err(Error::dim("initial state", spec.state_dim(), h0.len()));
    }
    if let Some((t, x)) = inputs.iter().enumerate().find(|(_, x)| x.len() != spec.d_x) {
        return Err(Error::dim(
            "input",
            format!("d_x = {}", spec.d_x),
            format!("length {} at time index {}", x.len(), t + 1),
        ));
    }
    Ok(())
}

/// A forward pass in flat, reusable buffers. States `h_0..h_T'` live in
/// `states`, outputs `y_1..y_T'` in `outputs`. When recorded, `cache` keeps
/// one block per step for the backward sweep.
#[derive(Clone, Debug, Default)]
pub(crate) struct Run {
    pub states: Vec<f64>,
    pub outputs: Vec<f64>,
    pub cache: Vec<f64>,
    pub steps: usize,
}

impl Run {
    /// State after `t` steps (`t = 0` is the initial state).
    #[inline]
    pub fn state(&self, sd: usize, t: usize) -> &[f64] {
        &self.states[t * sd..(t + 1) * sd]
    }

    /// Output at 0-based step `k`.
    #[inline]
    pub fn output(&self, d_y: usize, k: usize) -> &[f64] {
        &self.outputs[k * d_y..(k + 1) * d_y]
    }

    pub fn to_trajectory(&self, spec: &CellSpec) -> Trajectory {
        let sd = spec.state_dim();
        Trajectory {
            hidden: (0..=self.steps)
                .map(|t| HiddenState::from(self.state(sd, t).to_vec()))
                .collect(),
            outputs: (0..self.steps)
                .map(|k| Vector::new(self.output(spec.d_y, k).to_vec()))
                .collect(),
        }
    }
}

/// Forward pass shared by [`forward`], the gradient tape and the solvers, so
/// that all of them produce bit-identical trajectories.
pub(crate) fn run_into(
    spec: &CellSpec,
    theta: &[f64],
    h0: &[f64],
    inputs: &[Vector],
    run: &mut Run,
    record: bool,
) -> Result<()> {
    check_inputs(spec, h0, inputs)?;
    let off = Offsets::of(spec);
    let (sd, d_y, cl) = (spec.state_dim(), spec.d_y, spec.cache_len());
    let n = inputs.len();
    run.steps = n;
    run.states.clear();
    run.states.resize((n + 1) * sd, 0.0);
    run.states[..sd].copy_from_slice(h0);
    run.outputs.clear();
    run.outputs.resize(n * d_y, 0.0);
    run.cache.clear();
    run.cache.resize(if record { n * cl } else { cl }, 0.0);
    for (k, x) in inputs.iter().enumerate() {
        let t = k + 1;
        let (done, rest) = run.states.split_at_mut(t * sd);
        let h = &mut rest[..sd];
        let cache = if record {
            &mut run.cache[k * cl..(k + 1) * cl]
        } else {
            &mut run.cache[..]
        };
        cell_step(spec, &off, theta, &done[k * sd..t * sd], x, h, cache);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "hidden state",
                t,
            });
        }
        let y = &mut run.outputs[k * d_y..t * d_y];
        emit(spec, &off, theta, h, y);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "output",
                t,
            });
        }
    }
    Ok(())
}

pub fn forward(params: &Params, h0: &HiddenState, inputs: &[Vector]) -> Result<Trajectory> {
    let mut run = Run::default();
    run_into(params.spec(), params.theta(), h0, inputs, &mut run, false)?;
    Ok(run.to_trajectory(params.spec()))
}

/// Output `y_t` for a 1-based time index `t`.
pub fn output_at(params: &Params, h0: &HiddenState, inputs: &[Vector], t: usize) -> Result<Vector> {
    if t == 0 || t > inputs.len() {
        return Err(Error::OutOfRange {
            what: "time",
            index: t,
            valid: format!("1..={}", inputs.len()),
        });
    }
    let mut traj = forward(params, h0, &inputs[..t])?;
    Ok(traj.outputs.swap_remove(t - 1))
}

/// Weights uniform on `[-1/√d_h, 1/√d_h]`, biases zero, LSTM forget-gate bias 1.
pub fn init_params(spec: &CellSpec, seed: u64) -> Result<Params> {
    spec.validate()?;
    let mut rng = rng::stream(seed, rng::PURPOSE_INIT);
    let bound = 1.0 / (spec.d_h as f64).sqrt();
    let layout = spec.layout();
    let mut theta = vec![0.0; layout.total()];
    for b in &layout.blocks {
        let slot = &mut theta[b.range()];
        if b.name.starts_with("b_") {
            let fill = if b.name == "b_h.f" { 1.0 } else { 0.0 };
            slot.iter_mut().for_each(|v| *v = fill);
        } else {
            slot.iter_mut()
                .for_each(|v| *v = rng::uniform(&mut rng, -bound, bound));
        }
    }
    Params::new(*spec, Vector::new(theta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_linear(a: f64, b: f64, c: f64) -> Params {
        Params::new(CellSpec::linear(1, 1, 1), Vector::new(vec![a, b, c])).unwrap()
    }

    fn seq(xs: &[f64]) -> Vec<Vector> {
        xs.iter().map(|x| Vector::new(vec![*x])).collect()
    }

    #[test]
    fn zero_elman_outputs_zero() {
        let spec = CellSpec::elman(2, 3, 2, Activation::Tanh);
        let p = Params::zeros(spec).unwrap();
        let inputs = vec![Vector::new(vec![0.3, -2.0]); 5];
        let traj = forward(&p, &HiddenState::zeros(3), &inputs).unwrap();
        assert!(traj.hidden.iter().all(|h| h.iter().all(|v| *v == 0.0)));
        assert!(traj.outputs.iter().all(|y| y.iter().all(|v| *v == 0.0)));
        let y = output_at(&p, &HiddenState::zeros(3), &inputs, 3).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_scalar_matches_convolution() {
        let (a, b, c) = (0.8, -0.5, 1.7);
        let p = scalar_linear(a, b, c);
        let xs = [0.3, -1.0, 0.25, 0.9, -0.4, 0.0, 1.1];
        let traj = forward(&p, &HiddenState::zeros(1), &seq(&xs)).unwrap();
        for t in 1..=xs.len() {
            let expect: f64 = (1..=t).map(|k| a.powi((t - k) as i32) * b * xs[k - 1]).sum::<f64>() * c;
            assert!((traj.outputs[t - 1][0] - expect).abs() < 1e-12);
        }
        // hand expansion at t = 2
        let y2 = output_at(&p, &HiddenState::zeros(1), &seq(&xs), 2).unwrap()[0];
        assert!((y2 - c * (a * b * xs[0] + b * xs[1])).abs() < 1e-14);
    }

    #[test]
    fn output_at_last_and_range() {
        let spec = CellSpec::lstm(1, 2, 1);
        let p = init_params(&spec, 3).unwrap();
        let xs = seq(&[0.1, 0.2, -0.3]);
        let h0 = HiddenState::zeros(4);
        let traj = forward(&p, &h0, &xs).unwrap();
        assert_eq!(output_at(&p, &h0, &xs, 3).unwrap(), traj.outputs[2]);
        assert!(output_at(&p, &h0, &xs, 0).is_err());
        assert!(output_at(&p, &h0, &xs, 4).is_err());
    }

    #[test]
    fn trajectories_merge_once_states_coincide() {
        let spec = CellSpec::elman(1, 2, 1, Activation::Relu);
        let p = init_params(&spec, 11).unwrap();
        let xs = seq(&[0.5, -0.2, 0.7, 0.1, -0.9]);
        let a = forward(&p, &HiddenState::from(vec![0.1, 0.2]), &xs).unwrap();
        // start the second run from the first run's state at t = 2
        let b = forward(&p, &a.hidden[2], &xs[2..]).unwrap();
        assert_eq!(&a.outputs[2..], &b.outputs[..]);
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let p = scalar_linear(0.5, 1.0, 1.0);
        let bad = vec![Vector::new(vec![1.0, 2.0])];
        assert!(matches!(
            forward(&p, &HiddenState::zeros(1), &bad),
            Err(Error::Dimension { .. })
        ));
        assert!(forward(&p, &HiddenState::zeros(2), &seq(&[1.0])).is_err());

        let p = scalar_linear(1e200, 1e200, 1.0);
        let err = forward(&p, &HiddenState::zeros(1), &seq(&[1e200, 1.0, 1.0])).unwrap_err();
        match err {
            Error::NonFinite { t, .. } => assert_eq!(t, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let spec = CellSpec::lstm(2, 3, 1);
        let a = init_params(&spec, 7).unwrap();
        let b = init_params(&spec, 7).unwrap();
        let c = init_params(&spec, 8).unwrap();
        assert_eq!(a.theta().as_slice(), b.theta().as_slice());
        assert_ne!(a.theta().as_slice(), c.theta().as_slice());
        assert!(a.block("b_h.f").unwrap().iter().all(|v| *v == 1.0));
        assert!(a.block("b_h.i").unwrap().iter().all(|v| *v == 0.0));
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.block("W_hh.g").unwrap().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn parameter_counts() {
        let spec = CellSpec::linear(2, 3, 4);
        assert_eq!(init_params(&spec, 0).unwrap().len(), 3 * 3 + 3 * 2 + 4 * 3);
        let spec = CellSpec::elman(2, 3, 4, Activation::Tanh);
        assert_eq!(spec.num_params(), 9 + 6 + 3 + 12 + 4);
        let spec = CellSpec::lstm(2, 3, 4);
        assert_eq!(spec.num_params(), 4 * (9 + 6 + 3) + 12 + 4);
        assert_eq!(spec.layout().total(), spec.num_params());
    }

    #[test]
    fn layout_partitions_theta() {
        for spec in [
            CellSpec::linear(2, 3, 1),
            CellSpec::elman(1, 2, 3, Activation::Tanh),
            CellSpec::lstm(2, 2, 2),
        ] {
            let layout = spec.layout();
            let mut next = 0;
            for b in &layout.blocks {
                assert_eq!(b.offset, next);
                next += b.len();
            }
            assert_eq!(next, spec.num_params());
        }
    }

    #[test]
    fn linear_spec_rejects_biases() {
        let mut spec = CellSpec::linear(1, 1, 1);
        spec.use_biases = true;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn pack_unpack_roundtrip_and_block_mutation() {
        let spec = CellSpec::lstm(2, 3, 2);
        let p = init_params(&spec, 5).unwrap();
        let mut blocks = p.unpack();
        let q = Params::pack(spec, &blocks).unwrap();
        assert_eq!(p.theta().as_slice(), q.theta().as_slice());

        let idx = blocks.iter().position(|(n, _)| n == "W_xh.f").unwrap();
        blocks[idx].1 = blocks[idx].1.scaled(2.0);
        let r = Params::pack(spec, &blocks).unwrap();
        let range = p.layout().get("W_xh.f").unwrap().range();
        for k in 0..p.len() {
            let changed = p.theta()[k] != r.theta()[k];
            assert_eq!(changed, range.contains(&k) && p.theta()[k] != 0.0, "index {k}");
        }
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let p = init_params(&CellSpec::elman(1, 3, 1, Activation::Tanh), 42).unwrap();
        let q = Params::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn json_rejects_wrong_length() {
        let p = init_params(&CellSpec::linear(1, 1, 1), 1).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        doc["theta"].as_array_mut().unwrap().pop();
        assert!(Params::from_json(&doc.to_string()).is_err());
    }

    #[test]
    fn lstm_recurrent_matrix_stacks_gates() {
        let spec = CellSpec::lstm(1, 2, 1);
        let p = init_params(&spec, 9).unwrap();
        let w = p.recurrent_matrix();
        assert_eq!(w.shape(), (8, 2));
        assert_eq!(&w.data()[4..8], p.block("W_hh.f").unwrap());
    }

    proptest::proptest! {
        #[test]
        fn outputs_are_causal(seed in 0u64..500, kind in 0usize..3, len in 2usize..12, cut in 0usize..11) {
            let spec = match kind {
                0 => CellSpec::linear(2, 3, 1),
                1 => CellSpec::elman(2, 3, 1, Activation::Tanh),
                _ => CellSpec::lstm(2, 3, 1),
            };
            let cut = cut % len;
            let p = init_params(&spec, seed).unwrap();
            let mut r = rng::stream(seed, 99);
            let xs: Vec<Vector> = (0..len)
                .map(|_| Vector::new(vec![rng::standard_normal(&mut r), rng::standard_normal(&mut r)]))
                .collect();
            let mut changed = xs.clone();
            for x in &mut changed[cut..] {
                *x = Vector::new(vec![rng::standard_normal(&mut r), 3.0]);
            }
            let h0 = HiddenState::zeros(spec.state_dim());
            let a = forward(&p, &h0, &xs).unwrap();
            let b = forward(&p, &h0, &changed).unwrap();
            // y_t depends on x_0..x_t only
            proptest::prop_assert_eq!(&a.outputs[..cut], &b.outputs[..cut]);
            proptest::prop_assert_eq!(&a.hidden[..=cut], &b.hidden[..=cut]);
        }
    }
}
