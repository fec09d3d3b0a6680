//! Reverse-mode gradients through a recurrent trajectory and a central
//! finite-difference oracle.

use serde::{Deserialize, Serialize};

use crate::data::Segment;
use crate::error::{Error, Result};
use crate::linalg::{gemv_t_acc, ger_acc, sq_dist, Vector};
use crate::rnn::{forward, run_into, visible_state, CellKind, CellSpec, HiddenState, Offsets, Params, Run, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub d_theta: Vector,
    pub d_h0: Vector,
}

impl Gradient {
    pub fn zeros(n_theta: usize, state_dim: usize) -> Self {
        Gradient {
            d_theta: Vector::zeros(n_theta),
            d_h0: Vector::zeros(state_dim),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_theta.is_finite() && self.d_h0.is_finite()
    }
}

/// A recorded forward pass with everything the backward sweep needs.
#[derive(Clone, Debug)]
pub struct GradTape<'a> {
    params: &'a Params,
    inputs: &'a [Vector],
    run: Run,
}

impl<'a> GradTape<'a> {
    pub fn record(params: &'a Params, h0: &[f64], inputs: &'a [Vector]) -> Result<Self> {
        let mut run = Run::default();
        run_into(params.spec(), params.theta(), h0, inputs, &mut run, true)?;
        Ok(GradTape { params, inputs, run })
    }

    pub fn trajectory(&self) -> Trajectory {
        self.run.to_trajectory(self.params.spec())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Re-runs the forward pass from the recorded initial state.
    pub fn replay(&self) -> Result<Trajectory> {
        let h0 = HiddenState::from(self.run.state(self.params.spec().state_dim(), 0).to_vec());
        forward(self.params, &h0, self.inputs)
    }

    /// Gradient of `Σ_t <cograds[t], y_t>` with respect to θ and `h_0`.
    pub fn backward(&self, cograds: &[Vector]) -> Result<Gradient> {
        let spec = self.params.spec();
        if cograds.len() != self.len() {
            return Err(Error::dim("output cograds", self.len(), cograds.len()));
        }
        let mut flat = Vec::with_capacity(self.len() * spec.d_y);
        for (k, u) in cograds.iter().enumerate() {
            if u.len() != spec.d_y {
                return Err(Error::dim("output cograd", spec.d_y, u.len()));
            }
            if !u.is_finite() {
                return Err(Error::NonFinite {
                    context: "output cograd",
                    t: k + 1,
                });
            }
            flat.extend_from_slice(u);
        }
        let mut g = vec![0.0; self.params.len()];
        let mut sweep = Sweep::default();
        backward_run(spec, self.params.theta(), self.inputs, &self.run, &flat, &mut g, &mut sweep);
        Ok(Gradient {
            d_theta: Vector::new(g),
            d_h0: Vector::new(sweep.dh),
        })
    }
}

/// Scratch space for [`backward_run`]. After a sweep, `dh` holds the
/// gradient with respect to the initial state.
#[derive(Clone, Debug, Default)]
pub(crate) struct Sweep {
    pub dh: Vec<f64>,
    dz: Vec<f64>,
    dprev: Vec<f64>,
}

/// Adds the θ-gradient of `Σ_k <u_k, y_k>` to `g`, with the cograds `u`
/// stored flat, one `d_y` block per step of a recorded run.
pub(crate) fn backward_run(
    spec: &CellSpec,
    theta: &[f64],
    inputs: &[Vector],
    run: &Run,
    cograds: &[f64],
    g: &mut [f64],
    sweep: &mut Sweep,
) {
    let off = Offsets::of(spec);
    let (d_x, d_h, d_y) = (spec.d_x, spec.d_h, spec.d_y);
    let sd = spec.state_dim();
    let rows = off.gates * d_h;
    let cl = spec.cache_len();
    let Sweep { dh, dz, dprev } = sweep;
    dh.clear();
    dh.resize(sd, 0.0);
    dz.clear();
    dz.resize(rows, 0.0);
    dprev.clear();
    dprev.resize(sd, 0.0);

    for k in (0..run.steps).rev() {
        let u = &cograds[k * d_y..(k + 1) * d_y];
        let state = run.state(sd, k + 1);
        let prev = run.state(sd, k);
        let x = &inputs[k][..];
        let cache = &run.cache[k * cl..(k + 1) * cl];

        // read-out
        if u.iter().any(|v| *v != 0.0) {
            let vis = visible_state(spec, state);
            ger_acc(d_y, d_h, &mut g[off.w_hy..off.w_hy + d_y * d_h], u, vis);
            if let Some(b) = off.b_y {
                g[b..b + d_y].iter_mut().zip(u.iter()).for_each(|(a, u)| *a += u);
            }
            let dvis = match spec.kind {
                CellKind::Lstm => &mut dh[d_h..],
                _ => &mut dh[..],
            };
            gemv_t_acc(d_y, d_h, &theta[off.w_hy..], u, dvis);
        }

        // state update
        dprev.iter_mut().for_each(|v| *v = 0.0);
        match spec.kind {
            CellKind::Linear | CellKind::Elman => {
                for j in 0..d_h {
                    dz[j] = match spec.kind {
                        CellKind::Elman => dh[j] * spec.activation.derivative(cache[j], state[j]),
                        _ => dh[j],
                    };
                }
                gemv_t_acc(rows, d_h, &theta[off.w_hh..], dz, dprev);
            }
            CellKind::Lstm => {
                let (c_prev, _) = prev.split_at(d_h);
                for j in 0..d_h {
                    let (i, f, gg, o, tc) = (
                        cache[j],
                        cache[d_h + j],
                        cache[2 * d_h + j],
                        cache[3 * d_h + j],
                        cache[4 * d_h + j],
                    );
                    let dh_vis = dh[d_h + j];
                    let dc = dh[j] + dh_vis * o * (1.0 - tc * tc);
                    dz[j] = dc * gg * i * (1.0 - i);
                    dz[d_h + j] = dc * c_prev[j] * f * (1.0 - f);
                    dz[2 * d_h + j] = dc * i * (1.0 - gg * gg);
                    dz[3 * d_h + j] = dh_vis * tc * o * (1.0 - o);
                    dprev[j] = dc * f;
                }
                gemv_t_acc(rows, d_h, &theta[off.w_hh..], dz, &mut dprev[d_h..]);
            }
        }
        let prev_vis = visible_state(spec, prev);
        ger_acc(rows, d_h, &mut g[off.w_hh..off.w_hh + rows * d_h], dz, prev_vis);
        ger_acc(rows, d_x, &mut g[off.w_xh..off.w_xh + rows * d_x], dz, x);
        if let Some(b) = off.b_h {
            g[b..b + rows].iter_mut().zip(dz.iter()).for_each(|(a, d)| *a += d);
        }
        std::mem::swap(dh, dprev);
    }
}

/// Reusable buffers for repeated segment losses and gradients.
#[derive(Clone, Debug, Default)]
pub(crate) struct Workspace {
    pub run: Run,
    pub sweep: Sweep,
    cograds: Vec<f64>,
}

impl Workspace {
    /// Masked loss of the run already held in `self.run`.
    pub fn run_loss(&self, d_y: usize, targets: &[Vector], m: usize) -> Result<f64> {
        let n = self.run.steps;
        check_burn_in(n, m)?;
        if targets.len() != n {
            return Err(Error::dim("targets", n, targets.len()));
        }
        Ok((m..n)
            .map(|k| sq_dist(self.run.output(d_y, k), &targets[k]))
            .sum::<f64>()
            / (n - m) as f64)
    }

    pub fn loss(
        &mut self,
        spec: &CellSpec,
        theta: &[f64],
        h0: &[f64],
        inputs: &[Vector],
        targets: &[Vector],
        m: usize,
    ) -> Result<f64> {
        check_burn_in(inputs.len(), m)?;
        run_into(spec, theta, h0, inputs, &mut self.run, false)?;
        self.run_loss(spec.d_y, targets, m)
    }

    /// Loss of one segment; adds `weight` times its θ-gradient to `g` and
    /// leaves `weight` times its initial-state gradient in `self.sweep.dh`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_grad(
        &mut self,
        spec: &CellSpec,
        theta: &[f64],
        h0: &[f64],
        inputs: &[Vector],
        targets: &[Vector],
        m: usize,
        weight: f64,
        g: &mut [f64],
    ) -> Result<f64> {
        check_burn_in(inputs.len(), m)?;
        run_into(spec, theta, h0, inputs, &mut self.run, true)?;
        let loss = self.run_loss(spec.d_y, targets, m)?;
        self.cograds.clear();
        self.add_cograds(spec.d_y, targets, 0, m, weight);
        backward_run(spec, theta, inputs, &self.run, &self.cograds, g, &mut self.sweep);
        Ok(loss)
    }

    /// Appends to the cograd buffer the masked-loss cograds of run steps
    /// `from..from + targets.len()`, with burn-in `m` and the given weight.
    pub fn add_cograds(&mut self, d_y: usize, targets: &[Vector], from: usize, m: usize, weight: f64) {
        let scale = weight * 2.0 / (targets.len() - m) as f64;
        for (j, d) in targets.iter().enumerate() {
            if j < m {
                self.cograds.extend(std::iter::repeat_n(0.0, d_y));
            } else {
                let y = self.run.output(d_y, from + j);
                self.cograds.extend(y.iter().zip(d.iter()).map(|(a, b)| scale * (a - b)));
            }
        }
    }

    pub fn cograds_mut(&mut self) -> &mut Vec<f64> {
        &mut self.cograds
    }

    /// Backward sweep of the held run against the held cograds.
    pub fn backward(&mut self, spec: &CellSpec, theta: &[f64], inputs: &[Vector], g: &mut [f64]) {
        backward_run(spec, theta, inputs, &self.run, &self.cograds, g, &mut self.sweep);
    }
}

/// Reverse-mode derivative of `Σ_t <cograds[t], y_t>` over the whole
/// sequence, with respect to θ and the initial state.
pub fn backward(params: &Params, h0: &HiddenState, inputs: &[Vector], cograds: &[Vector]) -> Result<Gradient> {
    GradTape::record(params, h0, inputs)?.backward(cograds)
}

fn check_burn_in(window: usize, m: usize) -> Result<()> {
    if window == 0 || m >= window {
        return Err(Error::OutOfRange {
            what: "burn-in",
            index: m,
            valid: format!("0..{window}"),
        });
    }
    Ok(())
}

/// Mean squared error over steps `m..N` (0-based) of predicted outputs.
pub fn masked_mse(outputs: &[Vector], targets: &[Vector], m: usize) -> Result<f64> {
    check_burn_in(outputs.len(), m)?;
    if outputs.len() != targets.len() {
        return Err(Error::dim("targets", outputs.len(), targets.len()));
    }
    let n = (outputs.len() - m) as f64;
    Ok(outputs[m..]
        .iter()
        .zip(&targets[m..])
        .map(|(y, d)| sq_dist(y, d))
        .sum::<f64>()
        / n)
}

/// Cograds of [`masked_mse`]: zero during burn-in, `2(y - y^d)/(N - m)` after.
pub fn masked_mse_cograds(outputs: &[Vector], targets: &[Vector], m: usize, weight: f64) -> Vec<Vector> {
    let scale = weight * 2.0 / (outputs.len() - m) as f64;
    outputs
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(j, (y, d))| {
            if j < m {
                Vector::zeros(y.len())
            } else {
                Vector::new(y.iter().zip(d.iter()).map(|(a, b)| scale * (a - b)).collect())
            }
        })
        .collect()
}

/// Segment loss from an arbitrary initial state.
pub fn segment_loss(params: &Params, h0: &[f64], segment: &Segment, m: usize) -> Result<f64> {
    Workspace::default().loss(params.spec(), params.theta(), h0, segment.inputs, segment.targets, m)
}

/// Segment loss and gradient from an arbitrary initial state.
pub fn loss_grad_from(params: &Params, h0: &[f64], segment: &Segment, m: usize) -> Result<(f64, Gradient)> {
    let mut ws = Workspace::default();
    let mut g = vec![0.0; params.len()];
    let loss = ws.loss_grad(params.spec(), params.theta(), h0, segment.inputs, segment.targets, m, 1.0, &mut g)?;
    Ok((
        loss,
        Gradient {
            d_theta: Vector::new(g),
            d_h0: Vector::new(std::mem::take(&mut ws.sweep.dh)),
        },
    ))
}

/// Segment loss with burn-in `m` from the zero state, and its gradient.
pub fn loss_grad(params: &Params, segment: &Segment, m: usize) -> Result<(f64, Gradient)> {
    let h0 = vec![0.0; params.spec().state_dim()];
    loss_grad_from(params, &h0, segment, m)
}

/// Central differences of the zero-state segment loss over every component
/// of θ and of the initial state.
pub fn fd_gradient(params: &Params, segment: &Segment, m: usize, step: f64) -> Result<Gradient> {
    fd_gradient_from(params, &vec![0.0; params.spec().state_dim()], segment, m, step)
}

pub fn fd_gradient_from(params: &Params, h0: &[f64], segment: &Segment, m: usize, step: f64) -> Result<Gradient> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive (got {step})")));
    }
    let mut p = params.clone();
    let mut d_theta = vec![0.0; p.len()];
    for (k, slot) in d_theta.iter_mut().enumerate() {
        let orig = p.theta()[k];
        p.theta_mut()[k] = orig + step;
        let plus = segment_loss(&p, h0, segment, m)?;
        p.theta_mut()[k] = orig - step;
        let minus = segment_loss(&p, h0, segment, m)?;
        p.theta_mut()[k] = orig;
        *slot = (plus - minus) / (2.0 * step);
    }
    let mut h = h0.to_vec();
    let mut d_h0 = vec![0.0; h.len()];
    for (k, slot) in d_h0.iter_mut().enumerate() {
        let orig = h[k];
        h[k] = orig + step;
        let plus = segment_loss(params, &h, segment, m)?;
        h[k] = orig - step;
        let minus = segment_loss(params, &h, segment, m)?;
        h[k] = orig;
        *slot = (plus - minus) / (2.0 * step);
    }
    Ok(Gradient {
        d_theta: Vector::new(d_theta),
        d_h0: Vector::new(d_h0),
    })
}

/// `‖a - b‖∞ / max(‖b‖∞, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(floor);
    diff / scale
}
