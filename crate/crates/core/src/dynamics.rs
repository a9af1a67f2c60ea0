//! Unicycle dynamics over `(x, y, θ, v)` with `(v̇, θ̇)` controls, its inverse,
//! and ego-frame transforms.
//!
//! Integration is semi-implicit Euler: speed and heading are updated first and
//! the position advances with the updated values. That makes the map from
//! actions to states exactly invertible from consecutive states.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::tensor::{self, CustomOpHandle, Tape, Tensor, Var};

/// Speed clamp applied during rollout (m/s).
pub const DEFAULT_V_MAX: f64 = 3.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DynamicsError {
    #[error("time step must be positive and finite, got {0}")]
    BadDt(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self { x, y, theta, v }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.theta, self.v]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }

    pub fn pose(self) -> Pose {
        Pose::new(self.x, self.y, self.theta)
    }

    pub fn position(self) -> [f64; 2] {
        [self.x, self.y]
    }

    fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Longitudinal acceleration (m/s²).
    pub accel: f64,
    /// Yaw rate (rad/s).
    pub yaw_rate: f64,
}

impl Action {
    pub fn new(accel: f64, yaw_rate: f64) -> Self {
        Self { accel, yaw_rate }
    }
}

/// 8-dim per-step history feature: position, unit heading, speed, box extents
/// and a presence flag. Absent steps are all zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryState {
    pub x: f64,
    pub y: f64,
    pub hx: f64,
    pub hy: f64,
    pub v: f64,
    pub l: f64,
    pub w: f64,
    pub p: f64,
}

impl HistoryState {
    pub fn present(s: AgentState, length: f64, width: f64) -> Self {
        Self {
            x: s.x,
            y: s.y,
            hx: s.theta.cos(),
            hy: s.theta.sin(),
            v: s.v,
            l: length,
            w: width,
            p: 1.0,
        }
    }

    pub fn absent() -> Self {
        Self::default()
    }

    pub fn is_present(&self) -> bool {
        self.p > 0.5
    }

    pub fn to_array(self) -> [f64; 8] {
        [self.x, self.y, self.hx, self.hy, self.v, self.l, self.w, self.p]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            hx: a[2],
            hy: a[3],
            v: a[4],
            l: a[5],
            w: a[6],
            p: a[7],
        }
    }
}

/// Rigid 2D pose used for ego-frame transforms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn to_local_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_global_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn to_local_state(&self, st: AgentState) -> AgentState {
        let [x, y] = self.to_local_point([st.x, st.y]);
        AgentState::new(x, y, wrap_angle(st.theta - self.theta), st.v)
    }

    pub fn to_global_state(&self, st: AgentState) -> AgentState {
        let [x, y] = self.to_global_point([st.x, st.y]);
        AgentState::new(x, y, wrap_angle(st.theta + self.theta), st.v)
    }
}

/// Unicycle model with a fixed step and speed clamp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unicycle {
    pub dt: f64,
    pub v_max: f64,
}

impl Unicycle {
    pub fn new(dt: f64) -> Result<Self, DynamicsError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DynamicsError::BadDt(dt));
        }
        Ok(Self {
            dt,
            v_max: DEFAULT_V_MAX,
        })
    }

    /// One semi-implicit step. Returns the new state and whether the speed
    /// clamp was active.
    pub fn step(&self, s: AgentState, a: Action) -> (AgentState, bool) {
        let v_pre = s.v + a.accel * self.dt;
        let v = v_pre.clamp(0.0, self.v_max);
        let theta = wrap_angle(s.theta + a.yaw_rate * self.dt);
        let (sn, cs) = theta.sin_cos();
        let next = AgentState {
            x: s.x + v * cs * self.dt,
            y: s.y + v * sn * self.dt,
            theta,
            v,
        };
        (next, v != v_pre)
    }

    pub fn rollout(&self, s0: AgentState, actions: &[Action]) -> Result<Vec<AgentState>, DynamicsError> {
        if !s0.is_finite() {
            return Err(DynamicsError::NonFinite("initial state"));
        }
        if actions.iter().any(|a| !a.accel.is_finite() || !a.yaw_rate.is_finite()) {
            return Err(DynamicsError::NonFinite("action"));
        }
        let mut s = s0;
        Ok(actions
            .iter()
            .map(|&a| {
                s = self.step(s, a).0;
                s
            })
            .collect())
    }

    /// Recovers the actions that map `s0` through `states`.
    pub fn inverse(&self, s0: AgentState, states: &[AgentState]) -> Result<Vec<Action>, DynamicsError> {
        let mut prev = s0;
        let mut out = Vec::with_capacity(states.len());
        for &s in states {
            if !s.is_finite() {
                return Err(DynamicsError::NonFinite("state"));
            }
            out.push(Action {
                accel: (s.v - prev.v) / self.dt,
                yaw_rate: wrap_angle(s.theta - prev.theta) / self.dt,
            });
            prev = s;
        }
        Ok(out)
    }

    /// States consistent with this model from raw positions sampled every `dt`.
    ///
    /// Step `i` gets speed `|p_i - p_{i-1}| / dt` and the heading of that
    /// displacement, so re-integrating reproduces the positions up to the
    /// speed clamp. While stationary the previous heading is held. The first
    /// state takes the speed/heading of the first displacement.
    pub fn states_from_positions(&self, positions: &[[f64; 2]], initial_heading: Option<f64>) -> Vec<AgentState> {
        let n = positions.len();
        if n == 0 {
            return Vec::new();
        }
        let mut states = Vec::with_capacity(n);
        let disp = |i: usize| -> (f64, f64) {
            let d = [positions[i][0] - positions[i - 1][0], positions[i][1] - positions[i - 1][1]];
            ((d[0] * d[0] + d[1] * d[1]).sqrt() / self.dt, d[1].atan2(d[0]))
        };
        let (v0, h0) = if n > 1 { disp(1) } else { (0.0, 0.0) };
        let mut heading = initial_heading.unwrap_or(if v0 > 1e-9 { h0 } else { 0.0 });
        states.push(AgentState::new(positions[0][0], positions[0][1], wrap_angle(heading), v0));
        for i in 1..n {
            let (v, h) = disp(i);
            if v > 1e-9 {
                heading = h;
            }
            states.push(AgentState::new(positions[i][0], positions[i][1], wrap_angle(heading), v));
        }
        states
    }

    /// Differentiable batched rollout: `init[B, 4]`, `actions[B, T, 2]` →
    /// `states[B, T, 4]`. Values are bit-identical to [`Unicycle::rollout`].
    pub fn rollout_on_tape(&self, tape: &mut Tape, init: Var, actions: Var) -> tensor::Result<Var> {
        let op: CustomOpHandle = Arc::new(RolloutOp { model: *self });
        tape.custom(op, &[init, actions])
    }
}

struct RolloutOp {
    model: Unicycle,
}

impl tensor::CustomOp for RolloutOp {
    fn name(&self) -> &'static str {
        "unicycle_rollout"
    }

    fn forward(&self, inputs: &[&Tensor]) -> tensor::Result<Tensor> {
        let (is, as_) = (inputs[0].shape(), inputs[1].shape());
        if inputs.len() != 2 || is.len() != 2 || is[1] != 4 || as_.len() != 3 || as_[2] != 2 || as_[0] != is[0] {
            return Err(tensor::TensorError::Shape {
                op: "unicycle_rollout",
                shapes: format!("{is:?} vs {as_:?}"),
            });
        }
        let (b, t) = (as_[0], as_[1]);
        let mut out = Vec::with_capacity(b * t * 4);
        for bi in 0..b {
            let mut s = AgentState::from_slice(&inputs[0].data()[bi * 4..bi * 4 + 4]);
            for ti in 0..t {
                let k = (bi * t + ti) * 2;
                let a = Action::new(inputs[1].data()[k], inputs[1].data()[k + 1]);
                s = self.model.step(s, a).0;
                out.extend_from_slice(&s.to_array());
            }
        }
        Tensor::new(vec![b, t, 4], out)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (b, t) = (inputs[1].shape()[0], inputs[1].shape()[1]);
        let dt = self.model.dt;
        let init = inputs[0].data();
        let acts = inputs[1].data();
        let states = output.data();
        let mut d_init = vec![0.0; b * 4];
        let mut d_act = vec![0.0; b * t * 2];
        for bi in 0..b {
            // adjoint of the state after the current step
            let (mut gx, mut gy, mut gth, mut gv) = (0.0, 0.0, 0.0, 0.0);
            for ti in (0..t).rev() {
                let o = (bi * t + ti) * 4;
                gx += grad[o];
                gy += grad[o + 1];
                gth += grad[o + 2];
                gv += grad[o + 3];
                let (theta, v) = (states[o + 2], states[o + 3]);
                let (sn, cs) = theta.sin_cos();
                let gth_tot = gth + gx * (-v * sn * dt) + gy * (v * cs * dt);
                let gv_tot = gv + gx * cs * dt + gy * sn * dt;
                let prev_v = if ti == 0 {
                    init[bi * 4 + 3]
                } else {
                    states[o - 4 + 3]
                };
                let v_pre = prev_v + acts[(bi * t + ti) * 2] * dt;
                let pass = if (0.0..=self.model.v_max).contains(&v_pre) { 1.0 } else { 0.0 };
                d_act[(bi * t + ti) * 2] = gv_tot * dt * pass;
                d_act[(bi * t + ti) * 2 + 1] = gth_tot * dt;
                gth = gth_tot;
                gv = gv_tot * pass;
            }
            d_init[bi * 4..bi * 4 + 4].copy_from_slice(&[gx, gy, gth, gv]);
        }
        vec![Some(d_init), Some(d_act)]
    }
}
