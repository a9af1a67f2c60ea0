//! Test-time objectives, the guidance update rules and scene-level filtering.
//!
//! Every loss takes global-frame state trajectories `[M, T, 4]` (one tensor per
//! agent, `M` scene samples) on a [`Tape`] and returns per-sample values `[M]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::AgentState;
use crate::tensor::{self, Tape, Tensor, TensorError, Var};
use crate::world::SemanticMap;

#[derive(Debug, thiserror::Error)]
pub enum GuidanceError {
    #[error("unknown agent {0}")]
    UnknownAgent(u32),
    #[error("invalid guidance spec: {0}")]
    Invalid(String),
    #[error("ragged sample sets: {0:?}")]
    Ragged(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GuidanceError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Perturb the clean prediction with gradients through the denoiser.
    #[default]
    Clean,
    /// Perturb the posterior mean directly.
    Noisy,
    /// No perturbation; objectives only rank the finished samples.
    FilterOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaypointScope {
    /// The goal is meant to be reached within the planning horizon.
    Local,
    /// The goal lies beyond the horizon; only progress is asked for.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaypointObjective {
    pub agent: u32,
    /// Goal position (m, world frame).
    pub goal: [f64; 2],
    /// Steps ahead of the current step at which the goal should be hit;
    /// `None` means any step.
    #[serde(default)]
    pub step: Option<usize>,
    pub scope: WaypointScope,
    #[serde(default = "default_urgency")]
    pub urgency: f64,
    #[serde(default = "default_v_pref")]
    pub v_pref: f64,
}

fn default_urgency() -> f64 {
    0.7
}

fn default_v_pref() -> f64 {
    1.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SocialGroupSpec {
    pub members: Vec<u32>,
    pub leader: u32,
    /// Target distance to the assigned partner (m).
    pub distance: f64,
    /// Probability of pairing with a random member instead of the nearest.
    #[serde(default)]
    pub cohesion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    AgentAvoid {
        #[serde(default = "default_buffer")]
        buffer: f64,
    },
    ObstacleAvoid {
        /// Box samples per side.
        #[serde(default = "default_box_points")]
        points: usize,
        /// Agents to guide; empty means all.
        #[serde(default)]
        agents: Vec<u32>,
    },
    Waypoint(WaypointObjective),
    SocialGroup(SocialGroupSpec),
    /// `exp(-V)` with the bundled smoothness scorer.
    Value {
        #[serde(default = "default_value_weight")]
        weight: f64,
        #[serde(default)]
        agents: Vec<u32>,
    },
}

fn default_buffer() -> f64 {
    0.2
}

fn default_box_points() -> usize {
    10
}

fn default_value_weight() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedObjective {
    /// Guidance strength; filtering ignores it.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(flatten)]
    pub objective: Objective,
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    #[serde(default)]
    pub mode: GuidanceMode,
    /// Pick the lowest-loss scene sample after sampling.
    #[serde(default = "yes")]
    pub filter: bool,
    /// Per-channel cap on the norm of each step's perturbation; `None` or a
    /// non-positive cap disables clipping.
    #[serde(default = "default_clip")]
    pub clip: Option<f64>,
    /// Treat the softmin weights of the any-step waypoint loss as constants.
    #[serde(default)]
    pub detach_softmin: bool,
    #[serde(default, rename = "objective")]
    pub objectives: Vec<WeightedObjective>,
}

fn yes() -> bool {
    true
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::Clean,
            filter: true,
            clip: default_clip(),
            detach_softmin: false,
            objectives: Vec::new(),
        }
    }
}

impl GuidanceSpec {
    pub fn single(mode: GuidanceMode, alpha: f64, objective: Objective) -> Self {
        Self {
            mode,
            objectives: vec![WeightedObjective { alpha, objective }],
            ..Self::default()
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        let bad = |m: String| Err(GuidanceError::Invalid(m));
        for o in &self.objectives {
            if !(o.alpha >= 0.0 && o.alpha.is_finite()) {
                return bad(format!("alpha must be non-negative, got {}", o.alpha));
            }
            match &o.objective {
                Objective::AgentAvoid { buffer } if *buffer < 0.0 => return bad("negative buffer".into()),
                Objective::ObstacleAvoid { points, .. } if *points < 2 => return bad("obstacle loss needs at least 2 points per side".into()),
                Objective::Waypoint(w) => {
                    if !(0.0..=1.0).contains(&w.urgency) || w.v_pref <= 0.0 {
                        return bad("waypoint urgency must be in [0, 1] and v_pref positive".into());
                    }
                    match (w.scope, w.step) {
                        (WaypointScope::Local, Some(j)) if j == 0 || j > horizon => {
                            return bad(format!("local waypoint step {j} outside 1..={horizon}"));
                        }
                        (WaypointScope::Global, Some(j)) if j <= horizon => {
                            return bad(format!("global waypoint step {j} within the horizon"));
                        }
                        _ => {}
                    }
                }
                Objective::SocialGroup(g) => {
                    if g.members.len() < 2 || !g.members.contains(&g.leader) {
                        return bad("social group needs two members including the leader".into());
                    }
                    if !(0.0..=1.0).contains(&g.cohesion) {
                        return bad("cohesion must be in [0, 1]".into());
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Whether sampling perturbations would change anything.
    pub fn perturbs(&self) -> bool {
        self.mode != GuidanceMode::FilterOnly && self.objectives.iter().any(|o| o.alpha > 0.0)
    }

    pub fn filters(&self) -> bool {
        !self.objectives.is_empty() && (self.filter || self.mode == GuidanceMode::FilterOnly)
    }
}

/// Fixed scene information the objectives need.
#[derive(Clone, Debug)]
pub struct SceneContext<'a> {
    pub map: Option<&'a SemanticMap>,
    pub dt: f64,
    pub agents: Vec<AgentInfo>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentInfo {
    pub id: u32,
    pub radius: f64,
    /// Current global state (the step before the first planned step).
    pub current: AgentState,
}

impl SceneContext<'_> {
    fn index(&self, id: u32) -> Result<usize> {
        self.agents.iter().position(|a| a.id == id).ok_or(GuidanceError::UnknownAgent(id))
    }

    fn selected(&self, ids: &[u32]) -> Result<Vec<usize>> {
        if ids.is_empty() {
            Ok((0..self.agents.len()).collect())
        } else {
            ids.iter().map(|&i| self.index(i)).collect()
        }
    }
}

fn samples(tape: &Tape, traj: Var) -> usize {
    tape.shape(traj)[0]
}

fn point(tape: &mut Tape, p: [f64; 2]) -> Var {
    tape.constant(Tensor::from_slice(&[2], &p).expect("point"))
}

/// `[M, T]` distances of every step's position to `p`.
fn dist_to(tape: &mut Tape, traj: Var, p: [f64; 2]) -> tensor::Result<Var> {
    let pos = tape.slice(traj, 2, 0, 2)?;
    let c = point(tape, p);
    let d = tape.sub(pos, c)?;
    tape.norm_last(d)
}

/// `[M]` distance of step `j` (0-based row) to `p`.
fn dist_at(tape: &mut Tape, traj: Var, j: usize, p: [f64; 2]) -> tensor::Result<Var> {
    let d = dist_to(tape, traj, p)?;
    let col = tape.slice(d, 1, j, j + 1)?;
    tape.sum_axis(col, 1)
}

fn relu_of(tape: &mut Tape, x: Var) -> tensor::Result<Var> {
    tape.relu(x)
}

/// Squared penetration of inflated disks summed over pairs and steps.
pub fn loss_agent_avoid(tape: &mut Tape, trajs: &[Var], radii: &[f64], buffer: f64) -> tensor::Result<Var> {
    let m = samples(tape, trajs[0]);
    let mut total = tape.constant(Tensor::zeros(&[m]));
    for i in 0..trajs.len() {
        for j in i + 1..trajs.len() {
            let reach = radii[i] + radii[j] + buffer;
            let pi = tape.slice(trajs[i], 2, 0, 2)?;
            let pj = tape.slice(trajs[j], 2, 0, 2)?;
            let diff = tape.sub(pi, pj)?;
            let d = tape.norm_last(diff)?;
            let gap = tape.scale(d, -1.0)?;
            let gap = tape.shift(gap, reach)?;
            let pen = relu_of(tape, gap)?;
            let sq = tape.square(pen)?;
            let s = tape.sum_axis(sq, 1)?;
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}

/// Box-sampling obstacle penalty. At each step where some of the `n × n`
/// points on the agent's oriented `length × width` box land on obstacle
/// pixels, every embedded point adds `1 - d_min / b`, where `d_min` is the
/// distance to the nearest free box point and `b` the box diagonal. Embedded
/// points are constants; only the free point moves with the pose. A fully
/// embedded step adds `n²`.
pub fn loss_obstacle_avoid(tape: &mut Tape, traj: Var, map: &SemanticMap, length: f64, width: f64, n: usize) -> tensor::Result<Var> {
    let shape = tape.shape(traj).to_vec();
    let (m, t) = (shape[0], shape[1]);
    let vals = tape.value(traj).data().to_vec();
    let lin = |k: usize, size: f64| -size / 2.0 + size * k as f64 / (n - 1) as f64;
    let body: Vec<[f64; 2]> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).map(|(a, b)| [lin(a, length), lin(b, width)]).collect();
    let diag = (length * length + width * width).sqrt();

    let mut rows = Vec::new();
    let mut offsets = Vec::new();
    let mut anchors = Vec::new();
    let mut owner = Vec::new();
    let mut constant = vec![0.0; m];
    for s in 0..m {
        for step in 0..t {
            let st = &vals[(s * t + step) * 4..(s * t + step) * 4 + 4];
            let (c, sn) = (st[2].cos(), st[2].sin());
            let world: Vec<[f64; 2]> = body.iter().map(|u| [st[0] + c * u[0] - sn * u[1], st[1] + sn * u[0] + c * u[1]]).collect();
            let embedded: Vec<bool> = world.iter().map(|&p| map.is_obstacle(p)).collect();
            let free: Vec<usize> = (0..body.len()).filter(|&i| !embedded[i]).collect();
            if free.len() == body.len() {
                continue;
            }
            if free.is_empty() {
                constant[s] += body.len() as f64;
                continue;
            }
            for e in (0..body.len()).filter(|&i| embedded[i]) {
                let q = *free
                    .iter()
                    .min_by(|&&a, &&b| {
                        let da = (body[a][0] - body[e][0]).hypot(body[a][1] - body[e][1]);
                        let db = (body[b][0] - body[e][0]).hypot(body[b][1] - body[e][1]);
                        da.total_cmp(&db)
                    })
                    .expect("free point");
                rows.push(s * t + step);
                offsets.push(body[q]);
                anchors.push(world[e]);
                owner.push(s);
            }
        }
    }
    let base = tape.constant(Tensor::from_slice(&[m], &constant)?);
    if rows.is_empty() {
        return Ok(base);
    }
    let p = rows.len();
    let flat = tape.reshape(traj, &[m * t, 4])?;
    let g = tape.gather(flat, rows)?;
    let x = tape.slice(g, 1, 0, 1)?;
    let y = tape.slice(g, 1, 1, 2)?;
    let th = tape.slice(g, 1, 2, 3)?;
    let c = tape.cos(th)?;
    let sn = tape.sin(th)?;
    let col = |tape: &mut Tape, v: Vec<f64>| tape.constant(Tensor::new(vec![p, 1], v).expect("column"));
    let ux = col(tape, offsets.iter().map(|o| o[0]).collect());
    let uy = col(tape, offsets.iter().map(|o| o[1]).collect());
    let ex = col(tape, anchors.iter().map(|a| a[0]).collect());
    let ey = col(tape, anchors.iter().map(|a| a[1]).collect());
    // q = position + R(θ) u
    let cux = tape.mul(c, ux)?;
    let suy = tape.mul(sn, uy)?;
    let sux = tape.mul(sn, ux)?;
    let cuy = tape.mul(c, uy)?;
    let qx = tape.add(x, cux)?;
    let qx = tape.sub(qx, suy)?;
    let qy = tape.add(y, sux)?;
    let qy = tape.add(qy, cuy)?;
    let dx = tape.sub(qx, ex)?;
    let dy = tape.sub(qy, ey)?;
    let d = tape.concat(&[dx, dy], 1)?;
    let d = tape.norm_last(d)?;
    let per = tape.scale(d, -1.0 / diag)?;
    let per = tape.shift(per, 1.0)?;
    let per = tape.reshape(per, &[1, p])?;
    let mut assign = vec![0.0; p * m];
    for (i, &s) in owner.iter().enumerate() {
        assign[i * m + s] = 1.0;
    }
    let a = tape.constant(Tensor::new(vec![p, m], assign)?);
    let summed = tape.dense(per, a, None)?;
    let summed = tape.reshape(summed, &[m])?;
    tape.add(summed, base)
}

/// Distance of the position at step `j` (1-based) to the goal.
pub fn loss_waypoint_local_specific(tape: &mut Tape, traj: Var, goal: [f64; 2], j: usize) -> tensor::Result<Var> {
    dist_at(tape, traj, j - 1, goal)
}

/// Softmin-weighted squared distance over all steps.
pub fn loss_waypoint_local_any(tape: &mut Tape, traj: Var, goal: [f64; 2], detach_weights: bool) -> tensor::Result<Var> {
    let d = dist_to(tape, traj, goal)?;
    let neg = tape.scale(d, -1.0)?;
    let mut w = tape.softmax(neg)?;
    if detach_weights {
        w = tape.stop_grad(w)?;
    }
    let d2 = tape.square(d)?;
    let wd = tape.mul(w, d2)?;
    tape.sum_axis(wd, 1)
}

/// Relaxed target distance for a goal `steps_ahead` steps away.
pub fn relaxed_goal_distance(steps_ahead: usize, dt: f64, v_pref: f64, urgency: f64) -> f64 {
    steps_ahead as f64 * dt * v_pref * (1.0 - urgency)
}

/// `relu(|s_end - p_g| - d̃)` for a goal beyond the horizon.
pub fn loss_waypoint_global_specific(tape: &mut Tape, traj: Var, goal: [f64; 2], steps_ahead: usize, urgency: f64, v_pref: f64, dt: f64) -> tensor::Result<Var> {
    let t = tape.shape(traj)[1];
    let d = dist_at(tape, traj, t - 1, goal)?;
    let slack = relaxed_goal_distance(steps_ahead, dt, v_pref, urgency);
    let e = tape.shift(d, -slack)?;
    relu_of(tape, e)
}

/// Progress-based loss toward a goal at any time; delegates to the local
/// any-step loss when the goal is reachable within the horizon.
pub fn loss_waypoint_global_any(
    tape: &mut Tape,
    traj: Var,
    current: [f64; 2],
    goal: [f64; 2],
    urgency: f64,
    v_pref: f64,
    dt: f64,
    detach_weights: bool,
) -> tensor::Result<Var> {
    let t = tape.shape(traj)[1];
    let d_max = t as f64 * dt * v_pref;
    let d_now = (current[0] - goal[0]).hypot(current[1] - goal[1]);
    if d_now <= d_max {
        return loss_waypoint_local_any(tape, traj, goal, detach_weights);
    }
    let d_end = dist_at(tape, traj, t - 1, goal)?;
    // relu(u·d_max - (d_now - d_end)) = relu(d_end + u·d_max - d_now)
    let e = tape.shift(d_end, urgency * d_max - d_now)?;
    relu_of(tape, e)
}

/// Draws the partner map for each non-leader member.
pub fn draw_partners<R: Rng + ?Sized>(spec: &SocialGroupSpec, positions: &[[f64; 2]], rng: &mut R) -> Vec<(usize, usize)> {
    let n = spec.members.len();
    let mut out = Vec::new();
    for i in 0..n {
        if spec.members[i] == spec.leader {
            continue;
        }
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let random = spec.cohesion > 0.0 && rng.random_bool(spec.cohesion.min(1.0));
        let partner = if random {
            others[rng.random_range(0..others.len())]
        } else {
            *others
                .iter()
                .min_by(|&&a, &&b| {
                    let da = (positions[a][0] - positions[i][0]).hypot(positions[a][1] - positions[i][1]);
                    let db = (positions[b][0] - positions[i][0]).hypot(positions[b][1] - positions[i][1]);
                    da.total_cmp(&db)
                })
                .expect("group has two members")
        };
        out.push((i, partner));
    }
    out
}

/// Squared deviation from the target distance between each non-leader member
/// and its partner; the leader's trajectory is gradient-stopped. `trajs`
/// follows `spec.members` order and `current` holds their present positions.
pub fn loss_social_group<R: Rng + ?Sized>(tape: &mut Tape, trajs: &[Var], current: &[[f64; 2]], spec: &SocialGroupSpec, rng: &mut R) -> tensor::Result<Var> {
    let m = samples(tape, trajs[0]);
    let mut held = Vec::with_capacity(trajs.len());
    for (k, &v) in trajs.iter().enumerate() {
        held.push(if spec.members[k] == spec.leader { tape.stop_grad(v)? } else { v });
    }
    let mut total = tape.constant(Tensor::zeros(&[m]));
    for (i, j) in draw_partners(spec, current, rng) {
        let pi = tape.slice(held[i], 2, 0, 2)?;
        let pj = tape.slice(held[j], 2, 0, 2)?;
        let diff = tape.sub(pi, pj)?;
        let d = tape.norm_last(diff)?;
        let e = tape.shift(d, -spec.distance)?;
        let sq = tape.square(e)?;
        let s = tape.sum_axis(sq, 1)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Differentiable scalar value of a state trajectory, higher is better.
pub trait TrajectoryScorer {
    /// `[M, T, 4]` → `[M]`.
    fn value(&self, tape: &mut Tape, traj: Var) -> tensor::Result<Var>;
}

/// `V = -weight · mean |a|²` with `a` the second difference of positions over
/// `dt²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothnessScorer {
    pub weight: f64,
    pub dt: f64,
}

impl TrajectoryScorer for SmoothnessScorer {
    fn value(&self, tape: &mut Tape, traj: Var) -> tensor::Result<Var> {
        let t = tape.shape(traj)[1];
        let m = tape.shape(traj)[0];
        if t < 3 {
            return Ok(tape.constant(Tensor::zeros(&[m])));
        }
        let pos = tape.slice(traj, 2, 0, 2)?;
        let a = tape.slice(pos, 1, 2, t)?;
        let b = tape.slice(pos, 1, 1, t - 1)?;
        let c = tape.slice(pos, 1, 0, t - 2)?;
        let b2 = tape.scale(b, 2.0)?;
        let acc = tape.sub(a, b2)?;
        let acc = tape.add(acc, c)?;
        let sq = tape.square(acc)?;
        let s = tape.sum_axis(sq, 2)?;
        let s = tape.sum_axis(s, 1)?;
        let dt4 = self.dt.powi(4);
        tape.scale(s, -self.weight / ((t - 2) as f64 * dt4))
    }
}

/// `exp(-V)`.
pub fn loss_value(tape: &mut Tape, traj: Var, scorer: &dyn TrajectoryScorer) -> tensor::Result<Var> {
    let v = scorer.value(tape, traj)?;
    let nv = tape.scale(v, -1.0)?;
    tape.exp(nv)
}

/// Per-objective `[M]` losses for a scene batch; `trajs[a]` is agent `a`'s
/// global `[M, T, 4]` trajectory in `ctx.agents` order.
pub fn objective_losses<R: Rng + ?Sized>(
    tape: &mut Tape,
    spec: &GuidanceSpec,
    ctx: &SceneContext,
    trajs: &[Var],
    rng: &mut R,
) -> Result<Vec<(f64, Var)>> {
    if trajs.len() != ctx.agents.len() || trajs.is_empty() {
        return Err(GuidanceError::Invalid(format!("{} trajectories for {} agents", trajs.len(), ctx.agents.len())));
    }
    let horizon = tape.shape(trajs[0])[1];
    let mut out = Vec::with_capacity(spec.objectives.len());
    for o in &spec.objectives {
        let loss = match &o.objective {
            Objective::AgentAvoid { buffer } => {
                let radii: Vec<f64> = ctx.agents.iter().map(|a| a.radius).collect();
                loss_agent_avoid(tape, trajs, &radii, *buffer)?
            }
            Objective::ObstacleAvoid { points, agents } => {
                let m = samples(tape, trajs[0]);
                let mut total = tape.constant(Tensor::zeros(&[m]));
                if let Some(map) = ctx.map {
                    for i in ctx.selected(agents)? {
                        let d = 2.0 * ctx.agents[i].radius;
                        let l = loss_obstacle_avoid(tape, trajs[i], map, d, d, *points)?;
                        total = tape.add(total, l)?;
                    }
                }
                total
            }
            Objective::Waypoint(w) => {
                let i = ctx.index(w.agent)?;
                let tr = trajs[i];
                match (w.scope, w.step) {
                    (WaypointScope::Local, Some(j)) => loss_waypoint_local_specific(tape, tr, w.goal, j.min(horizon))?,
                    (WaypointScope::Local, None) => loss_waypoint_local_any(tape, tr, w.goal, spec.detach_softmin)?,
                    (WaypointScope::Global, Some(j)) => loss_waypoint_global_specific(tape, tr, w.goal, j, w.urgency, w.v_pref, ctx.dt)?,
                    (WaypointScope::Global, None) => {
                        let cur = ctx.agents[i].current.position();
                        loss_waypoint_global_any(tape, tr, cur, w.goal, w.urgency, w.v_pref, ctx.dt, spec.detach_softmin)?
                    }
                }
            }
            Objective::SocialGroup(g) => {
                let idx: Vec<usize> = g.members.iter().map(|&id| ctx.index(id)).collect::<Result<_>>()?;
                let tr: Vec<Var> = idx.iter().map(|&i| trajs[i]).collect();
                let cur: Vec<[f64; 2]> = idx.iter().map(|&i| ctx.agents[i].current.position()).collect();
                loss_social_group(tape, &tr, &cur, g, rng)?
            }
            Objective::Value { weight, agents } => {
                let m = samples(tape, trajs[0]);
                let scorer = SmoothnessScorer { weight: *weight, dt: ctx.dt };
                let mut total = tape.constant(Tensor::zeros(&[m]));
                for i in ctx.selected(agents)? {
                    let l = loss_value(tape, trajs[i], &scorer)?;
                    total = tape.add(total, l)?;
                }
                total
            }
        };
        out.push((o.alpha, loss));
    }
    Ok(out)
}

/// `Σ α_o L_o` as a scalar summed over scene samples; the guidance objective.
pub fn weighted_objective<R: Rng + ?Sized>(tape: &mut Tape, spec: &GuidanceSpec, ctx: &SceneContext, trajs: &[Var], rng: &mut R) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (alpha, l) in objective_losses(tape, spec, ctx, trajs, rng)? {
        if alpha == 0.0 {
            continue;
        }
        let s = tape.sum(l)?;
        let s = tape.scale(s, alpha)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Scene-sample losses: sample `m`'s value is the plain sum of every
/// objective evaluated on the `m`-th sample of every agent.
/// `samples[a][m]` is agent `a`'s global state sequence for sample `m`.
pub fn aggregate_scene_loss<R: Rng + ?Sized>(spec: &GuidanceSpec, ctx: &SceneContext, samples: &[Vec<Vec<AgentState>>], rng: &mut R) -> Result<Vec<f64>> {
    let counts: Vec<usize> = samples.iter().map(|s| s.len()).collect();
    if counts.is_empty() || counts.iter().any(|&c| c != counts[0] || c == 0) {
        return Err(GuidanceError::Ragged(counts));
    }
    let m = counts[0];
    let mut tape = Tape::new();
    let mut trajs = Vec::with_capacity(samples.len());
    for agent in samples {
        let t = agent[0].len();
        if agent.iter().any(|s| s.len() != t) {
            return Err(GuidanceError::Ragged(agent.iter().map(|s| s.len()).collect()));
        }
        let data: Vec<f64> = agent.iter().flat_map(|s| s.iter().flat_map(|x| x.to_array())).collect();
        trajs.push(tape.constant(Tensor::new(vec![m, t, 4], data)?));
    }
    let mut total = vec![0.0; m];
    for (_, l) in objective_losses(&mut tape, spec, ctx, &trajs, rng)? {
        for (t, v) in total.iter_mut().zip(tape.value(l).data()) {
            *t += v;
        }
    }
    Ok(total)
}

/// Index of the smallest finite loss, lowest index on ties. Returns `None`
/// in the second slot when every loss is non-finite (index 0 is chosen).
pub fn filter_samples(losses: &[f64]) -> (usize, bool) {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in losses.iter().enumerate() {
        if l.is_finite() && best.is_none_or(|(_, b)| l < b) {
            best = Some((i, l));
        }
    }
    match best {
        Some((i, _)) => (i, true),
        None => (0, false),
    }
}

/// Clean-mode update `τ̂⁰ - Σ_k ∇J` given the gradient w.r.t. the noisy
/// input (α is already folded into `J`).
pub fn guide_clean(x0: &mut [f64], grad: &[f64], sigma: f64, clip: Option<(usize, usize, f64)>) -> bool {
    apply_step(x0, grad, sigma, clip)
}

/// Noisy-mode update `μ - Σ_k ∇_μ J`.
pub fn guide_noisy(mu: &mut [f64], grad: &[f64], sigma: f64, clip: Option<(usize, usize, f64)>) -> bool {
    apply_step(mu, grad, sigma, clip)
}

/// Shared perturbation step. `clip = (items, steps, cap)` limits the L2 norm
/// over time of each item's action channel. Returns false (and leaves the
/// target untouched) when the gradient has non-finite entries.
fn apply_step(target: &mut [f64], grad: &[f64], sigma: f64, clip: Option<(usize, usize, f64)>) -> bool {
    if grad.iter().any(|g| !g.is_finite()) {
        return false;
    }
    let mut delta: Vec<f64> = grad.iter().map(|g| sigma * g).collect();
    if let Some((items, steps, cap)) = clip {
        for it in 0..items {
            for ch in 0..2 {
                let idx = |t: usize| (it * steps + t) * 2 + ch;
                let norm = (0..steps).map(|t| delta[idx(t)].powi(2)).sum::<f64>().sqrt();
                if norm > cap {
                    let s = cap / norm;
                    for t in 0..steps {
                        delta[idx(t)] *= s;
                    }
                }
            }
        }
    }
    for (x, d) in target.iter_mut().zip(&delta) {
        *x -= d;
    }
    true
}
