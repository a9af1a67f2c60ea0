//! Synthetic crowd generation, plain-text track ingestion and training-window
//! extraction.
//!
//! The simulator is a sampled velocity-obstacle scheme: each step every agent
//! scores a fixed fan of candidate velocities around its goal velocity and
//! takes the best one that keeps it clear of walls, obstacles and other
//! agents. Agents move one at a time within a step, each checking against the
//! already-committed positions of earlier agents, so standing still is always
//! feasible and the output is collision-free by construction.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, Action, AgentState, HistoryState, Pose, Unicycle};
use crate::world::{crop_local_map, disk_agent_collisions, disk_obstacle_collision, rasterize_scene, AgentTrack, Bounds, CropSpec, MapCrop, Obstacle, Scene, SemanticMap};

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid scenario config: {0}")]
    Config(String),
    #[error("could not place agents after {0} scene draws")]
    Placement(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

/// Extra clearance kept by the simulator on top of the touching distance.
const MARGIN: f64 = 0.02;
const LOOKAHEAD: f64 = 1.0;
const ARRIVAL_RADIUS: f64 = 0.2;
const PLACEMENT_TRIES: usize = 200;
const SCENE_REDRAWS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Width and height of the environment (m); the origin is a corner.
    pub bounds: [f64; 2],
    /// Inclusive agent count range.
    pub agents: [usize; 2],
    /// Inclusive obstacle count range.
    pub obstacles: [usize; 2],
    /// Side length range of the rectangular obstacles (m).
    pub obstacle_size: [f64; 2],
    /// Preferred walking speed range (m/s).
    pub pref_speed: [f64; 2],
    /// Episode length (s).
    pub episode: f64,
    pub dt: f64,
    pub agent_diameter: f64,
    /// Draw a fresh goal whenever an agent arrives.
    pub regoal: bool,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            bounds: [15.0, 15.0],
            agents: [2, 10],
            obstacles: [0, 12],
            obstacle_size: [0.5, 2.5],
            pref_speed: [0.8, 1.8],
            episode: 10.0,
            dt: 0.1,
            agent_diameter: 0.6,
            regoal: true,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DatagenError::Config(m.into()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.bounds[0] > 0.0 && self.bounds[1] > 0.0) {
            return bad("bounds must be positive");
        }
        if self.agents[0] > self.agents[1] || self.agents[1] == 0 {
            return bad("agent range empty");
        }
        if self.obstacles[0] > self.obstacles[1] {
            return bad("obstacle range empty");
        }
        if !(self.obstacle_size[0] > 0.0 && self.obstacle_size[0] <= self.obstacle_size[1]) {
            return bad("obstacle size range empty");
        }
        if !(self.pref_speed[0] > 0.0 && self.pref_speed[0] <= self.pref_speed[1]) {
            return bad("preferred speed range empty");
        }
        if !(self.pref_speed[1] <= crate::dynamics::DEFAULT_V_MAX) {
            return bad("preferred speed above the speed limit");
        }
        if !(self.episode >= self.dt) {
            return bad("episode shorter than one step");
        }
        if !(self.agent_diameter > 0.0) {
            return bad("agent diameter must be positive");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.episode / self.dt).round() as usize
    }
}

/// Per-scene generator seeded from the master seed and the scene index.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn clearance(p: [f64; 2], obstacles: &[Obstacle]) -> f64 {
    obstacles.iter().map(|o| o.distance(p)).fold(f64::INFINITY, f64::min)
}

fn inside_with_margin(b: &Bounds, p: [f64; 2], m: f64) -> bool {
    p[0] >= b.min[0] + m && p[0] <= b.max[0] - m && p[1] >= b.min[1] + m && p[1] <= b.max[1] - m
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn sample_free<R: Rng + ?Sized>(rng: &mut R, b: &Bounds, obstacles: &[Obstacle], r: f64, ok: impl Fn([f64; 2]) -> bool) -> Option<[f64; 2]> {
    for _ in 0..PLACEMENT_TRIES {
        let p = [uniform(rng, [b.min[0] + 2.0 * r, b.max[0] - 2.0 * r]), uniform(rng, [b.min[1] + 2.0 * r, b.max[1] - 2.0 * r])];
        if clearance(p, obstacles) >= 2.0 * r && ok(p) {
            return Some(p);
        }
    }
    None
}

/// Random obstacles plus agents with goals and preferred speeds. Each agent's
/// track holds only its initial state (at rest, facing its goal).
pub fn generate_scene<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<Scene> {
    config.validate()?;
    let bounds = Bounds::square(1.0);
    let bounds = Bounds { max: config.bounds, ..bounds };
    let d = config.agent_diameter;
    let r = d / 2.0;
    'draw: for _ in 0..SCENE_REDRAWS {
        let n_obs = rng.random_range(config.obstacles[0]..=config.obstacles[1]);
        let mut obstacles = Vec::with_capacity(n_obs);
        for _ in 0..n_obs {
            let c = [uniform(rng, [0.0, config.bounds[0]]), uniform(rng, [0.0, config.bounds[1]])];
            let size = [uniform(rng, config.obstacle_size), uniform(rng, config.obstacle_size)];
            let angle = uniform(rng, [0.0, std::f64::consts::PI]);
            obstacles.push(Obstacle::rect(c, size, angle).map_err(|e| DatagenError::Config(e.to_string()))?);
        }
        let n_agents = rng.random_range(config.agents[0].max(1)..=config.agents[1]);
        let mut starts: Vec<[f64; 2]> = Vec::with_capacity(n_agents);
        let mut agents = Vec::with_capacity(n_agents);
        for id in 0..n_agents {
            let Some(p) = sample_free(rng, &bounds, &obstacles, r, |p| starts.iter().all(|&q| dist(p, q) >= 2.0 * d)) else {
                continue 'draw;
            };
            let Some(goal) = sample_free(rng, &bounds, &obstacles, r, |g| dist(g, p) >= 1.0) else {
                continue 'draw;
            };
            starts.push(p);
            let speed = uniform(rng, config.pref_speed);
            let heading = (goal[1] - p[1]).atan2(goal[0] - p[0]);
            agents.push(AgentTrack {
                id: id as u32,
                diameter: d,
                goal: Some(goal),
                pref_speed: Some(speed),
                states: vec![Some(AgentState::new(p[0], p[1], heading, 0.0))],
            });
        }
        return Ok(Scene {
            dt: config.dt,
            bounds,
            obstacles,
            agents,
            now: 0,
        });
    }
    Err(DatagenError::Placement(SCENE_REDRAWS))
}

/// Earliest time in `[0, horizon]` at which two disks moving linearly touch.
fn time_to_contact(rel_p: [f64; 2], rel_v: [f64; 2], reach: f64, horizon: f64) -> Option<f64> {
    let a = rel_v[0] * rel_v[0] + rel_v[1] * rel_v[1];
    let b = 2.0 * (rel_p[0] * rel_v[0] + rel_p[1] * rel_v[1]);
    let c = rel_p[0] * rel_p[0] + rel_p[1] * rel_p[1] - reach * reach;
    if c <= 0.0 {
        return Some(0.0);
    }
    if a <= 0.0 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    (0.0..=horizon).contains(&t).then_some(t)
}

fn candidates(goal_vel: [f64; 2], heading: f64, pref: f64) -> Vec<[f64; 2]> {
    use std::f64::consts::PI;
    let mut out = vec![[0.0, 0.0], goal_vel];
    for s in [1.0, 0.75, 0.5, 0.25] {
        for off in [0.0, PI / 8.0, -PI / 8.0, PI / 4.0, -PI / 4.0, PI / 2.0, -PI / 2.0, PI] {
            let h = heading + off;
            out.push([s * pref * h.cos(), s * pref * h.sin()]);
        }
    }
    out
}

/// Runs the crowd for the configured episode, returning the scene with full
/// tracks (states derived from the simulated positions).
pub fn simulate_crowd<R: Rng + ?Sized>(scene: &Scene, config: &ScenarioConfig, rng: &mut R) -> Result<Scene> {
    config.validate()?;
    let dt = scene.dt;
    let n = scene.agents.len();
    let steps = config.steps();
    let radius: Vec<f64> = scene.agents.iter().map(|a| a.radius()).collect();
    let pref: Vec<f64> = scene.agents.iter().map(|a| a.pref_speed.unwrap_or(1.3)).collect();
    let mut goals: Vec<[f64; 2]> = scene
        .agents
        .iter()
        .map(|a| a.goal.unwrap_or_else(|| a.state(0).map_or([0.0, 0.0], |s| s.position())))
        .collect();
    let start: Vec<AgentState> = scene
        .agents
        .iter()
        .map(|a| a.state(0).ok_or_else(|| DatagenError::Config(format!("agent {} has no initial state", a.id))))
        .collect::<Result<_>>()?;
    let mut pos: Vec<[f64; 2]> = start.iter().map(|s| s.position()).collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut tracks: Vec<Vec<[f64; 2]>> = pos.iter().map(|&p| vec![p]).collect();
    let mut heading: Vec<f64> = start.iter().map(|s| s.theta).collect();

    for _ in 0..steps {
        let mut next: Vec<Option<[f64; 2]>> = vec![None; n];
        for i in 0..n {
            let p = pos[i];
            let ri = radius[i];
            if dist(goals[i], p) < ARRIVAL_RADIUS && config.regoal {
                if let Some(g) = sample_free(rng, &scene.bounds, &scene.obstacles, ri, |g| dist(g, p) >= 1.0) {
                    goals[i] = g;
                }
            }
            let to_goal = [goals[i][0] - p[0], goals[i][1] - p[1]];
            let gd = (to_goal[0] * to_goal[0] + to_goal[1] * to_goal[1]).sqrt();
            let goal_heading = if gd > 1e-9 { to_goal[1].atan2(to_goal[0]) } else { heading[i] };
            let gs = pref[i].min(gd / dt);
            let goal_vel = [gs * goal_heading.cos(), gs * goal_heading.sin()];

            let mut best: Option<([f64; 2], f64)> = None;
            for c in candidates(goal_vel, goal_heading, pref[i]) {
                let q = [p[0] + c[0] * dt, p[1] + c[1] * dt];
                let moving = c != [0.0, 0.0];
                if moving {
                    if !inside_with_margin(&scene.bounds, q, ri + MARGIN) || clearance(q, &scene.obstacles) < ri + MARGIN {
                        continue;
                    }
                    let blocked = (0..n).filter(|&j| j != i).any(|j| {
                        let other = next[j].unwrap_or(pos[j]);
                        dist(q, other) < ri + radius[j] + MARGIN
                    });
                    if blocked {
                        continue;
                    }
                }
                let mut penalty = 0.0;
                for j in (0..n).filter(|&j| j != i) {
                    let rel_p = [p[0] - pos[j][0], p[1] - pos[j][1]];
                    let rel_v = [c[0] - vel[j][0], c[1] - vel[j][1]];
                    if let Some(t) = time_to_contact(rel_p, rel_v, ri + radius[j] + MARGIN, LOOKAHEAD) {
                        penalty += 1.0 - t / LOOKAHEAD;
                    }
                }
                if moving {
                    for s in 1..=4 {
                        let tau = LOOKAHEAD * s as f64 / 4.0;
                        let f = [p[0] + c[0] * tau, p[1] + c[1] * tau];
                        if clearance(f, &scene.obstacles) < ri + MARGIN || !inside_with_margin(&scene.bounds, f, ri) {
                            penalty += 1.0 - (tau - LOOKAHEAD / 4.0) / LOOKAHEAD;
                            break;
                        }
                    }
                }
                let dg = (c[0] - goal_vel[0]).powi(2) + (c[1] - goal_vel[1]).powi(2);
                let ds = (c[0] - vel[i][0]).powi(2) + (c[1] - vel[i][1]).powi(2);
                let score = -dg - 0.3 * ds - 3.0 * pref[i] * pref[i] * penalty;
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((c, score));
                }
            }
            let (c, _) = best.expect("standing still is always a candidate");
            let q = [p[0] + c[0] * dt, p[1] + c[1] * dt];
            if c != [0.0, 0.0] {
                heading[i] = c[1].atan2(c[0]);
            }
            next[i] = Some(q);
            vel[i] = c;
        }
        for i in 0..n {
            pos[i] = next[i].expect("every agent moved");
            tracks[i].push(pos[i]);
        }
    }

    let model = Unicycle::new(dt).map_err(|e| DatagenError::Config(e.to_string()))?;
    let mut out = scene.clone();
    for (a, (tr, s0)) in out.agents.iter_mut().zip(tracks.iter().zip(&start)) {
        a.states = model
            .states_from_positions(tr, Some(s0.theta))
            .into_iter()
            .map(Some)
            .collect();
    }
    Ok(out)
}

/// Generates and simulates scene `index` of a dataset seeded by `config.seed`.
pub fn simulate_scene(config: &ScenarioConfig, index: usize) -> Result<Scene> {
    let mut rng = scene_rng(config.seed, index);
    let scene = generate_scene(config, &mut rng)?;
    simulate_crowd(&scene, config, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub t_p: usize,
    pub t_f: usize,
    pub stride: usize,
    pub max_neighbors: usize,
    /// Raster resolution (pixels per meter).
    pub resolution: f64,
    pub crop: CropSpec,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t_p: 30,
            t_f: 50,
            stride: 10,
            max_neighbors: 8,
            resolution: 4.0,
            crop: CropSpec::default(),
        }
    }
}

mod hist_serde {
    use super::HistoryState;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(h: &[HistoryState], s: S) -> Result<S::Ok, S::Error> {
        h.iter().map(|x| x.to_array()).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<HistoryState>, D::Error> {
        Ok(Vec::<[f64; 8]>::deserialize(d)?.into_iter().map(HistoryState::from_array).collect())
    }

    pub mod nested {
        use super::*;

        pub fn serialize<S: Serializer>(h: &[Vec<HistoryState>], s: S) -> Result<S::Ok, S::Error> {
            h.iter()
                .map(|r| r.iter().map(|x| x.to_array()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<HistoryState>>, D::Error> {
            Ok(Vec::<Vec<[f64; 8]>>::deserialize(d)?
                .into_iter()
                .map(|r| r.into_iter().map(HistoryState::from_array).collect())
                .collect())
        }
    }
}

/// One ego-centric training example. Everything except `pose` is expressed in
/// the ego frame at the current step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingWindow {
    pub scene: usize,
    pub agent: u32,
    pub step: usize,
    /// Global pose of the ego at the current step.
    pub pose: Pose,
    /// Current ego state in its own frame: `(0, 0, 0, v)`.
    pub current: AgentState,
    /// `T_p + 1` steps, oldest first; the last entry is the current step.
    #[serde(with = "hist_serde")]
    pub ego_history: Vec<HistoryState>,
    /// `max_neighbors` rows of `T_p + 1` steps, nearest neighbor first.
    #[serde(with = "hist_serde::nested")]
    pub neighbors: Vec<Vec<HistoryState>>,
    pub crop: MapCrop,
    pub future_actions: Vec<Action>,
    /// Rollout of `future_actions` from `current`.
    pub future_states: Vec<AgentState>,
}

/// Cuts every valid `(agent, step)` window out of a scene. The ego must be
/// observed at the current step and throughout the future; missing history
/// steps are zeroed.
pub fn extract_windows(scene_index: usize, scene: &Scene, cfg: &WindowConfig) -> Result<Vec<TrainingWindow>> {
    let model = Unicycle::new(scene.dt).map_err(|e| DatagenError::Config(e.to_string()))?;
    let map = rasterize_scene(&scene.bounds, &scene.obstacles, cfg.resolution);
    let len = scene.len();
    let mut out = Vec::new();
    if len < cfg.t_p + cfg.t_f + 1 {
        return Ok(out);
    }
    let stride = cfg.stride.max(1);
    for ego in &scene.agents {
        let mut t = cfg.t_p;
        while t + cfg.t_f < len {
            if let Some(w) = window_at(scene_index, scene, ego, t, cfg, &model, &map) {
                out.push(w);
            }
            t += stride;
        }
    }
    Ok(out)
}

fn history(track: &AgentTrack, t: usize, t_p: usize, frame: &Pose) -> Vec<HistoryState> {
    (0..=t_p)
        .map(|i| match (t + i).checked_sub(t_p).and_then(|s| track.state(s)) {
            Some(st) => HistoryState::present(frame.to_local_state(st), track.diameter, track.diameter),
            None => HistoryState::absent(),
        })
        .collect()
}

/// Conditioning inputs of one agent at step `t`, all in its own frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentContext {
    pub pose: Pose,
    pub current: AgentState,
    pub ego_history: Vec<HistoryState>,
    pub neighbors: Vec<Vec<HistoryState>>,
    pub crop: MapCrop,
}

/// Builds the history and map context of `ego` at step `t`; `None` when the
/// ego is not observed at `t`. Steps before the start of the scene count as
/// absent.
pub fn context_at(scene: &Scene, ego: &AgentTrack, t: usize, cfg: &WindowConfig, map: &SemanticMap) -> Option<AgentContext> {
    let now = ego.state(t)?;
    let pose = now.pose();
    let mut others: Vec<(f64, &AgentTrack)> = scene
        .agents
        .iter()
        .filter(|a| a.id != ego.id)
        .filter_map(|a| a.state(t).map(|s| (dist(s.position(), now.position()), a)))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    let mut neighbors: Vec<Vec<HistoryState>> = others
        .iter()
        .take(cfg.max_neighbors)
        .map(|(_, a)| history(a, t, cfg.t_p, &pose))
        .collect();
    neighbors.resize(cfg.max_neighbors, vec![HistoryState::absent(); cfg.t_p + 1]);
    Some(AgentContext {
        pose,
        current: pose.to_local_state(now),
        ego_history: history(ego, t, cfg.t_p, &pose),
        neighbors,
        crop: crop_local_map(map, pose, &cfg.crop),
    })
}

fn window_at(
    scene_index: usize,
    scene: &Scene,
    ego: &AgentTrack,
    t: usize,
    cfg: &WindowConfig,
    model: &Unicycle,
    map: &SemanticMap,
) -> Option<TrainingWindow> {
    let future: Vec<AgentState> = (t + 1..=t + cfg.t_f).map(|s| ego.state(s)).collect::<Option<_>>()?;
    let ctx = context_at(scene, ego, t, cfg, map)?;
    let local_future: Vec<AgentState> = future.iter().map(|&s| ctx.pose.to_local_state(s)).collect();
    let actions = model.inverse(ctx.current, &local_future).ok()?;
    let future_states = model.rollout(ctx.current, &actions).ok()?;
    Some(TrainingWindow {
        scene: scene_index,
        agent: ego.id,
        step: t,
        pose: ctx.pose,
        current: ctx.current,
        ego_history: ctx.ego_history,
        neighbors: ctx.neighbors,
        crop: ctx.crop,
        future_actions: actions,
        future_states,
    })
}

/// Options for [`load_tracks_text`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackTextOptions {
    /// Output step (s).
    pub dt: f64,
    /// Seconds per frame id; defaults to `dt`.
    pub frame_period: Option<f64>,
    pub diameter: f64,
}

impl TrackTextOptions {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            frame_period: None,
            diameter: 0.6,
        }
    }
}

/// Parses `frame agent x y` lines (extra columns ignored, `#` comments
/// allowed) into one scene resampled to `dt`. Empty input yields no scene.
pub fn parse_tracks_text(text: &str, opts: &TrackTextOptions) -> Result<Vec<Scene>> {
    let period = opts.frame_period.unwrap_or(opts.dt);
    let mut raw: BTreeMap<u32, Vec<(f64, [f64; 2])>> = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| DatagenError::Parse { line: ln + 1, msg };
        if fields.len() < 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = fields[i].parse().map_err(|_| err(format!("bad number {:?}", fields[i])))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value {:?}", fields[i])));
            }
            Ok(v)
        };
        let (frame, id, x, y) = (num(0)?, num(1)?, num(2)?, num(3)?);
        if id < 0.0 || id.fract() != 0.0 {
            return Err(err(format!("bad agent id {:?}", fields[1])));
        }
        raw.entry(id as u32).or_default().push((frame * period, [x, y]));
    }
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let dt = opts.dt;
    let model = Unicycle::new(dt).map_err(|e| DatagenError::Config(e.to_string()))?;
    let t0 = raw.values().flat_map(|v| v.iter().map(|o| o.0)).fold(f64::INFINITY, f64::min);
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut agents = Vec::new();
    for (id, mut obs) in raw {
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, p) in &obs {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let first = ((obs[0].0 - t0) / dt - 1e-6).ceil().max(0.0) as usize;
        let last = ((obs[obs.len() - 1].0 - t0) / dt + 1e-6).floor() as usize;
        let mut positions: Vec<Option<[f64; 2]>> = vec![None; last + 1];
        let mut seg = 0;
        for (i, slot) in positions.iter_mut().enumerate().skip(first) {
            let tg = t0 + i as f64 * dt;
            let tol = 1e-6 * dt;
            while seg + 1 < obs.len() && obs[seg + 1].0 <= tg + tol {
                seg += 1;
            }
            let (ta, pa) = obs[seg];
            if (ta - tg).abs() <= tol {
                *slot = Some(pa);
                continue;
            }
            if seg + 1 == obs.len() {
                continue;
            }
            let (tb, pb) = obs[seg + 1];
            if tb - ta > 2.0 * dt + 1e-9 {
                continue;
            }
            let u = ((tg - ta) / (tb - ta)).clamp(0.0, 1.0);
            *slot = Some([pa[0] + u * (pb[0] - pa[0]), pa[1] + u * (pb[1] - pa[1])]);
        }
        let mut states: Vec<Option<AgentState>> = vec![None; positions.len()];
        let mut i = 0;
        while i < positions.len() {
            if positions[i].is_none() {
                i += 1;
                continue;
            }
            let mut j = i;
            while j < positions.len() && positions[j].is_some() {
                j += 1;
            }
            let run: Vec<[f64; 2]> = positions[i..j].iter().map(|p| p.expect("present")).collect();
            for (k, st) in model.states_from_positions(&run, None).into_iter().enumerate() {
                states[i + k] = Some(st);
            }
            i = j;
        }
        agents.push(AgentTrack {
            id,
            diameter: opts.diameter,
            goal: None,
            pref_speed: None,
            states,
        });
    }
    let bounds = Bounds {
        min: [lo[0] - 1.0, lo[1] - 1.0],
        max: [hi[0] + 1.0, hi[1] + 1.0],
    };
    Ok(vec![Scene {
        dt,
        bounds,
        obstacles: Vec::new(),
        agents,
        now: 0,
    }])
}

pub fn load_tracks_text(path: &Path, opts: &TrackTextOptions) -> Result<Vec<Scene>> {
    parse_tracks_text(&std::fs::read_to_string(path)?, opts)
}

/// Writes every observed position as a `frame agent x y` line.
pub fn write_tracks_text<W: Write>(scene: &Scene, mut out: W) -> Result<()> {
    for step in 0..scene.len() {
        for a in &scene.agents {
            if let Some(s) = a.state(step) {
                writeln!(out, "{step} {} {} {}", a.id, s.x, s.y)?;
            }
        }
    }
    Ok(())
}

pub const DATASET_FORMAT: &str = "crowdiff-windows-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub dt: f64,
    pub windows_config: WindowConfig,
    pub scenario: ScenarioConfig,
    pub scenes: usize,
    pub windows: usize,
}

/// JSON lines: one header record, then one record per window.
pub fn write_dataset<W: Write>(mut out: W, header: &DatasetHeader, windows: &[TrainingWindow]) -> Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for w in windows {
        serde_json::to_writer(&mut out, w)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<(DatasetHeader, Vec<TrainingWindow>)> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| DatagenError::Format("empty dataset".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    if header.format != DATASET_FORMAT {
        return Err(DatagenError::Format(format!("unknown format {:?}", header.format)));
    }
    let mut windows = Vec::with_capacity(header.windows);
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            windows.push(serde_json::from_str(&line)?);
        }
    }
    if windows.len() != header.windows {
        return Err(DatagenError::Format(format!("header promises {} windows, found {}", header.windows, windows.len())));
    }
    Ok((header, windows))
}

pub fn write_scenes<W: Write>(mut out: W, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_scenes<R: BufRead>(input: R) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Collision counts of a set of scenes under the raster oracle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollisionAudit {
    pub scenes: usize,
    pub agents: usize,
    /// Agents overlapping another agent at least once.
    pub agent_collisions: usize,
    /// Agent steps whose disk touches an obstacle pixel.
    pub obstacle_collisions: usize,
}

impl CollisionAudit {
    pub fn is_clean(&self) -> bool {
        self.agent_collisions == 0 && self.obstacle_collisions == 0
    }

    pub fn merge(mut self, other: CollisionAudit) -> Self {
        self.scenes += other.scenes;
        self.agents += other.agents;
        self.agent_collisions += other.agent_collisions;
        self.obstacle_collisions += other.obstacle_collisions;
        self
    }
}

pub fn audit_scene(scene: &Scene, resolution: f64) -> CollisionAudit {
    let map = rasterize_scene(&scene.bounds, &scene.obstacles, resolution);
    let radii: Vec<f64> = scene.agents.iter().map(|a| a.radius()).collect();
    let tracks: Vec<Vec<Option<[f64; 2]>>> = scene.agents.iter().map(|a| a.states.iter().map(|s| s.map(|s| s.position())).collect()).collect();
    let frac = disk_agent_collisions(&tracks, &radii);
    let obstacle_collisions = scene
        .agents
        .iter()
        .map(|a| {
            let p: Vec<[f64; 2]> = a.states.iter().flatten().map(|s| s.position()).collect();
            disk_obstacle_collision(&p, &map, a.radius()).flags.iter().filter(|&&f| f).count()
        })
        .sum();
    CollisionAudit {
        scenes: 1,
        agents: scene.agents.len(),
        agent_collisions: (frac * scene.agents.len() as f64).round() as usize,
        obstacle_collisions,
    }
}

/// Heading-only helper used by tests and examples.
pub fn heading_between(a: [f64; 2], b: [f64; 2]) -> f64 {
    wrap_angle((b[1] - a[1]).atan2(b[0] - a[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            agents: [3, 6],
            obstacles: [2, 6],
            ..Default::default()
        }
    }

    fn positions(scene: &Scene) -> Vec<Vec<Option<[f64; 2]>>> {
        scene
            .agents
            .iter()
            .map(|a| a.states.iter().map(|s| s.map(|s| s.position())).collect())
            .collect()
    }

    #[test]
    fn no_obstacles_when_range_is_zero() {
        let cfg = ScenarioConfig {
            obstacles: [0, 0],
            ..Default::default()
        };
        let s = generate_scene(&cfg, &mut scene_rng(1, 0)).unwrap();
        assert!(s.obstacles.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small();
        let a = serde_json::to_string(&simulate_scene(&cfg, 4).unwrap()).unwrap();
        let b = serde_json::to_string(&simulate_scene(&cfg, 4).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn initial_placements_never_overlap() {
        let cfg = ScenarioConfig::default();
        for i in 0..1000 {
            let s = generate_scene(&cfg, &mut scene_rng(7, i)).unwrap();
            let pos: Vec<Vec<Option<[f64; 2]>>> = s.agents.iter().map(|a| vec![a.state(0).map(|s| s.position())]).collect();
            let radii: Vec<f64> = s.agents.iter().map(|a| a.radius()).collect();
            assert_eq!(disk_agent_collisions(&pos, &radii), 0.0);
            for a in &s.agents {
                assert!(clearance(a.state(0).unwrap().position(), &s.obstacles) >= a.radius());
            }
        }
    }

    #[test]
    fn simulated_scenes_are_collision_free() {
        let cfg = ScenarioConfig::default();
        for i in 0..20 {
            let s = simulate_scene(&cfg, i).unwrap();
            let map = rasterize_scene(&s.bounds, &s.obstacles, 10.0);
            let radii: Vec<f64> = s.agents.iter().map(|a| a.radius()).collect();
            assert_eq!(disk_agent_collisions(&positions(&s), &radii), 0.0);
            for a in &s.agents {
                let p: Vec<[f64; 2]> = a.states.iter().map(|s| s.unwrap().position()).collect();
                assert_eq!(disk_obstacle_collision(&p, &map, a.radius()).fraction, 0.0);
                assert!(a.states.iter().all(|s| s.unwrap().v <= 3.0));
            }
        }
    }

    fn lone_agent(start: [f64; 2], goal: [f64; 2], speed: f64) -> (Scene, ScenarioConfig) {
        let cfg = ScenarioConfig {
            regoal: false,
            episode: 12.0,
            ..Default::default()
        };
        let scene = Scene {
            dt: 0.1,
            bounds: Bounds::square(15.0),
            obstacles: vec![],
            agents: vec![AgentTrack {
                id: 0,
                diameter: 0.6,
                goal: Some(goal),
                pref_speed: Some(speed),
                states: vec![Some(AgentState::new(start[0], start[1], heading_between(start, goal), 0.0))],
            }],
            now: 0,
        };
        (scene, cfg)
    }

    #[test]
    fn lone_agent_walks_straight_to_goal() {
        let (scene, cfg) = lone_agent([2.0, 2.0], [12.0, 9.0], 1.25);
        let out = simulate_crowd(&scene, &cfg, &mut scene_rng(0, 0)).unwrap();
        let path: Vec<[f64; 2]> = out.agents[0].states.iter().map(|s| s.unwrap().position()).collect();
        let len = dist([2.0, 2.0], [12.0, 9.0]);
        let arrival = path.iter().position(|&p| dist(p, [12.0, 9.0]) < ARRIVAL_RADIUS).expect("arrives");
        assert!(arrival as f64 * 0.1 <= len / 1.25 * 1.2);
        // Distance from the straight segment stays tiny.
        let dir = [(12.0 - 2.0) / len, (9.0 - 2.0) / len];
        for p in &path {
            let off = ((p[0] - 2.0) * dir[1] - (p[1] - 2.0) * dir[0]).abs();
            assert!(off < 1e-9);
        }
    }

    #[test]
    fn goal_at_start_stays_put() {
        let (scene, cfg) = lone_agent([5.0, 5.0], [5.0, 5.0], 1.25);
        let out = simulate_crowd(&scene, &cfg, &mut scene_rng(0, 0)).unwrap();
        assert!(out.agents[0].states.iter().all(|s| dist(s.unwrap().position(), [5.0, 5.0]) <= 0.5));
    }

    #[test]
    fn head_on_agents_deviate_without_contact() {
        let cfg = ScenarioConfig {
            regoal: false,
            ..Default::default()
        };
        let mk = |id, p: [f64; 2], g: [f64; 2]| AgentTrack {
            id,
            diameter: 0.6,
            goal: Some(g),
            pref_speed: Some(1.3),
            states: vec![Some(AgentState::new(p[0], p[1], heading_between(p, g), 0.0))],
        };
        let scene = Scene {
            dt: 0.1,
            bounds: Bounds::square(15.0),
            obstacles: vec![],
            agents: vec![mk(0, [2.0, 7.5], [13.0, 7.5]), mk(1, [13.0, 7.5], [2.0, 7.5])],
            now: 0,
        };
        let out = simulate_crowd(&scene, &cfg, &mut scene_rng(0, 0)).unwrap();
        let mut max_dev: f64 = 0.0;
        for t in 0..out.len() {
            let a = out.agents[0].state(t).unwrap().position();
            let b = out.agents[1].state(t).unwrap().position();
            assert!(dist(a, b) >= 0.6);
            max_dev = max_dev.max((a[1] - 7.5).abs()).max((b[1] - 7.5).abs());
        }
        assert!(max_dev > 0.1);
    }

    #[test]
    fn window_count_matches_index_arithmetic() {
        let cfg = ScenarioConfig {
            agents: [2, 2],
            obstacles: [0, 0],
            ..Default::default()
        };
        let scene = simulate_scene(&cfg, 0).unwrap();
        assert_eq!(scene.len(), 101);
        let wc = WindowConfig {
            crop: CropSpec {
                pixels: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        let w = extract_windows(0, &scene, &wc).unwrap();
        assert_eq!(w.len(), 2 * 3);
        assert_eq!(w.iter().filter(|w| w.agent == 0).map(|w| w.step).collect::<Vec<_>>(), vec![30, 40, 50]);
    }

    #[test]
    fn absent_history_step_is_zero() {
        let cfg = ScenarioConfig {
            agents: [3, 3],
            obstacles: [0, 0],
            ..Default::default()
        };
        let mut scene = simulate_scene(&cfg, 2).unwrap();
        scene.agents[0].states[25] = None;
        scene.agents[1].states[25] = None;
        let wc = WindowConfig {
            t_p: 10,
            t_f: 20,
            crop: CropSpec {
                pixels: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = Unicycle::new(0.1).unwrap();
        let map = rasterize_scene(&scene.bounds, &scene.obstacles, 4.0);
        let w = window_at(0, &scene, &scene.agents[0], 30, &wc, &model, &map).unwrap();
        assert_eq!(w.ego_history[5].to_array(), [0.0; 8]);
        assert!(w.ego_history[4].is_present());
        let row = w.neighbors.iter().find(|r| r[10].is_present() && r[5].to_array() == [0.0; 8]);
        assert!(row.is_some());
        assert_eq!(w.neighbors.len(), wc.max_neighbors);
    }

    #[test]
    fn window_futures_reroll_to_source() {
        let cfg = small();
        let scene = simulate_scene(&cfg, 3).unwrap();
        let wc = WindowConfig {
            t_p: 10,
            t_f: 20,
            stride: 7,
            crop: CropSpec {
                pixels: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = Unicycle::new(0.1).unwrap();
        for w in extract_windows(0, &scene, &wc).unwrap() {
            let rolled = model.rollout(w.current, &w.future_actions).unwrap();
            assert_eq!(rolled, w.future_states);
            let src = scene.agent(w.agent).unwrap();
            for (k, s) in rolled.iter().enumerate() {
                let g = w.pose.to_global_point(s.position());
                let truth = src.state(w.step + 1 + k).unwrap().position();
                assert!(dist(g, truth) < 1e-6);
            }
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let cfg = small();
        let scene = simulate_scene(&cfg, 1).unwrap();
        let wc = WindowConfig {
            t_p: 10,
            t_f: 20,
            crop: CropSpec {
                pixels: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        let windows = extract_windows(0, &scene, &wc).unwrap();
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            dt: 0.1,
            windows_config: wc,
            scenario: cfg,
            scenes: 1,
            windows: windows.len(),
        };
        let mut buf = Vec::new();
        write_dataset(&mut buf, &header, &windows).unwrap();
        let (h2, w2) = read_dataset(&buf[..]).unwrap();
        assert_eq!(h2, header);
        assert_eq!(w2, windows);
    }

    #[test]
    fn text_two_lines_one_agent() {
        let s = parse_tracks_text("0 1 0.0 0.0\n2 1 0.2 0.0\n", &TrackTextOptions::new(0.1)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].agents.len(), 1);
        let a = &s[0].agents[0];
        assert_eq!(a.states.len(), 3);
        assert!((a.state(1).unwrap().x - 0.1).abs() < 1e-12);
        assert!((a.state(1).unwrap().v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn text_empty_file() {
        assert!(parse_tracks_text("", &TrackTextOptions::new(0.1)).unwrap().is_empty());
    }

    #[test]
    fn text_malformed_line_names_line() {
        let e = parse_tracks_text("0 1 0 0\n1 1 zero 0\n", &TrackTextOptions::new(0.1)).unwrap_err();
        assert!(e.to_string().starts_with("line 2:"), "{e}");
    }

    #[test]
    fn text_gap_marks_absent() {
        let s = parse_tracks_text("0 1 0 0\n1 1 0.1 0\n5 1 0.5 0\n6 1 0.6 0\n", &TrackTextOptions::new(0.1)).unwrap();
        let a = &s[0].agents[0];
        assert!(a.state(1).is_some());
        assert!(a.state(2).is_none() && a.state(4).is_none());
        assert!(a.state(5).is_some());
    }

    #[test]
    fn text_roundtrip_through_serializer() {
        let scene = simulate_scene(&small(), 5).unwrap();
        let mut buf = Vec::new();
        write_tracks_text(&scene, &mut buf).unwrap();
        let back = parse_tracks_text(std::str::from_utf8(&buf).unwrap(), &TrackTextOptions::new(0.1)).unwrap();
        let back = &back[0];
        for a in &scene.agents {
            let b = back.agent(a.id).unwrap();
            for t in 0..scene.len() {
                let (p, q) = (a.state(t).unwrap().position(), b.state(t).unwrap().position());
                assert!(dist(p, q) < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ScenarioConfig {
            dt: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ScenarioConfig {
            agents: [5, 2],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
