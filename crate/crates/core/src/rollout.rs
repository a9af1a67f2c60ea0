//! Open-loop and closed-loop evaluation harnesses, guidance task templates
//! and ablation sweeps.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{context_at, scene_rng, WindowConfig};
use crate::denoiser::Conditioning;
use crate::diffusion::{sample_scene, DiffusionError, Model, PlanAgent, SamplerConfig, SceneSamples};
use crate::dynamics::AgentState;
use crate::guidance::{GuidanceMode, GuidanceSpec, Objective, SocialGroupSpec, WaypointObjective, WaypointScope, WeightedObjective};
use crate::metrics::{
    ade_fde, agent_collision_rate, guidance_error, mean_accels, objective_label, obstacle_collision_rate, realism_emd, step_stats,
    AgentTrajectory, HistogramSpec, MetricReport, MetricsError, NamedValue,
};
use crate::par::parallel_map;
use crate::world::{rasterize_scene, Bounds, Obstacle, Scene, SemanticMap};

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("invalid rollout configuration: {0}")]
    Config(String),
    #[error("scene {0}: {1}")]
    Scene(usize, String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, RolloutError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    #[default]
    Any,
    Specific,
}

fn one() -> f64 {
    1.0
}

fn default_ahead() -> usize {
    16
}

fn default_urgency() -> f64 {
    0.7
}

fn default_v_pref() -> f64 {
    1.25
}

fn default_buffer() -> f64 {
    0.2
}

fn default_points() -> usize {
    10
}

fn default_group_radius() -> f64 {
    2.0
}

fn default_group_speed() -> f64 {
    0.3
}

fn default_value_weight() -> f64 {
    0.05
}

/// Objective recipes instantiated per scene from its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    AgentAvoid {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default = "default_buffer")]
        buffer: f64,
    },
    ObstacleAvoid {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default = "default_points")]
        points: usize,
    },
    /// One waypoint per agent at its ground-truth position `ahead` steps
    /// after the start, optionally perturbed by Gaussian noise (m).
    Waypoint {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default = "default_ahead")]
        ahead: usize,
        #[serde(default)]
        timing: Timing,
        #[serde(default)]
        perturb: f64,
        #[serde(default = "default_urgency")]
        urgency: f64,
        #[serde(default = "default_v_pref")]
        v_pref: f64,
    },
    /// Groups agents that start close together with similar velocities.
    SocialGroups {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default = "default_group_radius")]
        radius: f64,
        #[serde(default = "default_group_speed")]
        speed_diff: f64,
        #[serde(default = "one")]
        distance: f64,
        #[serde(default)]
        cohesion: f64,
    },
    Value {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default = "default_value_weight")]
        weight: f64,
    },
}

/// Guidance settings plus objective recipes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceTemplate {
    pub mode: GuidanceMode,
    pub filter: bool,
    pub clip: Option<f64>,
    pub detach_softmin: bool,
    #[serde(rename = "task")]
    pub tasks: Vec<Task>,
    /// Fixed objectives added to every scene as written.
    #[serde(rename = "objective")]
    pub objectives: Vec<WeightedObjective>,
}

impl Default for GuidanceTemplate {
    fn default() -> Self {
        let d = GuidanceSpec::default();
        Self {
            mode: d.mode,
            filter: d.filter,
            clip: d.clip,
            detach_softmin: d.detach_softmin,
            tasks: Vec::new(),
            objectives: Vec::new(),
        }
    }
}

impl GuidanceTemplate {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_task(mode: GuidanceMode, task: Task) -> Self {
        Self {
            mode,
            tasks: vec![task],
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty() && self.objectives.is_empty()
    }

    /// Objectives for the agents `ids` of `scene` planned from step `t0`.
    /// Waypoint steps count from `t0`.
    pub fn instantiate<R: Rng + ?Sized>(&self, scene: &Scene, t0: usize, ids: &[u32], horizon: usize, rng: &mut R) -> GuidanceSpec {
        let mut objectives = Vec::new();
        for task in &self.tasks {
            match *task {
                Task::AgentAvoid { alpha, buffer } => objectives.push(WeightedObjective {
                    alpha,
                    objective: Objective::AgentAvoid { buffer },
                }),
                Task::ObstacleAvoid { alpha, points } => objectives.push(WeightedObjective {
                    alpha,
                    objective: Objective::ObstacleAvoid { points, agents: Vec::new() },
                }),
                Task::Waypoint {
                    alpha,
                    ahead,
                    timing,
                    perturb,
                    urgency,
                    v_pref,
                } => {
                    for &id in ids {
                        let Some(s) = scene.agent(id).and_then(|a| a.state(t0 + ahead)) else { continue };
                        let (nx, ny): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                        objectives.push(WeightedObjective {
                            alpha,
                            objective: Objective::Waypoint(WaypointObjective {
                                agent: id,
                                goal: [s.x + perturb * nx, s.y + perturb * ny],
                                step: (timing == Timing::Specific).then_some(ahead),
                                scope: if ahead <= horizon { WaypointScope::Local } else { WaypointScope::Global },
                                urgency,
                                v_pref,
                            }),
                        });
                    }
                }
                Task::SocialGroups {
                    alpha,
                    radius,
                    speed_diff,
                    distance,
                    cohesion,
                } => {
                    for members in proximity_groups(scene, t0, ids, radius, speed_diff) {
                        objectives.push(WeightedObjective {
                            alpha,
                            objective: Objective::SocialGroup(SocialGroupSpec {
                                leader: members[0],
                                members,
                                distance,
                                cohesion,
                            }),
                        });
                    }
                }
                Task::Value { alpha, weight } => objectives.push(WeightedObjective {
                    alpha,
                    objective: Objective::Value { weight, agents: Vec::new() },
                }),
            }
        }
        objectives.extend(self.objectives.iter().cloned());
        GuidanceSpec {
            mode: self.mode,
            filter: self.filter,
            clip: self.clip,
            detach_softmin: self.detach_softmin,
            objectives,
        }
    }
}

/// Connected components (size ≥ 2) of the "close and moving alike" relation
/// at step `t`, each sorted by id.
pub fn proximity_groups(scene: &Scene, t: usize, ids: &[u32], radius: f64, speed_diff: f64) -> Vec<Vec<u32>> {
    let states: Vec<(u32, AgentState)> = ids.iter().filter_map(|&i| scene.agent(i).and_then(|a| a.state(t)).map(|s| (i, s))).collect();
    let n = states.len();
    let vel = |s: &AgentState| [s.v * s.theta.cos(), s.v * s.theta.sin()];
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&states[i].1, &states[j].1);
            let (va, vb) = (vel(a), vel(b));
            if (a.x - b.x).hypot(a.y - b.y) <= radius && (va[0] - vb[0]).hypot(va[1] - vb[1]) <= speed_diff {
                let (ri, rj) = (root(&mut parent, i), root(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<u32>> = Default::default();
    for i in 0..n {
        let r = root(&mut parent, i);
        groups.entry(r).or_default().push(states[i].0);
    }
    groups
        .into_values()
        .filter(|g| g.len() >= 2)
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect()
}

/// Shifts waypoint steps by `elapsed` for a replan; objectives whose step
/// has passed are dropped.
pub fn retime(spec: &GuidanceSpec, elapsed: usize, horizon: usize) -> GuidanceSpec {
    let mut out = spec.clone();
    out.objectives.retain_mut(|o| match &mut o.objective {
        Objective::Waypoint(w) => match w.step {
            Some(j) if j <= elapsed => false,
            Some(j) => {
                let left = j - elapsed;
                w.step = Some(left);
                w.scope = if left <= horizon { WaypointScope::Local } else { WaypointScope::Global };
                true
            }
            None => true,
        },
        _ => true,
    });
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    #[default]
    OpenLoop,
    ClosedLoop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub emd: bool,
    pub displacement: bool,
    pub bins: HistogramSpec,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            emd: true,
            displacement: true,
            bins: HistogramSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub mode: RolloutMode,
    /// Closed-loop duration (s).
    pub duration: f64,
    /// Closed-loop replanning period (s).
    pub replan: f64,
    /// First planning step; defaults to the history length.
    pub start_step: Option<usize>,
    /// Raster resolution used for map crops and collision checks (px/m).
    pub resolution: f64,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceTemplate,
    pub metrics: MetricsConfig,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            mode: RolloutMode::OpenLoop,
            duration: 10.0,
            replan: 1.0,
            start_step: None,
            resolution: 4.0,
            sampler: SamplerConfig::default(),
            guidance: GuidanceTemplate::none(),
            metrics: MetricsConfig::default(),
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let dt = model.dynamics.dt;
        if self.sampler.samples == 0 || !(self.resolution > 0.0) {
            return Err(RolloutError::Config("samples ≥ 1 and resolution > 0 required".into()));
        }
        if self.mode == RolloutMode::ClosedLoop {
            let replan = (self.replan / dt).round() as usize;
            if replan == 0 || replan > model.horizon() || !(self.duration > 0.0) {
                return Err(RolloutError::Config(format!(
                    "replan period {} s must cover 1..={} steps and duration must be positive",
                    self.replan,
                    model.horizon()
                )));
            }
        }
        self.metrics.bins.validate()?;
        Ok(())
    }

    fn window_config(&self, model: &Model) -> WindowConfig {
        let c = model.net.config();
        WindowConfig {
            t_p: c.t_p,
            t_f: c.t_f,
            max_neighbors: c.max_neighbors,
            resolution: self.resolution,
            crop: c.crop,
            ..WindowConfig::default()
        }
    }
}

/// Everything needed to recompute a scene's metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDump {
    pub scene: usize,
    pub start_step: usize,
    pub dt: f64,
    pub bounds: Bounds,
    pub obstacles: Vec<Obstacle>,
    pub resolution: f64,
    /// Instantiated at the start; waypoint steps count from `start_step`.
    pub objectives: Vec<WeightedObjective>,
    /// Executed (closed loop) or chosen (open loop) states after the start.
    pub executed: Vec<AgentTrajectory>,
    /// Open loop: every sample's positions, `[agent][sample][step]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<Vec<Vec<[f64; 2]>>>,
    /// Ground-truth states over the same steps, where observed throughout.
    pub truth: Vec<Option<Vec<AgentState>>>,
    /// Closed loop: every agent's state at the start of each replan,
    /// `[replan][agent]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plan_starts: Vec<Vec<AgentState>>,
    /// Sampler seed of every planning call.
    pub seeds: Vec<u64>,
    /// Chosen scene sample of every planning call.
    pub chosen: Vec<usize>,
    pub skipped_guidance: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: usize,
    pub obstacle_collision_rate: f64,
    pub agent_collision_rate: f64,
    pub guidance_errors: Vec<NamedValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ade: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fde: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub metrics: MetricReport,
    pub per_scene: Vec<SceneMetrics>,
}

fn plan_agents(model: &Model, scene: &Scene, t: usize, ids: &[u32], wc: &WindowConfig, map: &SemanticMap) -> Vec<PlanAgent> {
    ids.iter()
        .filter_map(|&id| {
            let track = scene.agent(id)?;
            let ctx = context_at(scene, track, t, wc, map)?;
            Some(PlanAgent {
                id,
                radius: track.radius(),
                pose: ctx.pose,
                speed: ctx.current.v,
                cond: Conditioning::from_parts(&ctx.ego_history, &ctx.neighbors, &ctx.crop, &model.norm),
            })
        })
        .collect()
}

fn truth_after(scene: &Scene, id: u32, t0: usize, steps: usize) -> Option<Vec<AgentState>> {
    let a = scene.agent(id)?;
    (t0 + 1..=t0 + steps).map(|s| a.state(s)).collect()
}

fn start_of(cfg: &RolloutConfig, model: &Model) -> usize {
    cfg.start_step.unwrap_or(model.net.config().t_p)
}

fn present(scene: &Scene, t0: usize) -> Vec<u32> {
    scene.agents.iter().filter(|a| a.state(t0).is_some()).map(|a| a.id).collect()
}

/// Plans once from the start step for every present agent.
pub fn open_loop_scene(model: &Model, index: usize, scene: &Scene, cfg: &RolloutConfig) -> Result<SceneDump> {
    Ok(open_loop_plan(model, index, scene, cfg)?.0)
}

/// Like [`open_loop_scene`] but also returns the raw samples; `None` when no
/// agent can be planned.
pub fn open_loop_plan(model: &Model, index: usize, scene: &Scene, cfg: &RolloutConfig) -> Result<(SceneDump, Option<SceneSamples>)> {
    let wc = cfg.window_config(model);
    let map = rasterize_scene(&scene.bounds, &scene.obstacles, cfg.resolution);
    let t0 = start_of(cfg, model);
    let horizon = model.horizon();
    let mut srng = scene_rng(cfg.seed, index);
    let mut trng = ChaCha8Rng::seed_from_u64(srng.next_u64());
    let ids = present(scene, t0);
    let spec = cfg.guidance.instantiate(scene, t0, &ids, horizon, &mut trng);
    let agents = plan_agents(model, scene, t0, &ids, &wc, &map);
    let mut dump = empty_dump(index, scene, t0, cfg, &spec);
    if agents.is_empty() {
        return Ok((dump, None));
    }
    let seed = srng.next_u64();
    let sampler = SamplerConfig { seed, ..cfg.sampler };
    let out = sample_scene(model, &agents, Some(&map), &sampler, (!spec.objectives.is_empty()).then_some(&spec))?;
    dump.seeds.push(seed);
    dump.chosen.push(out.chosen);
    dump.skipped_guidance = out.skipped_guidance;
    for (a, s) in agents.iter().zip(&out.agents) {
        dump.executed.push(AgentTrajectory {
            id: a.id,
            radius: a.radius,
            states: s.states[out.chosen].clone(),
        });
        dump.samples.push(s.states.iter().map(|st| st.iter().map(|x| x.position()).collect()).collect());
        dump.truth.push(truth_after(scene, a.id, t0, horizon));
    }
    Ok((dump, Some(out)))
}

fn empty_dump(index: usize, scene: &Scene, t0: usize, cfg: &RolloutConfig, spec: &GuidanceSpec) -> SceneDump {
    SceneDump {
        scene: index,
        start_step: t0,
        dt: scene.dt,
        bounds: scene.bounds,
        obstacles: scene.obstacles.clone(),
        resolution: cfg.resolution,
        objectives: spec.objectives.clone(),
        executed: Vec::new(),
        samples: Vec::new(),
        truth: Vec::new(),
        plan_starts: Vec::new(),
        seeds: Vec::new(),
        chosen: Vec::new(),
        skipped_guidance: 0,
    }
}

/// Repeatedly plans for every agent present at the start and plays back the
/// chosen plans for one replanning period, feeding executed states back into
/// the history buffers.
pub fn closed_loop_rollout(model: &Model, index: usize, scene: &Scene, cfg: &RolloutConfig) -> Result<SceneDump> {
    let wc = cfg.window_config(model);
    let map = rasterize_scene(&scene.bounds, &scene.obstacles, cfg.resolution);
    let t0 = start_of(cfg, model);
    let horizon = model.horizon();
    let total = (cfg.duration / scene.dt).round() as usize;
    let period = (cfg.replan / scene.dt).round() as usize;
    let mut srng = scene_rng(cfg.seed, index);
    let mut trng = ChaCha8Rng::seed_from_u64(srng.next_u64());
    let ids = present(scene, t0);
    let spec = cfg.guidance.instantiate(scene, t0, &ids, horizon, &mut trng);
    let mut dump = empty_dump(index, scene, t0, cfg, &spec);

    let mut buffer = scene.clone();
    buffer.agents.retain(|a| ids.contains(&a.id));
    for a in &mut buffer.agents {
        a.states.truncate(t0 + 1);
    }
    let radius: Vec<f64> = buffer.agents.iter().map(|a| a.radius()).collect();
    let mut elapsed = 0;
    while elapsed < total && !ids.is_empty() {
        let t = t0 + elapsed;
        let agents = plan_agents(model, &buffer, t, &ids, &wc, &map);
        dump.plan_starts.push(agents.iter().map(|a| a.current_global()).collect());
        let now = retime(&spec, elapsed, horizon);
        let seed = srng.next_u64();
        let sampler = SamplerConfig { seed, ..cfg.sampler };
        let out: SceneSamples = sample_scene(model, &agents, Some(&map), &sampler, (!now.objectives.is_empty()).then_some(&now))?;
        dump.seeds.push(seed);
        dump.chosen.push(out.chosen);
        dump.skipped_guidance += out.skipped_guidance;
        let n = period.min(total - elapsed);
        for (track, s) in buffer.agents.iter_mut().zip(&out.agents) {
            debug_assert_eq!(track.id, s.id);
            track.states.extend(s.states[out.chosen][..n].iter().map(|&x| Some(x)));
        }
        elapsed += n;
    }
    for (track, r) in buffer.agents.iter().zip(radius) {
        dump.executed.push(AgentTrajectory {
            id: track.id,
            radius: r,
            states: track.states[t0 + 1..].iter().map(|s| s.expect("executed")).collect(),
        });
        dump.truth.push(truth_after(scene, track.id, t0, total));
    }
    Ok(dump)
}

/// Per-scene metrics of a dump.
pub fn scene_metrics(dump: &SceneDump, cfg: &MetricsConfig) -> Result<SceneMetrics> {
    let map = rasterize_scene(&dump.bounds, &dump.obstacles, dump.resolution);
    let mut sums: Vec<(String, f64, usize)> = Vec::new();
    for o in &dump.objectives {
        let e = guidance_error(&o.objective, &dump.executed, Some(&map), dump.dt)?;
        let label = objective_label(&o.objective);
        match sums.iter_mut().find(|s| s.0 == label) {
            Some(s) => {
                s.1 += e;
                s.2 += 1;
            }
            None => sums.push((label, e, 1)),
        }
    }
    let (mut ade, mut fde) = (None, None);
    if cfg.displacement && !dump.samples.is_empty() && dump.truth.iter().all(|t| t.is_some()) {
        let mut acc = (0.0, 0.0);
        for (samples, truth) in dump.samples.iter().zip(&dump.truth) {
            let gt: Vec<[f64; 2]> = truth.as_ref().expect("checked").iter().map(|s| s.position()).collect();
            let d = ade_fde(samples, &gt)?;
            acc.0 += d.ade;
            acc.1 += d.fde;
        }
        let n = dump.samples.len() as f64;
        ade = Some(acc.0 / n);
        fde = Some(acc.1 / n);
    }
    Ok(SceneMetrics {
        scene: dump.scene,
        obstacle_collision_rate: obstacle_collision_rate(&dump.executed, &map),
        agent_collision_rate: agent_collision_rate(&dump.executed),
        guidance_errors: sums
            .into_iter()
            .map(|(name, v, n)| NamedValue {
                name,
                value: v / n as f64,
            })
            .collect(),
        ade,
        fde,
    })
}

/// Aggregates dumps into a report: scene means for rates and guidance
/// errors, pooled statistics for realism.
pub fn evaluate(dumps: &[SceneDump], cfg: &MetricsConfig) -> Result<RolloutReport> {
    let per_scene: Vec<SceneMetrics> = dumps.iter().map(|d| scene_metrics(d, cfg)).collect::<Result<_>>()?;
    let active: Vec<(&SceneDump, &SceneMetrics)> = dumps.iter().zip(&per_scene).filter(|(d, _)| !d.executed.is_empty()).collect();
    let n = active.len().max(1) as f64;
    let mut report = MetricReport {
        scenes: active.len(),
        agents: active.iter().map(|(d, _)| d.executed.len()).sum(),
        obstacle_collision_rate: active.iter().map(|(_, m)| m.obstacle_collision_rate).sum::<f64>() / n,
        agent_collision_rate: active.iter().map(|(_, m)| m.agent_collision_rate).sum::<f64>() / n,
        ..MetricReport::default()
    };
    let mut labels: Vec<String> = Vec::new();
    for (_, m) in &active {
        for g in &m.guidance_errors {
            if !labels.contains(&g.name) {
                labels.push(g.name.clone());
            }
        }
    }
    for l in labels {
        let vals: Vec<f64> = active.iter().filter_map(|(_, m)| m.guidance_errors.iter().find(|g| g.name == l).map(|g| g.value)).collect();
        report.guidance_errors.push(NamedValue {
            name: l,
            value: vals.iter().sum::<f64>() / vals.len() as f64,
        });
    }
    let dt = dumps.first().map(|d| d.dt).unwrap_or(0.1);
    let trajs: Vec<&[AgentState]> = active.iter().flat_map(|(d, _)| d.executed.iter().map(|a| a.states.as_slice())).collect();
    let (lon, lat) = mean_accels(trajs.iter().copied(), dt);
    report.mean_lon_accel = lon;
    report.mean_lat_accel = lat;
    let speeds: Vec<f64> = trajs.iter().flat_map(|t| t.iter().map(|s| s.v)).collect();
    report.mean_speed = speeds.iter().sum::<f64>() / speeds.len().max(1) as f64;
    if cfg.emd {
        let truths: Vec<&[AgentState]> = active.iter().flat_map(|(d, _)| d.truth.iter().flatten().map(|t| t.as_slice())).collect();
        let gen = step_stats(trajs.iter().copied(), dt);
        let reference = step_stats(truths.iter().copied(), dt);
        match realism_emd(&gen, &reference, &cfg.bins) {
            Ok(e) => report.emd = Some(e),
            Err(e) => report.notes.push(format!("realism skipped: {e}")),
        }
    }
    if cfg.displacement {
        let with: Vec<&SceneMetrics> = per_scene.iter().filter(|m| m.ade.is_some()).collect();
        if with.is_empty() {
            report.notes.push("displacement errors skipped: no scene with complete ground truth and samples".into());
        } else {
            let k = with.len() as f64;
            report.ade = Some(with.iter().filter_map(|m| m.ade).sum::<f64>() / k);
            report.fde = Some(with.iter().filter_map(|m| m.fde).sum::<f64>() / k);
            if with.len() < active.len() {
                report.notes.push(format!("displacement errors over {} of {} scenes", with.len(), active.len()));
            }
        }
    }
    let skipped: usize = dumps.iter().map(|d| d.skipped_guidance).sum();
    if skipped > 0 {
        report.notes.push(format!("{skipped} guidance steps skipped for non-finite gradients"));
    }
    Ok(RolloutReport { metrics: report, per_scene })
}

/// Runs every scene in the configured mode and evaluates the dumps.
pub fn run_rollouts(model: &Model, scenes: &[Scene], cfg: &RolloutConfig, workers: usize) -> Result<(RolloutReport, Vec<SceneDump>)> {
    cfg.validate(model)?;
    let dumps: Vec<SceneDump> = parallel_map(scenes, workers, |i, s| match cfg.mode {
        RolloutMode::OpenLoop => open_loop_scene(model, i, s, cfg),
        RolloutMode::ClosedLoop => closed_loop_rollout(model, i, s, cfg),
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok((evaluate(&dumps, &cfg.metrics)?, dumps))
}

/// Open-loop evaluation over a scene set.
pub fn open_loop_eval(model: &Model, scenes: &[Scene], cfg: &RolloutConfig, workers: usize) -> Result<(RolloutReport, Vec<SceneDump>)> {
    let cfg = RolloutConfig {
        mode: RolloutMode::OpenLoop,
        ..cfg.clone()
    };
    run_rollouts(model, scenes, &cfg, workers)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepAxis {
    /// Classifier-free weights.
    W { values: Vec<f64> },
    CleanVsNoisy,
    FilterVsGuide,
}

impl Default for SweepAxis {
    fn default() -> Self {
        SweepAxis::W { values: vec![-0.5, 0.0, 0.5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub label: String,
    pub report: RolloutReport,
    pub seeds: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub entries: Vec<SweepEntry>,
    /// Every entry used the same sampler seeds for every scene.
    pub seeds_paired: bool,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,metric,value\n");
        for e in &self.entries {
            for (k, v) in e.report.metrics.rows() {
                s.push_str(&format!("{},{k},{v}\n", e.label));
            }
        }
        s
    }
}

/// Variants of `base` along `axis`, labelled.
pub fn sweep_variants(base: &RolloutConfig, axis: &SweepAxis) -> Vec<(String, RolloutConfig)> {
    let with_mode = |m: GuidanceMode| {
        let mut c = base.clone();
        c.guidance.mode = m;
        c
    };
    match axis {
        SweepAxis::W { values } => values
            .iter()
            .map(|&w| {
                let mut c = base.clone();
                c.sampler.w = w;
                (format!("w={w}"), c)
            })
            .collect(),
        SweepAxis::CleanVsNoisy => vec![("clean".into(), with_mode(GuidanceMode::Clean)), ("noisy".into(), with_mode(GuidanceMode::Noisy))],
        SweepAxis::FilterVsGuide => {
            let guide = if base.guidance.mode == GuidanceMode::FilterOnly { GuidanceMode::Clean } else { base.guidance.mode };
            vec![("filter".into(), with_mode(GuidanceMode::FilterOnly)), ("guide".into(), with_mode(guide))]
        }
    }
}

/// One report per axis value with common seeds across values.
pub fn run_ablation_sweep(model: &Model, scenes: &[Scene], base: &RolloutConfig, axis: &SweepAxis, workers: usize) -> Result<SweepReport> {
    let mut entries = Vec::new();
    for (label, cfg) in sweep_variants(base, axis) {
        let (report, dumps) = run_rollouts(model, scenes, &cfg, workers)?;
        entries.push(SweepEntry {
            label,
            report,
            seeds: dumps.iter().map(|d| d.seeds.clone()).collect(),
        });
    }
    let seeds_paired = entries.windows(2).all(|w| w[0].seeds == w[1].seeds);
    Ok(SweepReport {
        axis: axis.clone(),
        entries,
        seeds_paired,
    })
}
