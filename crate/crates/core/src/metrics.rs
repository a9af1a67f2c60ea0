//! Evaluation metrics: collision rates, guidance errors, histogram realism,
//! mean accelerations and displacement errors.

use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, AgentState};
use crate::guidance::{Objective, WaypointScope};
use crate::world::{disk_agent_collisions, disk_obstacle_collision, SemanticMap};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no {0} statistics")]
    Empty(&'static str),
    #[error("bin edges must be strictly increasing with at least two entries")]
    Edges,
    #[error("horizon mismatch: sample has {0} steps, ground truth {1}")]
    Horizon(usize, usize),
    #[error("objective references unknown agent {0}")]
    UnknownAgent(u32),
    #[error("waypoint step {0} beyond the executed {1} steps")]
    Step(usize, usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramSpec {
    pub velocity: Vec<f64>,
    pub lon_accel: Vec<f64>,
    pub lat_accel: Vec<f64>,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            velocity: uniform_edges(0.0, 3.5, 100),
            lon_accel: uniform_edges(-4.0, 4.0, 100),
            lat_accel: uniform_edges(-4.0, 4.0, 100),
        }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        for e in [&self.velocity, &self.lon_accel, &self.lat_accel] {
            if e.len() < 2 || e.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(MetricsError::Edges);
            }
        }
        Ok(())
    }
}

/// Normalized histogram; out-of-range values land in the end bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub mass: Vec<f64>,
    pub clamped: usize,
}

pub fn histogram(values: &[f64], edges: &[f64]) -> Histogram {
    let bins = edges.len() - 1;
    let mut counts = vec![0usize; bins];
    let mut clamped = 0;
    for &v in values {
        let i = if v < edges[0] {
            clamped += 1;
            0
        } else if v >= edges[bins] {
            if v > edges[bins] {
                clamped += 1;
            }
            bins - 1
        } else {
            edges.partition_point(|&e| e <= v) - 1
        };
        counts[i] += 1;
    }
    let n = values.len().max(1) as f64;
    Histogram {
        mass: counts.iter().map(|&c| c as f64 / n).collect(),
        clamped,
    }
}

/// 1-D earth mover's distance between histograms on the same edges: the sum
/// of absolute CDF differences times the distance between bin centers.
pub fn emd_1d(p: &[f64], q: &[f64], edges: &[f64]) -> f64 {
    let centers: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let mut cdf = 0.0;
    let mut total = 0.0;
    for i in 0..p.len().saturating_sub(1) {
        cdf += p[i] - q[i];
        total += cdf.abs() * (centers[i + 1] - centers[i]);
    }
    total
}

/// Per-step statistics pooled over trajectories.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub speed: Vec<f64>,
    pub lon_accel: Vec<f64>,
    pub lat_accel: Vec<f64>,
}

/// Longitudinal and lateral accelerations at interior steps by central
/// differences: `dv/dt` and `v dθ/dt`.
pub fn accelerations(traj: &[AgentState], dt: f64) -> Vec<(f64, f64)> {
    (1..traj.len().saturating_sub(1))
        .map(|i| {
            let lon = (traj[i + 1].v - traj[i - 1].v) / (2.0 * dt);
            let yaw = wrap_angle(traj[i + 1].theta - traj[i - 1].theta) / (2.0 * dt);
            (lon, traj[i].v * yaw)
        })
        .collect()
}

pub fn step_stats<'a>(trajs: impl IntoIterator<Item = &'a [AgentState]>, dt: f64) -> StepStats {
    let mut s = StepStats::default();
    for t in trajs {
        s.speed.extend(t.iter().map(|x| x.v));
        for (lon, lat) in accelerations(t, dt) {
            s.lon_accel.push(lon);
            s.lat_accel.push(lat);
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmdReport {
    pub velocity: f64,
    pub lon_accel: f64,
    pub lat_accel: f64,
    /// Generated values clamped into the end bins.
    pub clamped: usize,
    pub reference_clamped: usize,
    pub bins: HistogramSpec,
}

pub fn realism_emd(generated: &StepStats, reference: &StepStats, spec: &HistogramSpec) -> Result<EmdReport> {
    spec.validate()?;
    let mut clamped = 0;
    let mut ref_clamped = 0;
    let mut one = |name, g: &[f64], r: &[f64], edges: &[f64]| -> Result<f64> {
        if g.is_empty() || r.is_empty() {
            return Err(MetricsError::Empty(name));
        }
        let (hg, hr) = (histogram(g, edges), histogram(r, edges));
        clamped += hg.clamped;
        ref_clamped += hr.clamped;
        Ok(emd_1d(&hg.mass, &hr.mass, edges))
    };
    let velocity = one("velocity", &generated.speed, &reference.speed, &spec.velocity)?;
    let lon_accel = one("longitudinal acceleration", &generated.lon_accel, &reference.lon_accel, &spec.lon_accel)?;
    let lat_accel = one("lateral acceleration", &generated.lat_accel, &reference.lat_accel, &spec.lat_accel)?;
    Ok(EmdReport {
        velocity,
        lon_accel,
        lat_accel,
        clamped,
        reference_clamped: ref_clamped,
        bins: spec.clone(),
    })
}

/// Mean absolute longitudinal and lateral acceleration per trajectory,
/// averaged over trajectories with at least 3 states.
pub fn mean_accels<'a>(trajs: impl IntoIterator<Item = &'a [AgentState]>, dt: f64) -> (f64, f64) {
    let mut sum = (0.0, 0.0);
    let mut n = 0;
    for t in trajs {
        let acc = accelerations(t, dt);
        if acc.is_empty() {
            continue;
        }
        let k = acc.len() as f64;
        sum.0 += acc.iter().map(|a| a.0.abs()).sum::<f64>() / k;
        sum.1 += acc.iter().map(|a| a.1.abs()).sum::<f64>() / k;
        n += 1;
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (sum.0 / n as f64, sum.1 / n as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub ade: f64,
    pub fde: f64,
    /// Sample with the lowest ADE (lowest index on ties).
    pub best: usize,
}

/// Best-of-N displacement errors, selecting by ADE.
pub fn ade_fde(samples: &[Vec<[f64; 2]>], truth: &[[f64; 2]]) -> Result<Displacement> {
    if samples.is_empty() || truth.is_empty() {
        return Err(MetricsError::Empty("displacement"));
    }
    let mut best: Option<Displacement> = None;
    for (i, s) in samples.iter().enumerate() {
        if s.len() != truth.len() {
            return Err(MetricsError::Horizon(s.len(), truth.len()));
        }
        let errs: Vec<f64> = s.iter().zip(truth).map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1])).collect();
        let ade = errs.iter().sum::<f64>() / errs.len() as f64;
        if best.is_none_or(|b| ade < b.ade) {
            best = Some(Displacement {
                ade,
                fde: errs[errs.len() - 1],
                best: i,
            });
        }
    }
    Ok(best.expect("non-empty"))
}

/// An executed or sampled trajectory of one agent in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrajectory {
    pub id: u32,
    pub radius: f64,
    pub states: Vec<AgentState>,
}

impl AgentTrajectory {
    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.states.iter().map(|s| s.position()).collect()
    }
}

/// Mean over agents of the fraction of steps spent overlapping an obstacle.
pub fn obstacle_collision_rate(agents: &[AgentTrajectory], map: &SemanticMap) -> f64 {
    if agents.is_empty() {
        return 0.0;
    }
    agents.iter().map(|a| disk_obstacle_collision(&a.positions(), map, a.radius).fraction).sum::<f64>() / agents.len() as f64
}

/// Fraction of agents involved in at least one disk overlap.
pub fn agent_collision_rate(agents: &[AgentTrajectory]) -> f64 {
    let pos: Vec<Vec<Option<[f64; 2]>>> = agents.iter().map(|a| a.states.iter().map(|s| Some(s.position())).collect()).collect();
    let radii: Vec<f64> = agents.iter().map(|a| a.radius).collect();
    disk_agent_collisions(&pos, &radii)
}

fn find(agents: &[AgentTrajectory], id: u32) -> Result<&AgentTrajectory> {
    agents.iter().find(|a| a.id == id).ok_or(MetricsError::UnknownAgent(id))
}

/// Objective-specific error of executed trajectories. Waypoint steps count
/// from the first executed state (step 1).
pub fn guidance_error(objective: &Objective, agents: &[AgentTrajectory], map: Option<&SemanticMap>, dt: f64) -> Result<f64> {
    match objective {
        Objective::AgentAvoid { .. } => Ok(agent_collision_rate(agents)),
        Objective::ObstacleAvoid { agents: ids, .. } => {
            let Some(map) = map else { return Ok(0.0) };
            let chosen: Vec<AgentTrajectory> = if ids.is_empty() {
                agents.to_vec()
            } else {
                ids.iter().map(|&i| find(agents, i).cloned()).collect::<Result<_>>()?
            };
            Ok(obstacle_collision_rate(&chosen, map))
        }
        Objective::Waypoint(w) => {
            let a = find(agents, w.agent)?;
            let dist = |s: &AgentState| (s.x - w.goal[0]).hypot(s.y - w.goal[1]);
            match (w.step, w.scope) {
                (Some(j), _) => {
                    let s = a.states.get(j.wrapping_sub(1)).ok_or(MetricsError::Step(j, a.states.len()))?;
                    Ok(dist(s))
                }
                (None, WaypointScope::Local | WaypointScope::Global) => {
                    a.states.iter().map(dist).min_by(f64::total_cmp).ok_or(MetricsError::Empty("waypoint"))
                }
            }
        }
        Objective::SocialGroup(g) => {
            let members: Vec<&AgentTrajectory> = g.members.iter().map(|&i| find(agents, i)).collect::<Result<_>>()?;
            let steps = members.iter().map(|m| m.states.len()).min().unwrap_or(0);
            if steps == 0 {
                return Err(MetricsError::Empty("social group"));
            }
            let mut total = 0.0;
            for (i, m) in members.iter().enumerate() {
                let mut acc = 0.0;
                for t in 0..steps {
                    let p = m.states[t].position();
                    let nearest = members
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, o)| (o.states[t].x - p[0]).hypot(o.states[t].y - p[1]))
                        .fold(f64::INFINITY, f64::min);
                    acc += (nearest - g.distance).abs();
                }
                total += acc / steps as f64;
            }
            Ok(total / members.len() as f64)
        }
        Objective::Value { weight, agents: ids } => {
            let chosen: Vec<&AgentTrajectory> =
                if ids.is_empty() { agents.iter().collect() } else { ids.iter().map(|&i| find(agents, i)).collect::<Result<_>>()? };
            let mut total = 0.0;
            for a in &chosen {
                let pts = a.positions();
                if pts.len() < 3 {
                    continue;
                }
                let acc: f64 = pts
                    .windows(3)
                    .map(|w| (w[2][0] - 2.0 * w[1][0] + w[0][0]).powi(2) + (w[2][1] - 2.0 * w[1][1] + w[0][1]).powi(2))
                    .sum();
                let v = -weight * acc / ((pts.len() - 2) as f64 * dt.powi(4));
                total += (-v).exp();
            }
            Ok(total / chosen.len().max(1) as f64)
        }
    }
}

/// A named scalar in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

/// Aggregate metrics over a set of scenes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenes: usize,
    pub agents: usize,
    pub obstacle_collision_rate: f64,
    pub agent_collision_rate: f64,
    /// One entry per objective, averaged over scenes.
    pub guidance_errors: Vec<NamedValue>,
    pub mean_lon_accel: f64,
    pub mean_lat_accel: f64,
    pub mean_speed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emd: Option<EmdReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ade: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fde: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl MetricReport {
    /// Flat `metric,value` rows.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut r = vec![
            ("scenes".to_string(), self.scenes as f64),
            ("agents".to_string(), self.agents as f64),
            ("obstacle_collision_rate".to_string(), self.obstacle_collision_rate),
            ("agent_collision_rate".to_string(), self.agent_collision_rate),
            ("mean_lon_accel".to_string(), self.mean_lon_accel),
            ("mean_lat_accel".to_string(), self.mean_lat_accel),
            ("mean_speed".to_string(), self.mean_speed),
        ];
        for g in &self.guidance_errors {
            r.push((format!("guidance_error.{}", g.name), g.value));
        }
        if let Some(e) = &self.emd {
            r.push(("emd.velocity".into(), e.velocity));
            r.push(("emd.lon_accel".into(), e.lon_accel));
            r.push(("emd.lat_accel".into(), e.lat_accel));
        }
        if let Some(v) = self.ade {
            r.push(("ade".into(), v));
        }
        if let Some(v) = self.fde {
            r.push(("fde".into(), v));
        }
        r
    }

    pub fn to_csv(&self, label: &str) -> String {
        let mut s = String::from("label,metric,value\n");
        for (k, v) in self.rows() {
            s.push_str(&format!("{label},{k},{v}\n"));
        }
        s
    }
}

/// Report key of an objective; objectives of one kind share a key.
pub fn objective_label(o: &Objective) -> String {
    match o {
        Objective::AgentAvoid { .. } => "agent_avoid".into(),
        Objective::ObstacleAvoid { .. } => "obstacle_avoid".into(),
        Objective::Waypoint(_) => "waypoint".into(),
        Objective::SocialGroup(_) => "social_group".into(),
        Objective::Value { .. } => "value".into(),
    }
}
