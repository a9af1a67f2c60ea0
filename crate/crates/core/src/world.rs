//! Scenes, static obstacles, binary semantic rasters, ego-frame crops and
//! disk collision tests.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dynamics::{AgentState, Pose};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("degenerate obstacle (area {0})")]
    Degenerate(f64),
    #[error("invalid bounds {0:?}..{1:?}")]
    Bounds([f64; 2], [f64; 2]),
    #[error("raster: {0}")]
    Raster(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const WALKABLE: usize = 0;
pub const OBSTACLE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Result<Self, WorldError> {
        if !(max[0] > min[0] && max[1] > min[1]) {
            return Err(WorldError::Bounds(min, max));
        }
        Ok(Self { min, max })
    }

    pub fn square(side: f64) -> Self {
        Self {
            min: [0.0, 0.0],
            max: [side, side],
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    pub fn size(&self) -> [f64; 2] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1]]
    }
}

/// Convex polygon obstacle, vertices counter-clockwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Obstacle {
    vertices: Vec<[f64; 2]>,
}

impl TryFrom<Vec<[f64; 2]>> for Obstacle {
    type Error = WorldError;
    fn try_from(v: Vec<[f64; 2]>) -> Result<Self, WorldError> {
        Obstacle::polygon(v)
    }
}

impl From<Obstacle> for Vec<[f64; 2]> {
    fn from(o: Obstacle) -> Self {
        o.vertices
    }
}

fn signed_area(v: &[[f64; 2]]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

impl Obstacle {
    /// Convex polygon; orientation is normalised to counter-clockwise.
    pub fn polygon(mut vertices: Vec<[f64; 2]>) -> Result<Self, WorldError> {
        let area = if vertices.len() >= 3 { signed_area(&vertices) } else { 0.0 };
        if area.abs() <= 1e-12 || !area.is_finite() {
            return Err(WorldError::Degenerate(area));
        }
        if area < 0.0 {
            vertices.reverse();
        }
        Ok(Self { vertices })
    }

    pub fn aabb(min: [f64; 2], max: [f64; 2]) -> Result<Self, WorldError> {
        Self::polygon(vec![min, [max[0], min[1]], max, [min[0], max[1]]])
    }

    /// Rectangle with the given center, full extents and rotation.
    pub fn rect(center: [f64; 2], size: [f64; 2], angle: f64) -> Result<Self, WorldError> {
        let (s, c) = angle.sin_cos();
        let (hx, hy) = (size[0] / 2.0, size[1] / 2.0);
        let corners = [[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]];
        Self::polygon(
            corners
                .iter()
                .map(|p| [center[0] + c * p[0] - s * p[1], center[1] + s * p[0] + c * p[1]])
                .collect(),
        )
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
        })
    }

    /// Euclidean distance to the polygon (0 inside).
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        let n = self.vertices.len();
        (0..n)
            .map(|i| seg_dist(p, self.vertices[i], self.vertices[(i + 1) % n]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bbox(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }
}

/// Per-agent record on the scene clock. `states[i]` is the state at
/// `t = i * dt`; `None` marks steps where the agent was not observed.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    pub id: u32,
    pub diameter: f64,
    pub goal: Option<[f64; 2]>,
    pub pref_speed: Option<f64>,
    pub states: Vec<Option<AgentState>>,
}

impl AgentTrack {
    pub fn radius(&self) -> f64 {
        self.diameter / 2.0
    }

    pub fn state(&self, step: usize) -> Option<AgentState> {
        self.states.get(step).copied().flatten()
    }
}

/// A scene on a common clock with step `dt`. `now` is the index of the
/// current step: states up to and including it are history, later ones are
/// ground-truth future.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub dt: f64,
    pub bounds: Bounds,
    pub obstacles: Vec<Obstacle>,
    pub agents: Vec<AgentTrack>,
    pub now: usize,
}

#[derive(Serialize, Deserialize)]
struct StampedState {
    t: f64,
    x: f64,
    y: f64,
    theta: f64,
    v: f64,
}

#[derive(Serialize, Deserialize)]
struct AgentRecord {
    id: u32,
    diameter: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    goal: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pref_speed: Option<f64>,
    states: Vec<StampedState>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    dt: f64,
    bounds: Bounds,
    obstacles: Vec<Obstacle>,
    agents: Vec<AgentRecord>,
    #[serde(default)]
    now: usize,
}

impl Serialize for Scene {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rec = SceneRecord {
            dt: self.dt,
            bounds: self.bounds,
            obstacles: self.obstacles.clone(),
            agents: self
                .agents
                .iter()
                .map(|a| AgentRecord {
                    id: a.id,
                    diameter: a.diameter,
                    goal: a.goal,
                    pref_speed: a.pref_speed,
                    states: a
                        .states
                        .iter()
                        .enumerate()
                        .filter_map(|(i, st)| {
                            st.map(|st| StampedState {
                                t: i as f64 * self.dt,
                                x: st.x,
                                y: st.y,
                                theta: st.theta,
                                v: st.v,
                            })
                        })
                        .collect(),
                })
                .collect(),
            now: self.now,
        };
        rec.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Scene {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = SceneRecord::deserialize(d)?;
        if !(rec.dt > 0.0) {
            return Err(serde::de::Error::custom("dt must be positive"));
        }
        let agents = rec
            .agents
            .into_iter()
            .map(|a| {
                let mut states: Vec<Option<AgentState>> = Vec::new();
                for st in a.states {
                    let i = (st.t / rec.dt).round();
                    if i < 0.0 {
                        return Err(serde::de::Error::custom("negative timestamp"));
                    }
                    let i = i as usize;
                    if states.len() <= i {
                        states.resize(i + 1, None);
                    }
                    states[i] = Some(AgentState::new(st.x, st.y, st.theta, st.v));
                }
                Ok(AgentTrack {
                    id: a.id,
                    diameter: a.diameter,
                    goal: a.goal,
                    pref_speed: a.pref_speed,
                    states,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Scene {
            dt: rec.dt,
            bounds: rec.bounds,
            obstacles: rec.obstacles,
            agents,
            now: rec.now,
        })
    }
}

impl Scene {
    /// Number of clock steps covered by any agent.
    pub fn len(&self) -> usize {
        self.agents.iter().map(|a| a.states.len()).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn agent(&self, id: u32) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id)
    }
}

/// Multi-channel binary raster. Pixel `(row, col)` covers world
/// `x ∈ origin.x + [col, col+1) / resolution`, `y ∈ origin.y + [row, row+1) / resolution`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    pub height: usize,
    pub width: usize,
    /// Pixels per meter.
    pub resolution: f64,
    /// World coordinates of the corner of pixel (0, 0).
    pub origin: [f64; 2],
    channels: Vec<Vec<u8>>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, resolution: f64, origin: [f64; 2], n_channels: usize) -> Self {
        Self {
            height,
            width,
            resolution,
            origin,
            channels: vec![vec![0; height * width]; n_channels],
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        &self.channels[c]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> u8 {
        self.channels[c][row * self.width + col]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, v: bool) {
        self.channels[c][row * self.width + col] = v as u8;
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) / self.resolution,
            self.origin[1] + (row as f64 + 0.5) / self.resolution,
        ]
    }

    /// Pixel containing a world point, if inside the raster.
    pub fn pixel_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let col = ((p[0] - self.origin[0]) * self.resolution).floor();
        let row = ((p[1] - self.origin[1]) * self.resolution).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 || !col.is_finite() {
            return None;
        }
        Some((row as usize, col as usize))
    }

    /// Nearest-pixel lookup; points outside the raster read 0.
    pub fn lookup(&self, c: usize, p: [f64; 2]) -> u8 {
        self.pixel_of(p).map_or(0, |(r, col)| self.get(c, r, col))
    }

    pub fn is_obstacle(&self, p: [f64; 2]) -> bool {
        self.lookup(OBSTACLE, p) == 1
    }

    /// Writes a one-line JSON header followed by the packed bits of each
    /// channel (row-major, least significant bit first).
    pub fn export<W: Write>(&self, mut out: W) -> Result<(), WorldError> {
        let header = RasterHeader {
            format: "crowdiff-raster-v1".into(),
            height: self.height,
            width: self.width,
            resolution: self.resolution,
            origin: self.origin,
            channels: self.channels.len(),
            channel_names: vec!["walkable".into(), "obstacle".into()],
            bytes_per_channel: (self.height * self.width).div_ceil(8),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for ch in &self.channels {
            out.write_all(&pack_bits(ch))?;
        }
        Ok(())
    }

    pub fn import<R: BufRead>(mut input: R) -> Result<Self, WorldError> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        let h: RasterHeader = serde_json::from_str(line.trim_end())?;
        let n = h.height * h.width;
        if h.bytes_per_channel != n.div_ceil(8) {
            return Err(WorldError::Raster("inconsistent channel size".into()));
        }
        let mut channels = Vec::with_capacity(h.channels);
        for _ in 0..h.channels {
            let mut buf = vec![0u8; h.bytes_per_channel];
            input.read_exact(&mut buf)?;
            channels.push(unpack_bits(&buf, n));
        }
        Ok(Self {
            height: h.height,
            width: h.width,
            resolution: h.resolution,
            origin: h.origin,
            channels,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RasterHeader {
    format: String,
    height: usize,
    width: usize,
    resolution: f64,
    origin: [f64; 2],
    channels: usize,
    channel_names: Vec<String>,
    bytes_per_channel: usize,
}

pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect()
}

/// Rasterizes the scene bounds: obstacle bit iff the pixel center lies in an
/// obstacle, walkable iff the center is inside the bounds and not obstacle.
pub fn rasterize_scene(bounds: &Bounds, obstacles: &[Obstacle], resolution: f64) -> SemanticMap {
    let size = bounds.size();
    let width = (size[0] * resolution).ceil() as usize;
    let height = (size[1] * resolution).ceil() as usize;
    let mut map = SemanticMap::new(height, width, resolution, bounds.min, 2);
    for ob in obstacles {
        let (lo, hi) = ob.bbox();
        let c0 = (((lo[0] - bounds.min[0]) * resolution).floor().max(0.0)) as usize;
        let r0 = (((lo[1] - bounds.min[1]) * resolution).floor().max(0.0)) as usize;
        let c1 = ((((hi[0] - bounds.min[0]) * resolution).ceil()).max(0.0) as usize).min(width);
        let r1 = ((((hi[1] - bounds.min[1]) * resolution).ceil()).max(0.0) as usize).min(height);
        for r in r0..r1 {
            for c in c0..c1 {
                if ob.contains(map.pixel_center(r, c)) {
                    map.set(OBSTACLE, r, c, true);
                }
            }
        }
    }
    for r in 0..height {
        for c in 0..width {
            let inside = bounds.contains(map.pixel_center(r, c));
            let free = map.get(OBSTACLE, r, c) == 0;
            map.set(WALKABLE, r, c, inside && free);
        }
    }
    map
}

/// Geometry of the ego-frame map window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Output is `pixels × pixels`.
    pub pixels: usize,
    /// Meters covered ahead of / behind the ego.
    pub front: f64,
    pub back: f64,
    /// Meters covered to each side.
    pub side: f64,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            pixels: 64,
            front: 12.0,
            back: 4.0,
            side: 8.0,
        }
    }
}

impl CropSpec {
    /// Local-frame coordinates of the center of crop pixel `(row, col)`;
    /// columns run along the heading, rows to the left.
    pub fn pixel_local(&self, row: usize, col: usize) -> [f64; 2] {
        let n = self.pixels as f64;
        [
            -self.back + (col as f64 + 0.5) * (self.front + self.back) / n,
            -self.side + (row as f64 + 0.5) * (2.0 * self.side) / n,
        ]
    }

    /// Continuous `(col, row)` coordinates in a `grid × grid` feature map
    /// spanning the crop window, with cell centers on integers.
    pub fn grid_coords(&self, local: [f64; 2], grid: usize) -> [f64; 2] {
        let g = grid as f64;
        [
            (local[0] + self.back) / (self.front + self.back) * g - 0.5,
            (local[1] + self.side) / (2.0 * self.side) * g - 0.5,
        ]
    }
}

/// Binary local map window, `channels × pixels × pixels`. Serialized as
/// base64 of the packed bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "CropRecord", try_from = "CropRecord")]
pub struct MapCrop {
    pub pixels: usize,
    pub channels: usize,
    pub bits: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct CropRecord {
    pixels: usize,
    channels: usize,
    bits: String,
}

impl From<MapCrop> for CropRecord {
    fn from(c: MapCrop) -> Self {
        use base64::Engine;
        Self {
            pixels: c.pixels,
            channels: c.channels,
            bits: base64::engine::general_purpose::STANDARD.encode(pack_bits(&c.bits)),
        }
    }
}

impl TryFrom<CropRecord> for MapCrop {
    type Error = String;
    fn try_from(r: CropRecord) -> Result<Self, String> {
        use base64::Engine;
        let n = r.channels * r.pixels * r.pixels;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(r.bits)
            .map_err(|e| e.to_string())?;
        if bytes.len() != n.div_ceil(8) {
            return Err(format!("crop needs {} bytes, got {}", n.div_ceil(8), bytes.len()));
        }
        Ok(MapCrop {
            pixels: r.pixels,
            channels: r.channels,
            bits: unpack_bits(&bytes, n),
        })
    }
}

impl MapCrop {
    /// Every channel at 0.5; stands in for a dropped map.
    pub fn null_tensor(channels: usize, pixels: usize) -> Tensor {
        Tensor::full(&[channels, pixels, pixels], 0.5)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.pixels, self.pixels],
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("crop size")
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> u8 {
        self.bits[(c * self.pixels + row) * self.pixels + col]
    }
}

/// Samples the map around `ego` by nearest-pixel lookup of each rotated crop
/// pixel center. Pixels falling outside the map are 0 on every channel.
pub fn crop_local_map(map: &SemanticMap, ego: Pose, spec: &CropSpec) -> MapCrop {
    let p = spec.pixels;
    let nc = map.n_channels();
    let mut bits = vec![0u8; nc * p * p];
    for r in 0..p {
        for c in 0..p {
            let w = ego.to_global_point(spec.pixel_local(r, c));
            if let Some((mr, mc)) = map.pixel_of(w) {
                for ch in 0..nc {
                    bits[(ch * p + r) * p + c] = map.get(ch, mr, mc);
                }
            }
        }
    }
    MapCrop {
        pixels: p,
        channels: nc,
        bits,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollisionReport {
    pub flags: Vec<bool>,
    pub fraction: f64,
}

/// Flags steps where any obstacle pixel center lies strictly within `radius`
/// of the agent center.
pub fn disk_obstacle_collision(positions: &[[f64; 2]], map: &SemanticMap, radius: f64) -> CollisionReport {
    let flags: Vec<bool> = positions
        .iter()
        .map(|&p| disk_hits_obstacle(p, map, radius))
        .collect();
    let n = flags.iter().filter(|&&f| f).count();
    CollisionReport {
        fraction: if flags.is_empty() { 0.0 } else { n as f64 / flags.len() as f64 },
        flags,
    }
}

pub fn disk_hits_obstacle(p: [f64; 2], map: &SemanticMap, radius: f64) -> bool {
    let res = map.resolution;
    let c0 = ((p[0] - radius - map.origin[0]) * res).floor().max(0.0) as usize;
    let r0 = ((p[1] - radius - map.origin[1]) * res).floor().max(0.0) as usize;
    let c1 = (((p[0] + radius - map.origin[0]) * res).ceil().max(0.0) as usize).min(map.width);
    let r1 = (((p[1] + radius - map.origin[1]) * res).ceil().max(0.0) as usize).min(map.height);
    let r2 = radius * radius;
    let obs = map.channel(OBSTACLE);
    for r in r0..r1 {
        for c in c0..c1 {
            if obs[r * map.width + c] == 0 {
                continue;
            }
            let q = map.pixel_center(r, c);
            let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
            if dx * dx + dy * dy < r2 {
                return true;
            }
        }
    }
    false
}

/// Fraction of agents involved in at least one disk-disk overlap. Each entry
/// of `positions` is one agent's track on the shared clock (`None` = absent).
pub fn disk_agent_collisions(positions: &[Vec<Option<[f64; 2]>>], radii: &[f64]) -> f64 {
    let n = positions.len();
    if n == 0 {
        return 0.0;
    }
    let mut hit = vec![false; n];
    let steps = positions.iter().map(|p| p.len()).max().unwrap_or(0);
    for i in 0..n {
        for j in i + 1..n {
            let lim = radii[i] + radii[j];
            for t in 0..steps {
                let (Some(Some(a)), Some(Some(b))) = (positions[i].get(t), positions[j].get(t)) else {
                    continue;
                };
                let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
                if (dx * dx + dy * dy).sqrt() < lim {
                    hit[i] = true;
                    hit[j] = true;
                    break;
                }
            }
        }
    }
    hit.iter().filter(|&&h| h).count() as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn unit_square_scene() -> (Bounds, Vec<Obstacle>) {
        (Bounds::square(10.0), vec![Obstacle::aabb([2.0, 3.0], [3.0, 4.0]).unwrap()])
    }

    #[test]
    fn empty_scene_has_no_obstacle_pixels() {
        let m = rasterize_scene(&Bounds::square(5.0), &[], 4.0);
        assert!(m.channel(OBSTACLE).iter().all(|&b| b == 0));
        assert!(m.channel(WALKABLE).iter().all(|&b| b == 1));
    }

    #[test]
    fn unit_square_is_ten_by_ten_block() {
        let (b, obs) = unit_square_scene();
        let m = rasterize_scene(&b, &obs, 10.0);
        let mut count = 0;
        for r in 0..m.height {
            for c in 0..m.width {
                let on = m.get(OBSTACLE, r, c) == 1;
                let expect = (30..40).contains(&r) && (20..30).contains(&c);
                assert_eq!(on, expect, "pixel {r},{c}");
                count += on as usize;
                assert!(!(on && m.get(WALKABLE, r, c) == 1));
            }
        }
        assert_eq!(count, 100);
    }

    #[test]
    fn raster_agrees_with_point_in_polygon() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let b = Bounds::square(15.0);
        let obs: Vec<Obstacle> = (0..8)
            .map(|_| {
                Obstacle::rect(
                    [rng.random_range(1.0..14.0), rng.random_range(1.0..14.0)],
                    [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)],
                    rng.random_range(0.0..3.0),
                )
                .unwrap()
            })
            .collect();
        let m = rasterize_scene(&b, &obs, 10.0);
        let mut agree = 0;
        let n = 10_000;
        for _ in 0..n {
            let (r, c) = (rng.random_range(0..m.height), rng.random_range(0..m.width));
            let p = m.pixel_center(r, c);
            let oracle = obs.iter().any(|o| o.contains(p));
            agree += ((m.get(OBSTACLE, r, c) == 1) == oracle) as usize;
        }
        assert!(agree as f64 / n as f64 >= 0.999);
    }

    #[test]
    fn raster_export_roundtrip() {
        let (b, obs) = unit_square_scene();
        let m = rasterize_scene(&b, &obs, 3.0);
        let mut buf = Vec::new();
        m.export(&mut buf).unwrap();
        assert_eq!(SemanticMap::import(&buf[..]).unwrap(), m);
    }

    #[test]
    fn centered_crop_is_sub_block() {
        // 16 m map at 4 px/m; crop the full region centered on the ego.
        let b = Bounds::square(16.0);
        let obs = vec![Obstacle::aabb([5.0, 9.0], [7.0, 10.0]).unwrap()];
        let m = rasterize_scene(&b, &obs, 4.0);
        let spec = CropSpec {
            pixels: 64,
            front: 8.0,
            back: 8.0,
            side: 8.0,
        };
        let crop = crop_local_map(&m, Pose::new(8.0, 8.0, 0.0), &spec);
        for r in 0..64 {
            for c in 0..64 {
                for ch in 0..2 {
                    assert_eq!(crop.get(ch, r, c), m.get(ch, r, c));
                }
            }
        }
    }

    #[test]
    fn rotated_crop_on_symmetric_content() {
        // Cross-shaped content is symmetric under 90° rotations about the ego.
        let b = Bounds::square(16.0);
        let obs = vec![
            Obstacle::aabb([7.5, 1.0], [8.5, 4.0]).unwrap(),
            Obstacle::aabb([7.5, 12.0], [8.5, 15.0]).unwrap(),
            Obstacle::aabb([1.0, 7.5], [4.0, 8.5]).unwrap(),
            Obstacle::aabb([12.0, 7.5], [15.0, 8.5]).unwrap(),
        ];
        let m = rasterize_scene(&b, &obs, 4.0);
        let spec = CropSpec {
            pixels: 32,
            front: 8.0,
            back: 8.0,
            side: 8.0,
        };
        let a = crop_local_map(&m, Pose::new(8.0, 8.0, 0.0), &spec);
        let r = crop_local_map(&m, Pose::new(8.0, 8.0, std::f64::consts::FRAC_PI_2), &spec);
        assert_eq!(a.bits, r.bits);
    }

    #[test]
    fn crop_matches_world_lookup() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let b = Bounds::square(15.0);
        let obs = vec![Obstacle::rect([6.0, 7.0], [3.0, 1.0], 0.4).unwrap()];
        let m = rasterize_scene(&b, &obs, 10.0);
        let spec = CropSpec::default();
        for _ in 0..5 {
            let pose = Pose::new(rng.random_range(0.0..15.0), rng.random_range(0.0..15.0), rng.random_range(-3.0..3.0));
            let crop = crop_local_map(&m, pose, &spec);
            for r in 0..spec.pixels {
                for c in 0..spec.pixels {
                    let w = pose.to_global_point(spec.pixel_local(r, c));
                    for ch in 0..2 {
                        assert_eq!(crop.get(ch, r, c), m.lookup(ch, w));
                    }
                }
            }
        }
    }

    #[test]
    fn crop_is_translation_equivariant() {
        let spec = CropSpec::default();
        let obs = vec![Obstacle::rect([6.0, 7.0], [3.0, 1.0], 0.4).unwrap()];
        let m = rasterize_scene(&Bounds::square(15.0), &obs, 4.0);
        let off = [2.5, -1.25];
        let shifted: Vec<Obstacle> = obs
            .iter()
            .map(|o| Obstacle::polygon(o.vertices().iter().map(|v| [v[0] + off[0], v[1] + off[1]]).collect()).unwrap())
            .collect();
        let b2 = Bounds::new([off[0], off[1]], [15.0 + off[0], 15.0 + off[1]]).unwrap();
        let m2 = rasterize_scene(&b2, &shifted, 4.0);
        let pose = Pose::new(5.0, 6.0, 0.0);
        let a = crop_local_map(&m, pose, &spec);
        let b = crop_local_map(&m2, Pose::new(5.0 + off[0], 6.0 + off[1], 0.0), &spec);
        assert_eq!(a.bits, b.bits);
    }

    #[test]
    fn out_of_map_crop_is_zero() {
        let m = rasterize_scene(&Bounds::square(5.0), &[], 4.0);
        let crop = crop_local_map(&m, Pose::new(100.0, 100.0, 0.0), &CropSpec::default());
        assert!(crop.bits.iter().all(|&b| b == 0));
    }

    #[test]
    fn obstacle_collision_cases() {
        let (b, obs) = unit_square_scene();
        let m = rasterize_scene(&b, &obs, 10.0);
        let free: Vec<[f64; 2]> = (0..10).map(|i| [6.0 + i as f64 * 0.1, 6.0]).collect();
        assert_eq!(disk_obstacle_collision(&free, &m, 0.4).fraction, 0.0);
        let inside = vec![[2.5, 3.5]; 10];
        assert_eq!(disk_obstacle_collision(&inside, &m, 0.4).fraction, 1.0);
        // Nearest obstacle pixel centers sit at x = 2.95; pass just beyond radius.
        let eps = 1e-6;
        let tangent: Vec<[f64; 2]> = (0..10).map(|i| [2.95 + 0.4 + eps, 3.0 + i as f64 * 0.1]).collect();
        assert_eq!(disk_obstacle_collision(&tangent, &m, 0.4).fraction, 0.0);
        let touching: Vec<[f64; 2]> = vec![[2.95 + 0.4 - eps, 3.45]];
        assert_eq!(disk_obstacle_collision(&touching, &m, 0.4).fraction, 1.0);
    }

    #[test]
    fn obstacle_collision_monotone_in_radius() {
        let (b, obs) = unit_square_scene();
        let m = rasterize_scene(&b, &obs, 10.0);
        let path: Vec<[f64; 2]> = (0..40).map(|i| [0.5 + i as f64 * 0.2, 4.6]).collect();
        let mut last = 0.0;
        for r in [0.1, 0.3, 0.5, 0.8, 1.2] {
            let f = disk_obstacle_collision(&path, &m, r).fraction;
            assert!(f >= last && (0.0..=1.0).contains(&f));
            last = f;
        }
    }

    #[test]
    fn agent_collision_cases() {
        let a: Vec<Option<[f64; 2]>> = (0..10).map(|i| Some([i as f64 * 0.2, 0.0])).collect();
        let b: Vec<Option<[f64; 2]>> = (0..10).map(|i| Some([1.8 - i as f64 * 0.2, 0.0])).collect();
        assert_eq!(disk_agent_collisions(&[a.clone(), b], &[0.4, 0.4]), 1.0);
        let c: Vec<Option<[f64; 2]>> = (0..10).map(|i| Some([i as f64 * 0.2, 5.0])).collect();
        assert_eq!(disk_agent_collisions(&[a, c], &[0.4, 0.4]), 0.0);
    }

    #[test]
    fn agent_collisions_match_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..7);
            let t = 15;
            let tracks: Vec<Vec<Option<[f64; 2]>>> = (0..n)
                .map(|_| {
                    let mut p = [rng.random_range(0.0..6.0), rng.random_range(0.0..6.0)];
                    (0..t)
                        .map(|_| {
                            p[0] += rng.random_range(-0.3..0.3);
                            p[1] += rng.random_range(-0.3..0.3);
                            Some(p)
                        })
                        .collect()
                })
                .collect();
            let radii = vec![0.4; n];
            let mut involved = vec![false; n];
            for s in 0..t {
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let (a, b) = (tracks[i][s].unwrap(), tracks[j][s].unwrap());
                        if ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() < 0.8 {
                            involved[i] = true;
                        }
                    }
                }
            }
            let oracle = involved.iter().filter(|&&v| v).count() as f64 / n as f64;
            assert_eq!(disk_agent_collisions(&tracks, &radii), oracle);
        }
    }

    #[test]
    fn degenerate_obstacle_rejected() {
        assert!(Obstacle::polygon(vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());
        assert!(Obstacle::aabb([0.0, 0.0], [0.0, 1.0]).is_err());
    }

    #[test]
    fn scene_json_roundtrip() {
        let scene = Scene {
            dt: 0.1,
            bounds: Bounds::square(15.0),
            obstacles: vec![Obstacle::aabb([1.0, 1.0], [2.0, 3.0]).unwrap()],
            agents: vec![AgentTrack {
                id: 7,
                diameter: 0.8,
                goal: Some([3.0, 4.0]),
                pref_speed: None,
                states: vec![None, Some(AgentState::new(1.0, 2.0, 0.5, 1.1)), Some(AgentState::new(1.1, 2.0, 0.5, 1.1))],
            }],
            now: 1,
        };
        let s = serde_json::to_string(&scene).unwrap();
        let back: Scene = serde_json::from_str(&s).unwrap();
        assert_eq!(back, scene);
    }
}
