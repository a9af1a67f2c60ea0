//! Conditional denoising network.
//!
//! Conditioning: flattened ego history through an MLP, neighbor histories
//! through a shared MLP and a masked max-pool, both fused into a context
//! vector; the local map crop goes through a small strided conv encoder and an
//! upsampling decoder with skips to produce a feature grid in the ego frame.
//!
//! Denoising: a 1D temporal U-Net over `[states; actions; grid features]`
//! where grid features are bilinear lookups at the trajectory positions. Every
//! residual block adds a projection of `[context; step feature]`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::TrainingWindow;
use crate::dynamics::HistoryState;
use crate::tensor::{self, Tape, Tensor, TensorError, Var};
use crate::world::{CropSpec, MapCrop};

pub const HIST_DIM: usize = 8;
/// Offset added to absent neighbor features before the max-pool.
const ABSENT_BIAS: f64 = -1.0e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Future horizon (steps).
    pub t_f: usize,
    /// History length; inputs carry `t_p + 1` steps.
    pub t_p: usize,
    pub max_neighbors: usize,
    pub map_channels: usize,
    pub crop: CropSpec,
    /// Channels of the three map encoder stages.
    pub map_widths: [usize; 3],
    /// Feature channels of the map grid.
    pub grid_features: usize,
    /// Hidden width of the history MLPs.
    pub hidden: usize,
    pub context_dim: usize,
    pub step_dim: usize,
    /// Channel width per U-Net level; each level past the first halves the
    /// temporal resolution.
    pub unet_widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for DenoiserConfig {
    /// Desk-scale network of roughly 200k parameters.
    fn default() -> Self {
        Self {
            t_f: 20,
            t_p: 10,
            max_neighbors: 8,
            map_channels: 2,
            crop: CropSpec {
                pixels: 32,
                ..CropSpec::default()
            },
            map_widths: [16, 32, 32],
            grid_features: 16,
            hidden: 64,
            context_dim: 64,
            step_dim: 16,
            unet_widths: vec![16, 32, 64],
            kernel: 5,
        }
    }
}

impl DenoiserConfig {
    /// Same as the default; kept for readability at call sites.
    pub fn toy() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |msg: String| Err(TensorError::Invalid { op: "denoiser config", msg });
        let levels = self.unet_widths.len();
        if levels == 0 {
            return bad("at least one U-Net level required".into());
        }
        let div = 1usize << (levels - 1);
        if self.t_f == 0 || self.t_f % div != 0 {
            return bad(format!("horizon {} not divisible by {div} ({levels} levels)", self.t_f));
        }
        if self.crop.pixels == 0 || self.crop.pixels % 16 != 0 {
            return bad(format!("crop size {} must be a multiple of 16", self.crop.pixels));
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd".into());
        }
        if self.step_dim < 2 || self.step_dim % 2 != 0 {
            return bad("step_dim must be even".into());
        }
        if [self.hidden, self.context_dim, self.grid_features, self.map_channels].contains(&0) || self.map_widths.contains(&0) {
            return bad("zero width".into());
        }
        Ok(())
    }

    /// Side of the square feature grid.
    pub fn grid_size(&self) -> usize {
        self.crop.pixels / 4
    }

    fn cond_dim(&self) -> usize {
        self.context_dim + self.step_dim
    }
}

/// Dataset statistics used to standardize network inputs and the diffusion
/// space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Divides local positions.
    pub pos_scale: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    pub action_mean: [f64; 2],
    pub action_std: [f64; 2],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            pos_scale: 5.0,
            speed_mean: 1.0,
            speed_std: 0.5,
            action_mean: [0.0, 0.0],
            action_std: [1.0, 1.0],
        }
    }
}

impl NormStats {
    pub fn from_windows(windows: &[TrainingWindow]) -> Self {
        let mut acts = [Vec::new(), Vec::new()];
        let mut speeds = Vec::new();
        let mut reach: f64 = 0.0;
        for w in windows {
            for a in &w.future_actions {
                acts[0].push(a.accel);
                acts[1].push(a.yaw_rate);
            }
            for s in &w.future_states {
                speeds.push(s.v);
                reach = reach.max(s.x.abs()).max(s.y.abs());
            }
        }
        let stats = |v: &[f64]| -> (f64, f64) {
            if v.is_empty() {
                return (0.0, 1.0);
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
            (m, var.sqrt().max(1e-3))
        };
        let (a0, s0) = stats(&acts[0]);
        let (a1, s1) = stats(&acts[1]);
        let (vm, vs) = stats(&speeds);
        Self {
            pos_scale: reach.max(1.0),
            speed_mean: vm,
            speed_std: vs,
            action_mean: [a0, a1],
            action_std: [s0, s1],
        }
    }

    /// Standardized history row; absent rows stay zero.
    pub fn history_row(&self, h: &HistoryState) -> [f64; 8] {
        if !h.is_present() {
            return [0.0; 8];
        }
        [
            h.x / self.pos_scale,
            h.y / self.pos_scale,
            h.hx,
            h.hy,
            (h.v - self.speed_mean) / self.speed_std,
            h.l,
            h.w,
            1.0,
        ]
    }

    /// Per-channel scale and offset mapping `(x, y, θ, v)` to network inputs.
    pub fn state_affine(&self) -> ([f64; 4], [f64; 4]) {
        (
            [1.0 / self.pos_scale, 1.0 / self.pos_scale, 1.0 / PI, 1.0 / self.speed_std],
            [0.0, 0.0, 0.0, -self.speed_mean / self.speed_std],
        )
    }
}

/// Everything the network is conditioned on for one ego agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// `[t_p + 1, 8]`, standardized.
    pub ego: Tensor,
    /// `[max_neighbors, t_p + 1, 8]`, standardized.
    pub neighbors: Tensor,
    /// `[channels, pixels, pixels]`.
    pub crop: Tensor,
    pub map_dropped: bool,
    pub neighbors_dropped: bool,
}

impl Conditioning {
    pub fn from_window(w: &TrainingWindow, norm: &NormStats) -> Self {
        Self::from_parts(&w.ego_history, &w.neighbors, &w.crop, norm)
    }

    pub fn from_parts(ego: &[HistoryState], neighbors: &[Vec<HistoryState>], crop: &MapCrop, norm: &NormStats) -> Self {
        let rows = |h: &[HistoryState]| h.iter().flat_map(|r| norm.history_row(r)).collect::<Vec<_>>();
        let steps = ego.len();
        let nb: Vec<f64> = neighbors.iter().flat_map(|n| rows(n)).collect();
        Self {
            ego: Tensor::new(vec![steps, HIST_DIM], rows(ego)).expect("ego history"),
            neighbors: Tensor::new(vec![neighbors.len(), steps, HIST_DIM], nb).expect("neighbor histories"),
            crop: crop.to_tensor(),
            map_dropped: false,
            neighbors_dropped: false,
        }
    }

    /// Neighbors observed at the current step.
    pub fn neighbor_present(&self) -> Vec<bool> {
        let s = self.neighbors.shape();
        let (n, steps) = (s[0], s[1]);
        let d = self.neighbors.data();
        (0..n).map(|i| d[(i * steps + steps - 1) * HIST_DIM + 7] > 0.5).collect()
    }

    /// Unconditional counterpart: map and neighbors dropped, ego kept.
    pub fn dropped_all(&self) -> Self {
        let mut c = self.clone();
        c.drop_map();
        c.neighbors_dropped = true;
        c
    }

    fn drop_map(&mut self) {
        let s = self.crop.shape().to_vec();
        self.crop = MapCrop::null_tensor(s[0], s[1]);
        self.map_dropped = true;
    }
}

/// Independently drops the map and the neighbor set with probability `p`.
/// The ego history is never dropped.
pub fn drop_conditioning<R: Rng + ?Sized>(cond: &Conditioning, rng: &mut R, p: f64) -> Conditioning {
    let p = p.clamp(0.0, 1.0);
    let mut c = cond.clone();
    if rng.random_bool(p) {
        c.drop_map();
    }
    if rng.random_bool(p) {
        c.neighbors_dropped = true;
    }
    c
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    c1: Lin,
    c2: Lin,
    proj: Lin,
    skip: Option<Lin>,
}

#[derive(Clone, Debug)]
struct Arch {
    step: [Lin; 2],
    ego: [Lin; 2],
    nb: [Lin; 2],
    fuse: [Lin; 2],
    map_enc: [Lin; 3],
    map_dec: [Lin; 2],
    enc: Vec<Block>,
    down: Vec<Lin>,
    mid: Block,
    dec: Vec<Block>,
    out: Lin,
}

struct Builder<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
    params: Vec<(String, Tensor)>,
}

impl Builder<'_> {
    fn lin(&mut self, name: &str, w_shape: &[usize], fan_in: usize, out: usize) -> Lin {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = match self.rng.as_deref_mut() {
            Some(r) => Tensor::randn(w_shape, std, r),
            None => Tensor::zeros(w_shape),
        };
        self.params.push((format!("{name}.w"), w));
        self.params.push((format!("{name}.b"), Tensor::zeros(&[out])));
        Lin {
            w: self.params.len() - 2,
            b: self.params.len() - 1,
        }
    }

    fn dense(&mut self, name: &str, i: usize, o: usize) -> Lin {
        self.lin(name, &[i, o], i, o)
    }

    fn conv1(&mut self, name: &str, i: usize, o: usize, k: usize) -> Lin {
        self.lin(name, &[o, i, k], i * k, o)
    }

    fn conv2(&mut self, name: &str, i: usize, o: usize, k: usize) -> Lin {
        self.lin(name, &[o, i, k, k], i * k * k, o)
    }

    fn block(&mut self, name: &str, i: usize, o: usize, k: usize, cond: usize) -> Block {
        Block {
            c1: self.conv1(&format!("{name}.c1"), i, o, k),
            c2: self.conv1(&format!("{name}.c2"), o, o, k),
            proj: self.dense(&format!("{name}.proj"), cond, o),
            skip: (i != o).then(|| self.conv1(&format!("{name}.skip"), i, o, 1)),
        }
    }
}

fn build(cfg: &DenoiserConfig, rng: Option<&mut ChaCha8Rng>) -> (Arch, Vec<(String, Tensor)>) {
    let mut b = Builder { rng, params: Vec::new() };
    let s = cfg.step_dim;
    let h = cfg.hidden;
    let hist = (cfg.t_p + 1) * HIST_DIM;
    let [m1, m2, m3] = cfg.map_widths;
    let k = cfg.kernel;
    let cd = cfg.cond_dim();
    let w = &cfg.unet_widths;
    let step = [b.dense("step.l1", s, 2 * s), b.dense("step.l2", 2 * s, s)];
    let ego = [b.dense("ego.l1", hist, h), b.dense("ego.l2", h, h)];
    let nb = [b.dense("nb.l1", hist, h), b.dense("nb.l2", h, h)];
    let fuse = [b.dense("fuse.l1", 2 * h, h), b.dense("fuse.l2", h, cfg.context_dim)];
    let map_enc = [
        b.conv2("map.e1", cfg.map_channels, m1, 4),
        b.conv2("map.e2", m1, m2, 3),
        b.conv2("map.e3", m2, m3, 3),
    ];
    let map_dec = [b.conv2("map.d2", m3 + m2, m2, 3), b.conv2("map.d1", m2 + m1, cfg.grid_features, 3)];
    let mut enc = Vec::new();
    let mut down = Vec::new();
    let mut cin = 6 + cfg.grid_features;
    for (l, &wl) in w.iter().enumerate() {
        enc.push(b.block(&format!("unet.enc{l}"), cin, wl, k, cd));
        if l + 1 < w.len() {
            down.push(b.conv1(&format!("unet.down{l}"), wl, wl, 3));
        }
        cin = wl;
    }
    let mid = b.block("unet.mid", cin, cin, k, cd);
    let mut dec = Vec::new();
    for l in (0..w.len() - 1).rev() {
        dec.push(b.block(&format!("unet.dec{l}"), cin + w[l], w[l], k, cd));
        cin = w[l];
    }
    let out = b.conv1("unet.out", cin, 2, 1);
    (
        Arch {
            step,
            ego,
            nb,
            fuse,
            map_enc,
            map_dec,
            enc,
            down,
            mid,
            dec,
            out,
        },
        b.params,
    )
}

/// The network: architecture config plus its parameters.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    arch: Arch,
    params: Vec<(String, Tensor)>,
}

/// Outputs of the conditioning encoders for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B, context_dim]`
    pub context: Var,
    /// `[B, grid_features, G, G]`
    pub grid: Var,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> tensor::Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (arch, params) = build(&config, Some(&mut rng));
        Ok(Self { config, arch, params })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(config: DenoiserConfig, params: Vec<(String, Tensor)>) -> tensor::Result<Self> {
        config.validate()?;
        let (arch, expected) = build(&config, None);
        if expected.len() != params.len() {
            return Err(TensorError::Checkpoint(format!("expected {} tensors, found {}", expected.len(), params.len())));
        }
        for ((en, et), (n, t)) in expected.iter().zip(&params) {
            if en != n || et.shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!("parameter {n} {:?} does not match {en} {:?}", t.shape(), et.shape())));
            }
        }
        Ok(Self { config, arch, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every parameter on the tape, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect()
    }

    fn dense(&self, tape: &mut Tape, p: &[Var], l: Lin, x: Var) -> tensor::Result<Var> {
        tape.dense(x, p[l.w], Some(p[l.b]))
    }

    fn mlp(&self, tape: &mut Tape, p: &[Var], ls: [Lin; 2], x: Var) -> tensor::Result<Var> {
        let h = self.dense(tape, p, ls[0], x)?;
        let h = tape.silu(h)?;
        self.dense(tape, p, ls[1], h)
    }

    /// Sinusoidal embedding of each step index followed by a 2-layer MLP;
    /// returns `[B, step_dim]`.
    pub fn embed_step(&self, tape: &mut Tape, p: &[Var], ks: &[usize], k_max: usize) -> tensor::Result<Var> {
        let d = self.config.step_dim;
        let half = d / 2;
        let mut data = Vec::with_capacity(ks.len() * d);
        for &k in ks {
            if k == 0 || k > k_max {
                return Err(TensorError::Invalid {
                    op: "embed_step",
                    msg: format!("step {k} outside 1..={k_max}"),
                });
            }
            let freqs: Vec<f64> = (0..half).map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp() * k as f64).collect();
            data.extend(freqs.iter().map(|f| f.sin()));
            data.extend(freqs.iter().map(|f| f.cos()));
        }
        let e = tape.constant(Tensor::new(vec![ks.len(), d], data)?);
        self.mlp(tape, p, self.arch.step, e)
    }

    /// Runs the history and map encoders for a batch of conditionings.
    pub fn encode_conditioning(&self, tape: &mut Tape, p: &[Var], conds: &[&Conditioning]) -> tensor::Result<Encoded> {
        let cfg = &self.config;
        let b = conds.len();
        let steps = cfg.t_p + 1;
        let n = cfg.max_neighbors;
        let hist = steps * HIST_DIM;
        let mut ego = Vec::with_capacity(b * hist);
        let mut nb = Vec::with_capacity(b * n * hist);
        let mut mask = Vec::with_capacity(b * n);
        let mut keep = Vec::with_capacity(b);
        let crop_len = cfg.map_channels * cfg.crop.pixels * cfg.crop.pixels;
        let mut crops = Vec::with_capacity(b * crop_len);
        for c in conds {
            if c.ego.shape() != [steps, HIST_DIM] || c.neighbors.shape() != [n, steps, HIST_DIM] || c.crop.len() != crop_len {
                return Err(tensor::TensorError::Shape {
                    op: "encode_conditioning",
                    shapes: format!("{:?} {:?} {:?}", c.ego.shape(), c.neighbors.shape(), c.crop.shape()),
                });
            }
            ego.extend_from_slice(c.ego.data());
            nb.extend_from_slice(c.neighbors.data());
            let present = c.neighbor_present();
            mask.extend(present.iter().map(|&q| if q { 0.0 } else { ABSENT_BIAS }));
            keep.push(if !c.neighbors_dropped && present.iter().any(|&q| q) { 1.0 } else { 0.0 });
            crops.extend_from_slice(c.crop.data());
        }
        let ego = tape.constant(Tensor::new(vec![b, hist], ego)?);
        let ego = self.mlp(tape, p, self.arch.ego, ego)?;
        let ego = tape.silu(ego)?;

        let nbv = tape.constant(Tensor::new(vec![b, n, hist], nb)?);
        let nbf = self.mlp(tape, p, self.arch.nb, nbv)?;
        let nbf = tape.silu(nbf)?;
        let mask = tape.constant(Tensor::new(vec![b, n, 1], mask)?);
        let nbf = tape.add(nbf, mask)?;
        let pooled = tape.max_reduce(nbf, 1)?;
        let keep = tape.constant(Tensor::new(vec![b, 1], keep)?);
        let pooled = tape.mul(pooled, keep)?;

        let joint = tape.concat(&[ego, pooled], 1)?;
        let context = self.mlp(tape, p, self.arch.fuse, joint)?;

        let px = cfg.crop.pixels;
        let x = tape.constant(Tensor::new(vec![b, cfg.map_channels, px, px], crops)?);
        let [e1, e2, e3] = self.arch.map_enc;
        let f1 = tape.conv2d(x, p[e1.w], Some(p[e1.b]), 4, 0)?;
        let f1 = tape.silu(f1)?;
        let f2 = tape.conv2d(f1, p[e2.w], Some(p[e2.b]), 2, 1)?;
        let f2 = tape.silu(f2)?;
        let f3 = tape.conv2d(f2, p[e3.w], Some(p[e3.b]), 2, 1)?;
        let f3 = tape.silu(f3)?;
        let [d2, d1] = self.arch.map_dec;
        let u = tape.upsample2d(f3)?;
        let u = tape.concat(&[u, f2], 1)?;
        let g2 = tape.conv2d(u, p[d2.w], Some(p[d2.b]), 1, 1)?;
        let g2 = tape.silu(g2)?;
        let u = tape.upsample2d(g2)?;
        let u = tape.concat(&[u, f1], 1)?;
        let grid = tape.conv2d(u, p[d1.w], Some(p[d1.b]), 1, 1)?;
        Ok(Encoded { context, grid })
    }

    fn block(&self, tape: &mut Tape, p: &[Var], blk: &Block, x: Var, cond: Var) -> tensor::Result<Var> {
        let pad = self.config.kernel / 2;
        let h = tape.conv1d(x, p[blk.c1.w], Some(p[blk.c1.b]), 1, pad)?;
        let h = tape.silu(h)?;
        let c = self.dense(tape, p, blk.proj, cond)?;
        let shape = tape.shape(c).to_vec();
        let c = tape.reshape(c, &[shape[0], shape[1], 1])?;
        let h = tape.add(h, c)?;
        let h = tape.conv1d(h, p[blk.c2.w], Some(p[blk.c2.b]), 1, pad)?;
        let h = tape.silu(h)?;
        let skip = match blk.skip {
            Some(s) => tape.conv1d(x, p[s.w], Some(p[s.b]), 1, 0)?,
            None => x,
        };
        tape.add(h, skip)
    }

    /// Clean-action prediction, normalized action space.
    ///
    /// `actions` is `[B, T, 2]` (normalized), `states` is `[B, T, 4]` in the
    /// ego frame (meters, radians); `step` is the output of
    /// [`Denoiser::embed_step`]. Returns `[B, T, 2]`.
    pub fn predict_clean(
        &self,
        tape: &mut Tape,
        p: &[Var],
        actions: Var,
        states: Var,
        step: Var,
        enc: &Encoded,
        norm: &NormStats,
    ) -> tensor::Result<Var> {
        let cfg = &self.config;
        let s = tape.shape(states).to_vec();
        if s.len() != 3 || s[1] != cfg.t_f || s[2] != 4 || tape.shape(actions) != [s[0], cfg.t_f, 2] {
            return Err(tensor::TensorError::Shape {
                op: "predict_clean",
                shapes: format!("{:?} {:?}", tape.shape(actions), s),
            });
        }
        let (scale, offset) = norm.state_affine();
        let sc = tape.constant(Tensor::from_slice(&[4], &scale)?);
        let of = tape.constant(Tensor::from_slice(&[4], &offset)?);
        let ns = tape.mul(states, sc)?;
        let ns = tape.add(ns, of)?;

        let g = cfg.grid_size() as f64;
        let c = cfg.crop;
        let pos = tape.slice(states, 2, 0, 2)?;
        let gs = tape.constant(Tensor::from_slice(&[2], &[g / (c.front + c.back), g / (2.0 * c.side)])?);
        let go = tape.constant(Tensor::from_slice(&[2], &[c.back * g / (c.front + c.back) - 0.5, c.side * g / (2.0 * c.side) - 0.5])?);
        let coords = tape.mul(pos, gs)?;
        let coords = tape.add(coords, go)?;
        let feats = tape.grid_sample(enc.grid, coords)?;

        let x = tape.concat(&[ns, actions, feats], 2)?;
        let mut h = tape.transpose(x, 1, 2)?;
        let cond = tape.concat(&[enc.context, step], 1)?;

        let mut skips = Vec::new();
        for (l, blk) in self.arch.enc.iter().enumerate() {
            h = self.block(tape, p, blk, h, cond)?;
            if let Some(d) = self.arch.down.get(l) {
                skips.push(h);
                h = tape.conv1d(h, p[d.w], Some(p[d.b]), 2, 1)?;
            }
        }
        h = self.block(tape, p, &self.arch.mid, h, cond)?;
        for blk in &self.arch.dec {
            let skip = skips.pop().expect("one skip per decoder level");
            let u = tape.upsample1d(h)?;
            let u = tape.concat(&[u, skip], 1)?;
            h = self.block(tape, p, blk, u, cond)?;
        }
        let out = tape.conv1d(h, p[self.arch.out.w], Some(p[self.arch.out.b]), 1, 0)?;
        tape.transpose(out, 1, 2)
    }
}
