//! Central-difference gradient cases shared by the autodiff tests and the
//! acceptance suite. Each case returns `(name, max relative error)` rows.

use super::{fd_check, rand_tensor};
use crowdiff::tensor::{Tape, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Rows = Vec<(String, f64)>;

/// Contract every output against fixed random weights so that all output
/// elements contribute to the scalar.
pub fn contract(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(&shape, seed, 1.0));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

pub fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> (String, f64) {
    let err = fd_check(inputs, H, |t, v| {
        let y = f(t, v);
        contract(t, y, 999)
    });
    (name.to_string(), err)
}

pub fn assert_rows(rows: Rows) {
    for (name, err) in rows {
        assert!(err < TOL, "{name}: max relative error {err:e}");
    }
}

pub fn dense() -> Rows {
    let ins = [rand_tensor(&[3, 4], 1, 1.0), rand_tensor(&[4, 5], 2, 0.5), rand_tensor(&[5], 3, 0.1)];
    vec![check("dense", &ins, |t, v| t.dense(v[0], v[1], Some(v[2])).unwrap())]
}

pub fn conv() -> Rows {
    let ins = [rand_tensor(&[2, 3, 9], 4, 1.0), rand_tensor(&[4, 3, 3], 5, 0.5), rand_tensor(&[4], 6, 0.1)];
    let ins2 = [rand_tensor(&[2, 2, 6, 6], 7, 1.0), rand_tensor(&[3, 2, 3, 3], 8, 0.5), rand_tensor(&[3], 9, 0.1)];
    vec![
        check("conv1d s1", &ins, |t, v| t.conv1d(v[0], v[1], Some(v[2]), 1, 1).unwrap()),
        check("conv1d s2", &ins, |t, v| t.conv1d(v[0], v[1], Some(v[2]), 2, 1).unwrap()),
        check("conv2d s1", &ins2, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap()),
        check("conv2d s2", &ins2, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap()),
    ]
}

pub fn upsample() -> Rows {
    vec![
        check("upsample1d", &[rand_tensor(&[2, 3, 4], 10, 1.0)], |t, v| t.upsample1d(v[0]).unwrap()),
        check("upsample2d", &[rand_tensor(&[1, 2, 3, 3], 11, 1.0)], |t, v| t.upsample2d(v[0]).unwrap()),
    ]
}

pub fn pointwise() -> Rows {
    // keep away from the relu kink and sqrt's origin
    let x = rand_tensor(&[4, 5], 12, 1.0).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let pos = x.map(|v| v.abs() + 0.1);
    let one = |x: &Tensor| [x.clone()];
    vec![
        check("relu", &one(&x), |t, v| t.relu(v[0]).unwrap()),
        check("silu", &one(&x), |t, v| t.silu(v[0]).unwrap()),
        check("softmax", &one(&x), |t, v| t.softmax(v[0]).unwrap()),
        check("exp", &one(&x), |t, v| t.exp(v[0]).unwrap()),
        check("sin", &one(&x), |t, v| t.sin(v[0]).unwrap()),
        check("cos", &one(&x), |t, v| t.cos(v[0]).unwrap()),
        check("square", &one(&x), |t, v| t.square(v[0]).unwrap()),
        check("scale", &one(&x), |t, v| t.scale(v[0], -1.7).unwrap()),
        check("shift", &one(&x), |t, v| t.shift(v[0], 0.3).unwrap()),
        check("norm_last", &one(&x), |t, v| t.norm_last(v[0]).unwrap()),
        check("sqrt", &one(&pos), |t, v| t.sqrt(v[0]).unwrap()),
    ]
}

pub fn broadcast() -> Rows {
    let a = rand_tensor(&[2, 3, 4], 13, 1.0);
    let b = rand_tensor(&[3, 1], 14, 1.0);
    let c = rand_tensor(&[2, 3, 4], 15, 1.0);
    vec![
        check("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap()),
        check("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap()),
        check("mul", &[a.clone(), b], |t, v| t.mul(v[0], v[1]).unwrap()),
        check("mul same", &[a, c], |t, v| t.mul(v[0], v[1]).unwrap()),
    ]
}

pub fn structural() -> Rows {
    let a = rand_tensor(&[2, 3, 4], 16, 1.0);
    let b = rand_tensor(&[2, 2, 4], 17, 1.0);
    let one = [a.clone()];
    vec![
        check("concat", &[a, b], |t, v| t.concat(&[v[0], v[1]], 1).unwrap()),
        check("slice", &one, |t, v| t.slice(v[0], 2, 1, 3).unwrap()),
        check("reshape", &one, |t, v| t.reshape(v[0], &[6, 4]).unwrap()),
        check("transpose", &one, |t, v| t.transpose(v[0], 1, 2).unwrap()),
        check("sum_axis", &one, |t, v| t.sum_axis(v[0], 1).unwrap()),
        check("max_reduce", &one, |t, v| t.max_reduce(v[0], 1).unwrap()),
        check("gather", &one, |t, v| t.gather(v[0], vec![1, 0, 1]).unwrap()),
        check("sum", &one, |t, v| t.sum(v[0]).unwrap()),
        check("mean", &one, |t, v| t.mean(v[0]).unwrap()),
    ]
}

pub fn grid_sample() -> Rows {
    let grid = rand_tensor(&[2, 3, 5, 6], 18, 1.0);
    // interior, non-integer coordinates
    let coords = Tensor::from_slice(&[2, 3, 2], &[0.3, 0.7, 2.4, 3.1, 4.6, 1.2, 1.5, 2.5, 3.9, 0.2, 0.1, 3.8]).unwrap();
    vec![check("grid_sample (grid and coordinates)", &[grid, coords], |t, v| t.grid_sample(v[0], v[1]).unwrap())]
}

pub fn mlp() -> Rows {
    let ins = [
        rand_tensor(&[4, 6], 20, 1.0),
        rand_tensor(&[6, 8], 21, 0.5),
        rand_tensor(&[8], 22, 0.1),
        rand_tensor(&[8, 8], 23, 0.4),
        rand_tensor(&[8], 24, 0.1),
        rand_tensor(&[8, 3], 25, 0.4),
        rand_tensor(&[3], 26, 0.1),
    ];
    vec![check("three-layer network", &ins, |t, v| {
        let h1 = t.dense(v[0], v[1], Some(v[2])).unwrap();
        let h1 = t.silu(h1).unwrap();
        let h2 = t.dense(h1, v[3], Some(v[4])).unwrap();
        let h2 = t.silu(h2).unwrap();
        let y = t.dense(h2, v[5], Some(v[6])).unwrap();
        t.softmax(y).unwrap()
    })]
}

pub fn unicycle() -> Rows {
    use crowdiff::dynamics::Unicycle;
    let m = Unicycle::new(0.1).unwrap();
    // speeds stay inside (0, v_max) so the clamp is inactive
    let init = Tensor::from_slice(&[2, 4], &[0.1, -0.3, 0.4, 1.2, 1.0, 2.0, -2.0, 0.8]).unwrap();
    let acts = rand_tensor(&[2, 7, 2], 50, 0.5);
    vec![check("unicycle rollout", &[init, acts], |t, v| m.rollout_on_tape(t, v[0], v[1]).unwrap())]
}

pub fn denoiser() -> Rows {
    use crowdiff::denoiser::{Conditioning, Denoiser, DenoiserConfig, NormStats, HIST_DIM};
    use crowdiff::world::CropSpec;
    let cfg = DenoiserConfig {
        t_f: 4,
        t_p: 2,
        max_neighbors: 2,
        crop: CropSpec {
            pixels: 16,
            ..CropSpec::default()
        },
        map_widths: [3, 4, 4],
        grid_features: 3,
        hidden: 6,
        context_dim: 5,
        step_dim: 4,
        unet_widths: vec![4, 6],
        kernel: 3,
        ..DenoiserConfig::default()
    };
    let net = Denoiser::new(cfg.clone(), 3).unwrap();
    let steps = cfg.t_p + 1;
    let mut nb = rand_tensor(&[2, steps, HIST_DIM], 60, 1.0);
    nb.data_mut()[(steps - 1) * HIST_DIM + 7] = 1.0;
    let crop = rand_tensor(&[2, 16, 16], 61, 1.0).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let cond = Conditioning {
        ego: rand_tensor(&[steps, HIST_DIM], 62, 1.0),
        neighbors: nb,
        crop,
        map_dropped: false,
        neighbors_dropped: false,
    };
    let tracked = ["map.e1.w", "nb.l1.b", "ego.l2.w", "step.l1.w", "unet.enc0.c1.w", "unet.out.w"];
    let idx: Vec<usize> = tracked.iter().map(|n| net.params().iter().position(|(m, _)| m == n).unwrap()).collect();
    let acts = rand_tensor(&[1, 4, 2], 63, 1.0);
    let states = rand_tensor(&[1, 4, 4], 64, 1.5);
    let mut inputs = vec![acts, states];
    inputs.extend(idx.iter().map(|&i| net.params()[i].1.clone()));
    let norm = NormStats::default();
    vec![check("full denoiser", &inputs, |t, v| {
        let mut p = net.bind(t, false);
        for (j, &i) in idx.iter().enumerate() {
            p[i] = v[2 + j];
        }
        let enc = net.encode_conditioning(t, &p, &[&cond]).unwrap();
        let st = net.embed_step(t, &p, &[3], 10).unwrap();
        net.predict_clean(t, &p, v[0], v[1], st, &enc, &norm).unwrap()
    })]
}

/// `[M, T, 4]` trajectory walking along +x from `start`, with a wobble.
fn walk(m: usize, t: usize, start: [f64; 2], seed: u64) -> Tensor {
    let noise = rand_tensor(&[m, t, 4], seed, 0.05);
    let mut d = Vec::with_capacity(m * t * 4);
    for s in 0..m {
        for k in 0..t {
            let n = &noise.data()[(s * t + k) * 4..(s * t + k) * 4 + 4];
            d.extend([start[0] + 0.12 * (k + 1) as f64 + n[0], start[1] + 0.05 * s as f64 + n[1], n[2], 1.2 + n[3]]);
        }
    }
    Tensor::new(vec![m, t, 4], d).unwrap()
}

pub fn guidance_losses() -> Rows {
    use crowdiff::guidance::*;
    let a = walk(2, 6, [0.0, 0.0], 70);
    let b = walk(2, 6, [0.3, 0.35], 71);
    let c = walk(2, 6, [5.0, 0.0], 72);
    let goal = [1.0, 0.8];
    let spec = SocialGroupSpec {
        members: vec![0, 1, 2],
        leader: 0,
        distance: 1.0,
        cohesion: 0.0,
    };
    let scorer = SmoothnessScorer { weight: 0.05, dt: 0.1 };
    vec![
        check("agent avoid", &[a.clone(), b.clone(), c.clone()], |t, v| loss_agent_avoid(t, v, &[0.3, 0.3, 0.3], 0.2).unwrap()),
        check("waypoint local, specific step", &[a.clone()], |t, v| loss_waypoint_local_specific(t, v[0], goal, 4).unwrap()),
        check("waypoint local, any step", &[a.clone()], |t, v| loss_waypoint_local_any(t, v[0], goal, false).unwrap()),
        check("waypoint global, specific step", &[a.clone()], |t, v| {
            loss_waypoint_global_specific(t, v[0], [9.0, 2.0], 40, 0.7, 1.25, 0.1).unwrap()
        }),
        check("waypoint global, any step", &[a.clone()], |t, v| {
            loss_waypoint_global_any(t, v[0], [0.0, 0.0], [9.0, 2.0], 0.7, 1.25, 0.1, false).unwrap()
        }),
        // the leader is gradient-stopped, so only followers are checked
        check("social group", &[b.clone(), c.clone()], |t, v| {
            let leader = t.constant(a.clone());
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            loss_social_group(t, &[leader, v[0], v[1]], &[[0.0, 0.0], [0.3, 0.35], [5.0, 0.0]], &spec, &mut rng).unwrap()
        }),
        check("value", &[a], |t, v| loss_value(t, v[0], &scorer).unwrap()),
    ]
}

pub const ALL: &[(&str, fn() -> Rows)] = &[
    ("dense", dense),
    ("conv", conv),
    ("upsample", upsample),
    ("pointwise", pointwise),
    ("broadcast", broadcast),
    ("structural", structural),
    ("grid_sample", grid_sample),
    ("mlp", mlp),
    ("unicycle", unicycle),
    ("denoiser", denoiser),
    ("guidance", guidance_losses),
];
