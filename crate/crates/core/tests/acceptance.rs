//! End-to-end acceptance checks. Every criterion prints one `PASS`/`FAIL`
//! line straight to stderr (bypassing the test harness capture) and the test
//! fails if any criterion does. Criteria run in order inside one test so
//! wall-clock limits are not skewed by sibling tests sharing the CPU.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use common::grad;
use crowdiff::datagen::{audit_scene, context_at, extract_windows, simulate_scene, ScenarioConfig, WindowConfig};
use crowdiff::denoiser::{Conditioning, DenoiserConfig, NormStats};
use crowdiff::diffusion::{
    cosine_schedule, epsilon_from_x0, moving_average, posterior_mean, q_sample, sample_scene, train, x0_from_epsilon, Model, PlanAgent,
    SamplerConfig, SceneSamples, TrainConfig, TrainRecord,
};
use crowdiff::dynamics::{Action, AgentState, Unicycle};
use crowdiff::guidance::{
    loss_agent_avoid, loss_social_group, loss_waypoint_global_specific, loss_waypoint_local_any, loss_waypoint_local_specific,
    relaxed_goal_distance, GuidanceMode, GuidanceSpec, Objective, SocialGroupSpec,
};
use crowdiff::metrics::{ade_fde, emd_1d};
use crowdiff::rollout::{closed_loop_rollout, open_loop_eval, GuidanceTemplate, MetricsConfig, RolloutConfig, Task, Timing};
use crowdiff::tensor::{Tape, Tensor};
use crowdiff::world::rasterize_scene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn report(id: usize, title: &str, outcome: &Outcome) {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let _ = writeln!(std::io::stderr().lock(), "[{tag}] criterion {id:>2} {title}: {detail}");
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Trained {
    model: Model,
    records: Vec<TrainRecord>,
    windows: usize,
    secs: f64,
    data_speed: f64,
}

const TRAIN_SCENES: usize = 50;

fn window_config(cfg: &DenoiserConfig) -> WindowConfig {
    WindowConfig {
        t_p: cfg.t_p,
        t_f: cfg.t_f,
        stride: 10,
        max_neighbors: cfg.max_neighbors,
        resolution: 4.0,
        crop: cfg.crop,
    }
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let t0 = Instant::now();
        let scenario = ScenarioConfig::default();
        let cfg = DenoiserConfig::default();
        let wc = window_config(&cfg);
        let mut windows = Vec::new();
        for i in 0..TRAIN_SCENES {
            let scene = simulate_scene(&scenario, i).expect("scene");
            windows.extend(extract_windows(i, &scene, &wc).expect("windows"));
        }
        let speeds: Vec<f64> = windows.iter().flat_map(|w| w.future_states.iter().map(|s| s.v)).collect();
        let data_speed = speeds.iter().sum::<f64>() / speeds.len() as f64;
        let mut model = Model::new(cfg, NormStats::from_windows(&windows), 50, scenario.dt, 0).expect("model");
        let records = train(&mut model, &windows, &TrainConfig::default(), |_| {}).expect("train");
        Trained {
            model,
            records,
            windows: windows.len(),
            secs: t0.elapsed().as_secs_f64(),
            data_speed,
        }
    })
}

/// Plan agents for the first `n` agents present at `t` in held-out scene `index`.
fn plan_agents(model: &Model, index: usize, n: usize) -> (Vec<PlanAgent>, crowdiff::world::SemanticMap) {
    let scene = simulate_scene(&ScenarioConfig::default(), index).expect("scene");
    let cfg = model.net.config();
    let wc = window_config(cfg);
    let map = rasterize_scene(&scene.bounds, &scene.obstacles, wc.resolution);
    let t = cfg.t_p;
    let agents = scene
        .agents
        .iter()
        .filter_map(|a| {
            let ctx = context_at(&scene, a, t, &wc, &map)?;
            Some(PlanAgent {
                id: a.id,
                radius: a.radius(),
                pose: ctx.pose,
                speed: ctx.current.v,
                cond: Conditioning::from_parts(&ctx.ego_history, &ctx.neighbors, &ctx.crop, &model.norm),
            })
        })
        .take(n)
        .collect();
    (agents, map)
}

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut count = 0;
    for (group, case) in grad::ALL {
        for (name, err) in case() {
            count += 1;
            if err > worst.1 || !err.is_finite() {
                worst = (format!("{group}/{name}"), err);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(worst.1 < grad::TOL, || format!("{} has relative error {:e}", worst.0, worst.1))?;
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{count} cases, worst {:e} ({}), {secs:.1}s", worst.1, worst.0))
}

fn c2_schedule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // worst error per identity: eps roundtrip, x0 roundtrip, posterior mean, posterior variance, cosine shape
    let mut worst = [0.0f64; 5];
    let bump = |w: &mut f64, e: f64| *w = w.max(e);
    for steps in [10usize, 100, 1000] {
        let s = cosine_schedule(steps).map_err(|e| e.to_string())?;
        for k in 1..=steps {
            ensure(s.alpha_bar(k) < s.alpha_bar(k - 1), || format!("K={steps}: alpha_bar not decreasing at {k}"))?;
            // closed-form cosine value wherever the beta clip is inactive
            if s.beta(k) < 0.999 {
                let g = |u: f64| (((u + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                let want = g(k as f64 / steps as f64) / g(0.0);
                bump(&mut worst[4], (s.alpha_bar(k) - want).abs());
            }
            let x0: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
            let eps: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
            let (ab, ab_prev) = (s.alpha_bar(k), s.alpha_bar(k - 1));
            let xk = q_sample(&x0, k, &eps, &s);
            // errors are measured after scaling back into x_k units
            let e = epsilon_from_x0(&x0, &xk, k, &s);
            let x = x0_from_epsilon(&eps, &xk, k, &s);
            for i in 0..16 {
                bump(&mut worst[0], (e[i] - eps[i]).abs() * (1.0 - ab).sqrt());
                bump(&mut worst[1], (x[i] - x0[i]).abs() * ab.sqrt());
            }
            // Gaussian conditioning of x_{k-1} on (x_k, x0)
            let mu = posterior_mean(&x0, &xk, k, &s).map_err(|e| e.to_string())?;
            let cov = s.alpha(k).sqrt() * (1.0 - ab_prev);
            for i in 0..16 {
                let want = ab_prev.sqrt() * x0[i] + cov / (1.0 - ab) * (xk[i] - ab.sqrt() * x0[i]);
                bump(&mut worst[2], (mu[i] - want).abs());
            }
            let var = (1.0 - ab_prev) - cov * cov / (1.0 - ab);
            bump(&mut worst[3], (s.sigma(k) - var).abs());
        }
        if steps == 100 {
            ensure(s.alpha_bar(100) < 0.01, || format!("alpha_bar_100 = {}", s.alpha_bar(100)))?;
        }
    }
    let detail = format!(
        "K in {{10, 100, 1000}}, max errors eps {:.1e}, x0 {:.1e}, mean {:.1e}, var {:.1e}, cosine {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    );
    ensure(worst.iter().all(|&w| w <= 1e-12), || detail.clone())?;
    Ok(detail)
}

/// Straightforward single-pass sampler built from the public pieces.
fn reference_chain(model: &Model, agents: &[PlanAgent], m: usize, seed: u64, unconditional: bool) -> Vec<Vec<f64>> {
    let (b, t, steps) = (agents.len() * m, model.horizon(), model.schedule.steps());
    let owned: Vec<Conditioning> = agents
        .iter()
        .flat_map(|a| std::iter::repeat_n(if unconditional { a.cond.dropped_all() } else { a.cond.clone() }, m))
        .collect();
    let conds: Vec<&Conditioning> = owned.iter().collect();
    let init: Vec<f64> = agents.iter().flat_map(|a| std::iter::repeat_n([0.0, 0.0, 0.0, a.speed], m).flatten()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..b * t * 2).map(|_| rng.sample(StandardNormal)).collect();
    let mut chain = vec![x.clone()];
    for k in (1..=steps).rev() {
        let mut tape = Tape::new();
        let p = model.net.bind(&mut tape, false);
        let enc = model.net.encode_conditioning(&mut tape, &p, &conds).unwrap();
        let xk = tape.constant(Tensor::new(vec![b, t, 2], x.clone()).unwrap());
        let iv = tape.constant(Tensor::new(vec![b, 4], init.clone()).unwrap());
        let step = model.net.embed_step(&mut tape, &p, &vec![k; b], steps).unwrap();
        let x0 = model.predict_x0(&mut tape, &p, xk, iv, step, &enc).unwrap();
        let mu = posterior_mean(tape.value(x0).data(), &x, k, &model.schedule).unwrap();
        if k > 1 {
            let sd = model.schedule.sigma(k).sqrt();
            x = mu
                .iter()
                .map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + sd * z
                })
                .collect();
        } else {
            x = mu;
        }
        chain.push(x.clone());
    }
    chain
}

fn bitwise(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
}

fn sample_chain(model: &Model, agents: &[PlanAgent], map: &crowdiff::world::SemanticMap, w: f64, spec: Option<&GuidanceSpec>) -> SceneSamples {
    let cfg = SamplerConfig {
        samples: 3,
        w,
        seed: 11,
        record_chain: true,
    };
    sample_scene(model, agents, Some(map), &cfg, spec).expect("sample")
}

fn c3_single_pass() -> Outcome {
    let model = &trained().model;
    let (agents, map) = plan_agents(model, TRAIN_SCENES + 1, 2);
    ensure(agents.len() == 2, || "scene has fewer than two plannable agents".into())?;
    for (w, uncond) in [(0.0, false), (-1.0, true)] {
        let got = sample_chain(model, &agents, &map, w, None).chain;
        let want = reference_chain(model, &agents, 3, 11, uncond);
        ensure(bitwise(&got, &want), || format!("w={w}: chain differs from the single-pass reference"))?;
    }
    Ok("w=0 and w=-1 chains bitwise equal to single-pass references".into())
}

fn c4_dynamics() -> Outcome {
    let dyn_ = Unicycle::new(0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let s0 = AgentState::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0), rng.random_range(0.7..2.0));
        let acts: Vec<Action> = (0..20).map(|_| Action::new(rng.random_range(-0.3..0.3), rng.random_range(-2.0..2.0))).collect();
        let states = dyn_.rollout(s0, &acts).map_err(|e| e.to_string())?;
        // independent forward integration
        let mut s = s0.to_array();
        for (a, st) in acts.iter().zip(&states) {
            s[3] += a.accel * 0.1;
            s[2] += a.yaw_rate * 0.1;
            s[0] += s[3] * s[2].cos() * 0.1;
            s[1] += s[3] * s[2].sin() * 0.1;
            let dth = (st.theta - s[2] + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
            worst = worst.max((st.x - s[0]).abs()).max((st.y - s[1]).abs()).max(dth.abs()).max((st.v - s[3]).abs());
        }
        let back = dyn_.inverse(s0, &states).map_err(|e| e.to_string())?;
        for (a, b) in acts.iter().zip(&back) {
            worst = worst.max((a.accel - b.accel).abs()).max((a.yaw_rate - b.yaw_rate).abs());
        }
        let again = dyn_.rollout(s0, &back).map_err(|e| e.to_string())?;
        for (a, b) in states.iter().zip(&again) {
            worst = worst.max((a.x - b.x).abs()).max((a.y - b.y).abs()).max((a.v - b.v).abs());
        }
    }
    ensure(worst < 1e-9, || format!("max error {worst:e}"))?;
    Ok(format!("10^4 sequences, max error {worst:e}"))
}

fn c5_collision_free() -> Outcome {
    let t0 = Instant::now();
    let scenario = ScenarioConfig::default();
    let mut audit = crowdiff::datagen::CollisionAudit::default();
    for i in 0..500 {
        let scene = simulate_scene(&scenario, i).map_err(|e| e.to_string())?;
        audit = audit.merge(audit_scene(&scene, 10.0));
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(audit.is_clean(), || format!("{audit:?}"))?;
    ensure(secs < 300.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{} scenes, {} agents, no collisions, {secs:.1}s", audit.scenes, audit.agents))
}

fn c6_training() -> Outcome {
    let tr = trained();
    let n = tr.records.len();
    let early = moving_average(&tr.records, 10, 10);
    let late = moving_average(&tr.records, n, 10);
    let params = tr.model.net.param_count();
    ensure(tr.secs < 1800.0, || format!("training took {:.0}s", tr.secs))?;
    ensure(late < 0.3 * early, || format!("final MA {late:.4} vs step-10 MA {early:.4}"))?;
    let scenes: Vec<_> = (TRAIN_SCENES..TRAIN_SCENES + 10)
        .map(|i| simulate_scene(&ScenarioConfig::default(), i))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let cfg = RolloutConfig {
        sampler: SamplerConfig {
            samples: 5,
            ..SamplerConfig::default()
        },
        ..RolloutConfig::default()
    };
    let (r, _) = open_loop_eval(&tr.model, &scenes, &cfg, 1).map_err(|e| e.to_string())?;
    let ratio = r.metrics.mean_speed / tr.data_speed;
    ensure((0.7..=1.3).contains(&ratio), || format!("sampled speed {:.3} vs data {:.3}", r.metrics.mean_speed, tr.data_speed))?;
    Ok(format!(
        "{} windows, {params} params, {:.0}s, loss MA {early:.4} -> {late:.4} ({:.0}%), speed ratio {ratio:.3}",
        tr.windows,
        tr.secs,
        100.0 * late / early
    ))
}

fn c7_guidance() -> Outcome {
    let t0 = Instant::now();
    let model = &trained().model;
    let scenario = ScenarioConfig {
        bounds: [10.0, 10.0],
        agents: [4, 8],
        obstacles: [1, 6],
        seed: 1,
        ..ScenarioConfig::default()
    };
    let scenes: Vec<_> = (0..50).map(|i| simulate_scene(&scenario, i)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let base = RolloutConfig {
        sampler: SamplerConfig {
            samples: 5,
            ..SamplerConfig::default()
        },
        metrics: MetricsConfig {
            emd: false,
            displacement: false,
            ..MetricsConfig::default()
        },
        ..RolloutConfig::default()
    };
    let waypoint = Task::Waypoint {
        alpha: 1e4,
        ahead: model.horizon(),
        timing: Timing::Specific,
        perturb: 1.0,
        urgency: 0.7,
        v_pref: 1.25,
    };
    let run = |g: GuidanceTemplate| -> Result<crowdiff::metrics::MetricReport, String> {
        let cfg = RolloutConfig { guidance: g, ..base.clone() };
        Ok(open_loop_eval(model, &scenes, &cfg, 1).map_err(|e| e.to_string())?.0.metrics)
    };
    let wp = |m: &crowdiff::metrics::MetricReport| m.guidance_errors.iter().find(|g| g.name == "waypoint").map(|g| g.value).unwrap_or(f64::NAN);
    let none = run(GuidanceTemplate::none())?;
    let obs = run(GuidanceTemplate::with_task(GuidanceMode::Clean, Task::ObstacleAvoid { alpha: 300.0, points: 10 }))?;
    let agent = run(GuidanceTemplate::with_task(GuidanceMode::Clean, Task::AgentAvoid { alpha: 1e4, buffer: 0.2 }))?;
    let filter = run(GuidanceTemplate::with_task(GuidanceMode::FilterOnly, waypoint.clone()))?;
    let clean = run(GuidanceTemplate::with_task(GuidanceMode::Clean, waypoint.clone()))?;
    let noisy = run(GuidanceTemplate::with_task(GuidanceMode::Noisy, waypoint))?;
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "obstacle {:.4} -> {:.4}, agent {:.4} -> {:.4}, waypoint filter {:.3} / clean {:.3} / noisy {:.3}, {secs:.0}s",
        none.obstacle_collision_rate,
        obs.obstacle_collision_rate,
        none.agent_collision_rate,
        agent.agent_collision_rate,
        wp(&filter),
        wp(&clean),
        wp(&noisy)
    );
    ensure(obs.obstacle_collision_rate <= 0.5 * none.obstacle_collision_rate, || detail.clone())?;
    ensure(agent.agent_collision_rate <= 0.25 * none.agent_collision_rate, || detail.clone())?;
    ensure(wp(&clean) < wp(&filter), || detail.clone())?;
    ensure(wp(&clean) <= wp(&noisy), || detail.clone())?;
    ensure(secs < 1200.0, || detail.clone())?;
    Ok(detail)
}

fn c8_zero_guidance() -> Outcome {
    let model = &trained().model;
    let (agents, map) = plan_agents(model, TRAIN_SCENES + 2, 3);
    let plain = sample_chain(model, &agents, &map, 0.5, None);
    let empty = GuidanceSpec::default();
    let mut specs = vec![("empty spec", empty)];
    for mode in [GuidanceMode::Clean, GuidanceMode::Noisy] {
        let mut s = GuidanceSpec::single(mode, 0.0, Objective::AgentAvoid { buffer: 0.2 });
        s.filter = false;
        specs.push(("alpha 0", s));
    }
    for (name, spec) in &specs {
        let got = sample_chain(model, &agents, &map, 0.5, Some(spec));
        ensure(bitwise(&got.chain, &plain.chain) && got.agents == plain.agents, || format!("{name} ({:?}) differs", spec.mode))?;
    }
    Ok("empty spec and alpha=0 (clean, noisy) bitwise equal to unguided".into())
}

fn c9_losses() -> Outcome {
    let traj = |tape: &mut Tape, pts: &[[f64; 2]]| {
        let data: Vec<f64> = pts.iter().flat_map(|p| [p[0], p[1], 0.0, 1.0]).collect();
        tape.variable(Tensor::new(vec![1, pts.len(), 4], data).unwrap())
    };
    let mut tape = Tape::new();
    let tr = traj(&mut tape, &[[0.0, 0.0], [3.0, 4.0]]);
    let l = loss_waypoint_local_specific(&mut tape, tr, [0.0, 0.0], 2).unwrap();
    let d = tape.value(l).item();
    ensure(d == 5.0, || format!("3-4-5 distance {d}"))?;

    let slack = relaxed_goal_distance(90, 0.1, 1.25, 0.7);
    ensure((slack - 3.375).abs() < 1e-12, || format!("relaxed distance {slack}"))?;

    // softmin weights: a uniform-distance path reduces to d², and the weights sum to 1
    let mut tape = Tape::new();
    let ring: Vec<[f64; 2]> = (0..6).map(|i| (i as f64).sin_cos()).map(|(s, c)| [2.0 * c, 2.0 * s]).collect();
    let tr = traj(&mut tape, &ring);
    let l = loss_waypoint_local_any(&mut tape, tr, [0.0, 0.0], false).unwrap();
    let ring_loss = tape.value(l).item();
    ensure((ring_loss - 4.0).abs() < 1e-12, || format!("softmin loss on a ring {ring_loss}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = tape.constant(Tensor::new(vec![1, 7], (0..7).map(|_| rng.random_range(0.0..5.0)).collect()).unwrap());
    let neg = tape.scale(d, -1.0).unwrap();
    let w = tape.softmax(neg).unwrap();
    let sum: f64 = tape.value(w).data().iter().sum();
    ensure((sum - 1.0).abs() < 1e-12, || format!("softmin weights sum to {sum}"))?;

    // the leader receives no gradient from the group loss
    let mut tape = Tape::new();
    let a = traj(&mut tape, &[[0.0, 0.0], [0.1, 0.0], [0.2, 0.1]]);
    let b = traj(&mut tape, &[[3.0, 0.0], [3.1, 0.5], [3.3, 0.4]]);
    let spec = SocialGroupSpec {
        members: vec![1, 2],
        leader: 1,
        distance: 1.0,
        cohesion: 0.0,
    };
    let l = loss_social_group(&mut tape, &[a, b], &[[0.0, 0.0], [3.0, 0.0]], &spec, &mut rng).unwrap();
    let s = tape.sum(l).unwrap();
    let g = tape.backward(s).unwrap();
    let leader_zero = g.get(a).is_none_or(|t| t.data().iter().all(|&v| v == 0.0));
    let follower_moves = g.get(b).is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
    ensure(leader_zero && follower_moves, || "leader gradient is not zero or follower gradient is".into())?;

    // relu dead zones
    let mut tape = Tape::new();
    let a = traj(&mut tape, &[[0.0, 0.0], [0.0, 0.1]]);
    let b = traj(&mut tape, &[[5.0, 0.0], [5.0, 0.1]]);
    let l = loss_agent_avoid(&mut tape, &[a, b], &[0.3, 0.3], 0.2).unwrap();
    let far = tape.value(l).item();
    let tr = traj(&mut tape, &[[0.0, 0.0], [1.0, 0.0]]);
    let l = loss_waypoint_global_specific(&mut tape, tr, [3.0, 0.0], 90, 0.7, 1.25, 0.1).unwrap();
    let within = tape.value(l).item();
    ensure(far == 0.0 && within == 0.0, || format!("dead zones give {far}, {within}"))?;
    Ok("3-4-5 = 5, relaxed distance 3.375, softmin normalized, leader gradient 0, relu dead zones 0".into())
}

fn c10_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=32);
        let mut edges = vec![rng.random_range(-2.0..0.0)];
        for _ in 0..n {
            let e = edges[edges.len() - 1] + rng.random_range(0.05..1.0);
            edges.push(e);
        }
        let norm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let p = norm((0..n).map(|_| rng.random_range(0.0..1.0)).collect());
        let q = norm((0..n).map(|_| rng.random_range(0.0..1.0)).collect());
        let centers: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        // north-west corner transport is optimal for a 1-D ground cost
        let (mut pr, mut qr) = (p.clone(), q.clone());
        let (mut i, mut j, mut cost) = (0, 0, 0.0);
        while i < n && j < n {
            let f = pr[i].min(qr[j]);
            cost += f * (centers[i] - centers[j]).abs();
            pr[i] -= f;
            qr[j] -= f;
            if pr[i] <= qr[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        worst = worst.max((emd_1d(&p, &q, &edges) - cost).abs());
    }
    ensure(worst < 1e-9, || format!("EMD error {worst:e}"))?;

    let mut disp = 0.0f64;
    for _ in 0..200 {
        let (m, t) = (rng.random_range(1..6), rng.random_range(1..12));
        let mut pt = || [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let truth: Vec<[f64; 2]> = (0..t).map(|_| pt()).collect();
        let samples: Vec<Vec<[f64; 2]>> = (0..m).map(|_| (0..t).map(|_| pt()).collect()).collect();
        let got = ade_fde(&samples, &truth).map_err(|e| e.to_string())?;
        let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let ades: Vec<f64> = samples.iter().map(|s| s.iter().zip(&truth).map(|(a, b)| dist(*a, *b)).sum::<f64>() / t as f64).collect();
        let best = (0..m).fold(0, |b, i| if ades[i] < ades[b] { i } else { b });
        disp = disp.max((got.ade - ades[best]).abs()).max((got.fde - dist(samples[best][t - 1], truth[t - 1])).abs());
    }
    ensure(disp < 1e-9, || format!("ADE/FDE error {disp:e}"))?;

    let model = &trained().model;
    let index = TRAIN_SCENES + 3;
    let scene = simulate_scene(&ScenarioConfig::default(), index).map_err(|e| e.to_string())?;
    let cfg = RolloutConfig {
        mode: crowdiff::rollout::RolloutMode::ClosedLoop,
        duration: 2.0,
        replan: 0.5,
        sampler: SamplerConfig {
            samples: 2,
            ..SamplerConfig::default()
        },
        ..RolloutConfig::default()
    };
    let dump = closed_loop_rollout(model, index, &scene, &cfg).map_err(|e| e.to_string())?;
    let t0 = dump.start_step;
    ensure(dump.plan_starts.len() == 4, || format!("{} replans", dump.plan_starts.len()))?;
    let mut gap = 0.0f64;
    for (r, starts) in dump.plan_starts.iter().enumerate() {
        for (a, s) in dump.executed.iter().zip(starts) {
            let want = if r == 0 {
                scene.agent(a.id).and_then(|t| t.state(t0)).expect("present at start")
            } else {
                a.states[r * 5 - 1]
            };
            gap = gap.max((s.x - want.x).abs()).max((s.y - want.y).abs()).max((s.v - want.v).abs());
        }
    }
    ensure(gap < 1e-9, || format!("replan start mismatch {gap:e}"))?;
    Ok(format!("EMD vs transport {worst:e}, ADE/FDE vs scan {disp:e}, closed-loop boundaries {gap:e}"))
}

const TINY: &str = r#"
[data]
scenes = 4
eval_scenes = 2

[training]
steps = 5
batch_size = 8

[sampler]
samples = 2

[rollout]
duration = 2.0
"#;

fn run_cli(dir: &Path, workers: usize) -> Result<(), String> {
    let config = dir.join("run.toml");
    std::fs::write(&config, TINY).map_err(|e| e.to_string())?;
    let cmds: [&[&str]; 8] = [
        &["gen-data"],
        &["train"],
        &["sample"],
        &["rollout"],
        &["eval"],
        &["rollout", "--closed-loop", "--limit", "1"],
        &["eval"],
        &["sweep", "--axis", "w", "--limit", "1"],
    ];
    for args in cmds {
        let out = Command::new(env!("CARGO_BIN_EXE_crowdiff"))
            .args(args)
            .arg("--config")
            .arg(&config)
            .args(["--seed", "3", "--workers", &workers.to_string()])
            .arg("--out")
            .arg(dir.join("out"))
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))?;
    }
    Ok(())
}

fn c11_reproducible() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    run_cli(a.path(), 1)?;
    run_cli(b.path(), 2)?;
    let mut names: Vec<_> = std::fs::read_dir(a.path().join("out"))
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    names.sort();
    for name in &names {
        let x = std::fs::read(a.path().join("out").join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join("out").join(name)).map_err(|e| format!("{name:?}: {e}"))?;
        ensure(x == y, || format!("{name:?} differs between runs"))?;
    }
    let count = std::fs::read_dir(b.path().join("out")).map_err(|e| e.to_string())?.count();
    ensure(count == names.len(), || "runs produced different file sets".into())?;
    Ok(format!("{} artifacts byte-identical across 1 and 2 workers", names.len()))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradients match central differences", c1_gradients),
        ("noise schedule identities", c2_schedule),
        ("single-pass sampling at w = 0 and w = -1", c3_single_pass),
        ("unicycle round trip", c4_dynamics),
        ("generated scenes are collision free", c5_collision_free),
        ("training converges to realistic speeds", c6_training),
        ("guidance reduces collisions and waypoint error", c7_guidance),
        ("zero guidance leaves sampling unchanged", c8_zero_guidance),
        ("guidance loss truths", c9_losses),
        ("metric oracles and replanning boundaries", c10_metrics),
        ("CLI artifacts reproducible across worker counts", c11_reproducible),
    ];
    // `ACCEPTANCE_ONLY=2,11` runs a subset while iterating
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (title, f)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        report(i + 1, title, &outcome);
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
