//! Compares unguided sampling with each guidance objective on held-out scenes,
//! using one set of sampler seeds for every row.
//!
//! `cargo run --release --example guidance_table -- model.ckpt [scenes] [samples] [alpha_obs] [alpha_agent] [alpha_wp] [side] [max_agents]`

use std::fs::File;
use std::io::BufReader;
use std::time::Instant;

use crowdiff::datagen::{simulate_scene, ScenarioConfig};
use crowdiff::diffusion::{Model, SamplerConfig};
use crowdiff::guidance::GuidanceMode;
use crowdiff::rollout::{open_loop_eval, GuidanceTemplate, MetricsConfig, RolloutConfig, Task, Timing};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args.first().map(String::as_str).unwrap_or("out/model.ckpt");
    let num = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (n, m) = (num(1, 50.0) as usize, num(2, 5.0) as usize);
    let (a_obs, a_agent, a_wp) = (num(3, 1.0), num(4, 1.0), num(5, 1.0));

    let (model, _) = Model::load(BufReader::new(File::open(path)?))?;
    let side = num(6, 10.0);
    let scenario = ScenarioConfig {
        bounds: [side, side],
        agents: [4, num(7, 8.0) as usize],
        obstacles: [1, 6],
        seed: 1,
        ..ScenarioConfig::default()
    };
    let scenes = (0..n).map(|i| simulate_scene(&scenario, i)).collect::<Result<Vec<_>, _>>()?;
    let base = RolloutConfig {
        sampler: SamplerConfig {
            samples: m,
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
        alpha: a_wp,
        ahead: model.horizon(),
        timing: Timing::Specific,
        perturb: 1.0,
        urgency: 0.7,
        v_pref: 1.25,
    };
    let rows = [
        ("unguided", GuidanceTemplate::none()),
        ("obstacle", GuidanceTemplate::with_task(GuidanceMode::Clean, Task::ObstacleAvoid { alpha: a_obs, points: 10 })),
        ("agent", GuidanceTemplate::with_task(GuidanceMode::Clean, Task::AgentAvoid { alpha: a_agent, buffer: 0.2 })),
        ("wp filter", GuidanceTemplate::with_task(GuidanceMode::FilterOnly, waypoint.clone())),
        ("wp clean", GuidanceTemplate::with_task(GuidanceMode::Clean, waypoint.clone())),
        ("wp noisy", GuidanceTemplate::with_task(GuidanceMode::Noisy, waypoint)),
    ];
    println!("{:<10} {:>8} {:>8} {:>8} {:>8}", "row", "obs", "agent", "waypoint", "secs");
    for (name, guidance) in rows {
        let cfg = RolloutConfig {
            guidance,
            ..base.clone()
        };
        let t0 = Instant::now();
        let (r, _) = open_loop_eval(&model, &scenes, &cfg, 1)?;
        let wp = r.metrics.guidance_errors.iter().find(|g| g.name == "waypoint").map(|g| g.value);
        println!(
            "{name:<10} {:>8.4} {:>8.4} {:>8} {:>8.1}",
            r.metrics.obstacle_collision_rate,
            r.metrics.agent_collision_rate,
            wp.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
