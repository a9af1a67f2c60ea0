//! Closed-loop rollouts toward a waypoint 9 s ahead, replanning every second,
//! with filtering alone and with clean guidance.
//!
//! `cargo run --release --example closed_loop -- model.ckpt [scenes] [alpha]`

use std::fs::File;
use std::io::BufReader;

use crowdiff::datagen::{simulate_scene, ScenarioConfig};
use crowdiff::diffusion::{Model, SamplerConfig};
use crowdiff::guidance::GuidanceMode;
use crowdiff::rollout::{run_rollouts, GuidanceTemplate, MetricsConfig, RolloutConfig, RolloutMode, Task, Timing};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args.first().map(String::as_str).unwrap_or("out/model.ckpt");
    let num = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (n, alpha) = (num(1, 5.0) as usize, num(2, 1e4));

    let (model, _) = Model::load(BufReader::new(File::open(path)?))?;
    let scenes = (50..50 + n).map(|i| simulate_scene(&ScenarioConfig::default(), i)).collect::<Result<Vec<_>, _>>()?;
    let ahead = 90;
    let task = Task::Waypoint {
        alpha,
        ahead,
        timing: Timing::Specific,
        perturb: 0.0,
        urgency: 0.7,
        v_pref: 1.25,
    };
    let base = RolloutConfig {
        mode: RolloutMode::ClosedLoop,
        duration: ahead as f64 * 0.1,
        replan: 1.0,
        sampler: SamplerConfig {
            samples: 5,
            ..SamplerConfig::default()
        },
        metrics: MetricsConfig {
            emd: false,
            ..MetricsConfig::default()
        },
        ..RolloutConfig::default()
    };
    for (label, mode) in [("filter only", GuidanceMode::FilterOnly), ("guided", GuidanceMode::Clean)] {
        let cfg = RolloutConfig {
            guidance: GuidanceTemplate::with_task(mode, task.clone()),
            ..base.clone()
        };
        let (r, dumps) = run_rollouts(&model, &scenes, &cfg, 1)?;
        let steps: usize = dumps.iter().flat_map(|d| d.executed.iter().map(|a| a.states.len())).max().unwrap_or(0);
        let err = r.metrics.guidance_errors.iter().map(|g| format!("{} {:.3}", g.name, g.value)).collect::<Vec<_>>().join(", ");
        println!(
            "{label:<11} executed {steps:>3} steps, obstacle {:.4}, agent {:.4}, {err}",
            r.metrics.obstacle_collision_rate, r.metrics.agent_collision_rate
        );
    }
    Ok(())
}
