//! Sweeps one sampling choice with paired seeds and prints the report as CSV.
//!
//! `cargo run --release --example ablation_sweep -- model.ckpt [w|clean-vs-noisy|filter-vs-guide] [scenes]`

use std::fs::File;
use std::io::BufReader;

use crowdiff::datagen::{simulate_scene, ScenarioConfig};
use crowdiff::diffusion::{Model, SamplerConfig};
use crowdiff::guidance::GuidanceMode;
use crowdiff::rollout::{run_ablation_sweep, GuidanceTemplate, MetricsConfig, RolloutConfig, SweepAxis, Task};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args.first().map(String::as_str).unwrap_or("out/model.ckpt");
    let axis = match args.get(1).map(String::as_str).unwrap_or("w") {
        "w" => SweepAxis::W {
            values: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
        },
        "clean-vs-noisy" => SweepAxis::CleanVsNoisy,
        "filter-vs-guide" => SweepAxis::FilterVsGuide,
        other => anyhow::bail!("unknown axis {other}"),
    };
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);

    let (model, _) = Model::load(BufReader::new(File::open(path)?))?;
    let scenes = (50..50 + n).map(|i| simulate_scene(&ScenarioConfig::default(), i)).collect::<Result<Vec<_>, _>>()?;
    let base = RolloutConfig {
        sampler: SamplerConfig {
            samples: 5,
            ..SamplerConfig::default()
        },
        metrics: MetricsConfig {
            emd: false,
            ..MetricsConfig::default()
        },
        guidance: GuidanceTemplate::with_task(GuidanceMode::Clean, Task::AgentAvoid { alpha: 1e4, buffer: 0.2 }),
        ..RolloutConfig::default()
    };
    let report = run_ablation_sweep(&model, &scenes, &base, &axis, 1)?;
    eprintln!("seeds paired across entries: {}", report.seeds_paired);
    print!("{}", report.to_csv());
    Ok(())
}
