//! Generates a small crowd dataset, trains the toy denoiser and samples one scene.
//!
//! `cargo run --release --example train_toy -- [steps] [scenes]`

use std::time::Instant;

use crowdiff::datagen::{extract_windows, simulate_scene, ScenarioConfig, WindowConfig};
use crowdiff::denoiser::{DenoiserConfig, NormStats};
use crowdiff::diffusion::{train, Model, TrainConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(200);
    let scenes = args.get(1).copied().unwrap_or(20);

    let scenario = ScenarioConfig::default();
    let net = DenoiserConfig::toy();
    let wc = WindowConfig {
        t_p: net.t_p,
        t_f: net.t_f,
        crop: net.crop,
        ..WindowConfig::default()
    };
    let t0 = Instant::now();
    let mut windows = Vec::new();
    for i in 0..scenes {
        windows.extend(extract_windows(i, &simulate_scene(&scenario, i)?, &wc)?);
    }
    println!("{} windows from {scenes} scenes in {:.1?}", windows.len(), t0.elapsed());

    let mut model = Model::new(net, NormStats::from_windows(&windows), 50, scenario.dt, 0)?;
    println!("{} parameters", model.net.param_count());
    let cfg = TrainConfig { steps, ..TrainConfig::default() };
    let t0 = Instant::now();
    let recs = train(&mut model, &windows, &cfg, |r| {
        if r.step % 20 == 0 || r.step == 1 {
            println!("step {:5} loss {:.4} ({:.1?})", r.step, r.loss, t0.elapsed());
        }
    })?;
    println!("final loss {:.4}", recs.last().map(|r| r.loss).unwrap_or(f64::NAN));
    Ok(())
}
