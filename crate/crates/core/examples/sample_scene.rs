//! Samples several futures for every agent of one held-out scene and prints
//! how far they spread and how close the best one gets to the recorded path.
//!
//! `cargo run --release --example sample_scene -- model.ckpt [scene] [samples] [w]`

use std::fs::File;
use std::io::BufReader;

use crowdiff::datagen::{simulate_scene, ScenarioConfig};
use crowdiff::diffusion::{Model, SamplerConfig};
use crowdiff::metrics::ade_fde;
use crowdiff::rollout::{open_loop_plan, RolloutConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args.first().map(String::as_str).unwrap_or("out/model.ckpt");
    let num = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (index, m, w) = (num(1, 50.0) as usize, num(2, 10.0) as usize, num(3, 0.0));

    let (model, _) = Model::load(BufReader::new(File::open(path)?))?;
    let scene = simulate_scene(&ScenarioConfig::default(), index)?;
    let cfg = RolloutConfig {
        sampler: SamplerConfig {
            samples: m,
            w,
            ..SamplerConfig::default()
        },
        ..RolloutConfig::default()
    };
    let (dump, _) = open_loop_plan(&model, index, &scene, &cfg)?;
    println!("scene {index}, start step {}, {m} samples, w = {w}", dump.start_step);
    println!("{:>5} {:>9} {:>8} {:>8}", "agent", "spread m", "minADE", "minFDE");
    for ((a, samples), truth) in dump.executed.iter().zip(&dump.samples).zip(&dump.truth) {
        let ends: Vec<[f64; 2]> = samples.iter().map(|s| s[s.len() - 1]).collect();
        let c = ends.iter().fold([0.0, 0.0], |c, p| [c[0] + p[0] / m as f64, c[1] + p[1] / m as f64]);
        let spread = ends.iter().map(|p| (p[0] - c[0]).hypot(p[1] - c[1])).sum::<f64>() / m as f64;
        let disp = match truth {
            Some(t) => {
                let t: Vec<[f64; 2]> = t.iter().map(|s| s.position()).collect();
                let d = ade_fde(samples, &t)?;
                format!("{:>8.3} {:>8.3}", d.ade, d.fde)
            }
            None => format!("{:>8} {:>8}", "-", "-"),
        };
        println!("{:>5} {spread:>9.3} {disp}", a.id);
    }
    Ok(())
}
