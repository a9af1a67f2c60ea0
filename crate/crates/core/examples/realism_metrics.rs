//! Realism and accuracy metrics between two independently simulated crowds.

use crowdiff::datagen::{simulate_scene, ScenarioConfig};
use crowdiff::dynamics::AgentState;
use crowdiff::metrics::{realism_emd, step_stats, HistogramSpec};

fn main() -> anyhow::Result<()> {
    let slow = ScenarioConfig {
        pref_speed: [0.6, 1.0],
        ..ScenarioConfig::default()
    };
    let fast = ScenarioConfig {
        seed: 1,
        ..ScenarioConfig::default()
    };
    let collect = |cfg: &ScenarioConfig| -> anyhow::Result<Vec<Vec<AgentState>>> {
        let mut out = Vec::new();
        for i in 0..10 {
            for a in simulate_scene(cfg, i)?.agents {
                out.push(a.states.into_iter().flatten().collect());
            }
        }
        Ok(out)
    };
    let (a, b, c) = (collect(&ScenarioConfig::default())?, collect(&fast)?, collect(&slow)?);
    let stats = |t: &Vec<Vec<AgentState>>| step_stats(t.iter().map(|x| x.as_slice()), 0.1);
    let spec = HistogramSpec::default();
    let same = realism_emd(&stats(&a), &stats(&b), &spec)?;
    let diff = realism_emd(&stats(&a), &stats(&c), &spec)?;
    println!("same distribution:  v {:.4}  lon {:.4}  lat {:.4}", same.velocity, same.lon_accel, same.lat_accel);
    println!("slower walkers:     v {:.4}  lon {:.4}  lat {:.4}", diff.velocity, diff.lon_accel, diff.lat_accel);
    Ok(())
}
