//! Simulates one crowd scene, audits it for collisions and prints its tracks
//! in the plain-text format.

use crowdiff::datagen::{audit_scene, simulate_scene, write_tracks_text, ScenarioConfig};

fn main() -> anyhow::Result<()> {
    let index = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ScenarioConfig {
        episode: 2.0,
        ..ScenarioConfig::default()
    };
    let scene = simulate_scene(&cfg, index)?;
    let audit = audit_scene(&scene, 10.0);
    eprintln!(
        "scene {index}: {} agents, {} obstacles, {} steps, {} agent and {} obstacle collisions",
        scene.agents.len(),
        scene.obstacles.len(),
        scene.len(),
        audit.agent_collisions,
        audit.obstacle_collisions
    );
    write_tracks_text(&scene, std::io::stdout().lock())?;
    Ok(())
}
