//! Integrates random action sequences with the unicycle model and recovers
//! the actions from the resulting states.

use crowdiff::dynamics::{Action, AgentState, Unicycle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let model = Unicycle::new(0.1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s0 = AgentState::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0), rng.random_range(0.2..2.0));
        let actions: Vec<Action> = (0..20).map(|_| Action::new(rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0))).collect();
        let states = model.rollout(s0, &actions)?;
        let back = model.inverse(s0, &states)?;
        for (a, b) in actions.iter().zip(&back) {
            worst = worst.max((a.accel - b.accel).abs()).max((a.yaw_rate - b.yaw_rate).abs());
        }
    }
    println!("1000 sequences of 20 steps, worst action error {worst:.2e}");
    Ok(())
}
