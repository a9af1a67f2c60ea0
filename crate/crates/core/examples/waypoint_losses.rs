//! Evaluates the waypoint objectives on a hand-made trajectory and shows how
//! their gradients point toward the goal.

use crowdiff::guidance::{loss_waypoint_global_specific, loss_waypoint_local_any, loss_waypoint_local_specific, relaxed_goal_distance};
use crowdiff::tensor::{Tape, Tensor};

fn main() -> anyhow::Result<()> {
    // One sample walking along x at 1 m/s: [M=1, T=5, 4] states.
    let states: Vec<f64> = (1..=5).flat_map(|t| [t as f64 * 0.1, 0.0, 0.0, 1.0]).collect();
    let traj = Tensor::new(vec![1, 5, 4], states)?;
    let goal = [0.5 + 3.0, 4.0];

    let mut tape = Tape::new();
    let x = tape.variable(traj.clone());
    let l = loss_waypoint_local_specific(&mut tape, x, goal, 5)?;
    let l = tape.sum(l)?;
    let g = tape.backward(l)?;
    let gx = g.get(x).unwrap().data();
    println!("local, step 5: {:.3} (gradient at step 5: {:+.3}, {:+.3})", tape.value(l).item(), gx[16], gx[17]);

    let mut tape = Tape::new();
    let x = tape.variable(traj.clone());
    let l = loss_waypoint_local_any(&mut tape, x, goal, false)?;
    println!("local, any step: {:.3}", tape.value(l).data()[0]);

    println!("relaxed distance for a goal 30 steps out: {:.3} m", relaxed_goal_distance(30, 0.1, 1.25, 0.7));
    let mut tape = Tape::new();
    let x = tape.variable(traj);
    let l = loss_waypoint_global_specific(&mut tape, x, [6.0, 0.0], 30, 0.7, 1.25, 0.1)?;
    println!("global, 30 steps out at (6, 0): {:.3}", tape.value(l).data()[0]);
    Ok(())
}
