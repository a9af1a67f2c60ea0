//! Reverse-mode gradients through a small network and a bilinear grid lookup,
//! checked against central differences.

use crowdiff::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(x: &Tensor, w: &Tensor, grid: &Tensor, coords: &Tensor) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let (xv, wv, gv, cv) = (tape.variable(x.clone()), tape.variable(w.clone()), tape.variable(grid.clone()), tape.variable(coords.clone()));
    let h = tape.dense(xv, wv, None).unwrap();
    let h = tape.silu(h).unwrap();
    let s = tape.grid_sample(gv, cv).unwrap();
    let a = tape.sum(h).unwrap();
    let b = tape.sum(s).unwrap();
    let b = tape.square(b).unwrap();
    let out = tape.add(a, b).unwrap();
    let grads = tape.backward(out).unwrap();
    let g = [xv, wv, gv, cv].iter().map(|&v| grads.get(v).cloned().unwrap()).collect();
    (tape.value(out).item(), g)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 5], 0.5, &mut rng);
    let grid = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);
    let coords = Tensor::from_slice(&[1, 3, 2], &[1.3, 2.7, 4.1, 0.6, 2.5, 3.2]).unwrap();
    let (value, grads) = loss(&x, &w, &grid, &coords);
    println!("loss = {value:.6}");

    let h = 1e-5;
    let names = ["x", "w", "grid", "coords"];
    for (k, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..grads[k].len() {
            let mut ins = [x.clone(), w.clone(), grid.clone(), coords.clone()];
            ins[k].data_mut()[i] += h;
            let up = loss(&ins[0], &ins[1], &ins[2], &ins[3]).0;
            ins[k].data_mut()[i] -= 2.0 * h;
            let down = loss(&ins[0], &ins[1], &ins[2], &ins[3]).0;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - grads[k].data()[i]).abs() / fd.abs().max(1e-6));
        }
        println!("d loss / d {name:<6} worst relative error {worst:.2e}");
    }
}
