use dae_core::util::{randn, rng_from_seed};
use dae_core::Tape;
use std::time::Instant;

fn main() {
    let mut rng = rng_from_seed(1);
    // isolate: tconv fwd, tconv bwd, dense matmuls at Langevin shapes
    let b = 1024;
    let grid7 = randn(&[b, 7, 7, 64], &mut rng);
    let k1 = randn(&[4, 4, 64, 32], &mut rng);
    let t = Instant::now();
    let mut tape = Tape::new();
    let g = tape.param(&grid7);
    let kr = tape.constant(&k1);
    let up = tape.transposed_conv2d(g, kr, 2, 1).unwrap();
    println!("tconv1 fwd 7->14 (64->32), batch {b}: {:?}", t.elapsed());
    let t = Instant::now();
    let sq = tape.square(up);
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    println!("tconv1 bwd (input grad only): {:?}", t.elapsed());

    let grid14 = randn(&[b, 14, 14, 32], &mut rng);
    let k2 = randn(&[4, 4, 32, 1], &mut rng);
    let t = Instant::now();
    let mut tape = Tape::new();
    let g = tape.param(&grid14);
    let kr = tape.constant(&k2);
    let up = tape.transposed_conv2d(g, kr, 2, 1).unwrap();
    let sq = tape.square(up);
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    println!("tconv2 fwd+bwd 14->28 (32->1), batch {b}: {:?}", t.elapsed());

    let z = randn(&[b, 20], &mut rng);
    let w = randn(&[20, 3136], &mut rng);
    let t = Instant::now();
    let mut tape = Tape::new();
    let zr = tape.param(&z);
    let wr = tape.constant(&w);
    let h = tape.matmul(zr, wr).unwrap();
    let sq = tape.square(h);
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    println!("dense 20->3136 fwd+bwd, batch {b}: {:?}", t.elapsed());
}
