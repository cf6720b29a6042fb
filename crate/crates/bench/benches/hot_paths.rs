use criterion::{criterion_group, criterion_main, Criterion};
use dae_core::decoder::{Decoder, PolyDecoder};
use dae_core::encoder::{ScoreNet, ScoreNetConfig};
use dae_core::trainer::{langevin_estep, LangevinConfig};
use dae_core::util::{randn, rng_from_seed};
use dae_core::{Tape, VpSchedule};

fn tensor_matmul(c: &mut Criterion) {
    let mut rng = rng_from_seed(1);
    let a = randn(&[256, 512], &mut rng);
    let b = randn(&[512, 256], &mut rng);
    c.bench_function("matmul 256x512x256 forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let ar = tape.param(&a);
            let br = tape.param(&b);
            let y = tape.matmul(ar, br).unwrap();
            let sq = tape.square(y);
            let loss = tape.mean_all(sq);
            tape.backward(loss).unwrap();
            tape.grad(ar).unwrap()[0]
        })
    });
}

fn score_forward_batch(c: &mut Criterion) {
    let sched = VpSchedule::default();
    let mut rng = rng_from_seed(2);
    let cfg = ScoreNetConfig::image(20, (28, 28, 1), 128, vec![512, 256], 4, vec![32, 64]);
    let net = ScoreNet::init(cfg, &sched, &mut rng).unwrap();
    let x = randn(&[64, 28, 28, 1], &mut rng);
    let cond = net.prep_cond(&x).unwrap();
    let z = randn(&[64, 20], &mut rng);
    c.bench_function("score net forward, image batch 64", |bench| {
        bench.iter(|| net.score_eval(&z, 0.5, &cond).unwrap())
    });
}

fn langevin_chain(c: &mut Criterion) {
    let dec = Decoder::Poly(PolyDecoder::new([0.0, 0.1, 0.9, 0.0], 0.5));
    let cfg = LangevinConfig::default();
    let mut rng = rng_from_seed(3);
    let x = randn(&[512, 1], &mut rng);
    let z = randn(&[512, 1], &mut rng);
    c.bench_function("langevin e-step, 512 chains x 10 steps", |bench| {
        bench.iter(|| {
            let mut r = rng_from_seed(4);
            langevin_estep(&dec, &x, &z, &cfg, &mut r).unwrap()
        })
    });
}

criterion_group!(benches, tensor_matmul, score_forward_batch, langevin_chain);
criterion_main!(benches);
