use dae_core::decoder::{ConvDecoder, ConvDecoderConfig, Decoder};
use dae_core::encoder::{ScoreNet, ScoreNetConfig};
use dae_core::trainer::{langevin_estep, LangevinConfig};
use dae_core::util::{randn, rng_from_seed};
use dae_core::VpSchedule;
use std::time::Instant;

fn main() {
    let sched = VpSchedule::default();
    let mut rng = rng_from_seed(1);
    let b = 1024;

    // MNIST-scale conv decoder
    let dec = Decoder::Conv(ConvDecoder::init(ConvDecoderConfig {
        out_h: 28, out_w: 28, out_c: 1, latent_dim: 20,
        base_channels: 64, stage_channels: vec![32],
        self_attention: false, sigma_lik: 1.0,
    }, &mut rng).unwrap());
    let z = randn(&[b, 20], &mut rng);
    let x = randn(&[b, 28, 28, 1], &mut rng);
    let t = Instant::now();
    let _ = dec.grad_z_log_likelihood(&x, &z).unwrap();
    println!("conv decode grad_z, batch {b}: {:?}", t.elapsed());

    let cfg = LangevinConfig::default();
    let t = Instant::now();
    let _ = langevin_estep(&dec, &x, &z, &cfg, &mut rng).unwrap();
    println!("langevin 10 steps, batch {b}: {:?}", t.elapsed());

    // MNIST-scale score net
    let cfg = ScoreNetConfig::image(20, (28, 28, 1), 128, vec![512, 256], 4, vec![32, 64]);
    let net = ScoreNet::init(cfg, &sched, &mut rng).unwrap();
    let ximg = randn(&[256, 28, 28, 1], &mut rng);
    let t = Instant::now();
    let cond = net.prep_cond(&ximg).unwrap();
    println!("prep_cond (weak encoder), batch 256: {:?}", t.elapsed());
    let cond_rep = cond.repeat_rows(4);
    let zl = randn(&[b, 20], &mut rng);
    let t = Instant::now();
    let _ = net.score_eval(&zl, 0.5, &cond_rep).unwrap();
    println!("score_eval, batch {b}: {:?}", t.elapsed());

    let t = Instant::now();
    let _ = net.sample_pf_ode(&sched, &cond_rep, &zl, 8).unwrap();
    println!("pf_ode 8 heun steps, batch {b}: {:?}", t.elapsed());
}
