use dae_core::harness::{prepare_data, run_training, RunConfig};
use std::time::Instant;

fn main() {
    let cfg = RunConfig::parse(r#"
seed = 11
[model]
kind = "dae"
latent_dim = 20
mapping_size = 128
mlp_widths = [512, 256]
n_heads = 4
weak_encoder_channels = [32, 64]
decoder = "conv"
decoder_sigma = 1.0
decoder_base_channels = 64
decoder_stage_channels = [16]
[optimizer]
encoder_lr = 0.003
decoder_lr = 0.004
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
[langevin]
gamma = 0.5
n_step = 10
delta_tau = 0.05
clip_bound = 1.0
[dataset]
kind = "synthetic"
train_count = 1024
eval_count = 256
side = 28
[run]
algorithm = "alg1"
epochs = 8
batch_size = 256
latents_per_input = 4
pf_ode_steps = 6
heun_steps_export = 16
rate_mc_samples = 4
out_dir = "/tmp/probe4"
"#).unwrap();
    let t0 = Instant::now();
    let out = run_training(&cfg).unwrap();
    println!("cycles in {:?}", t0.elapsed());
    for r in out.state.loss_history().iter().step_by(4) {
        println!("cycle {}: denoise {:.4} recon {:.4} ({:.1}s)", r.cycle, r.encoder_loss, r.reconstruction_loss, r.wall_ms / 1e3);
    }
    let fe = out.final_eval.unwrap();
    let data = prepare_data(&cfg).unwrap();
    // constant-mean baseline on the eval split
    let per = 28 * 28;
    let n_tr = data.train.shape()[0];
    let mut mean = vec![0.0; per];
    for img in data.train.data().chunks(per) {
        for (m, v) in mean.iter_mut().zip(img) { *m += v / n_tr as f64; }
    }
    let n_ev = data.eval.shape()[0];
    let base: f64 = data.eval.data().chunks(per)
        .map(|img| img.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>() / n_ev as f64;
    println!("eval distortion {:.4} vs constant-mean baseline {:.4} (ratio {:.3})", fe.distortion, base, fe.distortion / base);
}
