use dae_core::decoder::{Decoder, PolyDecoder};
use dae_core::toy::{posterior_oracle, strict_local_maxima, ToyConfig};
use dae_core::trainer::{langevin_estep, LangevinConfig};
use dae_core::util::{randn, rng_from_seed};
use dae_core::Tensor;
use std::time::Instant;

fn main() {
    let dec = Decoder::Poly(PolyDecoder::new([0.0, 0.0, 1.0, 0.0], 0.5));
    let cfg = LangevinConfig { gamma: 1.0, n_step: 5000, delta_tau: 0.005, clip_bound: 50.0 };
    let n = 20_000;
    for xv in [0.5, 1.0, 2.0] {
        let t0 = Instant::now();
        let x = Tensor::full(&[n, 1], xv);
        let mut rng = rng_from_seed(4242);
        let z0 = randn(&[n, 1], &mut rng);
        let z = langevin_estep(&dec, &x, &z0, &cfg, &mut rng).unwrap();
        // TV against the oracle on a 160-bin histogram over [-4, 4]
        let oracle = posterior_oracle(&ToyConfig::default(), xv).unwrap();
        let bins = 160;
        let (lo, hi) = (-4.0, 4.0);
        let width = (hi - lo) / bins as f64;
        let mut hist = vec![0.0; bins];
        let mut inside = 0usize;
        for &v in z.data() {
            if v >= lo && v < hi {
                hist[((v - lo) / width) as usize] += 1.0;
                inside += 1;
            }
        }
        let mut tv = 0.0;
        for i in 0..bins {
            let a = lo + i as f64 * width;
            let p_hat = hist[i] / inside as f64;
            let p = oracle.mass_between(a, a + width);
            tv += (p_hat - p).abs();
        }
        tv /= 2.0;
        // modes from the smoothed histogram
        let smooth: Vec<f64> = (0..bins)
            .map(|i| {
                let a = i.saturating_sub(2);
                let b = (i + 3).min(bins);
                hist[a..b].iter().sum::<f64>() / (b - a) as f64
            })
            .collect();
        let centers: Vec<f64> = (0..bins).map(|i| lo + (i as f64 + 0.5) * width).collect();
        let mut modes = strict_local_maxima(&centers, &smooth, 3);
        modes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "x={xv}: tv={tv:.4} modes={modes:?} oracle_modes={:?} ({:?})",
            oracle.modes,
            t0.elapsed()
        );
    }
}
