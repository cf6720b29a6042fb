//! CSV artifacts with stable documented schemas. UTF-8, header row, '.'
//! decimal separator, whole-file atomic writes.

use super::dataset::atomic_write;
use super::rd::RdPoint;
use crate::trainer::CycleRecord;
use std::path::Path;

/// `metrics.csv`: cycle,denoising_loss,reconstruction_loss,rate_proxy,wall_ms
pub fn metrics_csv(records: &[CycleRecord]) -> String {
    let mut s = String::from("cycle,denoising_loss,reconstruction_loss,rate_proxy,wall_ms\n");
    for r in records {
        s.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.3}\n",
            r.cycle, r.encoder_loss, r.reconstruction_loss, r.rate_proxy, r.wall_ms
        ));
    }
    s
}

/// `metrics.csv` without the wall-clock column, for bitwise determinism
/// comparisons (wall time is inherently run-dependent).
pub fn metrics_csv_deterministic(records: &[CycleRecord]) -> String {
    let mut s = String::from("cycle,denoising_loss,reconstruction_loss,rate_proxy\n");
    for r in records {
        s.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e}\n",
            r.cycle, r.encoder_loss, r.reconstruction_loss, r.rate_proxy
        ));
    }
    s
}

/// `rd.csv`: model_tag,gamma,seed,rate,distortion,diverged
pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut s = String::from("model_tag,gamma,seed,rate,distortion,diverged\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{:.17e},{:.17e},{}\n",
            p.model_tag, p.gamma, p.seed, p.rate, p.distortion, p.diverged
        ));
    }
    s
}

pub fn parse_rd_csv(text: &str) -> Vec<RdPoint> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return None;
            }
            Some(RdPoint {
                model_tag: f[0].to_string(),
                gamma: f[1].parse().ok()?,
                seed: f[2].parse().ok()?,
                rate: f[3].parse().ok()?,
                distortion: f[4].parse().ok()?,
                diverged: f[5].trim() == "true",
            })
        })
        .collect()
}

/// `latents.csv`: z_0..z_{D-1},label
pub fn latents_csv(rows: &[(Vec<f64>, u8)], dim: usize) -> String {
    let mut s = String::new();
    for j in 0..dim {
        s.push_str(&format!("z_{j},"));
    }
    s.push_str("label\n");
    for (z, label) in rows {
        for v in z {
            s.push_str(&format!("{v:.17e},"));
        }
        s.push_str(&format!("{label}\n"));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> std::io::Result<()> {
    atomic_write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rd_csv_roundtrip() {
        let pts = vec![
            RdPoint {
                model_tag: "dae".into(),
                gamma: 0.3,
                seed: 7,
                rate: 1.25,
                distortion: 0.5,
                diverged: false,
            },
            RdPoint {
                model_tag: "vae".into(),
                gamma: 3.0,
                seed: 8,
                rate: 0.01,
                distortion: 2.25,
                diverged: true,
            },
        ];
        let text = rd_csv(&pts);
        assert!(text.starts_with("model_tag,gamma,seed,rate,distortion,diverged\n"));
        let back = parse_rd_csv(&text);
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].model_tag, "dae");
        assert_eq!(back[0].rate, 1.25);
        assert!(back[1].diverged);
    }

    #[test]
    fn latents_header_matches_dimension() {
        let rows = vec![(vec![0.1, -0.2], 3u8)];
        let text = latents_csv(&rows, 2);
        assert!(text.starts_with("z_0,z_1,label\n"));
        assert_eq!(text.lines().count(), 2);
    }
}
