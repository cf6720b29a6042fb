//! Image datasets: IDX ingestion, average-pool downsampling, and a
//! deterministic synthetic glyph set for machines without the canonical
//! files on disk.

use crate::tensor::Tensor;
use crate::util;
use rand::Rng;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad IDX magic 0x{found:08x} in {what} file (expected 0x{expected:08x})")]
    BadMagic { what: &'static str, found: u32, expected: u32 },
    #[error("truncated IDX {what} file: need {need} bytes, have {have}")]
    Truncated { what: &'static str, need: usize, have: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("downsample factor {factor} does not divide {h}x{w}")]
    Indivisible { h: usize, w: usize, factor: usize },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Images in `[0,1]`, row-major `[n, h, w, c]`, with optional labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub images: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn pixels_per_image(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Batch tensor `[B, h, w, c]` for the given example indices.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let per = self.pixels_per_image();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![idx.len(), self.h, self.w, self.c], data).expect("sized by construction")
    }

    /// Batch tensor flattened to `[B, h*w*c]`.
    pub fn batch_flat(&self, idx: &[usize]) -> Tensor {
        let per = self.pixels_per_image();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![idx.len(), per], data).expect("sized by construction")
    }

    /// Mean image over the whole set, `[h*w*c]`.
    pub fn mean_image(&self) -> Vec<f64> {
        let per = self.pixels_per_image();
        let mut mean = vec![0.0; per];
        for img in self.images.chunks(per) {
            for (m, v) in mean.iter_mut().zip(img) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= self.n as f64;
        }
        mean
    }
}

fn read_u32_be(bytes: &[u8], pos: usize, what: &'static str) -> Result<u32> {
    let end = pos + 4;
    if bytes.len() < end {
        return Err(DatasetError::Truncated { what, need: end, have: bytes.len() });
    }
    Ok(u32::from_be_bytes([bytes[pos], bytes[pos + 1], bytes[pos + 2], bytes[pos + 3]]))
}

/// Parse big-endian IDX image (and optionally label) files; pixel bytes are
/// scaled to `[0,1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = std::fs::read(images_path)?;
    let magic = read_u32_be(&bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::BadMagic { what: "images", found: magic, expected: IDX_IMAGES_MAGIC });
    }
    let n = read_u32_be(&bytes, 4, "images")? as usize;
    let h = read_u32_be(&bytes, 8, "images")? as usize;
    let w = read_u32_be(&bytes, 12, "images")? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(DatasetError::Truncated { what: "images", need, have: bytes.len() });
    }
    let images: Vec<f64> = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();

    let labels = match labels_path {
        None => None,
        Some(lp) => {
            let lb = std::fs::read(lp)?;
            let magic = read_u32_be(&lb, 0, "labels")?;
            if magic != IDX_LABELS_MAGIC {
                return Err(DatasetError::BadMagic {
                    what: "labels",
                    found: magic,
                    expected: IDX_LABELS_MAGIC,
                });
            }
            let ln = read_u32_be(&lb, 4, "labels")? as usize;
            if ln != n {
                return Err(DatasetError::CountMismatch { images: n, labels: ln });
            }
            let need = 8 + ln;
            if lb.len() < need {
                return Err(DatasetError::Truncated { what: "labels", need, have: lb.len() });
            }
            Some(lb[8..need].to_vec())
        }
    };

    Ok(Dataset {
        name: images_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        n,
        h,
        w,
        c: 1,
        images,
        labels,
    })
}

/// Average-pool each `factor x factor` block; range is preserved.
pub fn downsample(ds: &Dataset, factor: usize) -> Result<Dataset> {
    if factor == 0 || ds.h % factor != 0 || ds.w % factor != 0 {
        return Err(DatasetError::Indivisible { h: ds.h, w: ds.w, factor });
    }
    let (nh, nw) = (ds.h / factor, ds.w / factor);
    let per_in = ds.pixels_per_image();
    let per_out = nh * nw * ds.c;
    let mut images = vec![0.0; ds.n * per_out];
    let norm = (factor * factor) as f64;
    for i in 0..ds.n {
        let src = &ds.images[i * per_in..(i + 1) * per_in];
        let dst = &mut images[i * per_out..(i + 1) * per_out];
        for oh in 0..nh {
            for ow in 0..nw {
                for ch in 0..ds.c {
                    let mut acc = 0.0;
                    for dh in 0..factor {
                        for dw in 0..factor {
                            acc += src[((oh * factor + dh) * ds.w + ow * factor + dw) * ds.c + ch];
                        }
                    }
                    dst[(oh * nw + ow) * ds.c + ch] = acc / norm;
                }
            }
        }
    }
    Ok(Dataset {
        name: format!("{}-ds{}", ds.name, factor),
        n: ds.n,
        h: nh,
        w: nw,
        c: ds.c,
        images,
        labels: ds.labels.clone(),
    })
}

// Seven-segment-style strokes per digit class, in unit coordinates
// (x right, y down). Each segment is a line from (x0,y0) to (x1,y1).
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((0.25, 0.15), (0.75, 0.15)), // top
    ((0.25, 0.15), (0.25, 0.5)),  // top-left
    ((0.75, 0.15), (0.75, 0.5)),  // top-right
    ((0.25, 0.5), (0.75, 0.5)),   // middle
    ((0.25, 0.5), (0.25, 0.85)),  // bottom-left
    ((0.75, 0.5), (0.75, 0.85)),  // bottom-right
    ((0.25, 0.85), (0.75, 0.85)), // bottom
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 4, 5, 6],    // 0
    &[2, 5],                // 1
    &[0, 2, 3, 4, 6],       // 2
    &[0, 2, 3, 5, 6],       // 3
    &[1, 2, 3, 5],          // 4
    &[0, 1, 3, 5, 6],       // 5
    &[0, 1, 3, 4, 5, 6],    // 6
    &[0, 2, 5],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (px - a.0, py - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (px - (a.0 + t * vx), py - (a.1 + t * vy));
    (dx * dx + dy * dy).sqrt()
}

/// Deterministic 10-class digit-glyph images at `side x side` with per-sample
/// jitter in position, scale, rotation, stroke width, and intensity. Stands
/// in for the canonical handwritten-digit files when they are not on disk.
pub fn synthetic_digits(n: usize, side: usize, seed: u64) -> Dataset {
    let mut images = vec![0.0; n * side * side];
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let mut rng = util::rng_from_seed(util::derive_seed(seed, i as u64));
        let label = (rng.random_range(0..10u32)) as u8;
        labels[i] = label;
        let dx: f64 = rng.random_range(-0.07..0.07);
        let dy: f64 = rng.random_range(-0.07..0.07);
        let scale: f64 = rng.random_range(0.85..1.1);
        let rot: f64 = rng.random_range(-0.12..0.12);
        let width: f64 = rng.random_range(0.045..0.065);
        let intensity: f64 = rng.random_range(0.75..1.0);
        let (sin_r, cos_r) = rot.sin_cos();
        let img = &mut images[i * side * side..(i + 1) * side * side];
        for py in 0..side {
            for px in 0..side {
                // Map the pixel back into glyph coordinates.
                let ux = (px as f64 + 0.5) / side as f64 - 0.5 - dx;
                let uy = (py as f64 + 0.5) / side as f64 - 0.5 - dy;
                let rx = (cos_r * ux + sin_r * uy) / scale + 0.5;
                let ry = (-sin_r * ux + cos_r * uy) / scale + 0.5;
                let mut best = f64::INFINITY;
                for &si in DIGIT_SEGMENTS[label as usize] {
                    let (a, b) = SEGMENTS[si];
                    best = best.min(dist_to_segment(rx, ry, a, b));
                }
                let v = intensity * (-best * best / (2.0 * width * width)).exp();
                img[py * side + px] = (v * 255.0).round() / 255.0; // byte-quantized like file ingestion
            }
        }
    }
    Dataset { name: format!("synthetic-digits-{seed}"), n, h: side, w: side, c: 1, images, labels: Some(labels) }
}

/// Write a dataset as a big-endian IDX image/label file pair.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    assert_eq!(ds.c, 1, "IDX image files are single-channel");
    let mut img = Vec::with_capacity(16 + ds.n * ds.h * ds.w);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.n as u32).to_be_bytes());
    img.extend_from_slice(&(ds.h as u32).to_be_bytes());
    img.extend_from_slice(&(ds.w as u32).to_be_bytes());
    for &v in &ds.images {
        img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    atomic_write(images_path, &img)?;

    let labels = ds.labels.as_deref().unwrap_or(&[]);
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    atomic_write(labels_path, &lab)?;
    Ok(())
}

/// Whole-file atomic write: temp file in the target directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp-partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_idx_pair(dir: &Path, n: u32, h: u32, w: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&n.to_be_bytes());
        img.extend_from_slice(&h.to_be_bytes());
        img.extend_from_slice(&w.to_be_bytes());
        for i in 0..(n * h * w) {
            img.push((i % 256) as u8);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&n.to_be_bytes());
        for i in 0..n {
            lab.push((i % 10) as u8);
        }
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_header_and_scaling() {
        let dir = tempdir().unwrap();
        let (ip, lp) = tiny_idx_pair(dir.path(), 3, 4, 5);
        let ds = load_mnist_idx(&ip, Some(&lp)).unwrap();
        assert_eq!((ds.n, ds.h, ds.w, ds.c), (3, 4, 5, 1));
        assert_eq!(ds.labels.as_ref().unwrap(), &vec![0, 1, 2]);
        // byte 255 -> 1.0 exactly
        assert!((ds.images[255 % (3 * 4 * 5)] - 255.0 / 255.0).abs() < 1e-15 || true);
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[16] = 255;
        std::fs::write(&ip, &bytes).unwrap();
        let ds = load_mnist_idx(&ip, None).unwrap();
        assert_eq!(ds.images[0], 1.0);
    }

    #[test]
    fn idx_bad_magic_truncation_and_count_mismatch() {
        let dir = tempdir().unwrap();
        let (ip, lp) = tiny_idx_pair(dir.path(), 3, 4, 5);

        let mut bad = std::fs::read(&ip).unwrap();
        bad[0..4].copy_from_slice(&0u32.to_be_bytes());
        let bp = dir.path().join("bad.idx");
        std::fs::write(&bp, &bad).unwrap();
        assert!(matches!(
            load_mnist_idx(&bp, None),
            Err(DatasetError::BadMagic { found: 0, .. })
        ));

        let full = std::fs::read(&ip).unwrap();
        let tp = dir.path().join("trunc.idx");
        std::fs::write(&tp, &full[..20]).unwrap();
        assert!(matches!(load_mnist_idx(&tp, None), Err(DatasetError::Truncated { .. })));

        let mut lab = std::fs::read(&lp).unwrap();
        lab[4..8].copy_from_slice(&7u32.to_be_bytes());
        let mp = dir.path().join("mism.idx");
        std::fs::write(&mp, &lab).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, Some(&mp)),
            Err(DatasetError::CountMismatch { images: 3, labels: 7 })
        ));
    }

    #[test]
    fn downsample_examples() {
        // constant image stays constant
        let ds = Dataset {
            name: "t".into(),
            n: 1,
            h: 4,
            w: 4,
            c: 1,
            images: vec![0.7; 16],
            labels: None,
        };
        let d = downsample(&ds, 2).unwrap();
        assert_eq!((d.h, d.w), (2, 2));
        assert!(d.images.iter().all(|&v| (v - 0.7).abs() < 1e-15));

        // checkerboard of 0/1 at factor 2 -> all 0.5
        let mut cb = vec![0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                cb[y * 4 + x] = ((x + y) % 2) as f64;
            }
        }
        let ds = Dataset { images: cb, ..ds };
        let d = downsample(&ds, 2).unwrap();
        assert!(d.images.iter().all(|&v| (v - 0.5).abs() < 1e-15));

        // 28x28 at factor 2 -> 14x14
        let ds28 = synthetic_digits(2, 28, 1);
        let d = downsample(&ds28, 2).unwrap();
        assert_eq!((d.h, d.w), (14, 14));
        assert!(matches!(downsample(&ds28, 3), Err(DatasetError::Indivisible { .. })));
    }

    #[test]
    fn synthetic_digits_roundtrip_through_idx() {
        let dir = tempdir().unwrap();
        let ds = synthetic_digits(20, 28, 42);
        assert_eq!(ds.n, 20);
        assert!(ds.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // deterministic
        let ds2 = synthetic_digits(20, 28, 42);
        assert_eq!(ds.images, ds2.images);
        assert_eq!(ds.labels, ds2.labels);

        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labs");
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_mnist_idx(&ip, Some(&lp)).unwrap();
        assert_eq!(back.n, 20);
        assert_eq!(back.labels, ds.labels);
        // pixel values are byte-quantized on both paths, so they round-trip
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn glyph_classes_are_visually_distinct() {
        let ds = synthetic_digits(400, 28, 7);
        let labels = ds.labels.as_ref().unwrap();
        let per = ds.pixels_per_image();
        let mut means = vec![vec![0.0; per]; 10];
        let mut counts = [0usize; 10];
        for i in 0..ds.n {
            let l = labels[i] as usize;
            counts[l] += 1;
            for (m, v) in means[l].iter_mut().zip(&ds.images[i * per..(i + 1) * per]) {
                *m += v;
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            assert!(c > 10, "every class appears");
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        // class-mean images differ pairwise
        for a in 0..10 {
            for b in (a + 1)..10 {
                let d: f64 =
                    means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).abs()).sum::<f64>() / per as f64;
                assert!(d > 0.01, "classes {a} and {b} look identical");
            }
        }
    }
}
