//! Raw dense kernels over row-major `f64` slices.
//!
//! Every routine here is deterministic: parallel variants partition the
//! output into disjoint regions so the result is bitwise identical to the
//! serial loop regardless of thread count.

use rayon::prelude::*;

/// Work threshold (multiply-adds) below which kernels stay serial.
const PAR_MIN_FLOPS: usize = 1 << 18;

/// Dot product with four independent accumulators. The serial `sum` form
/// chains every add through one register and cannot vectorize; this fixed
/// regrouping is equally deterministic (one specific summation order) and
/// lets the compiler use SIMD lanes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let n4 = a.len() / 4 * 4;
    let (a4, at) = a.split_at(n4);
    let (b4, bt) = b.split_at(n4);
    for (ca, cb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut tail = 0.0;
    for (x, y) in at.iter().zip(bt) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    let row = |ci: &mut [f64], i: usize| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in ci.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    };
    if m > 1 && m * k * n >= PAR_MIN_FLOPS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T  (rows of `b` are dotted against rows of `a`)
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    let row = |ci: &mut [f64], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in ci.iter_mut().enumerate() {
            *cv = dot(arow, &b[j * k..(j + 1) * k]);
        }
    };
    if m > 1 && m * k * n >= PAR_MIN_FLOPS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0; k * n];
    let row = |cp: &mut [f64], p: usize| {
        for i in 0..m {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (cv, bv) in cp.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    };
    if k > 1 && m * k * n >= PAR_MIN_FLOPS {
        c.par_chunks_mut(n).enumerate().for_each(|(p, cp)| row(cp, p));
    } else {
        for (p, cp) in c.chunks_mut(n).enumerate() {
            row(cp, p);
        }
    }
    c
}

/// Shape bookkeeping for the 2-D convolution kernels (NHWC layout,
/// kernel layout [kh, kw, c_in, c_out], symmetric zero padding).
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn conv(
        batch: usize,
        in_h: usize,
        in_w: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        c_out: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let num = in_h + 2 * pad;
        if num < kh || in_w + 2 * pad < kw || stride == 0 {
            return None;
        }
        let out_h = (in_h + 2 * pad - kh) / stride + 1;
        let out_w = (in_w + 2 * pad - kw) / stride + 1;
        Some(Self { batch, in_h, in_w, c_in, kh, kw, c_out, stride, pad, out_h, out_w })
    }

    /// Dims for a transposed convolution: `out = (in - 1) * stride + k - 2 * pad`.
    pub fn conv_transposed(
        batch: usize,
        in_h: usize,
        in_w: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        c_out: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let out_h = ((in_h - 1) * stride + kh).checked_sub(2 * pad)?;
        let out_w = ((in_w - 1) * stride + kw).checked_sub(2 * pad)?;
        if out_h == 0 || out_w == 0 || stride == 0 {
            return None;
        }
        // Reuse the same struct: (out_h, out_w) is the transposed output grid.
        Some(Self { batch, in_h, in_w, c_in, kh, kw, c_out, stride, pad, out_h, out_w })
    }
}

/// out[b, oh, ow, co] = sum_{di,dj,ci} in[b, oh*s+di-p, ow*s+dj-p, ci] * k[di, dj, ci, co]
pub fn conv2d(input: &[f64], kernel: &[f64], d: ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.out_h * d.out_w * d.c_out];
    let per_batch = d.out_h * d.out_w * d.c_out;
    let body = |ob: &mut [f64], b: usize| {
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                let orow =
                    &mut ob[(oh * d.out_w + ow) * d.c_out..(oh * d.out_w + ow + 1) * d.c_out];
                for di in 0..d.kh {
                    let ih = (oh * d.stride + di) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.in_h as isize {
                        continue;
                    }
                    for dj in 0..d.kw {
                        let iw = (ow * d.stride + dj) as isize - d.pad as isize;
                        if iw < 0 || iw >= d.in_w as isize {
                            continue;
                        }
                        let ibase =
                            ((b * d.in_h + ih as usize) * d.in_w + iw as usize) * d.c_in;
                        let kbase = (di * d.kw + dj) * d.c_in * d.c_out;
                        for ci in 0..d.c_in {
                            let v = input[ibase + ci];
                            if v == 0.0 {
                                continue;
                            }
                            let krow = &kernel[kbase + ci * d.c_out..kbase + (ci + 1) * d.c_out];
                            for (o, kv) in orow.iter_mut().zip(krow) {
                                *o += v * kv;
                            }
                        }
                    }
                }
            }
        }
    };
    run_batched(&mut out, per_batch, d, body);
    out
}

/// Gradient of `conv2d` w.r.t. its input: a scatter of `grad_out` through the kernel.
/// This is also the forward pass of the transposed convolution.
pub fn conv2d_input_grad(grad_out: &[f64], kernel: &[f64], d: ConvDims) -> Vec<f64> {
    let mut grad_in = vec![0.0; d.batch * d.in_h * d.in_w * d.c_in];
    let per_batch = d.in_h * d.in_w * d.c_in;
    let body = |gb: &mut [f64], b: usize| {
        for oh in 0..d.out_h {
            for ow in 0..d.out_w {
                let gorow = &grad_out
                    [((b * d.out_h + oh) * d.out_w + ow) * d.c_out..][..d.c_out];
                for di in 0..d.kh {
                    let ih = (oh * d.stride + di) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.in_h as isize {
                        continue;
                    }
                    for dj in 0..d.kw {
                        let iw = (ow * d.stride + dj) as isize - d.pad as isize;
                        if iw < 0 || iw >= d.in_w as isize {
                            continue;
                        }
                        let ibase = (ih as usize * d.in_w + iw as usize) * d.c_in;
                        let kbase = (di * d.kw + dj) * d.c_in * d.c_out;
                        for ci in 0..d.c_in {
                            let krow = &kernel[kbase + ci * d.c_out..kbase + (ci + 1) * d.c_out];
                            gb[ibase + ci] += dot(gorow, krow);
                        }
                    }
                }
            }
        }
    };
    run_batched(&mut grad_in, per_batch, d, body);
    grad_in
}

/// Gradient of `conv2d` w.r.t. the kernel. Parallel over kernel taps, so the
/// accumulation order over the batch is fixed.
pub fn conv2d_kernel_grad(input: &[f64], grad_out: &[f64], d: ConvDims) -> Vec<f64> {
    let mut grad_k = vec![0.0; d.kh * d.kw * d.c_in * d.c_out];
    let tap = |gk: &mut [f64], tap_idx: usize| {
        let di = tap_idx / (d.kw * d.c_in);
        let dj = (tap_idx / d.c_in) % d.kw;
        let ci = tap_idx % d.c_in;
        for b in 0..d.batch {
            for oh in 0..d.out_h {
                let ih = (oh * d.stride + di) as isize - d.pad as isize;
                if ih < 0 || ih >= d.in_h as isize {
                    continue;
                }
                for ow in 0..d.out_w {
                    let iw = (ow * d.stride + dj) as isize - d.pad as isize;
                    if iw < 0 || iw >= d.in_w as isize {
                        continue;
                    }
                    let v = input[((b * d.in_h + ih as usize) * d.in_w + iw as usize) * d.c_in + ci];
                    if v == 0.0 {
                        continue;
                    }
                    let grow = &grad_out[((b * d.out_h + oh) * d.out_w + ow) * d.c_out..][..d.c_out];
                    for (g, go) in gk.iter_mut().zip(grow) {
                        *g += v * go;
                    }
                }
            }
        }
    };
    let taps = d.kh * d.kw * d.c_in;
    let work = d.batch * d.out_h * d.out_w * taps * d.c_out;
    if taps > 1 && work >= PAR_MIN_FLOPS {
        grad_k.par_chunks_mut(d.c_out).enumerate().for_each(|(i, gk)| tap(gk, i));
    } else {
        for (i, gk) in grad_k.chunks_mut(d.c_out).enumerate() {
            tap(gk, i);
        }
    }
    grad_k
}

fn run_batched<F: Fn(&mut [f64], usize) + Sync>(
    out: &mut [f64],
    per_batch: usize,
    d: ConvDims,
    body: F,
) {
    let work = d.batch * d.out_h * d.out_w * d.kh * d.kw * d.c_in * d.c_out;
    if d.batch > 1 && work >= PAR_MIN_FLOPS {
        out.par_chunks_mut(per_batch).enumerate().for_each(|(b, ob)| body(ob, b));
    } else {
        for (b, ob) in out.chunks_mut(per_batch).enumerate() {
            body(ob, b);
        }
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
