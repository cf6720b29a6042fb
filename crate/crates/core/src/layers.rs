//! Shared network building blocks: dense layers, parameter init, and
//! multi-head attention with per-head projection matrices.

use crate::tensor::{Result, Tape, Tensor, TensorRef};
use crate::util;
use rand_chacha::ChaCha8Rng;

/// Weight matrix drawn `N(0, 1/fan_in)`; the usual dense-layer init here.
pub(crate) fn init_weight(fan_in: usize, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    util::randn_scaled(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// `x W + b` for `x: [B, in]`.
pub(crate) fn linear(tape: &mut Tape, x: TensorRef, w: TensorRef, b: TensorRef) -> Result<TensorRef> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// One attention head's projections.
#[derive(Debug, Clone)]
pub(crate) struct HeadWeights {
    pub w_q: Tensor, // [q_dim, d_head]
    pub w_k: Tensor, // [kv_dim, d_head]
    pub w_v: Tensor, // [kv_dim, d_head]
}

/// Multi-head attention parameters; `w_o` maps the concatenated heads back
/// to `out_dim`.
#[derive(Debug, Clone)]
pub(crate) struct AttentionWeights {
    pub heads: Vec<HeadWeights>,
    pub w_o: Tensor, // [n_heads * d_head, out_dim]
}

impl AttentionWeights {
    /// `q_dim -> out_dim` attention over `kv_dim` tokens with `total_width`
    /// split evenly across `n_heads`.
    pub fn init(
        q_dim: usize,
        kv_dim: usize,
        total_width: usize,
        n_heads: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(total_width % n_heads, 0, "head count must divide attention width");
        let d_head = total_width / n_heads;
        let heads = (0..n_heads)
            .map(|_| HeadWeights {
                w_q: init_weight(q_dim, &[q_dim, d_head], rng),
                w_k: init_weight(kv_dim, &[kv_dim, d_head], rng),
                w_v: init_weight(kv_dim, &[kv_dim, d_head], rng),
            })
            .collect();
        Self { heads, w_o: init_weight(total_width, &[total_width, out_dim], rng) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.h{i}.w_q"), &h.w_q));
            out.push((format!("{prefix}.h{i}.w_k"), &h.w_k));
            out.push((format!("{prefix}.h{i}.w_v"), &h.w_v));
        }
        out.push((format!("{prefix}.w_o"), &self.w_o));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("{prefix}.h{i}.w_q"), &mut h.w_q));
            out.push((format!("{prefix}.h{i}.w_k"), &mut h.w_k));
            out.push((format!("{prefix}.h{i}.w_v"), &mut h.w_v));
        }
        out.push((format!("{prefix}.w_o"), &mut self.w_o));
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> AttentionLeaves {
        let mut stage_one = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        AttentionLeaves {
            heads: self
                .heads
                .iter()
                .map(|h| (stage_one(&h.w_q), stage_one(&h.w_k), stage_one(&h.w_v)))
                .collect(),
            w_o: stage_one(&self.w_o),
        }
    }
}

pub(crate) struct AttentionLeaves {
    pub heads: Vec<(TensorRef, TensorRef, TensorRef)>,
    pub w_o: TensorRef,
}

impl AttentionLeaves {
    /// Leaf refs in `visit()` order.
    pub fn push_refs(&self, out: &mut Vec<TensorRef>) {
        for (q, k, v) in &self.heads {
            out.push(*q);
            out.push(*k);
            out.push(*v);
        }
        out.push(self.w_o);
    }
}

/// Multi-head attention of queries `[B, Nq, q_dim]` against key/value tokens
/// `[B, Nk, kv_dim]`; softmax over the key axis, heads concatenated and
/// projected by `w_o`.
pub(crate) fn multi_head_attention(
    tape: &mut Tape,
    leaves: &AttentionLeaves,
    queries: TensorRef,
    tokens: TensorRef,
) -> Result<TensorRef> {
    let (b, nq, _qd) = {
        let s = tape.value(queries).shape();
        (s[0], s[1], s[2])
    };
    let (nk, kv_dim) = {
        let s = tape.value(tokens).shape();
        (s[1], s[2])
    };
    let tokens_flat = tape.reshape(tokens, &[b * nk, kv_dim])?;
    let mut head_outputs = Vec::with_capacity(leaves.heads.len());
    for &(w_q, w_k, w_v) in &leaves.heads {
        let d_head = tape.value(w_q).shape()[1];
        let q_dim = tape.value(w_q).shape()[0];
        let q_flat = tape.reshape(queries, &[b * nq, q_dim])?;
        let q = tape.matmul(q_flat, w_q)?;
        let q = tape.reshape(q, &[b, nq, d_head])?;
        let k = tape.matmul(tokens_flat, w_k)?;
        let k = tape.reshape(k, &[b, nk, d_head])?;
        let v = tape.matmul(tokens_flat, w_v)?;
        let v = tape.reshape(v, &[b, nk, d_head])?;
        let kt = tape.transpose_last2(k)?;
        let logits = tape.bmm(q, kt)?; // [B, Nq, Nk]
        let logits = tape.scale(logits, 1.0 / (d_head as f64).sqrt());
        let attn = tape.softmax_lastdim(logits)?;
        head_outputs.push(tape.bmm(attn, v)?); // [B, Nq, d_head]
    }
    let concat = tape.concat_lastdim(&head_outputs)?; // [B, Nq, total_width]
    let total = tape.value(concat).shape()[2];
    let flat = tape.reshape(concat, &[b * nq, total])?;
    let out = tape.matmul(flat, leaves.w_o)?;
    let out_dim = tape.value(leaves.w_o).shape()[1];
    tape.reshape(out, &[b, nq, out_dim])
}

/// Attention weights of a single-query summarizer returning `[B, out_dim]`.
pub(crate) fn attend_single_query(
    tape: &mut Tape,
    leaves: &AttentionLeaves,
    query: TensorRef, // [B, q_dim]
    tokens: TensorRef, // [B, Nk, kv_dim]
) -> Result<TensorRef> {
    let s = tape.value(query).shape().to_vec();
    let q3 = tape.reshape(query, &[s[0], 1, s[1]])?;
    let out = multi_head_attention(tape, leaves, q3, tokens)?;
    let od = tape.value(out).shape()[2];
    tape.reshape(out, &[s[0], od])
}

/// 2-D sinusoidal positional encodings for an `h x w` token grid with `c`
/// channels (`c` divisible by 4): half the channels encode the row, half the
/// column, alternating sin/cos over a geometric frequency ladder.
pub(crate) fn positional_encoding_2d(h: usize, w: usize, c: usize) -> Tensor {
    assert_eq!(c % 4, 0, "positional encoding needs channels divisible by 4");
    let quarter = c / 4;
    let mut data = vec![0.0; h * w * c];
    for r in 0..h {
        for col in 0..w {
            let base = (r * w + col) * c;
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                data[base + 4 * i] = (r as f64 * freq).sin();
                data[base + 4 * i + 1] = (r as f64 * freq).cos();
                data[base + 4 * i + 2] = (col as f64 * freq).sin();
                data[base + 4 * i + 3] = (col as f64 * freq).cos();
            }
        }
    }
    Tensor::new(vec![h * w, c], data).expect("sized by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;

    #[test]
    fn single_token_attention_returns_its_value_projection() {
        // With one key, the softmax weight is 1 for any query: the output is
        // the token's value projection through w_o, independent of the query.
        let mut rng = rng_from_seed(20);
        let attn = AttentionWeights::init(6, 5, 8, 2, 6, &mut rng);
        let token = util::randn(&[1, 1, 5], &mut rng);

        let run = |q: &Tensor| {
            let mut tape = Tape::new();
            let leaves = attn.stage(&mut tape, false);
            let qr = tape.constant(q);
            let tr = tape.constant(&token);
            let out = attend_single_query(&mut tape, &leaves, qr, tr).unwrap();
            tape.value(out).data().to_vec()
        };
        let (a, b) = (run(&util::randn(&[1, 6], &mut rng)), run(&util::randn(&[1, 6], &mut rng)));
        assert_eq!(a, b, "single-key attention must ignore the query");

        // Direct computation: concat_h(token * w_v_h) * w_o.
        let mut expect = vec![0.0; 6];
        let mut concat = Vec::new();
        for h in &attn.heads {
            let d_head = h.w_v.shape()[1];
            for j in 0..d_head {
                let mut s = 0.0;
                for i in 0..5 {
                    s += token.data()[i] * h.w_v.data()[i * d_head + j];
                }
                concat.push(s);
            }
        }
        for (j, e) in expect.iter_mut().enumerate() {
            for (i, c) in concat.iter().enumerate() {
                *e += c * attn.w_o.data()[i * 6 + j];
            }
        }
        for (x, y) in a.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_tokens_match_single_token_output() {
        let mut rng = rng_from_seed(21);
        let attn = AttentionWeights::init(6, 5, 8, 2, 6, &mut rng);
        let token = util::randn(&[1, 1, 5], &mut rng);
        let two = Tensor::new(vec![1, 2, 5], [token.data(), token.data()].concat()).unwrap();
        let q = util::randn(&[1, 6], &mut rng);

        let run = |tok: &Tensor| {
            let mut tape = Tape::new();
            let leaves = attn.stage(&mut tape, false);
            let qr = tape.constant(&q);
            let tr = tape.constant(tok);
            let out = attend_single_query(&mut tape, &leaves, qr, tr).unwrap();
            tape.value(out).data().to_vec()
        };
        let (a, b) = (run(&token), run(&two));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "softmax symmetry: {x} vs {y}");
        }
    }

    #[test]
    fn positional_encoding_distinguishes_positions() {
        let pe = positional_encoding_2d(3, 3, 8);
        assert_eq!(pe.shape(), &[9, 8]);
        let a = &pe.data()[0..8];
        let b = &pe.data()[8 * 8..9 * 8];
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-6));
    }
}
