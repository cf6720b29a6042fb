//! Adaptive-moment optimizer with bias correction.

use crate::tensor::{Tape, Tensor, TensorRef};

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over parameter tensors paired positionally with gradient
    /// slices; `None` gradients count as zero. Moment buffers are allocated
    /// lazily on the first step.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &[Option<&[f64]>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, ((_, p), g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for ((pv, mv), (vv, gv)) in
                p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut().zip(*g))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Update from a backpropagated tape: leaf refs are paired positionally
    /// with the parameter tensors.
    pub fn step_from_tape(
        &mut self,
        tape: &Tape,
        refs: &[TensorRef],
        params: Vec<(String, &mut Tensor)>,
    ) {
        let grads: Vec<Option<&[f64]>> = refs.iter().map(|r| tape.grad(*r)).collect();
        self.step(params, &grads);
    }

    /// Moment buffers for checkpointing: `(t, first moments, second moments)`.
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
