//! Adam with per-group learning rates over the flat parameter vector.

use std::ops::Range;

/// One bias-corrected Adam update on a parameter slice.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Flat-vector optimizer with parameter groups (index ranges + learning
/// rate). Moments mirror the parameter shapes.
pub struct GroupAdam {
    pub groups: Vec<(Vec<Range<usize>>, f64)>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl GroupAdam {
    pub fn new(n: usize, groups: Vec<(Vec<Range<usize>>, f64)>) -> Self {
        GroupAdam {
            groups,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        for (ranges, lr) in &self.groups {
            for r in ranges {
                adam_step(
                    &mut params[r.clone()],
                    &grads[r.clone()],
                    &mut self.m[r.clone()],
                    &mut self.v[r.clone()],
                    *lr,
                    self.beta1,
                    self.beta2,
                    self.eps,
                    self.t,
                );
            }
        }
    }
}
