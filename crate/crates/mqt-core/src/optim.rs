//! Adam with bias correction. State is keyed by parameter name; parameters
//! without a gradient entry (frozen groups) are left untouched.

use std::collections::HashMap;

/// Hyperparameters for one optimizer instance.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Default)]
pub struct AdamState {
    step: u64,
    slots: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter once per optimizer step.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn slot(&mut self, name: &str, len: usize) -> &mut (Vec<f64>, Vec<f64>) {
        self.slots
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; len], vec![0.0; len]))
    }
}

/// One Adam update on a flat parameter buffer. `t` is the 1-based step count.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hp: &AdamParams,
) {
    debug_assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * grad[i];
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![1.5, -2.0, 0.25];
        let before = p.clone();
        let g = vec![0.0; 3];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_update(&mut p, &g, &mut m, &mut v, 1, &AdamParams::with_lr(0.1));
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        // From m = v = 0 the bias-corrected update collapses to
        // -lr * g / (|g| + eps), i.e. -lr * sign(g) up to eps terms.
        for &g0 in &[3.0f64, -0.004, 1e-3] {
            let mut p = vec![0.0];
            let (mut m, mut v) = (vec![0.0], vec![0.0]);
            adam_update(&mut p, &[g0], &mut m, &mut v, 1, &AdamParams::with_lr(0.05));
            let expect = -0.05 * g0.signum();
            assert!(
                (p[0] - expect).abs() < 1e-4,
                "g={g0}: update {} vs {expect}",
                p[0]
            );
        }
    }

    #[test]
    fn descends_a_scalar_quadratic() {
        // f(w) = w^2 from w = 1 with lr 0.1: |w| strictly decreases for 10 steps.
        let mut w = vec![1.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let hp = AdamParams::with_lr(0.1);
        let mut prev = w[0].abs();
        for t in 1..=10 {
            let g = vec![2.0 * w[0]];
            adam_update(&mut w, &g, &mut m, &mut v, t, &hp);
            assert!(w[0].abs() < prev, "step {t}: |w| grew to {}", w[0].abs());
            prev = w[0].abs();
        }
    }

    #[test]
    fn update_is_deterministic() {
        let run = || {
            let mut p = vec![0.3f64, -0.7];
            let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
            let hp = AdamParams::with_lr(0.01);
            for t in 1..=5 {
                let g: Vec<f64> = p.iter().map(|x| x.cos()).collect();
                adam_update(&mut p, &g, &mut m, &mut v, t, &hp);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
