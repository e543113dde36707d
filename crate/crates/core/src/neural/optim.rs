//! Adam with bias correction and a stepwise exponential learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::unet::UNet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `lr(t) = max(floor, initial * decay^floor(t / decay_steps))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub floor: f64,
    pub decay: f64,
    pub decay_steps: u64,
}

impl LrSchedule {
    /// Chooses `decay` so the rate reaches `floor` after `horizon` steps.
    /// Horizons shorter than one decay period keep the rate constant.
    pub fn for_horizon(initial: f64, floor: f64, decay_steps: u64, horizon: u64) -> Self {
        let periods = horizon / decay_steps.max(1);
        let decay = if periods == 0 { 1.0 } else { (floor / initial).powf(1.0 / periods as f64) };
        LrSchedule { initial, floor, decay, decay_steps }
    }

    pub fn lr(&self, t: u64) -> f64 {
        let k = (t / self.decay_steps.max(1)) as i32;
        (self.initial * self.decay.powi(k)).max(self.floor)
    }
}

/// One Adam update of `value` in place; `t` is the 1-based step.
pub fn adam_update(value: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        value[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Default, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter of `net` using its accumulated gradients.
    pub fn step(&mut self, net: &mut UNet, lr: f64) {
        self.t += 1;
        let t = self.t;
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.visit_params(&mut |p| {
            if ms.len() <= i {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            adam_update(&mut p.value, &p.grad, &mut ms[i], &mut vs[i], t, lr);
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_value() {
        let mut x = [0.3, -1.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for t in 1..5 {
            adam_update(&mut x, &[0.0, 0.0], &mut m, &mut v, t, 1e-3);
        }
        assert_eq!(x, [0.3, -1.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut x = [2.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        let lr = 1e-3;
        adam_update(&mut x, &[1.0], &mut m, &mut v, 1, lr);
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let want = 2.0 - lr / (1.0 + ADAM_EPS);
        assert!((x[0] - want).abs() < 1e-15);
    }

    #[test]
    fn schedule_reaches_floor() {
        let s = LrSchedule::for_horizon(1e-3, 1e-7, 600, 6000);
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(599), 1e-3);
        assert!((s.lr(600) - 1e-3 * s.decay).abs() < 1e-18);
        assert!((s.lr(6000) - 1e-7).abs() < 1e-15);
        assert_eq!(s.lr(1_000_000), 1e-7);
        let literal = LrSchedule { initial: 1e-3, floor: 1e-7, decay: 1e-4, decay_steps: 600 };
        assert_eq!(literal.lr(1200), 1e-7);
        assert_eq!(LrSchedule::for_horizon(1e-3, 1e-7, 600, 100).lr(99), 1e-3);
    }
}
