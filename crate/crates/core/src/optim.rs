//! AdamW with warmup + cosine-to-zero learning-rate scheduling.

use std::collections::BTreeMap;

use crate::tensor::Array;

#[derive(Clone, Copy, Debug)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWParams {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        AdamWParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    /// Linear warmup, then cosine decay reaching exactly zero at the final step.
    WarmupCosine,
}

#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn constant() -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            total_steps: 0,
            warmup_steps: 0,
        }
    }

    pub fn warmup_cosine(total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = (warmup_ratio * total_steps as f64).round() as usize;
        Schedule {
            kind: ScheduleKind::WarmupCosine,
            total_steps,
            warmup_steps,
        }
    }

    /// Multiplier in [0, 1] for 0-based step index.
    pub fn factor(&self, step: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => 1.0,
            ScheduleKind::WarmupCosine => {
                if self.total_steps == 0 {
                    return 1.0;
                }
                if step < self.warmup_steps {
                    (step + 1) as f64 / self.warmup_steps as f64
                } else {
                    let span = (self.total_steps - self.warmup_steps).max(1) as f64;
                    let progress = (step + 1 - self.warmup_steps) as f64 / span;
                    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

/// Decoupled-weight-decay Adam over a named set of arrays.
pub struct AdamW {
    params: AdamWParams,
    schedule: Schedule,
    step: usize,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(params: AdamWParams, schedule: Schedule) -> Self {
        AdamW {
            params,
            schedule,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn lr_at_next_step(&self) -> f64 {
        self.params.lr * self.schedule.factor(self.step)
    }

    /// Count of optimizer-visible scalar values (moment-tracked parameters).
    pub fn visible_param_count(&self) -> usize {
        self.state.values().map(|(m, _)| m.len()).sum()
    }

    /// One update over every (name, grad) pair. Parameters without a gradient
    /// entry are left untouched.
    pub fn step(
        &mut self,
        values: &mut BTreeMap<String, Array>,
        grads: &BTreeMap<String, Array>,
    ) {
        let lr = self.params.lr * self.schedule.factor(self.step);
        let AdamWParams {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.params;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, grad) in grads {
            let value = values
                .get_mut(name)
                .unwrap_or_else(|| panic!("optimizer step on unknown param {name}"));
            let n = value.numel();
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = value.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * data[i]);
            }
        }
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_decay_to_zero() {
        let s = Schedule::warmup_cosine(10, 0.2);
        assert_eq!(s.warmup_steps, 2);
        assert!((s.factor(0) - 0.5).abs() < 1e-12);
        assert!((s.factor(1) - 1.0).abs() < 1e-12);
        assert!(s.factor(2) < 1.0);
        // exactly zero at the final step
        assert!(s.factor(9).abs() < 1e-12);
        // monotone decreasing after warmup
        for t in 2..9 {
            assert!(s.factor(t) > s.factor(t + 1));
        }
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut values = BTreeMap::new();
        values.insert("x".to_string(), Array::from_vec(vec![1], vec![0.0]).unwrap());
        let mut opt = AdamW::new(AdamWParams::with_lr(0.1, 0.0), Schedule::constant());
        for _ in 0..300 {
            let x = values["x"].data()[0];
            let g = 2.0 * (x - 3.0);
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Array::from_vec(vec![1], vec![g]).unwrap());
            opt.step(&mut values, &grads);
        }
        assert!((values["x"].data()[0] - 3.0).abs() < 0.05);
    }
}
