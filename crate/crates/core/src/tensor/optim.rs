//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// Cosine decay from `base_lr` at step 0 to `floor` at `total_steps`, no restarts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub floor: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        self.floor + 0.5 * (self.base_lr - self.floor) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment buffers and step counter, indexed like the parameter store.
#[derive(Clone, Debug)]
pub struct OptimState<T = f32> {
    pub config: AdamWConfig,
    pub schedule: CosineSchedule,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig, schedule: CosineSchedule) -> Self {
        let zeros = |_| Vec::new();
        let first = (0..store.len()).map(zeros).collect();
        let second = (0..store.len()).map(zeros).collect();
        let mut s = Self {
            config,
            schedule,
            step: 0,
            first,
            second,
        };
        for (i, (_, t)) in store.iter().enumerate() {
            if t.requires_grad() {
                s.first[i] = vec![T::zero(); t.numel()];
                s.second[i] = vec![T::zero(); t.numel()];
            }
        }
        s
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate that the next [`OptimState::step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// One AdamW update from the gradients held in `store`.
    ///
    /// Non-finite gradients abort the update before any parameter moves.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let mut bad = Vec::new();
        for id in store.ids() {
            let t = store.get(id);
            if let Some(g) = t.grad() {
                let n = g.iter().filter(|x| !x.is_finite()).count();
                if n > 0 {
                    bad.push(format!("{} ({n} of {})", store.name(id), g.len()));
                }
            }
        }
        if !bad.is_empty() {
            return Err(Error::NonFinite(format!(
                "gradients at step {}: {}",
                self.step,
                bad.join(", ")
            )));
        }

        let lr = self.schedule.lr(self.step);
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let (lr_t, eps) = (T::lit(lr), T::lit(c.eps));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));

        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
                *p *= decay;
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Shapes of the moment buffers, for invariant checks.
    pub fn moment_lens(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.first.iter().zip(&self.second).map(|(m, v)| (m.len(), v.len()))
    }
}
