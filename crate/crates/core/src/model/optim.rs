//! Adam with bias correction and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::real::Real;

use super::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            peak: lr,
            floor: lr,
            warmup_steps: 0,
            total_steps: 1,
        }
    }

    /// Linear warmup, then cosine decay from `peak` to `floor`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.floor
            + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Params<F>,
    v: Params<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &Params<F>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn update(&mut self, params: &mut Params<F>, grads: &Params<F>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = F::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = F::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (F::lit(lr), F::lit(self.eps));
        let one = F::one();
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule {
            peak: 3e-4,
            floor: 3e-5,
            warmup_steps: 0,
            total_steps: 100,
        };
        assert!((s.at(0) - 3e-4).abs() < 1e-15);
        assert!((s.at(100) - 3e-5).abs() < 1e-15);
        assert!((s.at(50) - 1.65e-4).abs() < 1e-12);
        assert!(s.at(1000) == s.at(100));
    }

    #[test]
    fn warmup_ramps_linearly() {
        let s = LrSchedule {
            peak: 1.0,
            floor: 0.0,
            warmup_steps: 4,
            total_steps: 10,
        };
        assert_eq!(s.at(0), 0.25);
        assert_eq!(s.at(3), 1.0);
    }
}
