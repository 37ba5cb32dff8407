//! Adam with bias correction, plus the cosine learning-rate schedule used by
//! the policy trainer.

use crate::graph::Arr;
use crate::param::ParamSet;

/// Adam optimizer.  State tensors are allocated per parameter at
/// construction and updated in registration order, which keeps training
/// bit-reproducible for a fixed gradient sequence.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let m = (0..params.len())
            .map(|i| Arr::zeros(params.value(i).raw_dim()))
            .collect();
        let v = (0..params.len())
            .map(|i| Arr::zeros(params.value(i).raw_dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one update.  `grads` must be aligned with the parameter set's
    /// registration order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Arr]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let p = params.value_mut(i);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let s = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = ParamSet::new();
        p.register("x", Arr::from_elem(IxDyn(&[2]), 5.0));
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..200 {
            let g = p.value(0).mapv(|x| 2.0 * x);
            opt.step(&mut p, &[g]);
        }
        assert!(p.value(0).iter().all(|&x| x.abs() < 0.1));
    }

    #[test]
    fn cosine_schedule_hits_endpoints() {
        assert!((cosine_lr(3e-4, 0, 100) - 3e-4).abs() < 1e-18);
        assert!(cosine_lr(3e-4, 100, 100).abs() < 1e-18);
        assert!(cosine_lr(3e-4, 50, 100) > 0.0);
        assert!((cosine_lr(3e-4, 50, 100) - 1.5e-4).abs() < 1e-12);
    }
}
