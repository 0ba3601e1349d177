use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::checkpoint::{Checkpoint, Record};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.param_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }

    /// Adds the optimizer state to a checkpoint, keyed by parameter name.
    pub fn save_into(&self, store: &ParamStore, ck: &mut Checkpoint) {
        ck.push("optim.step", Record::U64(vec![self.step]));
        for (id, p) in store.iter() {
            ck.push(format!("optim.m.{}", p.name), Record::F64(self.m[id.index()].clone()));
            ck.push(format!("optim.v.{}", p.name), Record::F64(self.v[id.index()].clone()));
        }
    }

    pub fn load_from(&mut self, store: &ParamStore, ck: &Checkpoint) -> Result<()> {
        let step = ck.u64s("optim.step")?;
        self.step = *step.first().ok_or_else(|| Error::Format("empty optim.step".into()))?;
        for (id, p) in store.iter() {
            for (prefix, slot) in [("m", &mut self.m), ("v", &mut self.v)] {
                let t = ck.tensor(&format!("optim.{prefix}.{}", p.name))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Format(format!("optimizer state shape for `{}`", p.name)));
                }
                slot[id.index()] = t.clone();
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup` steps, then decay with the inverse
/// square root of the step. `step` counts from 1.
pub fn inverse_sqrt_lr(step: u64, peak: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert_eq!(inverse_sqrt_lr(1, 1.0, 4), 0.25);
        assert_eq!(inverse_sqrt_lr(4, 1.0, 4), 1.0);
        assert_eq!(inverse_sqrt_lr(16, 1.0, 4), 0.5);
        assert!(inverse_sqrt_lr(3, 1.0, 4) < inverse_sqrt_lr(4, 1.0, 4));
        assert!(inverse_sqrt_lr(9, 1.0, 4) > inverse_sqrt_lr(10, 1.0, 4));
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        store.param_mut(id).grad = Tensor::vector(vec![0.5, -4.0, 0.0]);
        let mut adam = Adam::new(&store, 0.9, 0.98, 1e-9);
        adam.update(&mut store, 0.1);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] - -1.9).abs() < 1e-8);
        assert_eq!(w[2], 3.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![5.0, -3.0])).unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.98, 1e-9);
        for _ in 0..2000 {
            let g = store.value(id).map(|x| 2.0 * x);
            store.param_mut(id).grad = g;
            adam.update(&mut store, 0.05);
        }
        assert!(store.value(id).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.param_mut(id).grad = Tensor::vector(vec![0.3, -0.1]);
        let mut adam = Adam::new(&store, 0.9, 0.98, 1e-9);
        adam.update(&mut store, 0.01);
        let mut ck = Checkpoint::new();
        adam.save_into(&store, &mut ck);
        let mut fresh = Adam::new(&store, 0.9, 0.98, 1e-9);
        fresh.load_from(&store, &ck).unwrap();
        assert_eq!(fresh.step, 1);
        let (mut s1, mut s2) = (store.clone(), store.clone());
        adam.update(&mut s1, 0.01);
        fresh.update(&mut s2, 0.01);
        assert_eq!(s1.value(id), s2.value(id));
    }
}
