use super::params::{Gradients, ParamStore};
use super::tensor::{Real, Tensor};

/// RMSProp with a per-tensor running mean of squared gradients.
#[derive(Debug, Clone)]
pub struct RmsProp<T> {
    pub decay: T,
    pub eps: T,
    mean_sq: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(store: &ParamStore<T>, decay: T, eps: T) -> Self {
        let mean_sq = store
            .partitions()
            .iter()
            .map(|p| p.tensors.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect())
            .collect();
        Self {
            decay,
            eps,
            mean_sq,
        }
    }

    /// `v <- decay v + (1 - decay) g^2; p <- p - lr g / (sqrt(v) + eps)`, trainable partitions only.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: T) {
        assert!(lr >= T::zero(), "learning rate must be non-negative");
        let one_minus = T::one() - self.decay;
        for r in store.refs() {
            if !store.is_trainable(r.partition) {
                continue;
            }
            let g = grads.get(r);
            let v = &mut self.mean_sq[r.partition][r.tensor];
            let p = store.get_mut(r);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            for ((pv, &gv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut().iter_mut())
            {
                *vv = self.decay * *vv + one_minus * gv * gv;
                *pv -= lr * gv / (vv.sqrt() + self.eps);
            }
        }
    }

    pub fn mean_square(&self, partition: usize, tensor: usize) -> &Tensor<T> {
        &self.mean_sq[partition][tensor]
    }
}

/// Linear decay from `lr0` at step 0 to zero at `total_steps`.
pub fn lr_schedule(step: u64, lr0: f64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    (lr0 * (1.0 - step as f64 / total_steps as f64)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_partition("a");
        s.add_partition("b");
        s.add_tensor("a", "w", Tensor::row(&[1.0, -2.0]));
        s.add_tensor("b", "w", Tensor::row(&[3.0]));
        s.set_all_trainable();
        s
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut s = store();
        let mut g = s.zeros_like();
        g.get_mut(s.lookup("a", "w").unwrap()).data_mut().copy_from_slice(&[0.5, -1.0]);
        let mut opt = RmsProp::new(&s, 0.99, 0.1);
        opt.step(&mut s, &g, 0.01);
        let v0: f64 = (1.0 - 0.99) * 0.25;
        let expect0 = 1.0 - 0.01 * 0.5 / (v0.sqrt() + 0.1);
        let a = s.tensor("a", "w").unwrap().data();
        assert!((a[0] - expect0).abs() < 1e-15);
        assert_eq!(opt.mean_square(0, 0).data()[1], 1.0 - 0.99);
    }

    #[test]
    fn frozen_partitions_untouched() {
        let mut s = store();
        s.set_trainable(["a"]);
        let mut g = s.zeros_like();
        for r in s.refs() {
            g.get_mut(r).data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let mut opt = RmsProp::new(&s, 0.99, 0.1);
        opt.step(&mut s, &g, 0.1);
        assert_eq!(s.tensor("b", "w").unwrap().data(), &[3.0]);
        assert_ne!(s.tensor("a", "w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn lr_decays_linearly_to_zero() {
        assert_eq!(lr_schedule(0, 1e-3, 100), 1e-3);
        assert!((lr_schedule(50, 1e-3, 100) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(100, 1e-3, 100), 0.0);
        assert_eq!(lr_schedule(150, 1e-3, 100), 0.0);
        assert_eq!(lr_schedule(3, 1e-3, 0), 0.0);
    }
}
