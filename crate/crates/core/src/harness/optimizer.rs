//! SGD with momentum and selective weight decay.

use crate::tensor::ParamStore;

/// Classic momentum update: `v = mu v + (g + wd w); w -= lr v`. Velocity
/// buffers are keyed by store order, trainable parameters only. Weight
/// decay skips parameters flagged `weight_decay = false` (prototypes).
pub struct SgdMomentum {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store
            .iter()
            .map(|p| {
                let p = p.borrow();
                if p.trainable {
                    vec![0.0; p.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        SgdMomentum {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, store: &ParamStore, lr: f64) {
        for (param, vel) in store.iter().zip(self.velocity.iter_mut()) {
            let mut p = param.borrow_mut();
            if !p.trainable {
                continue;
            }
            let decay = if p.weight_decay { self.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let g = p.grad[i] + decay * p.values[i];
                vel[i] = self.momentum * vel[i] + g;
                p.values[i] -= lr * vel[i];
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Param, ParamStore};

    #[test]
    fn zero_lr_changes_nothing() {
        let mut store = ParamStore::new();
        let p = store.register(Param::new("w", vec![1.0, -2.0], 1, 2, true));
        p.borrow_mut().grad = vec![0.5, 0.5];
        let mut opt = SgdMomentum::new(&store, 0.9, 0.0);
        opt.step(&store, 0.0);
        assert_eq!(p.borrow().values, vec![1.0, -2.0]);
        // Gradients are consumed either way.
        assert_eq!(p.borrow().grad, vec![0.0, 0.0]);
    }

    #[test]
    fn momentum_accumulates_across_steps() {
        let mut store = ParamStore::new();
        let p = store.register(Param::new("w", vec![0.0], 1, 1, true));
        let mut opt = SgdMomentum::new(&store, 0.5, 0.0);
        p.borrow_mut().grad = vec![1.0];
        opt.step(&store, 1.0); // v=1, w=-1
        p.borrow_mut().grad = vec![1.0];
        opt.step(&store, 1.0); // v=1.5, w=-2.5
        assert!((p.borrow().values[0] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn decay_respects_the_per_param_flag() {
        let mut store = ParamStore::new();
        let decayed = store.register(Param::new("w", vec![1.0], 1, 1, true));
        let exempt = store.register({
            let mut p = Param::new("protos", vec![1.0], 1, 1, true);
            p.weight_decay = false;
            p
        });
        let mut opt = SgdMomentum::new(&store, 0.0, 0.1);
        opt.step(&store, 1.0);
        assert!((decayed.borrow().values[0] - 0.9).abs() < 1e-15);
        assert_eq!(exempt.borrow().values[0], 1.0);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut store = ParamStore::new();
        let frozen = store.register(Param::new("f", vec![3.0], 1, 1, false));
        frozen.borrow_mut().grad = vec![9.0];
        let mut opt = SgdMomentum::new(&store, 0.9, 0.1);
        opt.step(&store, 1.0);
        assert_eq!(frozen.borrow().values, vec![3.0]);
    }
}
