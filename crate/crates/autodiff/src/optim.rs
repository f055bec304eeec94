use crate::params::{ParamId, ParamStore};
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam without weight decay over a fixed subset of a [`ParamStore`].
///
/// Moment buffers are public so they can be checkpointed and restored.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    params: Vec<ParamId>,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.get(*id).shape().to_vec());
        let first_moment = params.iter().map(zeros).collect();
        let second_moment = params.iter().map(zeros).collect();
        Self { config, step: 0, params, first_moment, second_moment }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies one update. Parameters without a gradient are left untouched
    /// and their moments do not decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (slot, &id) in self.params.iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let m = self.first_moment[slot].data_mut();
            let v = self.second_moment[slot].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new([3], vec![1.0, -2.0, 0.5]));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store, vec![id]);
        let tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = w.sqr().sum();
        let grads = tape.backward(loss);
        drop(tape);
        opt.step(&mut store, &grads);
        // bias-corrected first step is lr * sign(g) up to eps
        let got = store.get(id).data().to_vec();
        for (g, w0) in got.iter().zip([1.0, -2.0, 0.5]) {
            assert!((g - (w0 - 0.1 * f64::signum(w0))).abs() < 1e-6);
        }
    }

    #[test]
    fn untouched_params_stay_bitwise_equal() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new([2], vec![1.0, 2.0]));
        let b = store.add("b", Tensor::new([2], vec![3.0, 4.0]));
        let mut opt = Adam::new(AdamConfig::default(), &store, vec![a]);
        let before = store.get(b).clone();
        let tape = Tape::new();
        let loss = (tape.param(&store, a) * tape.param(&store, b)).sum();
        let grads = tape.backward(loss);
        drop(tape);
        opt.step(&mut store, &grads);
        assert_eq!(store.get(b), &before);
        assert_ne!(store.get(a).data(), &[1.0, 2.0]);
    }
}
