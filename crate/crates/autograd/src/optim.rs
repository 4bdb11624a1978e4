use crate::params::ParamSet;
use crate::{Float, Tensor};

/// Adam with bias correction. The learning rate is owned by the caller so a
/// schedule can drive several optimizers in lockstep.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let zeros: Vec<Tensor<F>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i]` must match `params.tensor(i)`; a missing
    /// gradient is treated as zero.
    pub fn update(&mut self, params: &mut ParamSet<F>, grads: &[Option<Tensor<F>>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let b1 = F::from_f64_lossy(self.beta1);
        let b2 = F::from_f64_lossy(self.beta2);
        let one = F::one();
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = F::from_f64_lossy(lr * c2.sqrt() / c1);
        let eps = F::from_f64_lossy(self.eps * c2.sqrt());
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.tensor_mut(i);
            assert_eq!(p.shape(), g.shape(), "gradient shape for {i}");
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() + eps);
            }
        }
    }

    /// Moment estimates as named tensors, for checkpointing.
    pub fn state(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("{prefix}m{i}"), m.clone()));
            out.push((format!("{prefix}v{i}"), v.clone()));
        }
        out
    }

    pub fn restore(&mut self, step: u64, entries: &[(String, Tensor<F>)], prefix: &str) -> bool {
        for i in 0..self.m.len() {
            let find = |key: String| entries.iter().find(|(n, _)| *n == key).map(|(_, t)| t.clone());
            match (find(format!("{prefix}m{i}")), find(format!("{prefix}v{i}"))) {
                (Some(m), Some(v)) if m.shape() == self.m[i].shape() && v.shape() == self.v[i].shape() => {
                    self.m[i] = m;
                    self.v[i] = v;
                }
                _ => return false,
            }
        }
        self.step = step;
        true
    }
}
