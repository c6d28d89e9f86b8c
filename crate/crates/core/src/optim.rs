//! Adam with bias correction and no weight decay.

use std::collections::BTreeMap;

use crate::tensor::Tensor;
use crate::vit::ViTModel;

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per optimizer step before
    /// the per-tensor [`Adam::apply`] calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one Adam update of `param` with gradient `grad`.
    pub fn apply(&mut self, name: &str, param: &mut Tensor, grad: &[f32], lr: f32) {
        assert!(self.step > 0, "Adam::apply before begin_step");
        assert_eq!(param.numel(), grad.len(), "gradient shape mismatch for {name}");
        let n = grad.len();
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let t = self.step as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((w, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = (*m as f64 / c1) as f32;
            let v_hat = (*v as f64 / c2) as f32;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    /// One step over every model tensor holding a gradient; the gradients are
    /// multiplied by `grad_scale` and cleared.
    pub fn step_model(&mut self, model: &mut ViTModel, lr: f32, grad_scale: f32) {
        self.begin_step();
        model.visit_mut(&mut |name, t| {
            if let Some(mut g) = t.take_grad() {
                if grad_scale != 1.0 {
                    g.iter_mut().for_each(|v| *v *= grad_scale);
                }
                self.apply(name, t, &g, lr);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = Adam::new();
        let mut w = Tensor::from_fn([3], |i| i as f32);
        let before = w.clone();
        for _ in 0..5 {
            opt.begin_step();
            opt.apply("w", &mut w, &[0.0; 3], 0.1);
        }
        assert!(w.bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = Adam::new();
        let mut w = Tensor::zeros([2]);
        opt.begin_step();
        opt.apply("w", &mut w, &[0.7, -3.0], 0.01);
        assert!((w.data()[0] + 0.01).abs() < 1e-6);
        assert!((w.data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::new();
        let mut w = Tensor::zeros([1]);
        let mut reached = None;
        for step in 0..2000 {
            let g = 2.0 * (w.data()[0] - 3.0);
            opt.begin_step();
            opt.apply("w", &mut w, &[g], 1e-2);
            if (w.data()[0] - 3.0).abs() < 1e-2 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "w = {}", w.data()[0]);
    }

    #[test]
    fn zero_lr_is_bit_exact() {
        let mut opt = Adam::new();
        let mut w = Tensor::from_fn([4], |i| 0.1 * i as f32 - 0.13);
        let before = w.clone();
        opt.begin_step();
        opt.apply("w", &mut w, &[1.0, -2.0, 3.0, 0.5], 0.0);
        assert!(w.bit_eq(&before));
    }
}
