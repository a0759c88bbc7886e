//! Adam optimizer over [`Parameter`]s bound through a [`GraphCtx`].

use crate::nn::{GraphCtx, Module, Parameter};
use crate::tape::{Arr, Gradients};
use std::collections::HashMap;

/// Adam with bias-corrected first and second moments. State is keyed by
/// parameter identity, so one optimizer can drive any subset of a
/// model's parameters across steps.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<u64, (Arr, Arr)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// Apply one update to every parameter of `model` that received a
    /// gradient in `grads` (resolved through the step's `ctx`).
    pub fn step(&mut self, model: &mut dyn Module, ctx: &GraphCtx<'_>, grads: &Gradients) {
        self.t += 1;
        let t = self.t;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);
        let moments = &mut self.moments;
        model.visit_params_mut("", &mut |_, p: &mut Parameter| {
            let Some(g) = ctx.grad(grads, p) else {
                return;
            };
            let (m, v) = moments.entry(p.id()).or_insert_with(|| {
                (Arr::zeros(g.raw_dim()), Arr::zeros(g.raw_dim()))
            });
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            });
            ndarray::Zip::from(&mut p.value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &mi, &vi| {
                    let mhat = mi / bias1;
                    let vhat = vi / bias2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use ndarray::IxDyn;

    struct One(Parameter);

    impl Module for One {
        fn visit_params(&self, _: &str, f: &mut dyn FnMut(&str, &Parameter)) {
            f("w", &self.0);
        }
        fn visit_params_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
            f("w", &mut self.0);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut model = One(Parameter::new(Arr::from_elem(IxDyn(&[2]), 5.0)));
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
        for _ in 0..200 {
            let tape = Tape::new();
            let mut ctx = GraphCtx::trainable(&tape);
            let w = ctx.param(&model.0);
            let loss = w.sqr().sum_all();
            let grads = tape.backward(loss);
            opt.step(&mut model, &ctx, &grads);
        }
        assert!(model.0.value.iter().all(|&x| x.abs() < 1e-2));
    }

    #[test]
    fn untouched_params_are_left_alone() {
        let mut model = One(Parameter::new(Arr::from_elem(IxDyn(&[2]), 5.0)));
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
        let tape = Tape::new();
        let ctx = GraphCtx::trainable(&tape);
        let other = tape.leaf(Arr::from_elem(IxDyn(&[1]), 1.0));
        let loss = other.sum_all();
        let grads = tape.backward(loss);
        opt.step(&mut model, &ctx, &grads);
        assert!(model.0.value.iter().all(|&x| x == 5.0));
    }
}
