//! Adam with the inverse-square-root warmup schedule, plus global-norm
//! gradient clipping.

use crate::autodiff::{GradTable, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr_schedule(step: usize, d: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning-rate schedule starts at step 1".into()));
    }
    if d == 0 || warmup == 0 {
        return Err(Error::Contract("schedule needs positive width and warmup".into()));
    }
    let s = step as f64;
    Ok((d as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Per-parameter moment buffers and the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor<T>> {
        self.first.get(index).and_then(Option::as_ref)
    }

    /// One bias-corrected Adam update of every parameter present in `grads`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn adam_step(&mut self, store: &mut ParamStore<T>, grads: &GradTable<T>, lr: f64) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NanGradient(store.name(*id).to_string()));
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(eps);
        for (id, g) in grads {
            let shape = g.shape().to_vec();
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::dim("adam_step", p.shape(), g.shape()));
            }
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Scalar>(grads: &GradTable<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut GradTable<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamId;

    #[test]
    fn schedule_first_step_and_peak() {
        let lr = lr_schedule(1, 512, 4000).unwrap();
        assert!((lr - 1.747e-7).abs() < 1e-10, "{lr}");
        let peak = lr_schedule(4000, 512, 4000).unwrap();
        assert!((peak - 512f64.powf(-0.5) * 4000f64.powf(-0.5)).abs() < 1e-15);
        assert!(lr_schedule(0, 512, 4000).is_err());
    }

    #[test]
    fn schedule_rises_then_decays() {
        let lrs: Vec<f64> = (1..=200).map(|s| lr_schedule(s, 64, 100).unwrap()).collect();
        assert!(lrs[..100].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[99..].windows(2).all(|w| w[1] < w[0]));
    }

    fn store_with(values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_f64(&[values.len()], values).unwrap());
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameters_unchanged() {
        let (mut s, id) = store_with(&[1.0, -2.0]);
        let mut opt = OptimizerState::new(AdamConfig::default());
        let grads = GradTable::from([(id, Tensor::zeros(&[2]))]);
        opt.adam_step(&mut s, &grads, 0.1).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let (mut s, id) = store_with(&[0.0]);
        let mut opt = OptimizerState::new(AdamConfig::default());
        opt.adam_step(&mut s, &GradTable::from([(id, Tensor::ones(&[1]))]), 0.01).unwrap();
        let m1 = opt.first_moment(0).unwrap().item();
        opt.adam_step(&mut s, &GradTable::from([(id, Tensor::zeros(&[1]))]), 0.01).unwrap();
        assert!((opt.first_moment(0).unwrap().item() - 0.9 * m1).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let (mut s, id) = store_with(&[0.0]);
        let mut opt = OptimizerState::new(AdamConfig::default());
        let grads = GradTable::from([(id, Tensor::full(&[1], 0.37))]);
        let lr = 1e-3;
        let mut prev = 0.0;
        for _ in 0..2000 {
            opt.adam_step(&mut s, &grads, lr).unwrap();
            let cur = s.get(id).item();
            let delta = (prev - cur).abs();
            assert!((delta - lr).abs() < 1e-9, "{delta}");
            prev = cur;
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = store_with(&[1.0]);
        let mut opt = OptimizerState::new(AdamConfig::default());
        let grads = GradTable::from([(id, Tensor::full(&[1], f64::NAN))]);
        match opt.adam_step(&mut s, &grads, 0.1) {
            Err(Error::NanGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.get(id).item(), 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let (mut s, id) = store_with(&[0.5, 1.5, -0.25]);
            let mut opt = OptimizerState::new(AdamConfig::default());
            for k in 0..50 {
                let g = Tensor::from_f64(&[3], &[k as f64 * 0.1, -0.3, (k as f64).sin()]).unwrap();
                opt.adam_step(&mut s, &GradTable::from([(id, g)]), 1e-2).unwrap();
            }
            s.get(id).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn clipping_caps_norm() {
        let (_, id) = store_with(&[0.0, 0.0]);
        let mut grads = GradTable::from([(id, Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap())]);
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
    }
}
