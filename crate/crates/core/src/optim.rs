//! AdamW with optional bias correction, and the warmup/linear-decay schedule.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::param::ParamStore;
use crate::{Error, Real, Result};

/// Linear warmup over `round(warmup_fraction * total_steps)` steps up to
/// `peak`, then linear decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("lr schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond schedule end {total_steps}")));
    }
    let warmup = Float::round(warmup_fraction * total_steps as f64) as usize;
    let warmup = warmup.min(total_steps);
    if step < warmup {
        Ok(peak * (step as f64 / warmup as f64))
    } else if warmup == total_steps {
        Ok(peak)
    } else {
        Ok(peak * ((total_steps - step) as f64 / (total_steps - warmup) as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub bias_correction: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            bias_correction: false,
        }
    }
}

/// Moment estimates, one slot per parameter of the store it steps.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    first: Vec<Option<Vec<F>>>,
    second: Vec<Option<Vec<F>>>,
    steps: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moment(&self, index: usize) -> Option<&[F]> {
        self.first.get(index)?.as_deref()
    }

    pub fn second_moment(&self, index: usize) -> Option<&[F]> {
        self.second.get(index)?.as_deref()
    }

    /// One update of every non-frozen parameter that has a gradient:
    /// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
    /// `theta <- theta - lr (m / (sqrt(v) + eps) + wd theta)`, where `m` and `v`
    /// are divided by `1 - b^t` only when bias correction is on.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) {
        self.steps += 1;
        if self.first.len() < store.len() {
            self.first.resize_with(store.len(), || None);
            self.second.resize_with(store.len(), || None);
        }
        let c = &self.cfg;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let (m_scale, v_scale) = if c.bias_correction {
            let t = self.steps as i32;
            (
                F::of(1.0 / (1.0 - Float::powi(c.beta1, t))),
                F::of(1.0 / (1.0 - Float::powi(c.beta2, t))),
            )
        } else {
            (F::one(), F::one())
        };
        let (lr_f, eps, wd) = (F::of(lr), F::of(c.eps), F::of(c.weight_decay));
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let n = grad.numel();
            let m = self.first[i].get_or_insert_with(|| alloc::vec![F::zero(); n]);
            let v = self.second[i].get_or_insert_with(|| alloc::vec![F::zero(); n]);
            for (((theta, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let update = (*m * m_scale) / ((*v * v_scale).sqrt() + eps) + wd * *theta;
                *theta = *theta - lr_f * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use proptest::prelude::*;

    #[test]
    fn schedule_fixed_points() {
        let lr = |s| lr_schedule(s, 100, 2e-5, 0.1).unwrap();
        assert_eq!(lr(5), 1e-5);
        assert_eq!(lr(10), 2e-5);
        assert_eq!(lr(55), 1e-5);
        assert_eq!(lr(100), 0.0);
        assert_eq!(lr(0), 0.0);
        assert!(lr_schedule(0, 0, 2e-5, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_continuous_and_peaks_at_warmup(total in 10usize..2000) {
            let peak = 2e-5;
            let warm = (0.1 * total as f64).round() as usize;
            let lr = |s| lr_schedule(s, total, peak, 0.1).unwrap();
            prop_assert_eq!(lr(warm), peak);
            prop_assert_eq!(lr(total), 0.0);
            let max_jump = peak / warm.min(total - warm) as f64 * (1.0 + 1e-9);
            for s in 0..total {
                prop_assert!(lr(s) <= peak);
                prop_assert!((lr(s + 1) - lr(s)).abs() <= max_jump);
            }
        }
    }

    fn scalar_store<F: Real>(theta: f64, grad: f64) -> ParamStore<F> {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::from_f64(&[1], &[theta]).unwrap());
        s.get_mut(id).grad = Some(Tensor::from_f64(&[1], &[grad]).unwrap());
        s
    }

    #[test]
    fn single_step_without_bias_correction() {
        // m = 0.1, v = 0.001, step = -0.1 / (sqrt(0.001) + 1e-8)
        let expected = -0.1 / (0.001f64.sqrt() + 1e-8);
        let mut s = scalar_store::<f64>(0.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, 1.0);
        assert!((s.iter().next().unwrap().value.data()[0] - expected).abs() < 1e-12);
        assert!((opt.first_moment(0).unwrap()[0] - 0.1).abs() < 1e-15);
        assert!((opt.second_moment(0).unwrap()[0] - 0.001).abs() < 1e-15);

        let mut s = scalar_store::<f32>(0.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, 1.0);
        assert!((s.iter().next().unwrap().value.data()[0] as f64 - expected).abs() < 1e-5);
    }

    #[test]
    fn bias_correction_first_step_is_sign_of_gradient() {
        let mut s = scalar_store::<f64>(0.0, 3.0);
        let mut opt = AdamW::new(AdamWConfig {
            bias_correction: true,
            ..AdamWConfig::default()
        });
        opt.step(&mut s, 0.5);
        assert!((s.iter().next().unwrap().value.data()[0] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_parameters() {
        let mut s = scalar_store::<f32>(0.7, 0.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, 1.0);
        assert_eq!(s.iter().next().unwrap().value.data()[0], 0.7);

        let mut s = scalar_store::<f32>(0.7, 2.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        });
        opt.step(&mut s, 0.0);
        assert_eq!(s.iter().next().unwrap().value.data()[0], 0.7);
        assert!(opt.first_moment(0).unwrap()[0] > 0.0);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut s = scalar_store::<f32>(0.123, 5.0);
        s.iter_mut().next().unwrap().frozen = true;
        let before = s.checksum("");
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..10 {
            opt.step(&mut s, 1.0);
        }
        assert_eq!(before, s.checksum(""));
    }
}
