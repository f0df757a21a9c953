use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

pub const POLY_POWER: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// `lr0 * (1 - t / total)^power`, zero from `total` on.
    Poly {
        total_steps: u64,
        power: f64,
    },
    Constant,
}

impl Schedule {
    pub fn poly(total_steps: u64) -> Self {
        Schedule::Poly {
            total_steps,
            power: POLY_POWER,
        }
    }

    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            Schedule::Poly { total_steps, power } => {
                if total_steps == 0 || step >= total_steps {
                    0.0
                } else {
                    (1.0 - step as f64 / total_steps as f64).powf(power)
                }
            }
            Schedule::Constant => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
}

impl AdamW {
    pub fn new(lr0: f64, weight_decay: f64, schedule: Schedule) -> Self {
        Self {
            lr0,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr0 * self.schedule.factor(step)
    }
}

/// Moment accumulators and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamW,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(hyper: AdamW, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            p.iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.value.rows(), v.value.cols())))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            hyper,
            step: 0,
            first: zeros(params),
            second: zeros(params),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.hyper.lr_at(self.step)
    }

    /// One decoupled-weight-decay Adam update at the current step, then
    /// advances the step counter. Parameters without a gradient entry are
    /// treated as having zero gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of {name}"),
                });
            }
        }
        let lr = self.current_lr();
        let h = &self.hyper;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);

        for (name, param) in params.iter_mut() {
            let shape = param.value.shape();
            let m = self
                .first
                .get_mut(name)
                .ok_or_else(|| Error::Lookup(format!("optimizer moment for {name}")))?;
            let v = self
                .second
                .get_mut(name)
                .ok_or_else(|| Error::Lookup(format!("optimizer moment for {name}")))?;
            if m.shape() != shape || v.shape() != shape {
                return Err(Error::shape("adamw_step", format!("moments of {name}")));
            }
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != shape {
                    return Err(Error::shape(
                        "adamw_step",
                        format!("gradient {:?} for {name} {:?}", g.shape(), shape),
                    ));
                }
            }
            let decay = if param.decay {
                1.0 - lr * h.weight_decay
            } else {
                1.0
            };
            let pd = param.value.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gi;
                vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] = pd[i] * decay - lr * mhat / (vhat.sqrt() + h.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_endpoints() {
        let opt = AdamW::new(1e-4, 0.05, Schedule::poly(100));
        assert_eq!(opt.lr_at(0), 1e-4);
        assert_eq!(opt.lr_at(100), 0.0);
        let mid = opt.lr_at(50);
        assert!((mid - 1e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::row(vec![1.0, -2.0, 3.5]));
        let before = params.get("w").unwrap().clone();
        let mut state = OptimizerState::new(AdamW::new(1e-2, 0.05, Schedule::Constant), &params);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(1, 3));
        state.step(&mut params, &grads).unwrap();
        let factor = 1.0 - 1e-2 * 0.05;
        for (a, b) in params.get("w").unwrap().data().iter().zip(before.data()) {
            assert_eq!(*a, b * factor);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = ParamStore::new();
        params.insert("layer.w", Tensor::zeros(1, 1));
        let mut state = OptimizerState::new(AdamW::new(1e-3, 0.0, Schedule::Constant), &params);
        let mut grads = BTreeMap::new();
        grads.insert("layer.w".to_string(), Tensor::scalar(f64::NAN));
        let err = state.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("layer.w"));
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let mut params = ParamStore::new();
        params.insert_with("x", Tensor::scalar(1.0), false);
        let mut state = OptimizerState::new(AdamW::new(0.1, 0.05, Schedule::Constant), &params);
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::scalar(3.0));
        state.step(&mut params, &grads).unwrap();
        assert!((params.get("x").unwrap().data()[0] - 0.9).abs() < 1e-7);
    }
}
