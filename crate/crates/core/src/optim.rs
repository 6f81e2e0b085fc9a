//! AdamW with global gradient-norm clipping and a warmup + cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    pub final_lr_frac: f64,
    pub total_steps: u64,
}

impl OptimConfig {
    pub fn from_run(cfg: &crate::config::RunConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            warmup_frac: cfg.warmup_frac,
            final_lr_frac: cfg.final_lr_frac,
            total_steps: cfg.steps,
        }
    }

    /// Learning rate used for the update at 0-based `step`: linear warmup,
    /// then cosine decay to `final_lr_frac · lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.total_steps.max(1);
        let warm = ((self.warmup_frac * total as f64).ceil() as u64).max(1);
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = total.saturating_sub(warm).max(1);
        let progress = ((step - warm) as f64 / span as f64).min(1.0);
        let floor = self.final_lr_frac * self.lr;
        floor + (self.lr - floor) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in store.iter() {
            first.insert(name.clone(), var.as_tensor().zeros_like()?);
            second.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self { cfg, first, second, t: 0 })
    }

    /// Gradients by parameter name; parameters without a gradient get zeros.
    pub fn collect(store: &ParamStore, grads: &GradStore) -> Result<BTreeMap<String, Tensor>> {
        store
            .iter()
            .map(|(name, var)| {
                let g = match grads.get(var.as_tensor()) {
                    Some(g) => g.detach(),
                    None => var.as_tensor().zeros_like()?,
                };
                Ok((name.clone(), g))
            })
            .collect()
    }

    pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let mut sq = 0.0;
        for g in grads.values() {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(sq.sqrt())
    }

    /// One clipped update; returns the gradient norm before clipping.
    pub fn step(&mut self, store: &ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<f64> {
        let norm = Self::global_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let scale = if norm > self.cfg.grad_clip { self.cfg.grad_clip / norm } else { 1.0 };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, var) in store.iter() {
            let g = (grads
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing gradient for {name}")))?
                * scale)?;
            let m = self.first.get_mut(name).ok_or_else(|| Error::Shape(format!("no moment for {name}")))?;
            *m = ((&*m * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            let v = self.second.get_mut(name).ok_or_else(|| Error::Shape(format!("no moment for {name}")))?;
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let p = &var.as_tensor().detach();
            let mhat = (&self.first[name] / bc1)?;
            let vhat = (&self.second[name] / bc2)?;
            let mut update = (mhat / (vhat.sqrt()? + c.eps)?)?;
            if p.rank() >= 2 && c.weight_decay > 0.0 {
                update = (update + (p * c.weight_decay)?)?;
            }
            var.set(&p.sub(&(update * lr)?)?)?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimConfig {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            warmup_frac: 0.02,
            final_lr_frac: 0.1,
            total_steps: 1000,
        }
    }

    #[test]
    fn schedule_shape() {
        let c = cfg();
        assert!((c.lr_at(0) - 1e-3 / 20.0).abs() < 1e-15);
        assert!((c.lr_at(19) - 1e-3).abs() < 1e-15);
        assert!((c.lr_at(999) - 1e-4).abs() < 1e-6);
        for s in 20..999 {
            assert!(c.lr_at(s + 1) <= c.lr_at(s));
        }
    }

    #[test]
    fn clip_rescales_to_unit_norm() {
        let mut store = ParamStore::new(DType::F64, 0);
        store.constant("a", &[2, 2], 0.0).unwrap();
        store.constant("b", &[4], 0.0).unwrap();
        let mut opt = AdamW::new(cfg(), &store).unwrap();
        // Norm-10 gradient: every entry 10 / √8.
        let e = 10.0 / 8f64.sqrt();
        let dev = candle_core::Device::Cpu;
        let grads: BTreeMap<String, Tensor> = [
            ("a".to_string(), Tensor::full(e, (2, 2), &dev).unwrap()),
            ("b".to_string(), Tensor::full(e, 4, &dev).unwrap()),
        ]
        .into();
        let norm = opt.step(&store, &grads, 1e-3).unwrap();
        assert!((norm - 10.0).abs() < 1e-12);
        let applied: BTreeMap<String, Tensor> =
            opt.first.iter().map(|(k, m)| (k.clone(), (m / 0.1).unwrap())).collect();
        assert!((AdamW::global_norm(&applied).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new(DType::F64, 0);
        let x = store.from_values("x", &[3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut opt = AdamW::new(OptimConfig { lr: 0.05, total_steps: 300, ..cfg() }, &store).unwrap();
        for s in 0..300 {
            let loss = x.sqr().unwrap().sum_all().unwrap();
            let g = AdamW::collect(&store, &loss.backward().unwrap()).unwrap();
            opt.step(&store, &g, opt.cfg.lr_at(s)).unwrap();
        }
        let v = x.to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }
}
