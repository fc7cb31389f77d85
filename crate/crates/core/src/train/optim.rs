use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ParamStore;

/// Learning-rate schedule: linear warm-up then one cosine decay cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub warmup_start_lr: f64,
    pub warmup_max_lr: f64,
    pub cosine_min_lr: f64,
    pub cosine_cycle_length: usize,
}

impl Schedule {
    pub fn from_config(c: &super::RunConfig) -> Self {
        Self {
            warmup_steps: c.warm_up_steps,
            warmup_start_lr: c.warm_up_start_learning_rate,
            warmup_max_lr: c.warm_up_max_learning_rate,
            cosine_min_lr: c.cosine_min_learning_rate,
            cosine_cycle_length: c.cosine_cycle_length,
        }
    }
}

pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        let frac = step as f64 / s.warmup_steps as f64;
        return s.warmup_start_lr + (s.warmup_max_lr - s.warmup_start_lr) * frac;
    }
    let t = step - s.warmup_steps;
    if t >= s.cosine_cycle_length {
        return s.cosine_min_lr;
    }
    let decay = 0.5 * (1.0 - (PI * t as f64 / s.cosine_cycle_length as f64).cos());
    s.warmup_max_lr - (s.warmup_max_lr - s.cosine_min_lr) * decay
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, and the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

/// One bias-corrected Adam update of the parameters named in `grads`. A
/// non-finite gradient aborts the step before anything changes.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| TrainError::Incompatible(format!("gradient for unknown parameter '{name}'")))?;
        if p.len() != g.len() {
            return Err(TrainError::Incompatible(format!(
                "gradient for '{name}' has {} entries, parameter has {}",
                g.len(),
                p.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked").data_mut();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update(shadow: &mut ParamStore, params: &ParamStore, decay: f64) {
    for (name, s) in shadow.iter_mut() {
        if let Some(p) = params.get(name) {
            for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitScheme;
    use denoise_tensor::Tensor;

    fn table() -> Schedule {
        Schedule {
            warmup_steps: 10_000,
            warmup_start_lr: 1e-5,
            warmup_max_lr: 1e-4,
            cosine_min_lr: 1e-7,
            cosine_cycle_length: 500_000,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = table();
        assert_eq!(lr_at(0, &s), 1e-5);
        assert_eq!(lr_at(10_000, &s), 1e-4);
        assert_eq!(lr_at(510_000, &s), 1e-7);
        assert_eq!(lr_at(10_000_000, &s), 1e-7);
        let mid = lr_at(10_000 + 250_000, &s);
        let want = (1e-4 + 1e-7) / 2.0;
        assert!((mid - want).abs() <= 4.0 * f64::EPSILON * want);
        let before = lr_at(9_999, &s);
        assert!((before - 1e-4).abs() < 1e-8);
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![v]), InitScheme::Zeros);
        p
    }

    #[test]
    fn adam_zero_gradient_and_nan() {
        let mut p = scalar_store(1.5);
        let mut st = AdamState::default();
        let g = BTreeMap::from([("x".to_string(), vec![0.0])]);
        adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.5]);
        let g = BTreeMap::from([("x".to_string(), vec![f64::NAN])]);
        let err = adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap_err();
        assert_eq!(err, TrainError::NonFiniteGradient("x".into()));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::default();
        let g = BTreeMap::from([("x".to_string(), vec![-3.0])]);
        let mut prev = 0.0;
        for _ in 0..200 {
            adam_step(&mut p, &g, &mut st, 0.01, &AdamConfig::default()).unwrap();
            let now = p.get("x").unwrap().data()[0];
            assert!((now - prev - 0.01).abs() < 1e-8);
            prev = now;
        }
    }

    #[test]
    fn ema_geometric_series() {
        let params = scalar_store(1.0);
        let mut shadow = scalar_store(0.0);
        ema_update(&mut shadow, &params, 0.9999);
        assert!((shadow.get("x").unwrap().data()[0] - 1e-4).abs() < 1e-16);
        let mut same = params.clone();
        ema_update(&mut same, &params, 0.9999);
        assert_eq!(same, params);
    }
}
