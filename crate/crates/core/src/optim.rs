//! Adam with bias correction, plus the warmup learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Invalid(format!(
                "betas ({}, {}) outside [0, 1)",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Invalid(format!("eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// First/second moment estimates, lazily keyed by parameter name.
#[derive(Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam step over every parameter, reading gradients from
/// the store's accumulators. A non-finite gradient rejects the whole step
/// without touching any parameter or moment.
pub fn adam_update(
    store: &mut ParamStore,
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<()> {
    hyper.validate()?;
    for (name, grad) in store.iter_grads() {
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - hyper.beta1.powi(t);
    let bias2 = 1.0 - hyper.beta2.powi(t);

    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let grad = store.grad(&name)?.clone();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        for (mv, gv) in m.data_mut().iter_mut().zip(grad.data()) {
            *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * gv;
        }
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        for (vv, gv) in v.data_mut().iter_mut().zip(grad.data()) {
            *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * gv * gv;
        }
        let m = &state.m[&name];
        let v = &state.v[&name];
        let param = store.get_mut(&name)?;
        for ((pv, mv), vv) in param.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mv / bias1;
            let v_hat = vv / bias2;
            *pv -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Warmup then inverse-square-root decay:
/// lr = base_lr * d_model^{-1/2} * min(step^{-1/2}, step * warmup^{-3/2}).
pub fn lr_at(step: u64, base_lr: f64, model_dim: usize, warmup_steps: u64) -> f64 {
    debug_assert!(step >= 1 && warmup_steps >= 1);
    let s = step as f64;
    let w = warmup_steps as f64;
    base_lr * (model_dim as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, value: Tensor) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert(name, value);
        store
    }

    fn set_grad(store: &mut ParamStore, name: &str, grad: Tensor) {
        let mut grads = BTreeMap::new();
        grads.insert(name.to_string(), grad);
        store.zero_grads();
        store.accumulate_grads(&grads).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = store_with("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut state = AdamState::new();
        for _ in 0..5 {
            adam_update(&mut store, &mut state, &AdamHyper::default(), 0.1).unwrap();
        }
        assert_eq!(store.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_matches_hand_evaluated_formula() {
        let hyper = AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let (p0, g, lr) = (1.0, 0.5, 0.1);
        let mut store = store_with("w", Tensor::scalar(p0));
        set_grad(&mut store, "w", Tensor::scalar(g));
        let mut state = AdamState::new();
        adam_update(&mut store, &mut state, &hyper, lr).unwrap();

        // hand evaluation of the bias-corrected first step
        let m_hat = ((1.0 - hyper.beta1) * g) / (1.0 - hyper.beta1);
        let v_hat = ((1.0 - hyper.beta2) * g * g) / (1.0 - hyper.beta2);
        let expected = p0 - lr * m_hat / (v_hat.sqrt() + hyper.eps);
        assert!((store.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejects_step_without_mutation() {
        let mut store = store_with("w", Tensor::scalar(1.0));
        set_grad(&mut store, "w", Tensor::scalar(f64::NAN));
        let mut state = AdamState::new();
        assert!(adam_update(&mut store, &mut state, &AdamHyper::default(), 0.1).is_err());
        assert_eq!(store.get("w").unwrap().data(), &[1.0]);
        assert_eq!(state.steps_taken(), 0);
    }

    #[test]
    fn identical_runs_produce_identical_trajectories() {
        let run = || {
            let mut store = store_with("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
            let mut state = AdamState::new();
            for step in 1..=20 {
                let g = Tensor::new(vec![3], vec![(step as f64).sin(), 0.25, -0.5 / step as f64])
                    .unwrap();
                set_grad(&mut store, "w", g);
                adam_update(&mut store, &mut state, &AdamHyper::default(), 0.05).unwrap();
            }
            store
                .get("w")
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut store = store_with("w", Tensor::scalar(3.0));
        set_grad(&mut store, "w", Tensor::scalar(1.5));
        let mut state = AdamState::new();
        adam_update(&mut store, &mut state, &AdamHyper::default(), 0.0).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[3.0]);
    }

    #[test]
    fn schedule_continuous_at_warmup_and_monotone_before() {
        let (base, d, w) = (3.0, 64, 400);
        let at_warmup = lr_at(w, base, d, w);
        let branch_a = base * (d as f64).powf(-0.5) * (w as f64).powf(-0.5);
        assert!((at_warmup - branch_a).abs() < 1e-15);
        assert!(lr_at(1, base, d, w) < at_warmup);
        for s in 1..w {
            assert!(lr_at(s, base, d, w) < lr_at(s + 1, base, d, w));
        }
        assert!(lr_at(w + 100, base, d, w) < at_warmup);
        assert!(lr_at(10 * w, base, d, w) > 0.0);
    }

    #[test]
    fn schedule_hand_value() {
        // base 3.0, d = 64, warmup 400, step 100:
        // 3.0 * 64^-0.5 * min(100^-0.5, 100 * 400^-1.5) = 0.375 * 0.0125
        let got = lr_at(100, 3.0, 64, 400);
        assert!((got - 0.0046875).abs() < 1e-12, "{got}");
    }
}
