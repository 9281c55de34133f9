//! ADAM and plain SGD parameter updates.

use indexmap::IndexMap;

use crate::error::{Result, VxError};
use crate::tensor::ParamSet;

/// ADAM hyperparameters. β₂ and ε keep the optimizer's canonical defaults;
/// the learning rate and β₁ come from the training configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, beta1: f64) -> Self {
        AdamHyper {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-parameter first/second moment estimates plus the shared timestep.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    t: u64,
    entries: IndexMap<String, Moments>,
}

impl AdamState {
    /// Zero-initialized moments mirroring `params`.
    pub fn new(hyper: AdamHyper, params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    Moments {
                        m: vec![0.0; t.numel()],
                        v: vec![0.0; t.numel()],
                    },
                )
            })
            .collect();
        AdamState {
            hyper,
            t: 0,
            entries,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    pub(crate) fn raw_parts(&self) -> (u64, &IndexMap<String, Moments>) {
        (self.t, &self.entries)
    }

    pub(crate) fn from_raw_parts(
        hyper: AdamHyper,
        t: u64,
        entries: IndexMap<String, Moments>,
    ) -> Self {
        AdamState { hyper, t, entries }
    }

    /// Bit-for-bit equality of moments and timestep.
    pub fn state_equals(&self, other: &AdamState) -> bool {
        self.t == other.t
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a == b)
    }
}

/// One ADAM update: p ← p − lr·m̂/(√v̂ + ε) with bias-corrected moments.
/// Gradients are left untouched; the caller zeroes them.
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet) -> Result<()> {
    let AdamHyper {
        lr,
        beta1,
        beta2,
        eps,
    } = state.hyper;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);

    for (name, tensor) in params.iter_mut() {
        let grad: Vec<f64> = tensor
            .grad()
            .ok_or_else(|| VxError::MissingGradient(name.to_string()))?
            .to_vec();
        let slot = state
            .entries
            .get_mut(name)
            .ok_or_else(|| VxError::UnknownParameter(name.to_string()))?;
        if slot.m.len() != grad.len() {
            return Err(VxError::ShapeMismatch(format!(
                "adam moments for `{name}`: {} vs {}",
                slot.m.len(),
                grad.len()
            )));
        }
        let data = tensor.data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
            slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain SGD: p ← p − lr·grad(p).
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    for (name, tensor) in params.iter_mut() {
        let grad: Vec<f64> = tensor
            .grad()
            .ok_or_else(|| VxError::MissingGradient(name.to_string()))?
            .to_vec();
        let data = tensor.data_mut();
        for i in 0..grad.len() {
            data[i] -= lr * grad[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_params(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        ps
    }

    fn set_grad(ps: &mut ParamSet, g: f64) {
        ps.get_mut("p").unwrap().clear_grad();
        ps.get_mut("p").unwrap().accumulate_grad(&[g]);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut ps = scalar_params(3.5);
        let mut st = AdamState::new(AdamHyper::new(0.002, 0.5), &ps);
        for _ in 0..10 {
            set_grad(&mut ps, 0.0);
            adam_step(&mut st, &mut ps).unwrap();
        }
        assert_eq!(ps.get("p").unwrap().data()[0], 3.5);
        assert_eq!(st.timestep(), 10);
    }

    #[test]
    fn paper_settings_first_two_steps() {
        // Hand evaluation with lr=0.002, beta1=0.5: both steps have
        // m_hat = v_hat = 1, so each moves the parameter by -lr/(1+eps).
        let mut ps = scalar_params(0.0);
        let mut st = AdamState::new(AdamHyper::new(0.002, 0.5), &ps);

        set_grad(&mut ps, 1.0);
        adam_step(&mut st, &mut ps).unwrap();
        let p1 = ps.get("p").unwrap().data()[0];
        assert!((p1 - (-0.002)).abs() < 1e-7, "p after one step: {p1}");

        set_grad(&mut ps, 1.0);
        adam_step(&mut st, &mut ps).unwrap();
        let p2 = ps.get("p").unwrap().data()[0];
        assert!((p2 - (-0.004)).abs() < 1e-7, "p after two steps: {p2}");
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        for g in [2.5, -0.75] {
            let mut ps = scalar_params(1.0);
            let mut st = AdamState::new(AdamHyper::new(0.01, 0.5), &ps);
            let mut prev = 1.0;
            for _ in 0..5 {
                set_grad(&mut ps, g);
                adam_step(&mut st, &mut ps).unwrap();
                let now = ps.get("p").unwrap().data()[0];
                assert!((now - prev).signum() == -g.signum());
                prev = now;
            }
        }
    }

    #[test]
    fn sgd_matches_hand_values() {
        let mut ps = scalar_params(1.0);
        set_grad(&mut ps, 2.0);
        sgd_step(&mut ps, 0.0).unwrap();
        assert_eq!(ps.get("p").unwrap().data()[0], 1.0);
        sgd_step(&mut ps, 0.1).unwrap();
        assert!((ps.get("p").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn both_optimizers_descend_a_convex_scalar() {
        // f(p) = p^2, gradient 2p: one step from p=1 must reduce f.
        for use_adam in [true, false] {
            let mut ps = scalar_params(1.0);
            let mut st = AdamState::new(AdamHyper::new(0.002, 0.5), &ps);
            set_grad(&mut ps, 2.0);
            if use_adam {
                adam_step(&mut st, &mut ps).unwrap();
            } else {
                sgd_step(&mut ps, 0.002).unwrap();
            }
            let p = ps.get("p").unwrap().data()[0];
            assert!(p * p < 1.0 && p < 1.0);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut ps = scalar_params(1.0);
        let mut st = AdamState::new(AdamHyper::new(0.002, 0.5), &ps);
        assert!(matches!(
            adam_step(&mut st, &mut ps),
            Err(VxError::MissingGradient(_))
        ));
    }
}
