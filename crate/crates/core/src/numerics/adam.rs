use std::collections::BTreeMap;

use super::{NumericsError, ParamStore, Tensor};

pub const DEFAULT_LR: f64 = 2e-4;

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Adam with bias correction. Moments are kept per parameter name and a
/// parameter's step counter advances only on steps where it has a gradient.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(DEFAULT_LR)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, moments: BTreeMap::new() }
    }

    /// Number of completed [`AdamState::step`] calls.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Step counter of a single parameter.
    pub fn param_steps(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.t)
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), NumericsError> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| NumericsError::UnknownParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch { op: "adam_step", left: p.shape(), right: g.shape() });
            }
            let state = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.rows(), g.cols()),
                v: Tensor::zeros(g.rows(), g.cols()),
                t: 0,
            });
            if state.m.shape() != g.shape() {
                // parameter was resized (e.g. vocabulary growth); restart its moments
                *state = Moments { m: Tensor::zeros(g.rows(), g.cols()), v: Tensor::zeros(g.rows(), g.cols()), t: 0 };
            }
            state.t += 1;
            let bc1 = 1.0 - self.beta1.powi(state.t as i32);
            let bc2 = 1.0 - self.beta2.powi(state.t as i32);
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            if !p.is_finite() {
                return Err(NumericsError::NonFinite { op: "adam_step" });
            }
        }
        self.steps += 1;
        Ok(())
    }
}
