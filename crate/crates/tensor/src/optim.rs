//! Adam with optional global-norm gradient clipping.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Grads;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients so their global L2 norm is at most this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// First/second moment estimates per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub struct Adam {
    pub cfg: AdamConfig,
    state: AdamState,
}

/// Outcome of one optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new<T: Element>(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let sizes: Vec<usize> = store.params().iter().map(|p| p.numel()).collect();
        Adam {
            cfg,
            state: AdamState {
                step: 0,
                m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
                v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            },
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamState) -> Result<()> {
        if state.m.len() != self.state.m.len()
            || state
                .m
                .iter()
                .zip(&self.state.m)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(TensorError::Mismatch("optimizer state layout".into()));
        }
        self.state = state;
        Ok(())
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update to every parameter that received a gradient.
    /// Returns the pre-clipping global gradient norm.
    pub fn step<T: Element>(&mut self, store: &ParamStore<T>, grads: &Grads<T>) -> Result<StepInfo> {
        let params = store.params();
        if params.len() != self.state.m.len() {
            return Err(TensorError::Mismatch(
                "store changed since the optimizer was created".into(),
            ));
        }
        let norm = global_grad_norm(store, grads);
        if !norm.is_finite() {
            return Err(TensorError::Invalid(format!("non-finite gradient norm {norm}")));
        }
        let scale = match self.cfg.clip_norm {
            Some(max) if norm > max => max / (norm + 1e-12),
            _ => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step as f64;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for (i, p) in params.iter().enumerate() {
            let Some(g) = p.grad(grads) else { continue };
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            let old = p.values();
            let mut new = Vec::with_capacity(old.len());
            for j in 0..old.len() {
                let gj = g[j].to_f64() * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                new.push(T::from_f64(old[j].to_f64() - self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps)));
            }
            p.set_values(new)?;
        }
        Ok(StepInfo {
            grad_norm: norm,
            clipped: scale < 1.0,
        })
    }
}

/// L2 norm of all parameter gradients of `store` present in `grads`.
pub fn global_grad_norm<T: Element>(store: &ParamStore<T>, grads: &Grads<T>) -> f64 {
    store
        .params()
        .iter()
        .filter_map(|p| p.grad(grads))
        .flat_map(|g| g.iter().map(|v| v.to_f64().powi(2)))
        .sum::<f64>()
        .sqrt()
}
