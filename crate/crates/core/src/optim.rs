//! AdamW with decoupled weight decay, the one-cycle learning-rate schedule,
//! and global-norm gradient clipping.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments and step counter for one parameter.
#[derive(Debug, Clone)]
pub struct ParamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

/// Per-parameter optimizer state, keyed by parameter name so a training step
/// may update any subset (round-robin subject heads only see their own
/// batches) while every parameter keeps its own moments.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub cfg: AdamWConfig,
    pub states: std::collections::BTreeMap<String, ParamState>,
}

impl OptimState {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        if cfg.lr <= 0.0 {
            return Err(CoreError::arg("learning rate must be > 0"));
        }
        Ok(OptimState {
            cfg,
            states: std::collections::BTreeMap::new(),
        })
    }

    /// One decoupled-weight-decay Adam step over the given parameters. `lr`
    /// overrides the configured base rate (the schedule supplies it).
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut Tensor)],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CoreError::shape(format!(
                "optimizer got {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        let c = self.cfg.clone();
        for (i, ((name, p), g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(CoreError::shape(format!(
                    "param '{name}' shape {:?} vs grad shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            g.ensure_finite(&format!("gradient of parameter '{name}' (index {i})"))?;
            let st = self.states.entry(name.to_string()).or_insert_with(|| ParamState {
                m: Tensor::zeros(p.shape().to_vec()),
                v: Tensor::zeros(p.shape().to_vec()),
                step: 0,
            });
            if st.m.shape() != p.shape() {
                return Err(CoreError::shape(format!(
                    "optimizer state for '{name}' has shape {:?}, param is {:?}",
                    st.m.shape(),
                    p.shape()
                )));
            }
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            let pd = p.data_mut();
            let gd = g.data();
            for j in 0..pd.len() {
                // decay on the pre-update parameter, decoupled from the loss
                pd[j] *= 1.0 - lr * c.weight_decay;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gd[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gd[j] * gd[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    /// Fraction of steps spent warming up to `max_lr`.
    pub warmup_frac: f64,
    /// lr starts at max_lr / start_div.
    pub start_div: f64,
    /// lr ends at max_lr / final_div.
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        OneCycle {
            max_lr,
            total_steps,
            warmup_frac: 0.3,
            start_div: 25.0,
            final_div: 1e3,
        }
    }

    /// Learning rate at `step` (cosine warmup, cosine anneal; exact max at
    /// the peak step).
    pub fn lr(&self, step: usize) -> Result<f64> {
        if self.total_steps < 2 {
            return Err(CoreError::arg("one-cycle needs total_steps >= 2"));
        }
        if step >= self.total_steps {
            return Err(CoreError::arg(format!(
                "step {} out of range [0, {})",
                step, self.total_steps
            )));
        }
        let last = self.total_steps - 1;
        let peak = ((self.warmup_frac * last as f64).floor() as usize).min(last);
        let start = self.max_lr / self.start_div;
        let fin = self.max_lr / self.final_div;
        let cos_blend = |from: f64, to: f64, pos: f64| -> f64 {
            from + (to - from) * 0.5 * (1.0 - (std::f64::consts::PI * pos).cos())
        };
        Ok(if step <= peak {
            if peak == 0 {
                self.max_lr
            } else {
                cos_blend(start, self.max_lr, step as f64 / peak as f64)
            }
        } else {
            cos_blend(self.max_lr, fin, (step - peak) as f64 / (last - peak) as f64)
        })
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}
