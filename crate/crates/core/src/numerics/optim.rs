use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Each step first shrinks every parameter by `1 - lr * weight_decay`, then
/// applies the bias-corrected moment update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub first_moment: Vec<DenseArray>,
    pub second_moment: Vec<DenseArray>,
    pub step: u64,
}

fn check_shapes(params: &[&mut DenseArray], grads: &[&DenseArray], state: &[DenseArray]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} state slots",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for (i, ((p, g), s)) in params.iter().zip(grads).zip(state).enumerate() {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(Error::Shape(format!(
                "parameter {i}: {:?} vs gradient {:?} vs state {:?}",
                p.shape(),
                g.shape(),
                s.shape()
            )));
        }
    }
    Ok(())
}

impl AdamW {
    pub fn new<'a>(config: AdamWConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first_moment: Vec<DenseArray> =
            shapes.into_iter().map(|s| DenseArray::zeros(s.to_vec())).collect();
        Self {
            config,
            second_moment: first_moment.clone(),
            first_moment,
            step: 0,
        }
    }

    /// One update with learning rate `lr`. `lr_scale`, when given, multiplies
    /// the rate per parameter (layer-wise decay).
    pub fn step(
        &mut self,
        params: &mut [&mut DenseArray],
        grads: &[&DenseArray],
        lr: f64,
        lr_scale: Option<&[f64]>,
    ) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Contract(format!("negative learning rate {lr}")));
        }
        check_shapes(params, grads, &self.first_moment)?;
        if let Some(s) = lr_scale {
            if s.len() != params.len() {
                return Err(Error::Shape("lr scale count differs from parameter count".into()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lr * lr_scale.map_or(1.0, |s| s[i]);
            let decay = 1.0 - lr * weight_decay;
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for ((w, &g), (m, v)) in p
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *w *= decay;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum (`v ← μv + g`,
/// `p ← p − lr·v`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub velocity: Vec<DenseArray>,
}

impl SgdMomentum {
    pub fn new<'a>(momentum: f64, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        Self {
            momentum,
            velocity: shapes.into_iter().map(|s| DenseArray::zeros(s.to_vec())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut DenseArray], grads: &[&DenseArray], lr: f64) -> Result<()> {
        check_shapes(params, grads, &self.velocity)?;
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}
