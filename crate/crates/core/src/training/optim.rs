use serde::{Deserialize, Serialize};

use crate::error::{bail_invalid, bail_shape, Error, Result};
use crate::tensor_core::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub early_stop_val_loss: f64,
    /// Also stop once validation accuracy reaches this value.
    #[serde(default)]
    pub early_stop_val_acc: Option<f64>,
    /// Wall-clock budget in seconds.
    pub budget_secs: Option<f64>,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_init: 0.03,
            lr_final: 1e-6,
            epochs: 600,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            early_stop_val_loss: 1e-6,
            early_stop_val_acc: None,
            budget_secs: None,
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// Desk-scale defaults: 300 epochs, batch 64, 30 minutes.
    pub fn desk() -> Self {
        OptimConfig {
            epochs: 300,
            batch_size: 64,
            budget_secs: Some(1800.0),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            bail_invalid!("epochs and batch size must be positive");
        }
        if !(self.lr_final <= self.lr_init) || self.lr_final < 0.0 {
            bail_invalid!("need 0 <= lr_final <= lr_init");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            bail_invalid!("bad Adam hyperparameters");
        }
        Ok(())
    }
}

/// `lr_final + (lr_init - lr_final)(1 + cos(π e/(E-1)))/2`.
pub fn cosine_lr(epoch: usize, cfg: &OptimConfig) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr_init;
    }
    let frac = epoch.min(cfg.epochs - 1) as f64 / (cfg.epochs - 1) as f64;
    cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        bail_shape!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        );
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            bail_shape!("param {} is {:?}, gradient {:?}", i, p.shape(), g.shape());
        }
        if let Some(k) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at param {} entry {}",
                g.data()[k],
                i,
                k
            )));
        }
    }
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}
