//! SGD with momentum and the reduce-on-plateau learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Velocity buffers, one per parameter, created on first use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState<T: Real> {
    pub velocity: BTreeMap<String, Tensor<T>>,
}

/// `v ← momentum·v + (g + weight_decay·p)`, `p ← p − lr·v`.
///
/// Parameters without a gradient are left untouched. Nothing is modified
/// if any gradient is non-finite.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut SgdState<T>,
    cfg: SgdConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.param(name)?;
        if p.shape() != g.shape() {
            return Err(Error::data(format!(
                "gradient shape {:?} does not match {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::numeric(format!("non-finite gradient for {name}")));
        }
    }
    let (lr, m, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for (name, g) in grads {
        let p = params.param_mut(name)?;
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = m * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub stop_lr: f64,
}

/// Reduce-on-plateau bookkeeping. Improvement means a strict decrease of
/// the monitored loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub cfg: PlateauConfig,
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
    pub reductions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauStep {
    pub lr: f64,
    pub improved: bool,
    pub reduced: bool,
    pub stop: bool,
}

impl Plateau {
    pub fn new(lr0: f64, cfg: PlateauConfig) -> Self {
        Self {
            cfg,
            lr: lr0,
            best: f64::INFINITY,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    pub fn update(&mut self, val_loss: f64) -> Result<PlateauStep> {
        if !val_loss.is_finite() {
            return Err(Error::numeric("non-finite validation loss"));
        }
        let improved = val_loss < self.best;
        let mut reduced = false;
        if improved {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.patience {
                self.lr *= self.cfg.factor;
                self.bad_epochs = 0;
                self.reductions += 1;
                reduced = true;
            }
        }
        // relative slack so 1e-3·0.1⁴ counts as reaching 1e-7
        let stop = self.lr <= self.cfg.stop_lr * (1.0 + 1e-9);
        Ok(PlateauStep {
            lr: self.lr,
            improved,
            reduced,
            stop,
        })
    }
}
