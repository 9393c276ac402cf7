//! Adam optimizer, training state and its checkpoint encoding.
//!
//! Checkpoint entries are `param.{name}`, `adam.m.{name}` and
//! `adam.v.{name}`; the meta JSON holds [`CheckpointMeta`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::{loss_and_grad, Model};
use crate::error::{MoseError, Result};
use crate::losses::LossReport;
use crate::numerics::{Checkpoint, ParameterSet, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    /// Number of updates applied.
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParameterSet<T>) -> Self {
        let zeros = || params.iter().map(|(_, v, _)| Tensor::zeros(v.shape())).collect();
        Adam {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParameterSet<T>) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let t = self.t as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        let (values, grads) = params.values_and_grads_mut();
        for (((val, g), m), v) in values.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in val
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Seed of parameter init and batch order.
    pub seed: u64,
    pub step: u64,
    pub adam: AdamConfig,
    pub adam_t: u64,
    /// Per-band `(min, max)` of the training corpus normalization.
    pub band_stats: Option<Vec<(f32, f32)>>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub seed: u64,
    pub step: u64,
    pub band_stats: Option<Vec<(f32, f32)>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: ModelConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        let model = Model::new(cfg, seed)?;
        let adam = Adam::new(adam, &model.params);
        Ok(TrainState {
            model,
            adam,
            seed,
            step: 0,
            band_stats: None,
        })
    }

    /// Forward, loss, backward and one Adam update. A non-finite loss or
    /// gradient leaves the parameters untouched.
    pub fn train_step(&mut self, lr: &Tensor<T>, hr: &Tensor<T>) -> Result<LossReport<T>> {
        let weights = self.model.cfg().loss.clone();
        let params = &mut self.model.params;
        params.zero_grads();
        let report = loss_and_grad(&self.model.net, params, lr, hr, &weights).map_err(|e| match e {
            MoseError::NonFinite { context } => MoseError::NonFinite {
                context: format!("step {}: {context}", self.step),
            },
            other => other,
        })?;
        if let Some((name, _, _)) = params.iter().find(|(_, _, g)| !g.is_finite()) {
            return Err(MoseError::NonFinite {
                context: format!(
                    "step {}: gradient of {name} (loss {:?}, ncc {:?}, ssim {:?}, moe {:?})",
                    self.step, report.total, report.ncc, report.ssim, report.moe
                ),
            });
        }
        self.adam.step(params);
        self.step += 1;
        Ok(report)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.model.cfg().clone(),
            seed: self.seed,
            step: self.step,
            adam: self.adam.cfg.clone(),
            adam_t: self.adam.t,
            band_stats: self.band_stats.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::to_string(&self.meta())?);
        ck.push_params("param.", &self.model.params);
        for (((name, _, _), m), v) in self.model.params.iter().zip(&self.adam.m).zip(&self.adam.v) {
            ck.push(format!("adam.m.{name}"), m);
            ck.push(format!("adam.v.{name}"), v);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.meta)?;
        let mut state = TrainState::new(meta.config, meta.adam, meta.seed)?;
        ck.load_params("param.", &mut state.model.params)?;
        let names: Vec<String> = state.model.params.names().map(str::to_owned).collect();
        for (i, name) in names.iter().enumerate() {
            for (key, slot) in [("m", &mut state.adam.m[i]), ("v", &mut state.adam.v[i])] {
                let full = format!("adam.{key}.{name}");
                let t = ck
                    .tensor::<T>(&full)
                    .ok_or_else(|| MoseError::Data(format!("checkpoint lacks entry {full}")))?;
                if t.shape() != slot.shape() {
                    return Err(MoseError::shape(format!("{full}: {:?} vs {:?}", t.shape(), slot.shape())));
                }
                *slot = t;
            }
        }
        state.adam.t = meta.adam_t;
        state.step = meta.step;
        state.band_stats = meta.band_stats;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParameterSet::<f64>::new();
        let id = ps.register("x", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        ps.grads_mut()[id.index()].data_mut().copy_from_slice(&[3.0, -0.5]);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &ps,
        );
        adam.step(&mut ps);
        let v = ps.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = ParameterSet::<f64>::new();
        let id = ps.register("x", Tensor::full(&[3], 0.25)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        adam.step(&mut ps);
        assert_eq!(ps.value(id).data(), &[0.25; 3]);
    }
}
