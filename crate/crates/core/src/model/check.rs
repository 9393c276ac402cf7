//! End-to-end gradient verification of a full model loss.

use super::config::ModelConfig;
use super::network::{loss_and_grad, loss_only, Model};
use crate::error::Result;
use crate::numerics::{grad_check_with, FnObjective, GradCheckOptions, GradCheckReport, ParameterSet, Rng};

/// Multiplier applied to init-time weights, RPE tables and gates before probing.
pub const CONDITIONING_SCALE: f64 = 5.0;

pub const GRADCHECK_EPS: f64 = 1e-5;

/// Parameters rescaled by [`condition_for_gradcheck`].
pub fn is_conditioned(name: &str) -> bool {
    (name.ends_with("weight") && !name.contains("norm")) || name.ends_with(".rpe") || name.ends_with(".gate")
}

/// Zero-initialized residual post-norm gains, reset to one by
/// [`condition_for_gradcheck`].
pub fn is_post_norm_gain(name: &str) -> bool {
    name.ends_with(".norm1.weight") || name.ends_with(".norm2.weight")
}

/// Sets post-norm gains to one and multiplies every [`is_conditioned`]
/// parameter by `scale`.
pub fn condition_for_gradcheck(params: &mut ParameterSet<f64>, scale: f64) {
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for n in names {
        let id = params.id(&n).expect("name from the same set");
        if is_post_norm_gain(&n) {
            params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 1.0);
        } else if is_conditioned(&n) {
            params.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// Builds `cfg` at `seed`, conditions it, and checks the total training loss
/// on one random `in_channels x 16 x 16` input against its HR target.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::new(cfg.clone(), seed)?;
    condition_for_gradcheck(&mut model.params, CONDITIONING_SCALE);
    let mut rng = Rng::new(seed).derive(1);
    let side = 16;
    let r = cfg.scale;
    let lr = rng.uniform_tensor(&[1, cfg.in_channels, side, side], 0.0, 1.0);
    let hr = rng.uniform_tensor(&[1, cfg.in_channels, side * r, side * r], 0.0, 1.0);
    let w = cfg.loss.clone();
    let net = &model.net;
    let obj = FnObjective {
        loss: |p: &ParameterSet<f64>| Ok(loss_only(net, p, &lr, &hr, &w)?.total),
        loss_and_grad: |p: &mut ParameterSet<f64>| Ok(loss_and_grad(net, p, &lr, &hr, &w)?.total),
    };
    grad_check_with(&obj, &model.params, GRADCHECK_EPS, opts)
}
