//! Central-difference verification of hand-written backward passes.

use rayon::prelude::*;

use super::params::ParameterSet;
use crate::error::{MoseError, Result};
use crate::scalar::Scalar;

/// A scalar function of a parameter set with an analytic gradient.
pub trait Objective<T: Scalar>: Sync {
    fn loss(&self, params: &ParameterSet<T>) -> Result<T>;

    /// Evaluates the loss and accumulates its gradient into `params`' grads.
    fn loss_and_grad(&self, params: &mut ParameterSet<T>) -> Result<T>;
}

/// Objective assembled from two closures.
pub struct FnObjective<F, G> {
    pub loss: F,
    pub loss_and_grad: G,
}

impl<T, F, G> Objective<T> for FnObjective<F, G>
where
    T: Scalar,
    F: Fn(&ParameterSet<T>) -> Result<T> + Sync,
    G: Fn(&mut ParameterSet<T>) -> Result<T> + Sync,
{
    fn loss(&self, params: &ParameterSet<T>) -> Result<T> {
        (self.loss)(params)
    }

    fn loss_and_grad(&self, params: &mut ParameterSet<T>) -> Result<T> {
        (self.loss_and_grad)(params)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckOptions {
    /// Negate the analytic gradient of the first probed parameter.
    pub corrupt: bool,
    /// Restrict probing to these parameter names (all when `None`).
    pub only: Option<Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub probes: usize,
    /// Max relative error per parameter, insertion order.
    pub per_param: Vec<(String, f64)>,
}

/// Max over probed scalars of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<T: Scalar, O: Objective<T>>(
    objective: &O,
    params: &ParameterSet<T>,
    eps: T,
) -> Result<GradCheckReport> {
    grad_check_with(objective, params, eps, &GradCheckOptions::default())
}

pub fn grad_check_with<T: Scalar, O: Objective<T>>(
    objective: &O,
    params: &ParameterSet<T>,
    eps: T,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut work = params.clone();
    work.zero_grads();
    let base = objective.loss_and_grad(&mut work)?;
    if !base.is_finite() {
        return Err(MoseError::non_finite("grad_check: base loss"));
    }
    let mut analytic: Vec<Vec<f64>> = work
        .iter()
        .map(|(_, _, g)| g.data().iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let probes: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .filter(|(_, (name, _, _))| {
            opts.only
                .as_ref()
                .is_none_or(|only| only.iter().any(|o| o == name))
        })
        .flat_map(|(p, (_, v, _))| (0..v.len()).map(move |i| (p, i)))
        .collect();
    if opts.corrupt {
        if let Some(&(p, _)) = probes.first() {
            analytic[p].iter_mut().for_each(|v| *v = -*v);
        }
    }

    let two_eps = eps + eps;
    let errors: Vec<Result<f64>> = probes
        .par_iter()
        .map_init(
            || params.clone(),
            |local, &(p, i)| {
                let id = local.id(&names[p]).expect("same parameter layout");
                let orig = local.value(id).data()[i];
                local.value_mut(id).data_mut()[i] = orig + eps;
                let plus = objective.loss(local);
                local.value_mut(id).data_mut()[i] = orig - eps;
                let minus = objective.loss(local);
                local.value_mut(id).data_mut()[i] = orig;
                let (plus, minus) = (plus?, minus?);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(MoseError::non_finite(format!(
                        "grad_check probe {}[{}]",
                        names[p], i
                    )));
                }
                let numeric = ((plus - minus) / two_eps).to_f64_lossy();
                let err = (analytic[p][i] - numeric).abs() / numeric.abs().max(1.0);
                Ok(err)
            },
        )
        .collect();

    let mut per_param: Vec<(String, f64)> = Vec::new();
    let mut worst = (f64::NEG_INFINITY, 0usize, 0usize);
    for (&(p, i), err) in probes.iter().zip(errors) {
        let err = err?;
        match per_param.last_mut() {
            Some((name, e)) if *name == names[p] => *e = e.max(err),
            _ => per_param.push((names[p].clone(), err)),
        }
        if err > worst.0 {
            worst = (err, p, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0.max(0.0),
        worst_param: names.get(worst.1).cloned().unwrap_or_default(),
        worst_index: worst.2,
        probes: probes.len(),
        per_param,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    struct SumSquares {
        flip: bool,
    }

    impl Objective<f64> for SumSquares {
        fn loss(&self, p: &ParameterSet<f64>) -> Result<f64> {
            Ok(p.get("w").unwrap().data().iter().map(|v| v * v).sum())
        }

        fn loss_and_grad(&self, p: &mut ParameterSet<f64>) -> Result<f64> {
            let loss = self.loss(p)?;
            let id = p.id("w").unwrap();
            let (vals, mut grads) = p.split();
            let sign = if self.flip { -2.0 } else { 2.0 };
            let g: Vec<f64> = vals.get(id).iter().map(|v| sign * v).collect();
            grads.accumulate(id, &g);
            Ok(loss)
        }
    }

    fn params() -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        ps.register("w", Tensor::from_vec(&[4], vec![1.5, -2.0, 0.75, 3.0]).unwrap())
            .unwrap();
        ps
    }

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(&SumSquares { flip: false }, &params(), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        assert_eq!(r.probes, 4);
    }

    #[test]
    fn sign_flip_reports_two() {
        let r = grad_check(&SumSquares { flip: true }, &params(), 1e-5).unwrap();
        assert!((r.max_rel_error - 2.0).abs() < 1e-6, "{}", r.max_rel_error);
        assert_eq!(r.worst_param, "w");
    }

    #[test]
    fn corruption_hook_trips() {
        let opts = GradCheckOptions {
            corrupt: true,
            ..Default::default()
        };
        let r = grad_check_with(&SumSquares { flip: false }, &params(), 1e-5, &opts).unwrap();
        assert!(r.max_rel_error > 1.0);
    }

    struct Blowup;
    impl Objective<f64> for Blowup {
        fn loss(&self, p: &ParameterSet<f64>) -> Result<f64> {
            let w = p.get("w").unwrap().data()[0];
            Ok(if w > 1.5 { f64::INFINITY } else { w })
        }
        fn loss_and_grad(&self, p: &mut ParameterSet<f64>) -> Result<f64> {
            self.loss(p)
        }
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        assert!(matches!(
            grad_check(&Blowup, &params(), 1e-5),
            Err(MoseError::NonFinite { .. })
        ));
    }
}
