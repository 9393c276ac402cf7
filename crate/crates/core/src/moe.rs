//! Sparsely gated mixture of experts with per-example routing and a
//! learned 3x3 merge convolution (Smart Merger) over the active experts.
//!
//! Routing: every example is mean-pooled over its tokens, projected by the
//! gate matrix, and the top-k logits are softmaxed. Each selected expert runs
//! on all tokens of that example; its output is scaled by its gate weight.
//! The k scaled outputs are stacked in descending-weight order as the input
//! channels of one shared `k -> 1` 3x3 convolution that is applied to every
//! feature channel's `H x W` map independently.

use serde::{Deserialize, Serialize};

use crate::error::{MoseError, Result};
use crate::layers::{Mlp, MlpCache};
use crate::numerics::linalg::matmul;
use crate::numerics::{trunc_normal_init, ParamGrads, ParamId, ParamValues, ParameterSet, Rng, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub experts: usize,
    pub active: usize,
    pub expert_hidden: usize,
    pub smart_merger: bool,
}

impl MoeConfig {
    /// Eight experts, two active, half-width experts, Smart Merger on.
    pub fn for_channels(channels: usize) -> Self {
        MoeConfig {
            experts: 8,
            active: 2,
            expert_hidden: channels,
            smart_merger: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.active == 0 || self.active > self.experts {
            return Err(MoseError::Config(format!(
                "active experts {} must be in 1..={}",
                self.active, self.experts
            )));
        }
        if self.expert_hidden == 0 {
            return Err(MoseError::Config("expert hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Per-example routing: `k` expert ids and weights per row, descending weight.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision<T> {
    pub k: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T: Scalar> GateDecision<T> {
    pub fn examples(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, e: usize) -> (&[usize], &[T]) {
        (
            &self.indices[e * self.k..(e + 1) * self.k],
            &self.weights[e * self.k..(e + 1) * self.k],
        )
    }

    /// Per-expert sum of gate weights over all examples.
    pub fn importance(&self, experts: usize) -> Vec<T> {
        let mut imp = vec![T::zero(); experts];
        for (&i, &w) in self.indices.iter().zip(&self.weights) {
            imp[i] += w;
        }
        imp
    }
}

/// Softmax over the `k` largest logits; ties go to the lower index.
pub fn topk_softmax<T: Scalar>(logits: &[T], k: usize) -> (Vec<usize>, Vec<T>) {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // stable: equal logits keep ascending index order
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k);
    let max = logits[order[0]];
    let mut w: Vec<T> = order.iter().map(|&i| (logits[i] - max).exp()).collect();
    let sum: T = w.iter().copied().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    (order, w)
}

/// `x_pooled` is `B x C`, `w_g` is `C x E`.
pub fn gate_topk<T: Scalar>(x_pooled: &Tensor<T>, w_g: &Tensor<T>, k: usize) -> Result<GateDecision<T>> {
    let (b, c) = match *x_pooled.shape() {
        [b, c] => (b, c),
        ref s => return Err(MoseError::shape(format!("pooled input must be B x C, got {s:?}"))),
    };
    let e = match *w_g.shape() {
        [wc, e] if wc == c => e,
        ref s => return Err(MoseError::shape(format!("gate weights must be {c} x E, got {s:?}"))),
    };
    if k == 0 || k > e {
        return Err(MoseError::invalid(format!("k = {k} must be in 1..={e}")));
    }
    let mut logits = vec![T::zero(); b * e];
    matmul(b, c, e, x_pooled.data(), false, w_g.data(), false, &mut logits, false);
    decide(&logits, e, k)
}

fn decide<T: Scalar>(logits: &[T], e: usize, k: usize) -> Result<GateDecision<T>> {
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(MoseError::non_finite("gate logits"));
    }
    let mut indices = Vec::with_capacity(logits.len() / e * k);
    let mut weights = Vec::with_capacity(indices.capacity());
    for row in logits.chunks_exact(e) {
        let (i, w) = topk_softmax(row, k);
        indices.extend(i);
        weights.extend(w);
    }
    Ok(GateDecision { k, indices, weights })
}

/// Squared coefficient of variation: population variance over squared mean.
pub fn importance_loss<T: Scalar>(importance: &[T]) -> Result<T> {
    let (mean, var) = moments(importance)?;
    Ok(var / (mean * mean))
}

/// Gradient of [`importance_loss`] with respect to each entry.
pub fn importance_loss_grad<T: Scalar>(importance: &[T]) -> Result<Vec<T>> {
    let (mean, var) = moments(importance)?;
    let n = T::from_usize_lossy(importance.len());
    let two = T::lit(2.0);
    let m2 = mean * mean;
    Ok(importance
        .iter()
        .map(|&v| two * (v - mean) / (n * m2) - two * var / (n * m2 * mean))
        .collect())
}

fn moments<T: Scalar>(x: &[T]) -> Result<(T, T)> {
    if x.is_empty() || !x.iter().any(|&v| v > T::zero()) {
        return Err(MoseError::invalid(
            "importance has no positive entry (empty batch?)",
        ));
    }
    let n = T::from_usize_lossy(x.len());
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    Ok((mean, var))
}

/// Active and sparse parameter counts of a feed-forward sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub active: usize,
    pub sparse: usize,
}

fn mlp_params(channels: usize, hidden: usize) -> usize {
    2 * channels * hidden + hidden + channels
}

/// Dense two-layer MLP `C -> hidden -> C`.
pub fn mlp_param_count(channels: usize, hidden: usize) -> ParamCount {
    let n = mlp_params(channels, hidden);
    ParamCount {
        active: n,
        sparse: n,
    }
}

pub fn moe_param_count(channels: usize, cfg: &MoeConfig) -> ParamCount {
    let expert = mlp_params(channels, cfg.expert_hidden);
    let shared = channels * cfg.experts
        + if cfg.smart_merger {
            9 * cfg.active + 1
        } else {
            0
        };
    ParamCount {
        active: cfg.active * expert + shared,
        sparse: cfg.experts * expert + shared,
    }
}

#[derive(Clone, Debug)]
pub struct SmartMerger {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl SmartMerger {
    /// Registers `{name}.weight` (`1 x k x 3 x 3`, center taps `1/k`) and `{name}.bias`.
    pub fn new<T: Scalar>(ps: &mut ParameterSet<T>, name: &str, k: usize) -> Result<Self> {
        let mut w = Tensor::zeros(&[1, k, 3, 3]);
        let inv_k = T::one() / T::from_usize_lossy(k);
        for r in 0..k {
            w.set(&[0, r, 1, 1], inv_k);
        }
        Ok(SmartMerger {
            w: ps.register(format!("{name}.weight"), w)?,
            b: ps.register(format!("{name}.bias"), Tensor::zeros(&[1]))?,
            k,
        })
    }

    /// `inputs[r]` is an `N x C` token block; each channel is an `h x w` map.
    fn forward<T: Scalar>(&self, p: &ParamValues<'_, T>, inputs: &[Vec<T>], h: usize, w: usize, c: usize) -> Vec<T> {
        let weight = p.get(self.w);
        let bias = p.get(self.b)[0];
        let mut out = vec![bias; h * w * c];
        for (r, s) in inputs.iter().enumerate() {
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[r * 9 + ky * 3 + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for_each_tap(h, w, ky, kx, |dst, src| {
                        let o = &mut out[dst * c..(dst + 1) * c];
                        for (a, &b) in o.iter_mut().zip(&s[src * c..(src + 1) * c]) {
                            *a += wv * b;
                        }
                    });
                }
            }
        }
        out
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        g: &mut ParamGrads<'_, T>,
        inputs: &[Vec<T>],
        dout: &[T],
        h: usize,
        w: usize,
        c: usize,
    ) -> Vec<Vec<T>> {
        let weight = p.get(self.w);
        let mut dw = vec![T::zero(); self.k * 9];
        let db: T = dout.iter().copied().sum();
        let mut dins = Vec::with_capacity(inputs.len());
        for (r, s) in inputs.iter().enumerate() {
            let mut din = vec![T::zero(); s.len()];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[r * 9 + ky * 3 + kx];
                    let mut acc = T::zero();
                    for_each_tap(h, w, ky, kx, |dst, src| {
                        let d = &dout[dst * c..(dst + 1) * c];
                        let si = &s[src * c..(src + 1) * c];
                        let di = &mut din[src * c..(src + 1) * c];
                        for ((a, &dv), &sv) in di.iter_mut().zip(d).zip(si) {
                            *a += wv * dv;
                            acc += dv * sv;
                        }
                    });
                    dw[r * 9 + ky * 3 + kx] += acc;
                }
            }
            dins.push(din);
        }
        g.accumulate(self.w, &dw);
        g.accumulate(self.b, &[db]);
        dins
    }
}

/// Visit `(dst, src)` token pairs of a zero-padded 3x3 tap `(ky, kx)`.
fn for_each_tap(h: usize, w: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize + dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            f(y * w + x, sy as usize * w + sx as usize);
        }
    }
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub cfg: MoeConfig,
    pub channels: usize,
    pub gate: ParamId,
    pub experts: Vec<Mlp>,
    pub merger: Option<SmartMerger>,
}

pub struct MoeOutput<T> {
    pub y: Vec<T>,
    pub decision: GateDecision<T>,
    pub importance: Vec<T>,
}

struct ExpertRun<T> {
    out: Vec<T>,
    cache: MlpCache<T>,
    scaled: Vec<T>,
}

pub struct MoeCache<T> {
    x: Vec<T>,
    pooled: Vec<T>,
    decision: GateDecision<T>,
    runs: Vec<ExpertRun<T>>,
    batch: usize,
    h: usize,
    w: usize,
}

impl MoeLayer {
    /// Registers `{name}.gate`, `{name}.experts.{e}.fc1|fc2` and `{name}.sm`.
    pub fn new<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        channels: usize,
        cfg: MoeConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let gate = ps.register(
            format!("{name}.gate"),
            trunc_normal_init(&[channels, cfg.experts], crate::layers::INIT_STD, rng)?,
        )?;
        let experts = (0..cfg.experts)
            .map(|e| Mlp::new(ps, &format!("{name}.experts.{e}"), channels, cfg.expert_hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        let merger = if cfg.smart_merger {
            Some(SmartMerger::new(ps, &format!("{name}.sm"), cfg.active)?)
        } else {
            None
        };
        Ok(MoeLayer {
            cfg,
            channels,
            gate,
            experts,
            merger,
        })
    }

    /// `x` holds `batch x (h w) x C` tokens.
    pub fn forward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        x: &[T],
        batch: usize,
        h: usize,
        w: usize,
    ) -> Result<(MoeOutput<T>, MoeCache<T>)> {
        let c = self.channels;
        let n = h * w;
        if x.len() != batch * n * c {
            return Err(MoseError::shape(format!(
                "MoE input of {} scalars is not {batch} x {h}*{w} x {c}",
                x.len()
            )));
        }
        let e_count = self.cfg.experts;
        let k = self.cfg.active;
        let inv_n = T::one() / T::from_usize_lossy(n);
        let mut pooled = vec![T::zero(); batch * c];
        for b in 0..batch {
            let dst = &mut pooled[b * c..(b + 1) * c];
            for row in x[b * n * c..(b + 1) * n * c].chunks_exact(c) {
                for (a, &v) in dst.iter_mut().zip(row) {
                    *a += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv_n);
        }
        let mut logits = vec![T::zero(); batch * e_count];
        matmul(batch, c, e_count, &pooled, false, p.get(self.gate), false, &mut logits, false);
        let decision = decide(&logits, e_count, k)?;
        let importance = decision.importance(e_count);

        let mut y = Vec::with_capacity(x.len());
        let mut runs = Vec::with_capacity(batch * k);
        for b in 0..batch {
            let xb = &x[b * n * c..(b + 1) * n * c];
            let (idx, gw) = decision.row(b);
            let mut scaled_all = Vec::with_capacity(k);
            for (&ei, &gv) in idx.iter().zip(gw) {
                let (out, cache) = self.experts[ei].forward(p, xb, n);
                let scaled: Vec<T> = out.iter().map(|&v| v * gv).collect();
                scaled_all.push(scaled);
                runs.push(ExpertRun {
                    out,
                    cache,
                    scaled: Vec::new(),
                });
            }
            let merged = match &self.merger {
                Some(sm) => sm.forward(p, &scaled_all, h, w, c),
                None => {
                    let mut acc = vec![T::zero(); n * c];
                    for s in &scaled_all {
                        for (a, &v) in acc.iter_mut().zip(s) {
                            *a += v;
                        }
                    }
                    acc
                }
            };
            y.extend_from_slice(&merged);
            if self.merger.is_some() {
                let base = runs.len() - k;
                for (run, s) in runs[base..].iter_mut().zip(scaled_all) {
                    run.scaled = s;
                }
            }
        }
        let cache = MoeCache {
            x: x.to_vec(),
            pooled,
            decision: decision.clone(),
            runs,
            batch,
            h,
            w,
        };
        Ok((
            MoeOutput {
                y,
                decision,
                importance,
            },
            cache,
        ))
    }

    /// `dimportance` is the upstream gradient of the importance vector.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        g: &mut ParamGrads<'_, T>,
        cache: &MoeCache<T>,
        dy: &[T],
        dimportance: &[T],
    ) -> Vec<T> {
        let c = self.channels;
        let (h, w) = (cache.h, cache.w);
        let n = h * w;
        let k = self.cfg.active;
        let e_count = self.cfg.experts;
        let mut dx = vec![T::zero(); cache.x.len()];
        let mut dlogits = vec![T::zero(); cache.batch * e_count];
        for b in 0..cache.batch {
            let xb = &cache.x[b * n * c..(b + 1) * n * c];
            let dyb = &dy[b * n * c..(b + 1) * n * c];
            let (idx, gw) = cache.decision.row(b);
            let runs = &cache.runs[b * k..(b + 1) * k];
            let dscaled: Vec<Vec<T>> = match &self.merger {
                Some(sm) => {
                    let inputs: Vec<Vec<T>> = runs.iter().map(|r| r.scaled.clone()).collect();
                    sm.backward(p, g, &inputs, dyb, h, w, c)
                }
                None => vec![dyb.to_vec(); k],
            };
            let mut dgate = vec![T::zero(); k];
            let dxb = &mut dx[b * n * c..(b + 1) * n * c];
            for r in 0..k {
                let ds = &dscaled[r];
                dgate[r] = ds.iter().zip(&runs[r].out).map(|(&a, &o)| a * o).sum::<T>()
                    + dimportance[idx[r]];
                let dout: Vec<T> = ds.iter().map(|&v| v * gw[r]).collect();
                let dxe = self.experts[idx[r]].backward(p, g, xb, &runs[r].cache, &dout, n);
                for (a, &v) in dxb.iter_mut().zip(&dxe) {
                    *a += v;
                }
            }
            let avg: T = gw.iter().zip(&dgate).map(|(&a, &d)| a * d).sum();
            for r in 0..k {
                dlogits[b * e_count + idx[r]] = gw[r] * (dgate[r] - avg);
            }
        }
        matmul(c, cache.batch, e_count, &cache.pooled, true, &dlogits, false, g.get_mut(self.gate), true);
        let mut dpooled = vec![T::zero(); cache.batch * c];
        matmul(cache.batch, e_count, c, &dlogits, false, p.get(self.gate), true, &mut dpooled, false);
        let inv_n = T::one() / T::from_usize_lossy(n);
        for b in 0..cache.batch {
            let dp = &dpooled[b * c..(b + 1) * c];
            for row in dx[b * n * c..(b + 1) * n * c].chunks_exact_mut(c) {
                for (a, &v) in row.iter_mut().zip(dp) {
                    *a += v * inv_n;
                }
            }
        }
        dx
    }

    /// Tensor-level entry: `x` is `B x N x C` with `N = h w`.
    pub fn apply<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        x: &Tensor<T>,
        spatial: (usize, usize),
    ) -> Result<(Tensor<T>, GateDecision<T>, Tensor<T>)> {
        let (b, n, c) = match *x.shape() {
            [b, n, c] => (b, n, c),
            ref s => return Err(MoseError::shape(format!("MoE input must be B x N x C, got {s:?}"))),
        };
        if n != spatial.0 * spatial.1 || c != self.channels {
            return Err(MoseError::shape(format!(
                "token count {n} != {} x {} or channels {c} != {}",
                spatial.0, spatial.1, self.channels
            )));
        }
        let (out, _) = self.forward(&params.values(), x.data(), b, spatial.0, spatial.1)?;
        let e = self.cfg.experts;
        Ok((
            Tensor::from_vec(x.shape(), out.y)?,
            out.decision,
            Tensor::from_vec(&[e], out.importance)?,
        ))
    }

    pub fn param_count(&self) -> ParamCount {
        moe_param_count(self.channels, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_pick_lowest_indices() {
        let (i, w) = topk_softmax(&[0.3f64; 8], 2);
        assert_eq!(i, [0, 1]);
        assert_eq!(w, [0.5, 0.5]);
    }

    #[test]
    fn topk_orders_by_weight() {
        let (i, w) = topk_softmax(&[0.1f64, 2.0, -1.0, 3.0], 3);
        assert_eq!(i, [3, 1, 0]);
        assert!(w[0] > w[1] && w[1] > w[2]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_rejects_oversized_k() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let wg = Tensor::<f64>::zeros(&[3, 4]);
        assert!(gate_topk(&x, &wg, 5).is_err());
        assert!(gate_topk(&x, &wg, 4).is_ok());
    }

    #[test]
    fn importance_loss_values() {
        assert_eq!(importance_loss(&[0.5f64; 8]).unwrap(), 0.0);
        assert!((importance_loss(&[2.0f64, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        let a = importance_loss(&[0.1f64, 0.7, 0.0, 1.2]).unwrap();
        let b = importance_loss(&[1.2f64, 0.0, 0.1, 0.7]).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(importance_loss(&[0.0f64; 4]).is_err());
    }

    #[test]
    fn importance_grad_matches_differences() {
        let imp = [0.4f64, 1.1, 0.0, 0.5];
        let g = importance_loss_grad(&imp).unwrap();
        for i in 0..imp.len() {
            let mut a = imp;
            let mut b = imp;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (importance_loss(&a).unwrap() - importance_loss(&b).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn smart_merger_has_9k_plus_1_params() {
        let mut ps = ParameterSet::<f32>::new();
        SmartMerger::new(&mut ps, "sm", 2).unwrap();
        assert_eq!(ps.num_scalars(), 19);
    }
}
