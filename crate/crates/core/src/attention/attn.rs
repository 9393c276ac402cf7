//! Multi-head self-attention inside one window, with additive positional
//! terms: per-head relative-position table, per-head log-CPB network and a
//! per-channel locally-enhanced table on the output.

use serde::{Deserialize, Serialize};

use super::posenc::{gather, offset_count, relative_index, scatter, LogCpbCache, LogCpbNet};
use crate::error::{MoseError, Result};
use crate::layers::Linear;
use crate::numerics::linalg::{gemm_strided, Layout};
use crate::numerics::{trunc_normal_init, ParamGrads, ParamId, ParamValues, ParameterSet, Rng, Tensor};
use crate::scalar::Scalar;

/// Lower clamp for the learnable per-head temperature.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_INIT: f64 = 0.07;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKernel {
    /// `cos(q, k) / tau` with a learnable per-head `tau >= 0.01`.
    #[default]
    Cosine,
    /// `q . k / sqrt(d)`.
    Dot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    pub window_size: usize,
    pub shift: usize,
    pub pe_rpe: bool,
    pub pe_logcpb: bool,
    pub pe_lepe: bool,
    pub kernel: AttentionKernel,
    pub cpb_hidden: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MoseError::Config(m));
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if self.window_size < 2 {
            return fail(format!("window size {} < 2", self.window_size));
        }
        if self.shift != 0 && self.shift != self.window_size / 2 {
            return fail(format!(
                "shift {} must be 0 or {}",
                self.shift,
                self.window_size / 2
            ));
        }
        if self.pe_logcpb && self.cpb_hidden == 0 {
            return fail("log-CPB hidden width must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.window_size * self.window_size
    }
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub cfg: AttentionConfig,
    pub qkv: Linear,
    pub proj: Linear,
    pub tau: Option<ParamId>,
    pub rpe: Option<ParamId>,
    pub cpb: Option<LogCpbNet>,
    pub lepe: Option<ParamId>,
    index: Vec<usize>,
}

pub struct AttentionCache<T> {
    x: Vec<T>,
    windows: usize,
    qkv: Vec<T>,
    qn: Vec<T>,
    kn: Vec<T>,
    q_norm: Vec<T>,
    k_norm: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    scales: Vec<T>,
    cpb: Option<LogCpbCache<T>>,
}

impl<T: Scalar> AttentionCache<T> {
    /// Softmaxed attention weights, `nW x h x M^2 x M^2`.
    pub fn probs(&self) -> &[T] {
        &self.probs
    }
}

impl WindowAttention {
    /// Registers `{name}.qkv`, `{name}.proj`, `{name}.tau`, `{name}.rpe`,
    /// `{name}.cpb.*` and `{name}.lepe` as enabled by the config.
    pub fn new<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let m = cfg.window_size;
        let qkv = Linear::new(ps, &format!("{name}.qkv"), c, 3 * c, true, rng)?;
        let proj = Linear::new(ps, &format!("{name}.proj"), c, c, true, rng)?;
        let tau = match cfg.kernel {
            AttentionKernel::Cosine => Some(ps.register(
                format!("{name}.tau"),
                Tensor::full(&[cfg.heads], T::lit(TAU_INIT)),
            )?),
            AttentionKernel::Dot => None,
        };
        let rpe = if cfg.pe_rpe {
            Some(ps.register(
                format!("{name}.rpe"),
                trunc_normal_init(&[offset_count(m), cfg.heads], 0.02, rng)?,
            )?)
        } else {
            None
        };
        let cpb = if cfg.pe_logcpb {
            Some(LogCpbNet::new(
                ps,
                &format!("{name}.cpb"),
                m,
                cfg.heads,
                cfg.cpb_hidden,
                rng,
            )?)
        } else {
            None
        };
        let lepe = if cfg.pe_lepe {
            Some(ps.register(format!("{name}.lepe"), Tensor::zeros(&[c, m * m]))?)
        } else {
            None
        };
        Ok(WindowAttention {
            index: relative_index(m),
            cfg,
            qkv,
            proj,
            tau,
            rpe,
            cpb,
            lepe,
        })
    }

    /// Combined per-head additive bias `h x M^2 x M^2`.
    fn head_bias<T: Scalar>(&self, p: &ParamValues<'_, T>) -> (Vec<T>, Option<LogCpbCache<T>>) {
        let h = self.cfg.heads;
        let mut bias = vec![T::zero(); h * self.index.len()];
        if let Some(rpe) = self.rpe {
            gather(p.get(rpe), h, &self.index, &mut bias);
        }
        let cache = self.cpb.as_ref().map(|net| {
            let (table, cache) = net.table(p);
            gather(&table, h, &self.index, &mut bias);
            cache
        });
        (bias, cache)
    }

    fn scales<T: Scalar>(&self, p: &ParamValues<'_, T>) -> Vec<T> {
        match self.tau {
            Some(tau) => p
                .get(tau)
                .iter()
                .map(|&t| T::one() / t.max(T::lit(TAU_MIN)))
                .collect(),
            None => {
                let s = T::one() / T::from_usize_lossy(self.cfg.head_dim()).sqrt();
                vec![s; self.cfg.heads]
            }
        }
    }

    /// `xw` holds `windows x M^2 x C` tokens. `mask`, when present, holds
    /// `mw x M^2 x M^2` additive logits and window `w` uses `mask[w % mw]`.
    pub fn forward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        xw: &[T],
        mask: Option<&[T]>,
    ) -> Result<(Vec<T>, AttentionCache<T>)> {
        let c = self.cfg.channels;
        let h = self.cfg.heads;
        let d = self.cfg.head_dim();
        let t = self.cfg.tokens();
        if !xw.len().is_multiple_of(t * c) {
            return Err(MoseError::shape(format!(
                "window attention input of {} scalars is not a multiple of {t}x{c}",
                xw.len()
            )));
        }
        let windows = xw.len() / (t * c);
        let mask_windows = match mask {
            Some(m) => {
                if m.is_empty() || m.len() % (t * t) != 0 || !windows.is_multiple_of(m.len() / (t * t)) {
                    return Err(MoseError::shape(format!(
                        "mask of {} scalars does not tile {windows} windows of {t} tokens",
                        m.len()
                    )));
                }
                m.len() / (t * t)
            }
            None => 0,
        };
        let rows = windows * t;
        let qkv = self.qkv.forward(p, xw, rows);
        let (qn, q_norm) = self.normalize(&qkv, rows, 0);
        let (kn, k_norm) = self.normalize(&qkv, rows, c);
        let scales = self.scales(p);
        let (bias, cpb) = self.head_bias(p);

        let mut probs = vec![T::zero(); windows * h * t * t];
        let mut ctx = vec![T::zero(); rows * c];
        for w in 0..windows {
            for hh in 0..h {
                let pw = &mut probs[(w * h + hh) * t * t..(w * h + hh + 1) * t * t];
                let off = w * t * c + hh * d;
                gemm_strided(
                    t,
                    d,
                    t,
                    scales[hh],
                    &qn,
                    Layout::row_major(off, c),
                    &kn,
                    Layout { offset: off, rs: 1, cs: c },
                    T::zero(),
                    pw,
                    Layout::row_major(0, t),
                );
                for (l, &b) in pw.iter_mut().zip(&bias[hh * t * t..(hh + 1) * t * t]) {
                    *l += b;
                }
                if mask_windows > 0 {
                    let mw = w % mask_windows;
                    let m = &mask.expect("mask present")[mw * t * t..(mw + 1) * t * t];
                    for (l, &mv) in pw.iter_mut().zip(m) {
                        *l += mv;
                    }
                }
                if !pw.iter().all(|v| v.is_finite()) {
                    return Err(MoseError::non_finite(format!(
                        "attention logits (window {w}, head {hh})"
                    )));
                }
                softmax_rows(pw, t);
                gemm_strided(
                    t,
                    t,
                    d,
                    T::one(),
                    pw,
                    Layout::row_major(0, t),
                    &qkv,
                    Layout::row_major(w * t * 3 * c + 2 * c + hh * d, 3 * c),
                    T::zero(),
                    &mut ctx,
                    Layout::row_major(off, c),
                );
            }
        }
        let mut y = self.proj.forward(p, &ctx, rows);
        if let Some(lepe) = self.lepe {
            let table = p.get(lepe);
            for w in 0..windows {
                for i in 0..t {
                    let row = &mut y[(w * t + i) * c..(w * t + i + 1) * c];
                    for (ch, v) in row.iter_mut().enumerate() {
                        *v += table[ch * t + i];
                    }
                }
            }
        }
        let cache = AttentionCache {
            x: xw.to_vec(),
            windows,
            qkv,
            qn,
            kn,
            q_norm,
            k_norm,
            probs,
            ctx,
            scales,
            cpb,
        };
        Ok((y, cache))
    }

    /// Per-head unit vectors of the q (col0 = 0) or k (col0 = C) block.
    fn normalize<T: Scalar>(&self, qkv: &[T], rows: usize, col0: usize) -> (Vec<T>, Vec<T>) {
        let c = self.cfg.channels;
        let h = self.cfg.heads;
        let d = self.cfg.head_dim();
        let mut out = vec![T::zero(); rows * c];
        let mut norms = vec![T::one(); rows * h];
        let cosine = self.cfg.kernel == AttentionKernel::Cosine;
        for r in 0..rows {
            for hh in 0..h {
                let src = &qkv[r * 3 * c + col0 + hh * d..r * 3 * c + col0 + (hh + 1) * d];
                let dst = &mut out[r * c + hh * d..r * c + (hh + 1) * d];
                if cosine {
                    let n = src.iter().map(|&v| v * v).sum::<T>().sqrt();
                    norms[r * h + hh] = n;
                    let inv = T::one() / n.max(T::lit(NORM_EPS));
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = v * inv;
                    }
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }
        (out, norms)
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        g: &mut ParamGrads<'_, T>,
        cache: &AttentionCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let c = self.cfg.channels;
        let h = self.cfg.heads;
        let d = self.cfg.head_dim();
        let t = self.cfg.tokens();
        let windows = cache.windows;
        let rows = windows * t;

        if let Some(lepe) = self.lepe {
            let dl = g.get_mut(lepe);
            for w in 0..windows {
                for i in 0..t {
                    let row = &dy[(w * t + i) * c..(w * t + i + 1) * c];
                    for (ch, &v) in row.iter().enumerate() {
                        dl[ch * t + i] += v;
                    }
                }
            }
        }
        let dctx = self.proj.backward(p, g, &cache.ctx, dy, rows);

        let mut dqkv = vec![T::zero(); rows * 3 * c];
        let mut dqn = vec![T::zero(); rows * c];
        let mut dkn = vec![T::zero(); rows * c];
        let mut dbias = vec![T::zero(); h * t * t];
        let mut dscale = vec![T::zero(); h];
        let mut dl = vec![T::zero(); t * t];
        let mut sim = vec![T::zero(); t * t];
        for w in 0..windows {
            for hh in 0..h {
                let pw = &cache.probs[(w * h + hh) * t * t..(w * h + hh + 1) * t * t];
                let off = w * t * c + hh * d;
                let voff = w * t * 3 * c + 2 * c + hh * d;
                // dP = dctx . V^T
                gemm_strided(
                    t,
                    d,
                    t,
                    T::one(),
                    &dctx,
                    Layout::row_major(off, c),
                    &cache.qkv,
                    Layout { offset: voff, rs: 1, cs: 3 * c },
                    T::zero(),
                    &mut dl,
                    Layout::row_major(0, t),
                );
                // dV = P^T . dctx
                gemm_strided(
                    t,
                    t,
                    d,
                    T::one(),
                    pw,
                    Layout::transposed(0, t),
                    &dctx,
                    Layout::row_major(off, c),
                    T::one(),
                    &mut dqkv,
                    Layout::row_major(voff, 3 * c),
                );
                for i in 0..t {
                    let pr = &pw[i * t..(i + 1) * t];
                    let dr = &mut dl[i * t..(i + 1) * t];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (x, &pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot);
                    }
                }
                for (a, &b) in dbias[hh * t * t..(hh + 1) * t * t].iter_mut().zip(&dl) {
                    *a += b;
                }
                if self.tau.is_some() {
                    gemm_strided(
                        t,
                        d,
                        t,
                        T::one(),
                        &cache.qn,
                        Layout::row_major(off, c),
                        &cache.kn,
                        Layout { offset: off, rs: 1, cs: c },
                        T::zero(),
                        &mut sim,
                        Layout::row_major(0, t),
                    );
                    dscale[hh] += dl.iter().zip(&sim).map(|(&a, &b)| a * b).sum::<T>();
                }
                let s = cache.scales[hh];
                gemm_strided(
                    t,
                    t,
                    d,
                    s,
                    &dl,
                    Layout::row_major(0, t),
                    &cache.kn,
                    Layout::row_major(off, c),
                    T::zero(),
                    &mut dqn,
                    Layout::row_major(off, c),
                );
                gemm_strided(
                    t,
                    t,
                    d,
                    s,
                    &dl,
                    Layout::transposed(0, t),
                    &cache.qn,
                    Layout::row_major(off, c),
                    T::zero(),
                    &mut dkn,
                    Layout::row_major(off, c),
                );
            }
        }

        self.normalize_backward(&cache.qn, &cache.q_norm, &dqn, &mut dqkv, 0, rows);
        self.normalize_backward(&cache.kn, &cache.k_norm, &dkn, &mut dqkv, c, rows);

        if let Some(tau) = self.tau {
            let tv = p.get(tau);
            let dt = g.get_mut(tau);
            for hh in 0..h {
                if tv[hh] > T::lit(TAU_MIN) {
                    dt[hh] -= dscale[hh] / (tv[hh] * tv[hh]);
                }
            }
        }
        if let Some(rpe) = self.rpe {
            scatter(&dbias, h, &self.index, g.get_mut(rpe));
        }
        if let (Some(net), Some(cpb_cache)) = (&self.cpb, &cache.cpb) {
            let mut dtable = vec![T::zero(); offset_count(self.cfg.window_size) * h];
            scatter(&dbias, h, &self.index, &mut dtable);
            net.backward(p, g, cpb_cache, &dtable);
        }
        self.qkv.backward(p, g, &cache.x, &dqkv, rows)
    }

    fn normalize_backward<T: Scalar>(
        &self,
        unit: &[T],
        norms: &[T],
        dunit: &[T],
        dqkv: &mut [T],
        col0: usize,
        rows: usize,
    ) {
        let c = self.cfg.channels;
        let h = self.cfg.heads;
        let d = self.cfg.head_dim();
        let cosine = self.cfg.kernel == AttentionKernel::Cosine;
        let eps = T::lit(NORM_EPS);
        for r in 0..rows {
            for hh in 0..h {
                let u = &unit[r * c + hh * d..r * c + (hh + 1) * d];
                let du = &dunit[r * c + hh * d..r * c + (hh + 1) * d];
                let dst = &mut dqkv[r * 3 * c + col0 + hh * d..r * 3 * c + col0 + (hh + 1) * d];
                if !cosine {
                    dst.copy_from_slice(du);
                    continue;
                }
                let n = norms[r * h + hh];
                if n > eps {
                    let proj: T = u.iter().zip(du).map(|(&a, &b)| a * b).sum();
                    for ((o, &a), &b) in dst.iter_mut().zip(u).zip(du) {
                        *o = (b - a * proj) / n;
                    }
                } else {
                    for (o, &b) in dst.iter_mut().zip(du) {
                        *o = b / eps;
                    }
                }
            }
        }
    }

    /// Tensor-level entry: `xw` is `nW x M^2 x C`.
    pub fn apply<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        xw: &Tensor<T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let (y, _) = self.forward(&params.values(), xw.data(), mask.map(Tensor::data))?;
        Tensor::from_vec(xw.shape(), y)
    }

    pub fn param_count(&self) -> usize {
        let m = self.cfg.window_size;
        self.qkv.param_count()
            + self.proj.param_count()
            + self.tau.map_or(0, |_| self.cfg.heads)
            + self.rpe.map_or(0, |_| offset_count(m) * self.cfg.heads)
            + self
                .cpb
                .as_ref()
                .map_or(0, |n| n.fc1.param_count() + n.fc2.param_count())
            + self.lepe.map_or(0, |_| self.cfg.channels * m * m)
    }
}

/// Numerically stable in-place softmax over each row of length `n`.
pub fn softmax_rows<T: Scalar>(x: &mut [T], n: usize) {
    for row in x.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}
