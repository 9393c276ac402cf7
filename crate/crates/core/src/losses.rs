//! Training objective: per-band normalized cross-correlation, windowed SSIM,
//! MSE for ablations, and their weighted sum with the expert-balance term.

use serde::{Deserialize, Serialize};

use crate::error::{MoseError, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Added to the NCC denominator so flat inputs give a defined value.
pub const NCC_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Weight of the plain MSE term (ablation only).
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            mse: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.mse];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(MoseError::Config(format!(
                "loss weights must be finite and >= 0, got {all:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub eta: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        let c2 = 0.03f64 * 0.03;
        SsimParams {
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2,
            c3: c2 / 2.0,
            delta: 1.0,
            epsilon: 1.0,
            eta: 1.0,
        }
    }
}

impl SsimParams {
    fn validate(&self) -> Result<()> {
        if self.window == 0 || !(self.sigma > 0.0) || !(self.c1 > 0.0 && self.c2 > 0.0 && self.c3 > 0.0) {
            return Err(MoseError::Config(format!("invalid SSIM parameters {self:?}")));
        }
        Ok(())
    }

    /// Exponents all one and `C3 = C2 / 2`: the two-factor closed form applies.
    pub fn is_fused(&self) -> bool {
        self.delta == 1.0 && self.epsilon == 1.0 && self.eta == 1.0 && (self.c3 - self.c2 / 2.0).abs() <= 1e-15
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps<T: Scalar>(&self) -> Vec<T> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| T::lit(v / s)).collect()
    }
}

/// Pearson correlation of one band plus a flag for the zero-variance guard.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NccValue<T> {
    pub value: T,
    pub degenerate: bool,
}

struct Centered<T> {
    a: Vec<T>,
    b: Vec<T>,
    saa: T,
    sbb: T,
    sab: T,
}

fn center<T: Scalar>(pred: &[T], gt: &[T]) -> Centered<T> {
    let n = T::from_usize_lossy(pred.len());
    let mp = pred.iter().copied().sum::<T>() / n;
    let mg = gt.iter().copied().sum::<T>() / n;
    let a: Vec<T> = pred.iter().map(|&v| v - mp).collect();
    let b: Vec<T> = gt.iter().map(|&v| v - mg).collect();
    let saa = a.iter().map(|&v| v * v).sum();
    let sbb = b.iter().map(|&v| v * v).sum();
    let sab = a.iter().zip(&b).map(|(&x, &y)| x * y).sum();
    Centered { a, b, saa, sbb, sab }
}

pub fn ncc_channel<T: Scalar>(pred: &[T], gt: &[T]) -> NccValue<T> {
    let c = center(pred, gt);
    let root = (c.saa * c.sbb).sqrt();
    NccValue {
        value: c.sab / (root + T::lit(NCC_EPS)),
        degenerate: root <= T::lit(NCC_EPS),
    }
}

/// `d ncc / d pred` for one band.
fn ncc_channel_grad<T: Scalar>(pred: &[T], gt: &[T]) -> Vec<T> {
    let c = center(pred, gt);
    let root = (c.saa * c.sbb).sqrt();
    let den = root + T::lit(NCC_EPS);
    let droot_factor = if root > T::zero() { c.sbb / root } else { T::zero() };
    let k = c.sab / (den * den) * droot_factor;
    c.b.iter().zip(&c.a).map(|(&b, &a)| b / den - k * a).collect()
}

fn plane_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        ref s => Err(MoseError::shape(format!("expected H x W, got {s:?}"))),
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MoseError::shape(format!(
            "prediction {:?} vs target {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(examples, bands, h, w)` for an `S x H x W` or `B x S x H x W` tensor.
fn image_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [s, h, w] => Ok((1, s, h, w)),
        [b, s, h, w] => Ok((b, s, h, w)),
        ref s => Err(MoseError::shape(format!("expected [B x] S x H x W, got {s:?}"))),
    }
}

pub fn ncc_per_channel<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    same_shape(pred, gt)?;
    let (h, w) = plane_dims(pred)?;
    if h * w < 2 {
        return Err(MoseError::invalid("NCC needs at least two pixels"));
    }
    Ok(ncc_channel(pred.data(), gt.data()).value)
}

/// `1 - (mean band NCC + 1) / 2`, averaged over examples.
pub fn ncc_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    same_shape(pred, gt)?;
    let (b, s, h, w) = image_dims(pred)?;
    let (value, _) = ncc_term(pred.data(), gt.data(), b, s, h * w, false);
    Ok(value)
}

/// Loss value, and `d loss / d pred` when asked.
fn ncc_term<T: Scalar>(
    pred: &[T],
    gt: &[T],
    b: usize,
    s: usize,
    hw: usize,
    grad: bool,
) -> (T, Option<(Vec<T>, usize)>) {
    let half = T::lit(0.5);
    let inv_s = T::one() / T::from_usize_lossy(s);
    let inv_b = T::one() / T::from_usize_lossy(b);
    let mut total = T::zero();
    let mut degenerate = 0;
    let mut d = if grad { Some(vec![T::zero(); pred.len()]) } else { None };
    for e in 0..b {
        let mut mean = T::zero();
        for ch in 0..s {
            let r = (e * s + ch) * hw..(e * s + ch + 1) * hw;
            let v = ncc_channel(&pred[r.clone()], &gt[r.clone()]);
            degenerate += v.degenerate as usize;
            mean += v.value * inv_s;
            if let Some(d) = d.as_mut() {
                let g = ncc_channel_grad(&pred[r.clone()], &gt[r.clone()]);
                // loss = 1 - (mean + 1) / 2 = 0.5 - 0.5 mean
                let scale = -half * inv_s * inv_b;
                for (o, gv) in d[r].iter_mut().zip(g) {
                    *o = scale * gv;
                }
            }
        }
        total += (T::one() - half * (mean + T::one())) * inv_b;
    }
    (total, d.map(|d| (d, degenerate)))
}

fn filter_valid<T: Scalar>(x: &[T], h: usize, w: usize, g: &[T]) -> Vec<T> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); h * ow];
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        for j in 0..ow {
            tmp[y * ow + j] = g.iter().zip(&row[j..j + k]).map(|(&a, &b)| a * b).sum();
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for (a, &ga) in g.iter().enumerate() {
        for i in 0..oh {
            let src = &tmp[(i + a) * ow..(i + a + 1) * ow];
            for (o, &v) in out[i * ow..(i + 1) * ow].iter_mut().zip(src) {
                *o += ga * v;
            }
        }
    }
    out
}

fn filter_valid_adjoint<T: Scalar>(d: &[T], h: usize, w: usize, g: &[T]) -> Vec<T> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut dtmp = vec![T::zero(); h * ow];
    for (a, &ga) in g.iter().enumerate() {
        for i in 0..oh {
            let src = &d[i * ow..(i + 1) * ow];
            for (o, &v) in dtmp[(i + a) * ow..(i + a + 1) * ow].iter_mut().zip(src) {
                *o += ga * v;
            }
        }
    }
    let mut dx = vec![T::zero(); h * w];
    for y in 0..h {
        for j in 0..ow {
            let v = dtmp[y * ow + j];
            for (o, &gb) in dx[y * w + j..y * w + j + k].iter_mut().zip(g) {
                *o += gb * v;
            }
        }
    }
    dx
}

struct SsimStats<T> {
    mx: Vec<T>,
    my: Vec<T>,
    vx: Vec<T>,
    vy: Vec<T>,
    cxy: Vec<T>,
}

fn ssim_stats<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, g: &[T]) -> SsimStats<T> {
    let sq = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&p, &q)| p * q).collect() };
    let mx = filter_valid(x, h, w, g);
    let my = filter_valid(y, h, w, g);
    let exx = filter_valid(&sq(x, x), h, w, g);
    let eyy = filter_valid(&sq(y, y), h, w, g);
    let exy = filter_valid(&sq(x, y), h, w, g);
    let vx = exx.iter().zip(&mx).map(|(&e, &m)| e - m * m).collect();
    let vy = eyy.iter().zip(&my).map(|(&e, &m)| e - m * m).collect();
    let cxy = exy
        .iter()
        .zip(mx.iter().zip(&my))
        .map(|(&e, (&a, &b))| e - a * b)
        .collect();
    SsimStats { mx, my, vx, vy, cxy }
}

fn check_ssim_dims(h: usize, w: usize, p: &SsimParams) -> Result<()> {
    p.validate()?;
    if h < p.window || w < p.window {
        return Err(MoseError::invalid(format!(
            "image {h}x{w} smaller than the {}x{} SSIM window",
            p.window, p.window
        )));
    }
    Ok(())
}

/// Mean local SSIM of one band over the valid window positions.
pub fn ssim_channel<T: Scalar>(pred: &[T], gt: &[T], h: usize, w: usize, p: &SsimParams) -> Result<T> {
    check_ssim_dims(h, w, p)?;
    let g = p.taps::<T>();
    let st = ssim_stats(pred, gt, h, w, &g);
    let (c1, c2, c3) = (T::lit(p.c1), T::lit(p.c2), T::lit(p.c3));
    let two = T::lit(2.0);
    let n = st.mx.len();
    let mut sum = T::zero();
    for i in 0..n {
        let (mx, my, vx, vy, cxy) = (st.mx[i], st.my[i], st.vx[i], st.vy[i], st.cxy[i]);
        let v = if p.is_fused() {
            (two * mx * my + c1) * (two * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        } else {
            let (sx, sy) = (vx.max(T::zero()).sqrt(), vy.max(T::zero()).sqrt());
            let l = (two * mx * my + c1) / (mx * mx + my * my + c1);
            let c = (two * sx * sy + c2) / (vx + vy + c2);
            let s = (cxy + c3) / (sx * sy + c3);
            l.powf(T::lit(p.delta)) * c.powf(T::lit(p.epsilon)) * s.powf(T::lit(p.eta))
        };
        sum += v;
    }
    Ok(sum / T::from_usize_lossy(n))
}

/// `d ssim / d pred` for one band (two-factor form only).
fn ssim_channel_grad<T: Scalar>(pred: &[T], gt: &[T], h: usize, w: usize, p: &SsimParams) -> Result<Vec<T>> {
    check_ssim_dims(h, w, p)?;
    if !p.is_fused() {
        return Err(MoseError::Config(
            "SSIM gradient requires unit exponents and C3 = C2/2".into(),
        ));
    }
    let g = p.taps::<T>();
    let st = ssim_stats(pred, gt, h, w, &g);
    let (c1, c2) = (T::lit(p.c1), T::lit(p.c2));
    let two = T::lit(2.0);
    let n = st.mx.len();
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut d_mx = vec![T::zero(); n];
    let mut d_exx = vec![T::zero(); n];
    let mut d_exy = vec![T::zero(); n];
    for i in 0..n {
        let (mx, my, vx, vy, cxy) = (st.mx[i], st.my[i], st.vx[i], st.vy[i], st.cxy[i]);
        let a1 = two * mx * my + c1;
        let a2 = two * cxy + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = vx + vy + c2;
        let s = a1 * a2 / (b1 * b2);
        let ds_dmx = two * my * a2 / (b1 * b2) - s * two * mx / b1;
        let ds_dcxy = two * a1 / (b1 * b2);
        let ds_dvx = -s / b2;
        // vx = E[x^2] - mx^2, cxy = E[xy] - mx my
        d_mx[i] = inv_n * (ds_dmx - two * mx * ds_dvx - my * ds_dcxy);
        d_exx[i] = inv_n * ds_dvx;
        d_exy[i] = inv_n * ds_dcxy;
    }
    let a = filter_valid_adjoint(&d_mx, h, w, &g);
    let b = filter_valid_adjoint(&d_exx, h, w, &g);
    let c = filter_valid_adjoint(&d_exy, h, w, &g);
    Ok((0..h * w)
        .map(|i| a[i] + two * pred[i] * b[i] + gt[i] * c[i])
        .collect())
}

pub fn ssim_per_channel<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, params: &SsimParams) -> Result<T> {
    same_shape(pred, gt)?;
    let (h, w) = plane_dims(pred)?;
    ssim_channel(pred.data(), gt.data(), h, w, params)
}

/// Mean over bands (and examples) of `1 - SSIM`.
pub fn ssim_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    same_shape(pred, gt)?;
    let (b, s, h, w) = image_dims(pred)?;
    Ok(ssim_term(pred.data(), gt.data(), b, s, h, w, false)?.0)
}

fn ssim_term<T: Scalar>(
    pred: &[T],
    gt: &[T],
    b: usize,
    s: usize,
    h: usize,
    w: usize,
    grad: bool,
) -> Result<(T, Option<Vec<T>>)> {
    let p = SsimParams::default();
    let hw = h * w;
    let inv = T::one() / T::from_usize_lossy(b * s);
    let mut total = T::zero();
    let mut d = if grad { Some(vec![T::zero(); pred.len()]) } else { None };
    for plane in 0..b * s {
        let r = plane * hw..(plane + 1) * hw;
        total += (T::one() - ssim_channel(&pred[r.clone()], &gt[r.clone()], h, w, &p)?) * inv;
        if let Some(d) = d.as_mut() {
            let g = ssim_channel_grad(&pred[r.clone()], &gt[r.clone()], h, w, &p)?;
            for (o, gv) in d[r].iter_mut().zip(g) {
                *o = -inv * gv;
            }
        }
    }
    Ok((total, d))
}

pub fn mse<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    same_shape(pred, gt)?;
    Ok(mse_slices(pred.data(), gt.data()))
}

pub(crate) fn mse_slices<T: Scalar>(pred: &[T], gt: &[T]) -> T {
    let n = T::from_usize_lossy(pred.len());
    pred.iter().zip(gt).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport<T> {
    pub total: T,
    pub ncc: T,
    pub ssim: T,
    pub moe: T,
    pub mse: T,
    /// Bands whose NCC hit the zero-variance guard.
    pub degenerate_bands: usize,
}

/// Weighted objective `alpha L_ncc + beta L_ssim + gamma L_moe (+ mse term)`.
pub fn total_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, moe_loss: T, w: &LossWeights) -> Result<LossReport<T>> {
    Ok(total_loss_impl(pred, gt, moe_loss, w, false)?.0)
}

/// As [`total_loss`], also returning `d total / d pred`.
pub fn total_loss_with_grad<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    moe_loss: T,
    w: &LossWeights,
) -> Result<(LossReport<T>, Vec<T>)> {
    let (r, d) = total_loss_impl(pred, gt, moe_loss, w, true)?;
    Ok((r, d.expect("gradient requested")))
}

fn total_loss_impl<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    moe_loss: T,
    w: &LossWeights,
    grad: bool,
) -> Result<(LossReport<T>, Option<Vec<T>>)> {
    w.validate()?;
    same_shape(pred, gt)?;
    let (b, s, h, wd) = image_dims(pred)?;
    let (x, y) = (pred.data(), gt.data());
    let (alpha, beta, gamma, wm) = (T::lit(w.alpha), T::lit(w.beta), T::lit(w.gamma), T::lit(w.mse));
    let mut dpred = if grad { Some(vec![T::zero(); x.len()]) } else { None };
    let add = |d: &mut Option<Vec<T>>, part: &[T], k: T| {
        if let Some(d) = d.as_mut() {
            for (o, &v) in d.iter_mut().zip(part) {
                *o += k * v;
            }
        }
    };

    let (ncc, ncc_grad) = ncc_term(x, y, b, s, h * wd, grad);
    let degenerate_bands = match &ncc_grad {
        Some((_, deg)) => *deg,
        None => (0..b * s)
            .filter(|&p| ncc_channel(&x[p * h * wd..(p + 1) * h * wd], &y[p * h * wd..(p + 1) * h * wd]).degenerate)
            .count(),
    };
    if let Some((g, _)) = &ncc_grad {
        add(&mut dpred, g, alpha);
    }
    let ssim = if w.beta > 0.0 || !grad {
        let (v, g) = ssim_term(x, y, b, s, h, wd, grad && w.beta > 0.0)?;
        if let Some(g) = g {
            add(&mut dpred, &g, beta);
        }
        v
    } else {
        ssim_term(x, y, b, s, h, wd, false)?.0
    };
    let mse = mse_slices(x, y);
    if grad && w.mse > 0.0 {
        let k = T::lit(2.0) / T::from_usize_lossy(x.len());
        let g: Vec<T> = x.iter().zip(y).map(|(&a, &b)| k * (a - b)).collect();
        add(&mut dpred, &g, wm);
    }
    let total = alpha * ncc + beta * ssim + gamma * moe_loss + wm * mse;
    if !total.is_finite() {
        return Err(MoseError::non_finite("total loss"));
    }
    Ok((
        LossReport {
            total,
            ncc,
            ssim,
            moe: moe_loss,
            mse,
            degenerate_bands,
        },
        dpred,
    ))
}
