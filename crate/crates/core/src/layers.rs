//! Building blocks with explicit forward/backward routines.
//!
//! Every layer keeps its parameters in a [`ParameterSet`] and refers to them
//! by [`ParamId`]. Forward returns whatever backward needs; backward
//! accumulates parameter gradients and returns the input gradient.

use crate::error::{MoseError, Result};
use crate::numerics::linalg::matmul;
use crate::numerics::{trunc_normal_init, ParamGrads, ParamId, ParamValues, ParameterSet, Rng, Tensor};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;

/// Fully connected layer, `y = x W + b` with `W` stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = ps.register(
            format!("{name}.weight"),
            trunc_normal_init(&[d_in, d_out], INIT_STD, rng)?,
        )?;
        let b = if bias {
            Some(ps.register(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamValues<'_, T>, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.d_in);
        let mut y = match self.b {
            Some(b) => {
                let bias = p.get(b);
                let mut y = Vec::with_capacity(rows * self.d_out);
                for _ in 0..rows {
                    y.extend_from_slice(bias);
                }
                y
            }
            None => vec![T::zero(); rows * self.d_out],
        };
        matmul(rows, self.d_in, self.d_out, x, false, p.get(self.w), false, &mut y, true);
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        g: &mut ParamGrads<'_, T>,
        x: &[T],
        dy: &[T],
        rows: usize,
    ) -> Vec<T> {
        matmul(self.d_in, rows, self.d_out, x, true, dy, false, g.get_mut(self.w), true);
        if let Some(b) = self.b {
            let db = g.get_mut(b);
            for row in dy.chunks_exact(self.d_out) {
                for (a, &d) in db.iter_mut().zip(row) {
                    *a += d;
                }
            }
        }
        let mut dx = vec![T::zero(); rows * self.d_in];
        matmul(rows, self.d_out, self.d_in, dy, false, p.get(self.w), true, &mut dx, false);
        dx
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

/// Layer normalization over the trailing channel axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub w: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParameterSet<T>, name: &str, dim: usize) -> Result<Self> {
        Self::with_gain(ps, name, dim, 1.0)
    }

    pub fn with_gain<T: Scalar>(ps: &mut ParameterSet<T>, name: &str, dim: usize, gain: f64) -> Result<Self> {
        let w = ps.register(format!("{name}.weight"), Tensor::full(&[dim], T::lit(gain)))?;
        let b = ps.register(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { w, b, dim })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamValues<'_, T>, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let c = self.dim;
        let rows = x.len() / c;
        let (w, b) = (p.get(self.w), p.get(self.b));
        let inv_c = T::one() / T::from_usize_lossy(c);
        let eps = T::lit(LN_EPS);
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = h * w[j] + b[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        g: &mut ParamGrads<'_, T>,
        cache: &LayerNormCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let c = self.dim;
        let rows = dy.len() / c;
        let w = p.get(self.w);
        let inv_c = T::one() / T::from_usize_lossy(c);
        let mut dw = vec![T::zero(); c];
        let mut db = vec![T::zero(); c];
        let mut dx = vec![T::zero(); dy.len()];
        for r in 0..rows {
            let xh = &cache.xhat[r * c..(r + 1) * c];
            let d = &dy[r * c..(r + 1) * c];
            let mut mean_dxh = T::zero();
            let mut mean_dxh_xh = T::zero();
            for j in 0..c {
                dw[j] += d[j] * xh[j];
                db[j] += d[j];
                let dxh = d[j] * w[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh *= inv_c;
            mean_dxh_xh *= inv_c;
            let rs = cache.rstd[r];
            for j in 0..c {
                dx[r * c + j] = rs * (d[j] * w[j] - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        g.accumulate(self.w, &dw);
        g.accumulate(self.b, &db);
        dx
    }
}

const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: &[T]) -> Vec<T> {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    x.iter()
        .map(|&v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let t = (c * (v + k * v * v * v)).tanh();
            let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
            d * (half * (T::one() + t) + half * v * dt)
        })
        .collect()
}

/// Two-layer perceptron `fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamValues<'_, T>, x: &[T], rows: usize) -> (Vec<T>, MlpCache<T>) {
        let pre = self.fc1.forward(p, x, rows);
        let act = gelu(&pre);
        let y = self.fc2.forward(p, &act, rows);
        (y, MlpCache { pre, act })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        g: &mut ParamGrads<'_, T>,
        x: &[T],
        cache: &MlpCache<T>,
        dy: &[T],
        rows: usize,
    ) -> Vec<T> {
        let dact = self.fc2.backward(p, g, &cache.act, dy, rows);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(p, g, x, &dpre, rows)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

/// 3x3 convolution, stride 1, edge-replicate padding 1, over `B x C x H x W` planes.
/// Weights start uniform in `±1/sqrt(fan_in)`, biases at zero.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct ConvCache<T> {
    cols: Vec<Vec<T>>,
    h: usize,
    w: usize,
}

impl Conv3x3 {
    pub fn new<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((9 * c_in) as f64).sqrt();
        let init = Tensor::from_fn(&[c_out, c_in, 3, 3], |_| T::lit(rng.uniform_in(-bound, bound)));
        let w = ps.register(format!("{name}.weight"), init)?;
        let b = ps.register(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Conv3x3 { w, b, c_in, c_out })
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        x: &[T],
        batch: usize,
        h: usize,
        w: usize,
    ) -> (Vec<T>, ConvCache<T>) {
        let hw = h * w;
        assert_eq!(x.len(), batch * self.c_in * hw, "conv input size");
        let weight = p.get(self.w);
        let bias = p.get(self.b);
        let mut out = vec![T::zero(); batch * self.c_out * hw];
        let mut cols = Vec::with_capacity(batch);
        for e in 0..batch {
            let col = im2col(&x[e * self.c_in * hw..(e + 1) * self.c_in * hw], self.c_in, h, w);
            let o = &mut out[e * self.c_out * hw..(e + 1) * self.c_out * hw];
            for (co, plane) in o.chunks_exact_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            matmul(self.c_out, self.c_in * 9, hw, weight, false, &col, false, o, true);
            cols.push(col);
        }
        (out, ConvCache { cols, h, w })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamValues<'_, T>,
        g: &mut ParamGrads<'_, T>,
        cache: &ConvCache<T>,
        dy: &[T],
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let (h, w) = (cache.h, cache.w);
        let hw = h * w;
        let batch = cache.cols.len();
        let k = self.c_in * 9;
        let weight = p.get(self.w);
        let mut db = vec![T::zero(); self.c_out];
        let mut dx = if need_dx {
            Some(vec![T::zero(); batch * self.c_in * hw])
        } else {
            None
        };
        let mut dcol = vec![T::zero(); k * hw];
        for (e, col) in cache.cols.iter().enumerate() {
            let d = &dy[e * self.c_out * hw..(e + 1) * self.c_out * hw];
            matmul(self.c_out, hw, k, d, false, col, true, g.get_mut(self.w), true);
            for (co, plane) in d.chunks_exact(hw).enumerate() {
                db[co] += plane.iter().copied().sum::<T>();
            }
            if let Some(dx) = dx.as_mut() {
                matmul(k, self.c_out, hw, weight, true, d, false, &mut dcol, false);
                col2im_add(
                    &dcol,
                    &mut dx[e * self.c_in * hw..(e + 1) * self.c_in * hw],
                    self.c_in,
                    h,
                    w,
                );
            }
        }
        g.accumulate(self.b, &db);
        dx
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * 9 + self.c_out
    }
}

/// Source row or column of tap offset `k - 1` at `i`, clamped to the edge.
fn edge(i: usize, k: usize, n: usize) -> usize {
    (i + k).saturating_sub(1).min(n - 1)
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut col = vec![T::zero(); c * 9 * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let src = &plane[edge(y, ky, h) * w..(edge(y, ky, h) + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = src[0];
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = src[w - 1];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<T: Scalar>(col: &[T], dx: &mut [T], c: usize, h: usize, w: usize) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = edge(y, ky, h);
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    match kx {
                        0 => {
                            dst[0] += src[0];
                            dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(a, &b)| *a += b);
                        }
                        1 => dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
                        _ => {
                            dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(a, &b)| *a += b);
                            dst[w - 1] += src[w - 1];
                        }
                    }
                }
            }
        }
    }
}

/// `B x C x H x W` planes to `B x (H W) x C` tokens.
pub fn planes_to_tokens<T: Scalar>(x: &[T], batch: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for e in 0..batch {
        let src = &x[e * c * hw..(e + 1) * c * hw];
        let dst = &mut out[e * c * hw..(e + 1) * c * hw];
        for ch in 0..c {
            for n in 0..hw {
                dst[n * c + ch] = src[ch * hw + n];
            }
        }
    }
    out
}

/// Inverse of [`planes_to_tokens`].
pub fn tokens_to_planes<T: Scalar>(x: &[T], batch: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for e in 0..batch {
        let src = &x[e * c * hw..(e + 1) * c * hw];
        let dst = &mut out[e * c * hw..(e + 1) * c * hw];
        for n in 0..hw {
            for ch in 0..c {
                dst[ch * hw + n] = src[n * c + ch];
            }
        }
    }
    out
}

/// Pixel shuffle: `B x (C r^2) x H x W` to `B x C x rH x rW`.
pub fn depth_to_space<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || r == 0 || !s[1].is_multiple_of(r * r) {
        return Err(MoseError::shape(format!(
            "depth_to_space: shape {s:?} incompatible with factor {r}"
        )));
    }
    let (b, cr, h, w) = (s[0], s[1], s[2], s[3]);
    let c = cr / (r * r);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let (oh, ow) = (h * r, w * r);
    for e in 0..b {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let sc = ch * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            out[((e * c + ch) * oh + y * r + i) * ow + xx * r + j] =
                                src[((e * cr + sc) * h + y) * w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

/// Inverse of [`depth_to_space`].
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || r == 0 || !s[2].is_multiple_of(r) || !s[3].is_multiple_of(r) {
        return Err(MoseError::shape(format!(
            "space_to_depth: shape {s:?} incompatible with factor {r}"
        )));
    }
    let (b, c, oh, ow) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (oh / r, ow / r);
    let cr = c * r * r;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for e in 0..b {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let sc = ch * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            out[((e * cr + sc) * h + y) * w + xx] =
                                src[((e * c + ch) * oh + y * r + i) * ow + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, cr, h, w], out)
}

/// Mirror index into `0..n` (edge sample not repeated), any offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pad bottom/right of `B x C x H x W` planes up to `ph x pw`.
pub fn pad_reflect<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * ph * pw];
    for p in 0..planes {
        for y in 0..ph {
            let sy = reflect_index(y as isize, h);
            for xx in 0..pw {
                let sx = reflect_index(xx as isize, w);
                out[(p * ph + y) * pw + xx] = x[(p * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Keep the top-left `h x w` of each `ph x pw` plane.
pub fn crop<T: Scalar>(x: &[T], planes: usize, ph: usize, pw: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            let start = (p * ph + y) * pw;
            out.extend_from_slice(&x[start..start + w]);
        }
    }
    out
}

/// Adjoint of [`crop`]: zero-fill back to `ph x pw`.
pub fn uncrop<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * ph * pw];
    for p in 0..planes {
        for y in 0..h {
            let start = (p * ph + y) * pw;
            out[start..start + w].copy_from_slice(&x[(p * h + y) * w..(p * h + y + 1) * w]);
        }
    }
    out
}
