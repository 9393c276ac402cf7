//! Evaluation metrics and the bicubic baseline resampler.

use num_rational::Ratio;

use crate::error::{MoseError, Result};
use crate::losses::{mse, ncc_channel, ssim_channel, SsimParams};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// `10 log10(1 / MSE)` over all bands jointly; `+inf` when the inputs match.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    let e = mse(pred, gt)?;
    if e == T::zero() {
        return Ok(T::infinity());
    }
    Ok(T::lit(-10.0) * e.log10())
}

fn planes<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(MoseError::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    match *pred.shape() {
        [s, h, w] => Ok((s, h, w)),
        ref s => Err(MoseError::shape(format!("expected S x H x W, got {s:?}"))),
    }
}

/// Band mean of windowed SSIM with default parameters.
pub fn ssim_metric<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    let (s, h, w) = planes(pred, gt)?;
    let p = SsimParams::default();
    let mut acc = T::zero();
    for b in 0..s {
        let r = b * h * w..(b + 1) * h * w;
        acc += ssim_channel(&pred.data()[r.clone()], &gt.data()[r], h, w, &p)?;
    }
    Ok(acc / T::from_usize_lossy(s))
}

/// Band mean of the Pearson correlation.
pub fn ncc_metric<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    let (s, h, w) = planes(pred, gt)?;
    let mut acc = T::zero();
    for b in 0..s {
        let r = b * h * w..(b + 1) * h * w;
        acc += ncc_channel(&pred.data()[r.clone()], &gt.data()[r]).value;
    }
    Ok(acc / T::from_usize_lossy(s))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScores {
    pub psnr: f64,
    pub ssim: f64,
    pub ncc: f64,
}

pub fn score<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ImageScores> {
    Ok(ImageScores {
        psnr: psnr(pred, gt)?.to_f64_lossy(),
        ssim: ssim_metric(pred, gt)?.to_f64_lossy(),
        ncc: ncc_metric(pred, gt)?.to_f64_lossy(),
    })
}

const CUBIC_A: f64 = -0.5;

/// Catmull-Rom kernel.
pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Source taps `(index, weight)` of every output sample along one axis.
///
/// Pixel centers map through `src = (dst + 0.5) / s - 0.5`. When shrinking,
/// the kernel is stretched by `1 / s`. Out-of-range taps clamp to the edge.
fn axis_taps(n_in: usize, n_out: usize, s: f64) -> Vec<Vec<(usize, f64)>> {
    let stretch = if s < 1.0 { 1.0 / s } else { 1.0 };
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) / s - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for i in lo..=hi {
                let wv = cubic((i as f64 - center) / stretch);
                if wv == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, n_in as isize - 1) as usize;
                total += wv;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += wv,
                    None => taps.push((idx, wv)),
                }
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Output extent `floor(n * scale)`.
pub fn scaled_len(n: usize, scale: Ratio<u32>) -> usize {
    (n as u64 * *scale.numer() as u64 / *scale.denom() as u64) as usize
}

/// Separable bicubic resampling of an `S x H x W` image.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, scale: Ratio<u32>) -> Result<Tensor<T>> {
    let (s, h, w) = match *img.shape() {
        [s, h, w] => (s, h, w),
        ref sh => return Err(MoseError::shape(format!("expected S x H x W, got {sh:?}"))),
    };
    if *scale.numer() == 0 || *scale.denom() == 0 {
        return Err(MoseError::invalid("scale must be positive"));
    }
    let (oh, ow) = (scaled_len(h, scale), scaled_len(w, scale));
    if oh == 0 || ow == 0 {
        return Err(MoseError::invalid(format!(
            "{h}x{w} at scale {scale} gives an empty image"
        )));
    }
    let f = *scale.numer() as f64 / *scale.denom() as f64;
    let (ty, tx) = (axis_taps(h, oh, f), axis_taps(w, ow, f));
    let src = img.data();
    let mut out = Vec::with_capacity(s * oh * ow);
    let mut rows = vec![T::zero(); h * ow];
    for b in 0..s {
        let plane = &src[b * h * w..(b + 1) * h * w];
        for y in 0..h {
            for (x, taps) in tx.iter().enumerate() {
                rows[y * ow + x] = taps.iter().map(|&(i, wv)| T::lit(wv) * plane[y * w + i]).sum();
            }
        }
        for taps in &ty {
            for x in 0..ow {
                out.push(taps.iter().map(|&(i, wv)| T::lit(wv) * rows[i * ow + x]).sum());
            }
        }
    }
    Tensor::from_vec(&[s, oh, ow], out)
}
