//! Procedural band-limited LR/HR pairs.

use num_rational::Ratio;

use super::raster::RasterImage;
use super::PairSample;
use crate::error::{MoseError, Result};
use crate::metrics::bicubic_resize;
use crate::numerics::{Rng, Tensor};

const WAVES: usize = 6;
const EDGES: usize = 2;

/// Highest wave frequency in cycles per image side: half the LR Nyquist limit.
pub fn max_cycles(hw: usize, r: usize) -> f64 {
    hw as f64 / (4 * r) as f64
}

fn field(rng: &mut Rng, hw: usize, max_cycles: f64) -> Vec<f64> {
    let tau = 2.0 * std::f64::consts::PI;
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            (
                rng.uniform_in(-max_cycles, max_cycles),
                rng.uniform_in(-max_cycles, max_cycles),
                rng.uniform_in(0.0, tau),
                rng.uniform_in(0.2, 1.0),
            )
        })
        .collect();
    let edges: Vec<(f64, f64, f64, f64)> = (0..EDGES)
        .map(|_| {
            let angle = rng.uniform_in(0.0, tau);
            (angle.cos(), angle.sin(), rng.uniform_in(0.2, 0.8), rng.uniform_in(-0.8, 0.8))
        })
        .collect();
    let n = hw as f64;
    (0..hw * hw)
        .map(|i| {
            let (y, x) = ((i / hw) as f64 / n, (i % hw) as f64 / n);
            let smooth: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, a)| a * (tau * (fy * y + fx * x) + ph).sin())
                .sum();
            let steps: f64 = edges
                .iter()
                .map(|&(c, s, off, a)| if c * (x - 0.5) + s * (y - 0.5) + 0.5 > off { a } else { 0.0 })
                .sum();
            smooth + steps
        })
        .collect()
}

/// `n` pairs of `bands`-band HR squares of side `hw`, each band a mix of a
/// shared and a private random field, with LR = bicubic downscale by `r`.
pub fn synth_pairs(n: usize, hw: usize, r: usize, bands: usize, rng: &mut Rng) -> Result<Vec<PairSample>> {
    if r < 2 || !hw.is_multiple_of(r) || hw == 0 {
        return Err(MoseError::invalid(format!("side {hw} not divisible by scale {r}")));
    }
    if bands == 0 {
        return Err(MoseError::invalid("at least one band"));
    }
    (0..n)
        .map(|_| {
            let shared = field(rng, hw, max_cycles(hw, r));
            let mut raw = Vec::with_capacity(bands * hw * hw);
            for _ in 0..bands {
                let own = field(rng, hw, max_cycles(hw, r));
                raw.extend(shared.iter().zip(&own).map(|(&a, &b)| (0.6 * a + 0.4 * b) as f32));
            }
            let mut hr = RasterImage::from_raw(bands, hw, hw, &raw)?;
            hr.band_stats = vec![(0.0, 1.0); bands];
            let t: Tensor<f64> = hr.to_tensor();
            let lr_t = bicubic_resize(&t, Ratio::new(1, r as u32))?;
            let lr = RasterImage::from_tensor(&lr_t, hr.band_stats.clone())?;
            PairSample::new(lr, hr, r)
        })
        .collect()
}
