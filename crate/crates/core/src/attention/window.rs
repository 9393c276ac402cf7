//! Window partitioning, cyclic shifts and the shifted-window mask.
//!
//! Token grids are `B x H x W x C`, row-major; windows are emitted in raster
//! order per image, each holding its `M x M` tokens in raster order.

use crate::error::{MoseError, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Additive logit for token pairs that belong to different shifted regions.
pub const MASK_LOGIT: f64 = -100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Grid {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.batch * self.tokens() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn windows_per_image(&self, m: usize) -> usize {
        (self.height / m) * (self.width / m)
    }

    fn check_window(&self, m: usize) -> Result<()> {
        if m == 0 || !self.height.is_multiple_of(m) || !self.width.is_multiple_of(m) {
            return Err(MoseError::shape(format!(
                "grid {}x{} not divisible by window {m}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn from_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [batch, height, width, channels] => Ok(Grid {
                batch,
                height,
                width,
                channels,
            }),
            _ => Err(MoseError::shape(format!("expected B x H x W x C, got {shape:?}"))),
        }
    }
}

pub fn partition<T: Scalar>(x: &[T], g: Grid, m: usize) -> Result<Vec<T>> {
    g.check_window(m)?;
    let (c, nh, nw) = (g.channels, g.height / m, g.width / m);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..g.batch {
        for wy in 0..nh {
            for wx in 0..nw {
                for iy in 0..m {
                    let row = (b * g.height + wy * m + iy) * g.width + wx * m;
                    out.extend_from_slice(&x[row * c..(row + m) * c]);
                }
            }
        }
    }
    Ok(out)
}

pub fn reverse<T: Scalar>(xw: &[T], g: Grid, m: usize) -> Result<Vec<T>> {
    g.check_window(m)?;
    let (c, nh, nw) = (g.channels, g.height / m, g.width / m);
    let mut out = vec![T::zero(); xw.len()];
    let mut src = 0;
    for b in 0..g.batch {
        for wy in 0..nh {
            for wx in 0..nw {
                for iy in 0..m {
                    let row = (b * g.height + wy * m + iy) * g.width + wx * m;
                    out[row * c..(row + m) * c].copy_from_slice(&xw[src..src + m * c]);
                    src += m * c;
                }
            }
        }
    }
    Ok(out)
}

/// Toroidal roll: `out[i][j] = x[(i + shift) % H][(j + shift) % W]`.
pub fn shift<T: Scalar>(x: &[T], g: Grid, shift: usize) -> Vec<T> {
    roll(x, g, shift as isize)
}

/// Inverse of [`shift`].
pub fn unshift<T: Scalar>(x: &[T], g: Grid, shift: usize) -> Vec<T> {
    roll(x, g, -(shift as isize))
}

fn roll<T: Scalar>(x: &[T], g: Grid, s: isize) -> Vec<T> {
    if s == 0 {
        return x.to_vec();
    }
    let c = g.channels;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..g.batch {
        for i in 0..g.height {
            let si = (i as isize + s).rem_euclid(g.height as isize) as usize;
            for j in 0..g.width {
                let sj = (j as isize + s).rem_euclid(g.width as isize) as usize;
                let dst = ((b * g.height + i) * g.width + j) * c;
                let src = ((b * g.height + si) * g.width + sj) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

/// Per-window additive mask `nW x M^2 x M^2` for a shifted `H x W` grid.
pub fn shift_mask<T: Scalar>(height: usize, width: usize, m: usize, shift: usize) -> Result<Vec<T>> {
    let g = Grid {
        batch: 1,
        height,
        width,
        channels: 1,
    };
    g.check_window(m)?;
    let bands = |n: usize| -> Vec<usize> {
        (0..n)
            .map(|i| {
                if i < n - m {
                    0
                } else if i < n - shift {
                    1
                } else {
                    2
                }
            })
            .collect()
    };
    let (rows, cols) = (bands(height), bands(width));
    let mut labels = Vec::with_capacity(height * width);
    for &r in &rows {
        for &c in &cols {
            labels.push(T::from_usize_lossy(r * 3 + c));
        }
    }
    let lw = partition(&labels, g, m)?;
    let t = m * m;
    let masked = T::lit(MASK_LOGIT);
    let mut mask = Vec::with_capacity(lw.len() * t);
    for win in lw.chunks_exact(t) {
        for &a in win {
            for &b in win {
                mask.push(if a == b { T::zero() } else { masked });
            }
        }
    }
    Ok(mask)
}

/// `B x H x W x C` to `(B * H/M * W/M) x M^2 x C`.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let g = Grid::from_shape(x.shape())?;
    let data = partition(x.data(), g, m)?;
    Tensor::from_vec(&[g.batch * g.windows_per_image(m), m * m, g.channels], data)
}

/// Inverse of [`window_partition`] for a `batch x height x width` grid.
pub fn window_reverse<T: Scalar>(
    xw: &Tensor<T>,
    batch: usize,
    height: usize,
    width: usize,
    m: usize,
) -> Result<Tensor<T>> {
    let channels = *xw.shape().last().unwrap_or(&0);
    let g = Grid {
        batch,
        height,
        width,
        channels,
    };
    if xw.len() != g.len() {
        return Err(MoseError::shape(format!(
            "{:?} does not hold a {batch}x{height}x{width}x{channels} grid",
            xw.shape()
        )));
    }
    let data = reverse(xw.data(), g, m)?;
    Tensor::from_vec(&[batch, height, width, channels], data)
}

/// Cyclic shift of a `B x H x W x C` grid by `(-shift, -shift)`.
pub fn cyclic_shift<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let g = Grid::from_shape(x.shape())?;
    Tensor::from_vec(x.shape(), shift(x.data(), g, s))
}

pub fn cyclic_unshift<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let g = Grid::from_shape(x.shape())?;
    Tensor::from_vec(x.shape(), unshift(x.data(), g, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn grid(b: usize, h: usize, w: usize, c: usize) -> Tensor<f64> {
        Rng::new(2).uniform_tensor(&[b, h, w, c], -1.0, 1.0)
    }

    #[test]
    fn single_window() {
        let x = grid(1, 8, 8, 3);
        let w = window_partition(&x, 8).unwrap();
        assert_eq!(w.shape(), &[1, 64, 3]);
        assert_eq!(w.data(), x.data());
    }

    #[test]
    fn partition_roundtrip() {
        let x = grid(2, 16, 16, 5);
        let w = window_partition(&x, 8).unwrap();
        assert_eq!(w.shape(), &[8, 64, 5]);
        assert_eq!(window_reverse(&w, 2, 16, 16, 8).unwrap(), x);
    }

    #[test]
    fn partition_places_tokens() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let w = window_partition(&x, 2).unwrap();
        assert_eq!(&w.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&w.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn constant_grid_constant_windows() {
        let x = Tensor::<f32>::full(&[1, 16, 8, 2], 0.25);
        let w = window_partition(&x, 4).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn indivisible_is_rejected() {
        assert!(window_partition(&grid(1, 12, 16, 1), 8).is_err());
    }

    #[test]
    fn shift_identity_inverse_and_sum() {
        let x = grid(2, 8, 12, 3);
        assert_eq!(cyclic_shift(&x, 0).unwrap(), x);
        let s = cyclic_shift(&x, 3).unwrap();
        assert_eq!(cyclic_unshift(&s, 3).unwrap(), x);
        assert!((s.sum() - x.sum()).abs() < 1e-12);
        assert_eq!(s.at(&[0, 0, 0, 1]), x.at(&[0, 3, 3, 1]));
    }

    #[test]
    fn mask_structure() {
        let mask: Vec<f64> = shift_mask(16, 16, 8, 4).unwrap();
        assert_eq!(mask.len(), 4 * 64 * 64);
        // top-left window is never split
        assert!(mask[..64 * 64].iter().all(|&v| v == 0.0));
        // bottom-right window mixes four regions
        let last = &mask[3 * 4096..];
        assert!(last.contains(&MASK_LOGIT));
        for i in 0..64 {
            assert_eq!(last[i * 64 + i], 0.0);
            for j in 0..64 {
                assert_eq!(last[i * 64 + j], last[j * 64 + i]);
            }
        }
    }
}
