//! Planar multispectral rasters and the `MSR1` file format.
//!
//! Byte layout, all little-endian:
//!
//! ```text
//! "MSR1"                    4 bytes magic
//! height, width, bands: u32
//! dtype: u32                1 = f32
//! bands x { min: f32, max: f32 }
//! payload: [f32; bands * height * width], band-major, normalized domain
//! ```

use std::path::Path;

use crate::error::{MoseError, Result};
use crate::fsutil::{self, put_f32s, put_u32, Reader};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const MSR_MAGIC: &[u8; 4] = b"MSR1";
pub const MSR_DTYPE_F32: u32 = 1;
/// Magic plus the four u32 header fields.
pub const MSR_HEADER_LEN: usize = 20;

/// Per-band raw `(min, max)`; `max > min`.
pub type BandStats = Vec<(f32, f32)>;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// Normalized to `[0, 1]`, band-major.
    pub pixels: Vec<f32>,
    pub band_stats: BandStats,
}

fn check_stats(stats: &[(f32, f32)]) -> Result<()> {
    for (i, &(lo, hi)) in stats.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(MoseError::Data(format!("band {i} stats ({lo}, {hi}) need finite max > min")));
        }
    }
    Ok(())
}

impl RasterImage {
    /// Already-normalized pixels; values are checked to lie in `[0, 1]`.
    pub fn new(bands: usize, height: usize, width: usize, pixels: Vec<f32>, band_stats: BandStats) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(MoseError::Data(format!("empty raster {bands}x{height}x{width}")));
        }
        if pixels.len() != bands * height * width || band_stats.len() != bands {
            return Err(MoseError::Data(format!(
                "raster {bands}x{height}x{width} with {} pixels and {} band stats",
                pixels.len(),
                band_stats.len()
            )));
        }
        check_stats(&band_stats)?;
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(MoseError::Data(format!("pixel {i} = {} outside [0, 1]", pixels[i])));
        }
        Ok(RasterImage {
            bands,
            height,
            width,
            pixels,
            band_stats,
        })
    }

    /// Min-max normalize raw values per band. A flat band gets `max = min + 1`.
    pub fn from_raw(bands: usize, height: usize, width: usize, raw: &[f32]) -> Result<Self> {
        if raw.len() != bands * height * width {
            return Err(MoseError::Data(format!("{} raw values for {bands}x{height}x{width}", raw.len())));
        }
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            return Err(MoseError::Data(format!("raw value {i} is not finite")));
        }
        let hw = height * width;
        let stats: BandStats = raw
            .chunks_exact(hw)
            .map(|band| {
                let lo = band.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = band.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if hi > lo {
                    (lo, hi)
                } else {
                    (lo, lo + 1.0)
                }
            })
            .collect();
        let pixels = normalize(raw, hw, &stats);
        RasterImage::new(bands, height, width, pixels, stats)
    }

    pub fn to_raw(&self) -> Vec<f32> {
        denormalize(&self.pixels, self.height * self.width, &self.band_stats)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.bands, self.height, self.width],
            self.pixels.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("raster dims match pixels")
    }

    /// From an `S x H x W` tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, band_stats: BandStats) -> Result<Self> {
        let (s, h, w) = match *t.shape() {
            [s, h, w] => (s, h, w),
            ref sh => return Err(MoseError::shape(format!("expected S x H x W, got {sh:?}"))),
        };
        t.ensure_finite("raster tensor")?;
        let pixels = t.data().iter().map(|v| v.to_f32_lossy().clamp(0.0, 1.0)).collect();
        RasterImage::new(s, h, w, pixels, band_stats)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MSR_HEADER_LEN + 8 * self.bands + 4 * self.pixels.len());
        out.extend_from_slice(MSR_MAGIC);
        for v in [self.height, self.width, self.bands] {
            put_u32(&mut out, v as u32);
        }
        put_u32(&mut out, MSR_DTYPE_F32);
        for &(lo, hi) in &self.band_stats {
            put_f32s(&mut out, &[lo, hi]);
        }
        put_f32s(&mut out, &self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != MSR_MAGIC {
            return Err(MoseError::Format {
                offset: 0,
                message: "bad magic, expected MSR1".into(),
            });
        }
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let bands = r.u32("bands")? as usize;
        let at = r.pos();
        let dtype = r.u32("dtype")?;
        if dtype != MSR_DTYPE_F32 {
            return Err(MoseError::Format {
                offset: at,
                message: format!("unsupported dtype code {dtype}"),
            });
        }
        let stats: BandStats = r
            .f32_vec(2 * bands, "band stats")?
            .chunks_exact(2)
            .map(|c| (c[0], c[1]))
            .collect();
        let n = bands
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| MoseError::Format {
                offset: 4,
                message: "dimensions overflow".into(),
            })?;
        let pixels = r.f32_vec(n, "pixel payload")?;
        if r.remaining() != 0 {
            return Err(MoseError::Format {
                offset: r.pos(),
                message: format!("{} trailing bytes", r.remaining()),
            });
        }
        RasterImage::new(bands, height, width, pixels, stats)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fsutil::read_file(path)?)
    }
}

pub fn read_msr(path: &Path) -> Result<RasterImage> {
    RasterImage::read(path)
}

pub fn write_msr(path: &Path, img: &RasterImage) -> Result<()> {
    img.write(path)
}

/// `(raw - min) / (max - min)` per band of `hw` pixels.
pub fn normalize(raw: &[f32], hw: usize, stats: &[(f32, f32)]) -> Vec<f32> {
    raw.chunks_exact(hw)
        .zip(stats)
        .flat_map(|(band, &(lo, hi))| {
            let span = (hi as f64) - (lo as f64);
            band.iter().map(move |&v| (((v as f64) - lo as f64) / span) as f32)
        })
        .collect()
}

pub fn denormalize(norm: &[f32], hw: usize, stats: &[(f32, f32)]) -> Vec<f32> {
    norm.chunks_exact(hw)
        .zip(stats)
        .flat_map(|(band, &(lo, hi))| {
            let span = (hi as f64) - (lo as f64);
            band.iter().map(move |&v| ((v as f64) * span + lo as f64) as f32)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RasterImage {
        let raw: Vec<f32> = (0..2 * 3 * 5).map(|i| (i as f32 * 7.3).sin() * 100.0 + 400.0).collect();
        RasterImage::from_raw(2, 3, 5, &raw).unwrap()
    }

    #[test]
    fn normalization_round_trip() {
        let raw: Vec<f32> = (0..4 * 16).map(|i| 1000.0 + (i as f32 * 1.7).cos() * 250.0).collect();
        let img = RasterImage::from_raw(4, 4, 4, &raw).unwrap();
        assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        for (a, b) in img.to_raw().iter().zip(&raw) {
            assert!(((a - b) / 1250.0).abs() < 1e-6);
        }
    }

    #[test]
    fn flat_band_gets_unit_span() {
        let img = RasterImage::from_raw(1, 2, 2, &[5.0; 4]).unwrap();
        assert_eq!(img.band_stats, vec![(5.0, 6.0)]);
        assert!(img.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_layout() {
        let img = sample();
        let bytes = img.encode();
        assert_eq!(&bytes[..4], b"MSR1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 20 + 2 * 8 + 30 * 4);
        assert_eq!(RasterImage::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn decode_errors_carry_offsets() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(matches!(RasterImage::decode(&bytes), Err(MoseError::Format { offset: 0, .. })));
        let mut bytes = sample().encode();
        bytes[16] = 2;
        assert!(matches!(RasterImage::decode(&bytes), Err(MoseError::Format { offset: 16, .. })));
        let bytes = sample().encode();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(RasterImage::decode(cut), Err(MoseError::Format { offset: 36, .. })));
    }
}
