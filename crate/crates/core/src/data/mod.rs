//! Raster IO, normalization, synthetic pairs, corpora and batching.

mod batch;
mod preview;
mod raster;
mod synth;

pub use batch::{load_corpus, stack, write_corpus, Batcher};
pub use preview::{read_png, write_png, PngDepth};
pub use raster::{
    denormalize, normalize, read_msr, write_msr, BandStats, RasterImage, MSR_DTYPE_F32, MSR_HEADER_LEN, MSR_MAGIC,
};
pub use synth::{max_cycles, synth_pairs};

use crate::error::{MoseError, Result};

/// An LR/HR pair with `hr = scale x lr` in both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub lr: RasterImage,
    pub hr: RasterImage,
    pub scale: usize,
}

impl PairSample {
    pub fn new(lr: RasterImage, hr: RasterImage, scale: usize) -> Result<Self> {
        if lr.bands != hr.bands || hr.height != scale * lr.height || hr.width != scale * lr.width {
            return Err(MoseError::Data(format!(
                "pair {}x{}x{} -> {}x{}x{} is not a x{scale} pair",
                lr.bands, lr.height, lr.width, hr.bands, hr.height, hr.width
            )));
        }
        Ok(PairSample { lr, hr, scale })
    }

    /// Infers the scale from the dimensions; it must be an integer >= 2.
    pub fn infer(lr: RasterImage, hr: RasterImage) -> Result<Self> {
        let r = hr.height / lr.height.max(1);
        if r < 2 {
            return Err(MoseError::invalid(format!(
                "HR {}x{} is not an upscale of LR {}x{}",
                hr.height, hr.width, lr.height, lr.width
            )));
        }
        PairSample::new(lr, hr, r)
    }
}
