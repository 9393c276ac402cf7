use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::raster::RasterImage;
use super::PairSample;
use crate::error::{MoseError, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

/// Seeded per-epoch shuffling into batches; the last partial batch is kept.
#[derive(Clone, Debug)]
pub struct Batcher {
    pub len: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Batcher {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(MoseError::Data("empty corpus".into()));
        }
        if batch_size == 0 {
            return Err(MoseError::invalid("batch size must be positive"));
        }
        Ok(Batcher { len, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let order = Rng::new(self.seed).derive(epoch).permutation(self.len);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Sample indices of global step `step` (steps run through epochs in order).
    pub fn batch_at(&self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        self.epoch(step / per).swap_remove((step % per) as usize)
    }
}

/// Stack the selected pairs into `B x S x h x w` LR and HR tensors.
pub fn stack<T: Scalar>(samples: &[PairSample], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .get(*idx.first().ok_or_else(|| MoseError::invalid("empty batch"))?)
        .ok_or_else(|| MoseError::invalid("batch index out of range"))?;
    let dims = |img: &RasterImage| (img.bands, img.height, img.width);
    let (ld, hd) = (dims(&first.lr), dims(&first.hr));
    let mut lr = Vec::new();
    let mut hr = Vec::new();
    for &i in idx {
        let s = samples.get(i).ok_or_else(|| MoseError::invalid("batch index out of range"))?;
        if dims(&s.lr) != ld || dims(&s.hr) != hd {
            return Err(MoseError::Data(format!("sample {i} differs in size from the batch")));
        }
        lr.extend(s.lr.pixels.iter().map(|&v| T::lit(v as f64)));
        hr.extend(s.hr.pixels.iter().map(|&v| T::lit(v as f64)));
    }
    let b = idx.len();
    Ok((
        Tensor::from_vec(&[b, ld.0, ld.1, ld.2], lr)?,
        Tensor::from_vec(&[b, hd.0, hd.1, hd.2], hr)?,
    ))
}

fn msr_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| MoseError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "msr"))
        .collect();
    out.sort();
    Ok(out)
}

/// Reads `dir/lr/*.msr` and the same names under `dir/hr`, sorted by name.
pub fn load_corpus(dir: &Path) -> Result<Vec<(String, PairSample)>> {
    let lr_files = msr_files(&dir.join("lr"))?;
    if lr_files.is_empty() {
        return Err(MoseError::Data(format!("no .msr files in {}", dir.join("lr").display())));
    }
    lr_files
        .par_iter()
        .map(|lp| {
            let name = lp.file_name().expect("listed file").to_string_lossy().into_owned();
            let hp = dir.join("hr").join(&name);
            let lr = RasterImage::read(lp)?;
            let hr = RasterImage::read(&hp)?;
            let pair = PairSample::infer(lr, hr).map_err(|e| match e {
                MoseError::InvalidArgument(m) => MoseError::InvalidArgument(format!("{name}: {m}")),
                other => MoseError::Data(format!("{name}: {other}")),
            })?;
            Ok((name, pair))
        })
        .collect()
}

pub fn write_corpus(dir: &Path, pairs: &[PairSample]) -> Result<()> {
    for sub in ["lr", "hr"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| MoseError::io(dir.join(sub), e))?;
    }
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("{i:05}.msr");
        p.lr.write(&dir.join("lr").join(&name))?;
        p.hr.write(&dir.join("hr").join(&name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_batch_is_kept() {
        let b = Batcher::new(10, 8, 1).unwrap();
        let e = b.epoch(0);
        assert_eq!(e.iter().map(Vec::len).collect::<Vec<_>>(), [8, 2]);
        let mut all: Vec<usize> = e.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b.epoch(0), Batcher::new(10, 8, 1).unwrap().epoch(0));
        assert_ne!(b.epoch(0), b.epoch(1));
        assert_eq!(b.batch_at(3), b.epoch(1)[1]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Batcher::new(0, 8, 1).is_err());
    }
}
