use std::path::Path;

use mose::data::{load_corpus, read_msr, write_png, PairSample, PngDepth, RasterImage};
use mose::metrics::{bicubic_resize, score, ImageScores};
use mose::model::{Model, TrainState};
use mose::numerics::Tensor;
use mose::{write_atomic, MoseError, Result};
use num_rational::Ratio;
use serde::Serialize;

use crate::{CliError, CliResult};

pub const SUMMARY_ID: &str = "mean";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub model: ImageScores,
    pub bicubic: ImageScores,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    image_id: &'a str,
    psnr_db: f64,
    ssim: f64,
    ncc: f64,
    bicubic_psnr_db: f64,
    bicubic_ssim: f64,
    bicubic_ncc: f64,
}

fn clamp_unit(t: Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Super-resolves one `S x h x w` image, clamped to `[0, 1]`.
pub fn super_resolve(model: &Model<f32>, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = lr.shape().to_vec();
    if s.len() != 3 {
        return Err(MoseError::Shape(format!("expected S x H x W, got {s:?}")));
    }
    let x = lr.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let sr = model.forward(&x)?.sr;
    let o = sr.shape().to_vec();
    Ok(clamp_unit(sr.reshape(&[o[1], o[2], o[3]])?))
}

fn mean_scores(rows: &[EvalRow], pick: impl Fn(&EvalRow) -> ImageScores) -> ImageScores {
    let n = rows.len() as f64;
    let sum = rows.iter().map(pick).fold((0.0, 0.0, 0.0), |a, s| (a.0 + s.psnr, a.1 + s.ssim, a.2 + s.ncc));
    ImageScores {
        psnr: sum.0 / n,
        ssim: sum.1 / n,
        ncc: sum.2 / n,
    }
}

/// Per-image model and bicubic scores followed by a `mean` summary row.
pub fn eval_corpus(model: &Model<f32>, corpus: &[(String, PairSample)]) -> CliResult<Vec<EvalRow>> {
    let cfg = model.cfg();
    let mut rows = Vec::with_capacity(corpus.len() + 1);
    for (id, pair) in corpus {
        if pair.scale != cfg.scale || pair.lr.bands != cfg.in_channels {
            return Err(CliError::usage(format!(
                "{id} is x{} with {} bands; the checkpoint expects x{} with {}",
                pair.scale, pair.lr.bands, cfg.scale, cfg.in_channels
            )));
        }
        let lr = pair.lr.to_tensor::<f32>();
        let hr = pair.hr.to_tensor::<f32>();
        let sr = super_resolve(model, &lr)?;
        let bic = clamp_unit(bicubic_resize(&lr, Ratio::from_integer(pair.scale as u32))?);
        rows.push(EvalRow {
            image_id: id.clone(),
            model: score(&sr, &hr)?,
            bicubic: score(&bic, &hr)?,
        });
    }
    let summary = EvalRow {
        image_id: SUMMARY_ID.into(),
        model: mean_scores(&rows, |r| r.model),
        bicubic: mean_scores(&rows, |r| r.bicubic),
    };
    rows.push(summary);
    Ok(rows)
}

fn write_report(path: &Path, rows: &[EvalRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(CsvRow {
            image_id: &r.image_id,
            psnr_db: r.model.psnr,
            ssim: r.model.ssim,
            ncc: r.model.ncc,
            bicubic_psnr_db: r.bicubic.psnr,
            bicubic_ssim: r.bicubic.ssim,
            bicubic_ncc: r.bicubic.ncc,
        })
        .map_err(|e| MoseError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| MoseError::Data(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn cmd_eval(ckpt: &Path, data: &Path, report: &Path) -> CliResult<Vec<EvalRow>> {
    let state = TrainState::<f32>::load(ckpt)?;
    let corpus = load_corpus(data)?;
    let rows = eval_corpus(&state.model, &corpus)?;
    write_report(report, &rows)?;
    Ok(rows)
}

/// Output keeps the input's band statistics.
pub fn super_resolve_file(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    png: Option<&Path>,
    depth: PngDepth,
) -> CliResult<RasterImage> {
    let state = TrainState::<f32>::load(ckpt)?;
    let img = read_msr(input)?;
    if img.bands != state.model.cfg().in_channels {
        return Err(CliError::usage(format!(
            "input has {} bands; the checkpoint expects {}",
            img.bands,
            state.model.cfg().in_channels
        )));
    }
    let sr = super_resolve(&state.model, &img.to_tensor())?;
    let result = RasterImage::from_tensor(&sr, img.band_stats.clone())?;
    if let Some(p) = png {
        write_png(p, &result, depth)?;
    }
    result.write(out)?;
    Ok(result)
}
