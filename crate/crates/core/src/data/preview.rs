//! PNG previews of 1 to 4 bands at 8 or 16 bits per sample.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use super::raster::RasterImage;
use crate::error::{MoseError, Result};
use crate::fsutil::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PngDepth {
    Eight,
    Sixteen,
}

fn color_type(bands: usize) -> Result<png::ColorType> {
    Ok(match bands {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        n => return Err(MoseError::invalid(format!("PNG preview needs 1-4 bands, got {n}"))),
    })
}

/// Normalized pixels quantized to the chosen depth, bands interleaved.
pub fn write_png(path: &Path, img: &RasterImage, depth: PngDepth) -> Result<()> {
    let ct = color_type(img.bands)?;
    let hw = img.height * img.width;
    let mut data = Vec::with_capacity(hw * img.bands * 2);
    for i in 0..hw {
        for b in 0..img.bands {
            let v = img.pixels[b * hw + i].clamp(0.0, 1.0) as f64;
            match depth {
                PngDepth::Eight => data.push((v * 255.0).round() as u8),
                PngDepth::Sixteen => data.extend_from_slice(&((v * 65535.0).round() as u16).to_be_bytes()),
            }
        }
    }
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, img.width as u32, img.height as u32);
        enc.set_color(ct);
        enc.set_depth(match depth {
            PngDepth::Eight => png::BitDepth::Eight,
            PngDepth::Sixteen => png::BitDepth::Sixteen,
        });
        let err = |e: png::EncodingError| MoseError::Data(format!("PNG encode: {e}"));
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(&data).map_err(err)?;
    }
    write_atomic(path, &bytes)
}

/// Grayscale, gray+alpha, RGB or RGBA at 8 or 16 bits; band stats span the
/// full sample range.
pub fn read_png(path: &Path) -> Result<RasterImage> {
    let file = File::open(path).map_err(|e| MoseError::io(path, e))?;
    let dec = png::Decoder::new(BufReader::new(file));
    let err = |e: png::DecodingError| MoseError::Data(format!("PNG decode: {e}"));
    let mut reader = dec.read_info().map_err(err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| MoseError::Data("PNG too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let bands = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(MoseError::Data(format!("unsupported PNG color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let (max, sixteen) = match info.bit_depth {
        png::BitDepth::Eight => (255.0, false),
        png::BitDepth::Sixteen => (65535.0, true),
        other => return Err(MoseError::Data(format!("unsupported PNG depth {other:?}"))),
    };
    let hw = h * w;
    let mut pixels = vec![0f32; bands * hw];
    let data = &buf[..info.buffer_size()];
    for i in 0..hw {
        for b in 0..bands {
            let k = i * bands + b;
            let v = if sixteen {
                u16::from_be_bytes([data[2 * k], data[2 * k + 1]]) as f64
            } else {
                data[k] as f64
            };
            pixels[b * hw + i] = (v / max) as f32;
        }
    }
    RasterImage::new(bands, h, w, pixels, vec![(0.0, max as f32); bands])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let pixels: Vec<f32> = (0..3 * 20).map(|i| i as f32 / 59.0).collect();
        let img = RasterImage::new(3, 4, 5, pixels.clone(), vec![(0.0, 1.0); 3]).unwrap();
        write_png(&path, &img, PngDepth::Sixteen).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!((back.bands, back.height, back.width), (3, 4, 5));
        for (a, b) in back.pixels.iter().zip(&pixels) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
        write_png(&path, &img, PngDepth::Eight).unwrap();
        assert!(read_png(&path).unwrap().pixels.iter().zip(&pixels).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
    }

    #[test]
    fn five_bands_are_rejected() {
        let img = RasterImage::new(5, 1, 1, vec![0.5; 5], vec![(0.0, 1.0); 5]).unwrap();
        assert!(write_png(Path::new("/nonexistent/x.png"), &img, PngDepth::Eight).is_err());
    }
}
