//! PNG export of image batches as a tiled grid.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndiff::Tensor;

/// Tiles the first `rows * cols` images of an `n x C x H x W` batch
/// (C = 1 or 3) row-major into one 8-bit buffer of `rows*H x cols*W` pixels.
pub fn tile(images: &Tensor, rows: usize, cols: usize) -> Result<(usize, usize, usize, Vec<u8>)> {
    let s = images.shape();
    let [n, c, h, w] = *s else {
        return Err(Error::invalid(format!("image grid needs n x C x H x W, got {s:?}")));
    };
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("image grid supports 1 or 3 channels, got {c}")));
    }
    if rows == 0 || cols == 0 || n < rows * cols {
        return Err(Error::invalid(format!("{n} images cannot fill a {rows}x{cols} grid")));
    }
    let (width, height) = (cols * w, rows * h);
    let mut buf = vec![0u8; width * height * c];
    for r in 0..rows {
        for q in 0..cols {
            let img = images.row(r * cols + q);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let v = img[(ch * h + y) * w + x];
                        let px = ((r * h + y) * width + q * w + x) * c + ch;
                        buf[px] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    Ok((width, height, c, buf))
}

/// Writes the grid and returns its `(width, height)`.
pub fn write_png_grid(path: &Path, images: &Tensor, rows: usize, cols: usize) -> Result<(u32, u32)> {
    let (width, height, channels, buf) = tile(images, rows, cols)?;
    let (w, h) = (width as u32, height as u32);
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w, h);
    enc.set_color(if channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&buf)?;
    writer.finish()?;
    Ok((w, h))
}

/// Width and height from a PNG header.
pub fn png_dimensions(path: &Path) -> Result<(u32, u32)> {
    let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    let reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("unreadable PNG {}: {e}", path.display())))?;
    let info = reader.info();
    Ok((info.width, info.height))
}
