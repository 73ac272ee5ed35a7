//! Cutting large rasters into square training tiles.

use super::Sample;
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    let mut out = Image::zeros(height, width);
    let sy = img.height as f32 / height as f32;
    let sx = img.width as f32 / width as f32;
    let src = |v: f32, n: usize| {
        let v = v.clamp(0.0, (n - 1) as f32);
        let i0 = v.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, v - i0 as f32)
    };
    for y in 0..height {
        let (y0, y1, fy) = src((y as f32 + 0.5) * sy - 0.5, img.height);
        for x in 0..width {
            let (x0, x1, fx) = src((x as f32 + 0.5) * sx - 0.5, img.width);
            let (a, b, c, d) = (
                img.pixel(y0, x0),
                img.pixel(y0, x1),
                img.pixel(y1, x0),
                img.pixel(y1, x1),
            );
            let mut rgb = [0.0; 3];
            for ch in 0..3 {
                let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                let bot = c[ch] * (1.0 - fx) + d[ch] * fx;
                rgb[ch] = top * (1.0 - fy) + bot * fy;
            }
            out.set_pixel(y, x, rgb);
        }
    }
    out
}

/// Nearest-neighbour resize; labels are never blended.
pub fn resize_nearest(mask: &Mask, height: usize, width: usize) -> Mask {
    let mut out = Mask::filled(height, width, 0);
    for y in 0..height {
        let sy = ((y * 2 + 1) * mask.height / (height * 2)).min(mask.height - 1);
        for x in 0..width {
            let sx = ((x * 2 + 1) * mask.width / (width * 2)).min(mask.width - 1);
            out.set(y, x, mask.get(sy, sx));
        }
    }
    out
}

/// Cuts `sample` into non-overlapping `tile`×`tile` crops in row-major order,
/// dropping partial tiles at the right and bottom edges, and resizes each
/// crop to `out_side`.
pub fn tile_and_resize(sample: &Sample, tile: usize, out_side: usize) -> Result<Vec<Sample>> {
    if tile == 0 || out_side == 0 {
        return Err(Error::Config(
            "tile and output sizes must be positive".into(),
        ));
    }
    if tile > sample.image.height.min(sample.image.width) {
        return Err(Error::Config(format!(
            "tile {tile} larger than raster {}x{}",
            sample.image.height, sample.image.width
        )));
    }
    if sample.image.height != sample.mask.height || sample.image.width != sample.mask.width {
        return Err(Error::Dataset(format!(
            "{}: image and mask sizes differ",
            sample.id
        )));
    }
    let (rows, cols) = (sample.image.height / tile, sample.image.width / tile);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y0, x0) = (r * tile, c * tile);
            let image = sample.image.crop(y0, x0, tile, tile);
            let mask = sample.mask.crop(y0, x0, tile, tile);
            out.push(Sample {
                id: format!("{}_r{r:03}_c{c:03}", sample.id),
                image: resize_bilinear(&image, out_side, out_side),
                mask: resize_nearest(&mask, out_side, out_side),
            });
        }
    }
    Ok(out)
}
