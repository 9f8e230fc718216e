//! Qualitative figures: checkerboard mosaics and absolute-difference maps.

use warpforge::Image;

use crate::error::CliResult;
use crate::pipeline::match_channels;

pub const TILE: usize = 16;

/// Alternating `TILE`-pixel squares of `a` (top-left) and `b`, as RGB.
pub fn checkerboard(a: &Image, b: &Image) -> CliResult<Image> {
    let (a, b) = to_rgb(a, b)?;
    let (h, w) = (a.height(), a.width());
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let src = if (y / TILE + x / TILE).is_multiple_of(2) {
                &a
            } else {
                &b
            };
            data.extend((0..3).map(|c| src.get(y, x, c)));
        }
    }
    Ok(Image::new(h, w, 3, data)?)
}

/// Per-pixel mean absolute channel difference, as a gray RGB image.
pub fn difference(a: &Image, b: &Image) -> CliResult<Image> {
    let (a, b) = to_rgb(a, b)?;
    let (h, w) = (a.height(), a.width());
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let d = (0..3)
                .map(|c| (a.get(y, x, c) - b.get(y, x, c)).abs())
                .sum::<f64>()
                / 3.0;
            data.extend([d; 3]);
        }
    }
    Ok(Image::new(h, w, 3, data)?)
}

fn to_rgb(a: &Image, b: &Image) -> CliResult<(Image, Image)> {
    let (a, b) = match_channels(a, b)?;
    if a.channels() == 3 {
        return Ok((a, b));
    }
    Ok((a.replicate_gray(3)?, b.replicate_gray(3)?))
}
