//! Mid-slice PNGs: grayscale Flair with the saliency map in the red channel.

use std::path::Path;

use anyhow::Result;
use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use posthoc_os::Tensor;

/// Small volumes are blown up by an integer factor to at least this edge.
const MIN_EDGE: u32 = 192;

fn min_max(data: &[f64]) -> (f64, f64) {
    data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

fn to_unit(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Writes `slice_{axis}.png` for the three axis-aligned planes through the
/// volume centre. The map (edge `V`) is upsampled to the image edge `D` by
/// nearest neighbour.
pub fn write_mid_slices(dir: &Path, flair: &Tensor, map: &Tensor) -> Result<()> {
    let d = flair.shape()[0];
    let v = map.shape()[0];
    let f = d / v;
    let (fr, mr) = (min_max(flair.data()), min_max(map.data()));
    let at = |t: &Tensor, e: usize, [z, y, x]: [usize; 3]| t.data()[(z * e + y) * e + x];
    for (axis, name) in ["axial", "coronal", "sagittal"].iter().enumerate() {
        let mut img = RgbImage::new(d as u32, d as u32);
        for (row, col, px) in img.enumerate_pixels_mut().map(|(c, r, p)| (r as usize, c as usize, p)) {
            let idx = match axis {
                0 => [d / 2, row, col],
                1 => [row, d / 2, col],
                _ => [row, col, d / 2],
            };
            let g = to_unit(at(flair, d, idx), fr);
            let s = to_unit(at(map, v, idx.map(|i| i / f)), mr);
            let gray = 0.6 * g;
            *px = Rgb([
                ((gray + 0.4 * s) * 255.0) as u8,
                (gray * 255.0) as u8,
                (gray * 255.0) as u8,
            ]);
        }
        let scale = (MIN_EDGE / d as u32).max(1);
        let img = image::imageops::resize(&img, d as u32 * scale, d as u32 * scale, FilterType::Nearest);
        img.save(dir.join(format!("slice_{name}.png")))?;
    }
    Ok(())
}
