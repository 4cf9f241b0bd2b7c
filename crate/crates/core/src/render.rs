//! Attention footprints and warped-cube maps written as PNG.

use std::path::{Path, PathBuf};

use crate::data::save_png;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `F_Yᵀ·(J/N)·F_X`: the `[H, W]` footprint of the patch, with total mass
/// `N` for row-stochastic banks.
pub fn footprint(fy: &Tensor, fx: &Tensor) -> Result<Tensor> {
    let (&[n, h], &[nx, w]) = (fy.shape(), fx.shape()) else {
        return shape_err(format!("footprint wants two banks, got {:?} / {:?}", fy.shape(), fx.shape()));
    };
    if n != nx {
        return shape_err("footprint banks disagree on N");
    }
    // Column sums of the banks factor the product.
    let col = |f: &Tensor, len: usize| -> Vec<f64> { (0..len).map(|m| (0..n).map(|i| f.at(&[i, m])).sum()).collect() };
    let (sy, sx) = (col(fy, h), col(fx, w));
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            out.set(&[y, x], sy[y] * sx[x] / n as f64);
        }
    }
    Ok(out)
}

/// Nearest-neighbour upsampling of a `[h, w]` map to `[H, W]`.
fn upsample(map: &Tensor, h: usize, w: usize) -> Tensor {
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            out.set(&[y, x], map.at(&[y * mh / h, x * mw / w]));
        }
    }
    out
}

fn normalize(map: &Tensor) -> Tensor {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    map.map(|v| if span > 0.0 { (v - lo) / span } else { 0.5 })
}

/// Heat overlay: the footprint scaled to its maximum and blended in yellow
/// over `image`.
pub fn overlay(image: &Tensor, footprint: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let peak = footprint.data().iter().copied().fold(0.0, f64::max);
    let heat = upsample(&footprint.map(|v| if peak > 0.0 { v / peak } else { 0.0 }), h, w);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let a = 0.7 * heat.at(&[y, x]);
            for (c, tint) in [1.0, 1.0, 0.0].into_iter().enumerate() {
                let v = image.at(&[y, x, c]);
                out.set(&[y, x, c], (1.0 - a) * v + a * tint);
            }
        }
    }
    out
}

/// Per-step visual inputs.
#[derive(Clone, Debug)]
pub struct StepView {
    pub fx: Tensor,
    pub fy: Tensor,
    pub warped: Tensor,
}

/// Upsampled mean channel of a `[H, W, C]` cube as a gray RGB image.
pub fn warp_map(cube: &Tensor, h: usize, w: usize) -> Tensor {
    let s = cube.shape();
    let (ch, cw, c) = (s[0], s[1], s[2]);
    let mut mean = Tensor::zeros(&[ch, cw]);
    for y in 0..ch {
        for x in 0..cw {
            mean.set(&[y, x], (0..c).map(|k| cube.at(&[y, x, k])).sum::<f64>() / c as f64);
        }
    }
    let g = upsample(&normalize(&mean), h, w);
    let mut out = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                out.set(&[y, x, k], g.at(&[y, x]));
            }
        }
    }
    out
}

/// Writes `step<t>_attention.png` and `step<t>_warp.png` for each step
/// (`scale` times the image resolution) and returns the paths.
pub fn render_steps(image: &Tensor, steps: &[StepView], out_dir: &Path, scale: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let (h, w) = (image.shape()[0] * scale, image.shape()[1] * scale);
    let base = {
        let mut up = Tensor::zeros(&[h, w, 3]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    up.set(&[y, x, c], image.at(&[y / scale, x / scale, c]));
                }
            }
        }
        up
    };
    let mut paths = Vec::new();
    for (t, s) in steps.iter().enumerate() {
        let fp = footprint(&s.fy, &s.fx)?;
        let a = out_dir.join(format!("step{}_attention.png", t + 1));
        save_png(&overlay(&base, &fp), &a)?;
        let m = out_dir.join(format!("step{}_warp.png", t + 1));
        save_png(&warp_map(&s.warped, h, w), &m)?;
        paths.extend([a, m]);
    }
    Ok(paths)
}
