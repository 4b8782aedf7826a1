//! Bilinear Bayer demosaicing via normalized convolution.

use alloc::vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Color layout of the top-left 2×2 Bayer tile, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BayerPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl BayerPattern {
    /// Channel index (0 = R, 1 = G, 2 = B) sampled at `(y, x)`.
    pub fn channel_at(self, y: usize, x: usize) -> usize {
        let tile = match self {
            BayerPattern::Rggb => [0, 1, 1, 2],
            BayerPattern::Bggr => [2, 1, 1, 0],
            BayerPattern::Grbg => [1, 0, 2, 1],
            BayerPattern::Gbrg => [1, 2, 0, 1],
        };
        tile[(y % 2) * 2 + (x % 2)]
    }
}

const RB_KERNEL: [f32; 9] = [0.25, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 0.25];
const G_KERNEL: [f32; 9] = [0.0, 0.25, 0.0, 0.25, 1.0, 0.25, 0.0, 0.25, 0.0];

/// Interpolates the missing samples of an `H × W` or `H × W × 1` mosaic.
///
/// Each output channel is `conv(mask·v, K) / conv(mask, K)` with the standard
/// bilinear kernels, so borders renormalize over available neighbors.
pub fn demosaic_bilinear(bayer: &Tensor, pattern: BayerPattern) -> Result<Tensor> {
    let (h, w) = match *bayer.shape() {
        [h, w] | [h, w, 1] => (h, w),
        _ => {
            return Err(invalid(
                "demosaic_bilinear",
                "expected a single-channel mosaic",
            ))
        }
    };
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(invalid(
            "demosaic_bilinear",
            "extents must be even and non-zero",
        ));
    }
    let src = bayer.data();
    let mut out = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let own = pattern.channel_at(y, x);
            for c in 0..3 {
                let dst = &mut out[(y * w + x) * 3 + c];
                if c == own {
                    *dst = src[y * w + x];
                    continue;
                }
                let kernel = if c == 1 { &G_KERNEL } else { &RB_KERNEL };
                let (mut num, mut den) = (0.0f32, 0.0f32);
                for dy in 0..3 {
                    let yy = y as isize + dy as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let xx = x as isize + dx as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        if pattern.channel_at(yy, xx) == c {
                            let k = kernel[dy * 3 + dx];
                            num += k * src[yy * w + xx];
                            den += k;
                        }
                    }
                }
                // Every 3×3 window holds at least one sample of each channel.
                *dst = num / den;
            }
        }
    }
    Tensor::new(vec![h, w, 3], out)
}
