//! im2col / col2im for NCHW convolutions.
//!
//! Column layout per image is `[C*KH*KW, OH*OW]`, with the reduction index
//! ordered `(c, ky, kx)` to match an `[O, C, KH, KW]` weight tensor.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// Length of one reduction row, `C*K*K`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(shape_err("conv2d", "kernel and stride must be positive"));
        }
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.kernel || wp < self.kernel {
            return Err(shape_err(
                "conv2d",
                format!("kernel {} larger than padded input {}x{}", self.kernel, hp, wp),
            ));
        }
        Ok(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }
}

/// Unfold one `[C,H,W]` image into `[C*K*K, OH*OW]` columns; out-of-bounds taps read `pad_value`.
pub fn im2col(img: &[f64], h: usize, w: usize, g: &ConvGeom, pad_value: f64, cols: &mut [f64]) {
    let k = g.kernel;
    let (oh, ow) = g.output_hw(h, w).expect("geometry validated by caller");
    let plane = oh * ow;
    debug_assert_eq!(cols.len(), g.patch_len() * plane);
    for c in 0..g.in_channels {
        let src = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(pad_value);
                        continue;
                    }
                    let line = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            pad_value
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] with zero padding: scatter-add columns back into `img`.
pub fn col2im(cols: &[f64], h: usize, w: usize, g: &ConvGeom, img: &mut [f64]) {
    let k = g.kernel;
    let (oh, ow) = g.output_hw(h, w).expect("geometry validated by caller");
    let plane = oh * ow;
    for c in 0..g.in_channels {
        let dst = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
