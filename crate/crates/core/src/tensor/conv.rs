use crate::error::{Error, Result};

use super::Real;

/// Stride, zero padding and dilation of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvOpts {
    pub fn padded(padding: usize) -> Self {
        Self {
            padding,
            ..Self::default()
        }
    }

    /// 3x3-style "same" convolution with the given dilation.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize, axis: &'static str) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::shape("conv2d", "stride and dilation must be positive"));
        }
        let reach = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if kernel == 0 || padded < reach {
            return Err(Error::shape(
                "conv2d",
                format!("{axis}: kernel reach {reach} exceeds padded extent {padded}"),
            ));
        }
        Ok((padded - reach) / self.stride + 1)
    }
}

/// Geometry of one conv2d call, fixed at forward time.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub opts: ConvOpts,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfold one `[Cin,H,W]` image into a `[Cin*Kh*Kw, Ho*Wo]` matrix.
    pub fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let ConvOpts {
            stride,
            padding,
            dilation,
        } = self.opts;
        let n = self.col_cols();
        for c in 0..self.cin {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let out = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        let dst = &mut out[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add columns back into an image.
    pub fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let ConvOpts {
            stride,
            padding,
            dilation,
        } = self.opts;
        let n = self.col_cols();
        for c in 0..self.cin {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
