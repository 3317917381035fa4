//! Slow direct-form implementations used to validate the fast kernels.
//! Six nested loops for convolution, window scan for pooling. Kept outside
//! `#[cfg(test)]` because integration tests compare against them too.

use crate::error::Result;
use crate::layers::ConvSpec;
use crate::tensor::{Elem, Shape, Tensor};

/// Direct convolution: for every output element, walk the kernel window and
/// sum products, treating out-of-range input positions as zero.
pub fn conv2d_direct<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let [n, h, w, cin] = *input.dims() else {
        return Err(crate::Error::shape(format!("conv2d_direct: rank-4 input required, got {}", input.shape())));
    };
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let f = spec.filters;
    let (oh, ow) = spec.out_hw(h, w)?;

    let mut out = Tensor::zeros(Shape::new(&[n, oh, ow, f])?);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..f {
                    let mut acc = bias.data()[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = input.at(&[b, iy as usize, ix as usize, ci]);
                                let wv = weight.at(&[ky, kx, ci, co]);
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((b * oh + oy) * ow + ox) * f + co] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Window-scan max pooling.
pub fn maxpool2d_direct<T: Elem>(
    input: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let [n, h, w, c] = *input.dims() else {
        return Err(crate::Error::shape(format!("maxpool2d_direct: rank-4 input required, got {}", input.shape())));
    };
    let (wh, ww) = window;
    let (sh, sw) = stride;
    if wh > h || ww > w {
        return Err(crate::Error::shape(format!("maxpool2d_direct: window {wh}x{ww} exceeds input {h}x{w}")));
    }
    let oh = (h - wh) / sh + 1;
    let ow = (w - ww) / sw + 1;
    let mut out = Tensor::zeros(Shape::new(&[n, oh, ow, c])?);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = input.at(&[b, oy * sh, ox * sw, ch]);
                    for ky in 0..wh {
                        for kx in 0..ww {
                            let v = input.at(&[b, oy * sh + ky, ox * sw + kx, ch]);
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.data_mut()[((b * oh + oy) * ow + ox) * c + ch] = best;
                }
            }
        }
    }
    Ok(out)
}
