use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::gemm;

/// Gradients of a 3×3 convolution with respect to its three inputs.
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

fn check_conv(img: &Tensor, kernels: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (c_in, h, w) = img.dims3()?;
    match kernels.shape()[..] {
        [c_out, kc, 3, 3] if kc == c_in => Ok((c_in, h, w, c_out)),
        [_, kc, 3, 3] => Err(Error::dim(format!(
            "conv2d: image has {c_in} channels, kernels expect {kc}"
        ))),
        _ => Err(Error::dim(format!(
            "conv2d: kernels must be c_out×c_in×3×3, got {:?}",
            kernels.shape()
        ))),
    }
}

/// Unrolls 3×3 zero-padded neighborhoods: rows are `(channel, ky, kx)`,
/// columns are output pixels in raster order.
fn im2col(img: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let (x0, x1) = (kx.saturating_sub(1), (w + kx).saturating_sub(1).min(w));
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let src = &plane[(sy - 1) * w..sy * w];
                    // output x reads source x + kx - 1
                    let out_lo = 1usize.saturating_sub(kx);
                    let n = x1 - x0;
                    row[y * w + out_lo..y * w + out_lo + n].copy_from_slice(&src[x0..x1]);
                }
            }
        }
    }
    Tensor::new(&[c * 9, hw], cols).expect("im2col shape")
}

fn col2im(cols: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let cd = cols.data();
    let mut img = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cd[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let (x0, x1) = (kx.saturating_sub(1), (w + kx).saturating_sub(1).min(w));
                let out_lo = 1usize.saturating_sub(kx);
                let n = x1 - x0;
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let dst = &mut plane[(sy - 1) * w + x0..(sy - 1) * w + x1];
                    let src = &row[y * w + out_lo..y * w + out_lo + n];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    Tensor::new(&[c, h, w], img).expect("col2im shape")
}

/// 3×3 cross-correlation, stride 1, zero padding 1, with an optional per-channel bias.
pub fn conv2d(img: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (c_in, h, w, c_out) = check_conv(img, kernels)?;
    let cols = im2col(img.data(), c_in, h, w);
    let k2 = kernels.clone().reshape(&[c_out, c_in * 9])?;
    let mut out = gemm(&k2, false, &cols, false)?;
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::dim(format!("conv2d bias has {} entries for {c_out} channels", b.len())));
        }
        let hw = h * w;
        for (co, &bv) in b.data().iter().enumerate() {
            for v in &mut out.data_mut()[co * hw..(co + 1) * hw] {
                *v += bv;
            }
        }
    }
    out.reshape(&[c_out, h, w])
}

pub fn conv2d_backward(img: &Tensor, kernels: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let (c_in, h, w, c_out) = check_conv(img, kernels)?;
    let hw = h * w;
    let g = grad_out.clone().reshape(&[c_out, hw])?;
    let cols = im2col(img.data(), c_in, h, w);
    let gk = gemm(&g, false, &cols, true)?.reshape(kernels.shape())?;
    drop(cols);
    let k2 = kernels.clone().reshape(&[c_out, c_in * 9])?;
    let gcols = gemm(&k2, true, &g, false)?;
    let gi = col2im(&gcols, c_in, h, w);
    let gb: Vec<f64> = (0..c_out)
        .map(|co| g.data()[co * hw..(co + 1) * hw].iter().sum())
        .collect();
    Ok(ConvGrads {
        input: gi,
        kernels: gk,
        bias: Tensor::new(&[c_out], gb)?,
    })
}

/// Grows each channel by one replicated pixel on every side.
pub fn pad_replicate(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ph * pw..(ch + 1) * ph * pw];
        for y in 0..ph {
            let sy = clamp_idx(y, 0, h);
            for xx in 0..pw {
                dst[y * pw + xx] = src[sy * w + clamp_idx(xx, 0, w)];
            }
        }
    }
    Tensor::new(&[c, ph, pw], out)
}

pub fn pad_replicate_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let mut g = Tensor::zeros(input_shape);
    let (c, h, w) = g.dims3()?;
    let (ph, pw) = (h + 2, w + 2);
    if grad_out.shape() != [c, ph, pw] {
        return Err(Error::dim(format!("padding gradient has shape {:?}", grad_out.shape())));
    }
    let gd = g.data_mut();
    for ch in 0..c {
        for y in 0..ph {
            let sy = clamp_idx(y, 0, h);
            for xx in 0..pw {
                gd[ch * h * w + sy * w + clamp_idx(xx, 0, w)] += grad_out.data()[(ch * ph + y) * pw + xx];
            }
        }
    }
    Ok(g)
}

/// Drops the outermost ring of pixels of each channel.
pub fn crop_border(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h < 3 || w < 3 {
        return Err(Error::dim(format!("cannot crop a {h}×{w} map")));
    }
    let mut out = Vec::with_capacity(c * (h - 2) * (w - 2));
    for ch in 0..c {
        for y in 1..h - 1 {
            out.extend_from_slice(&x.data()[(ch * h + y) * w + 1..(ch * h + y) * w + w - 1]);
        }
    }
    Tensor::new(&[c, h - 2, w - 2], out)
}

pub fn crop_border_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let mut g = Tensor::zeros(input_shape);
    let (c, h, w) = g.dims3()?;
    let (ih, iw) = (h - 2, w - 2);
    for ch in 0..c {
        for y in 0..ih {
            g.data_mut()[(ch * h + y + 1) * w + 1..][..iw]
                .copy_from_slice(&grad_out.data()[(ch * ih + y) * iw..][..iw]);
        }
    }
    Ok(g)
}

/// 2×2 average pooling over each channel; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::dim(format!("cannot pool a {h}×{w} map")));
    }
    let d = x.data();
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = ci * h * w;
                let s = d[base + 2 * y * w + 2 * xx]
                    + d[base + 2 * y * w + 2 * xx + 1]
                    + d[base + (2 * y + 1) * w + 2 * xx]
                    + d[base + (2 * y + 1) * w + 2 * xx + 1];
                out[ci * ho * wo + y * wo + xx] = 0.25 * s;
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

pub fn avg_pool2_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (c, ho, wo) = grad_out.dims3()?;
    let (h, w) = (input_shape[1], input_shape[2]);
    let mut gi = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let g = 0.25 * grad_out.data()[ci * ho * wo + y * wo + xx];
                let base = ci * h * w;
                gi[base + 2 * y * w + 2 * xx] += g;
                gi[base + 2 * y * w + 2 * xx + 1] += g;
                gi[base + (2 * y + 1) * w + 2 * xx] += g;
                gi[base + (2 * y + 1) * w + 2 * xx + 1] += g;
            }
        }
    }
    Tensor::new(input_shape, gi)
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn check_sobel(img: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = img.dims2()?;
    if h < 3 || w < 3 {
        return Err(Error::dim(format!("sobel needs at least 3×3, got {h}×{w}")));
    }
    Ok((h, w))
}

#[inline]
fn clamp_idx(i: usize, k: usize, n: usize) -> usize {
    (i + k).saturating_sub(1).min(n - 1)
}

/// The raw horizontal and vertical Sobel responses.
pub fn sobel_responses(img: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w) = check_sobel(img)?;
    let d = img.data();
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let p = |y: usize, ky: usize, x: usize, kx: usize| d[clamp_idx(y, ky, h) * w + clamp_idx(x, kx, w)];
    for y in 0..h {
        for x in 0..w {
            // each response is (positive side) - (negative side), summed in the
            // same order so flat regions cancel exactly
            let right = p(y, 0, x, 2) + 2.0 * p(y, 1, x, 2) + p(y, 2, x, 2);
            let left = p(y, 0, x, 0) + 2.0 * p(y, 1, x, 0) + p(y, 2, x, 0);
            let below = p(y, 2, x, 0) + 2.0 * p(y, 2, x, 1) + p(y, 2, x, 2);
            let above = p(y, 0, x, 0) + 2.0 * p(y, 0, x, 1) + p(y, 0, x, 2);
            gx[y * w + x] = right - left;
            gy[y * w + x] = below - above;
        }
    }
    Ok((gx, gy))
}

/// Gradient magnitude `|G_x| + |G_y|` with the 3×3 Sobel pair and
/// edge-replicating borders.
pub fn sobel_mag(img: &Tensor) -> Result<Tensor> {
    let (gx, gy) = sobel_responses(img)?;
    let mag = gx.iter().zip(&gy).map(|(a, b)| a.abs() + b.abs()).collect();
    Tensor::new(img.shape(), mag)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sobel_mag_backward(img: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (h, w) = check_sobel(img)?;
    let (gx, gy) = sobel_responses(img)?;
    let g = grad_out.data();
    let mut gi = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let ax = g[i] * sign(gx[i]);
            let ay = g[i] * sign(gy[i]);
            if ax == 0.0 && ay == 0.0 {
                continue;
            }
            for ky in 0..3 {
                let row = clamp_idx(y, ky, h) * w;
                for kx in 0..3 {
                    gi[row + clamp_idx(x, kx, w)] += SOBEL_X[ky][kx] * ax + SOBEL_Y[ky][kx] * ay;
                }
            }
        }
    }
    Tensor::new(img.shape(), gi)
}

/// Normalized `size×size` Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Tensor {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut data = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            data.push(a * b / (s * s));
        }
    }
    Tensor::new(&[size, size], data).expect("window shape")
}

/// 'Valid' 2-D correlation of an image with a small window.
pub fn valid_filter(img: &Tensor, window: &Tensor) -> Result<Tensor> {
    let (h, w) = img.dims2()?;
    let (kh, kw) = window.dims2()?;
    if h < kh || w < kw {
        return Err(Error::dim(format!("{h}×{w} image smaller than {kh}×{kw} window")));
    }
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let d = img.data();
    let k = window.data();
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut s = 0.0;
            for ky in 0..kh {
                let row = &d[(y + ky) * w + x..(y + ky) * w + x + kw];
                for (a, b) in row.iter().zip(&k[ky * kw..(ky + 1) * kw]) {
                    s += a * b;
                }
            }
            out[y * wo + x] = s;
        }
    }
    Tensor::new(&[ho, wo], out)
}

pub fn valid_filter_backward(input_shape: &[usize], window: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (ho, wo) = grad_out.dims2()?;
    let (kh, kw) = window.dims2()?;
    let w = input_shape[1];
    let k = window.data();
    let g = grad_out.data();
    let mut gi = vec![0.0; input_shape[0] * w];
    for y in 0..ho {
        for x in 0..wo {
            let gv = g[y * wo + x];
            for ky in 0..kh {
                let row = &mut gi[(y + ky) * w + x..(y + ky) * w + x + kw];
                for (a, b) in row.iter_mut().zip(&k[ky * kw..(ky + 1) * kw]) {
                    *a += gv * b;
                }
            }
        }
    }
    Tensor::new(input_shape, gi)
}
