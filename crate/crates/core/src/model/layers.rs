//! Differentiable building blocks written against plain candle tensor ops.
//!
//! Convolutions are lowered to matrix products (shifted views for 3x3,
//! reshapes for patch and pointwise kernels) so both passes run on gemm.

use candle_core::{DType, Device, Tensor, D};

use super::kernels::{Im2Col3x3, LayerNormOp};
use crate::error::Result;

/// `x @ w^T + b` over the last dimension; `w` is `[out, in]`, `b` is `[out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let inner = *dims.last().expect("linear input has a last dim");
    let rows = x.elem_count() / inner;
    let y = x.reshape((rows, inner))?.matmul(&w.t()?)?.broadcast_add(b)?;
    let mut out = dims;
    *out.last_mut().unwrap() = w.dim(0)?;
    Ok(y.reshape(out)?)
}

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(gamma, beta, LayerNormOp)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Pointwise convolution. `x` is `[B, C, H, W]`, `w` is `[O, C]`, `b` is `[O]`.
pub fn conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bs, c, h, wd) = x.dims4()?;
    let y = w
        .broadcast_matmul(&x.reshape((bs, c, h * wd))?)?
        .broadcast_add(&b.reshape((1, (), 1))?)?;
    Ok(y.reshape((bs, (), h, wd))?)
}

/// 3x3 convolution, stride 1, zero padding 1. `w` is `[O, 9 * C]` with the
/// input channel as the slow index and the kernel tap as the fast one.
pub fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bs, _, h, wd) = x.dims4()?;
    let cols = x.contiguous()?.apply_op1(Im2Col3x3)?;
    let y = w.matmul(&cols)?.broadcast_add(&b.reshape(((), 1))?)?;
    Ok(y.reshape(((), bs, h, wd))?.transpose(0, 1)?.contiguous()?)
}

/// Non-overlapping `s x s` patch convolution (kernel = stride = `s`).
/// `w` is `[O, C * s * s]`.
pub fn patch_conv(x: &Tensor, w: &Tensor, b: &Tensor, s: usize) -> Result<Tensor> {
    let (bs, c, h, wd) = x.dims4()?;
    let (oh, ow) = (h / s, wd / s);
    let cols = x
        .reshape((bs, c, oh, s, ow, s))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((bs, c * s * s, oh * ow))?;
    let y = w.broadcast_matmul(&cols)?.broadcast_add(&b.reshape((1, (), 1))?)?;
    Ok(y.reshape((bs, (), oh, ow))?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (bs, c, h, w) = x.dims4()?;
    Ok(x.reshape((bs, c, h, 1, w, 1))?
        .broadcast_as((bs, c, h, 2, w, 2))?
        .reshape((bs, c, 2 * h, 2 * w))?)
}

/// 2x2 average pooling with stride 2.
pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    let (bs, c, h, w) = x.dims4()?;
    Ok((x.reshape((bs, c, h / 2, 2, w / 2, 2))?.sum(5)?.sum(3)? * 0.25)?)
}

/// 1-D linear interpolation weights from `src` to `dst` samples
/// (half-pixel centers, edge clamped). Row `o` holds the weights of output `o`.
pub fn interp_weights(src: usize, dst: usize) -> Vec<Vec<f64>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let t = pos - lo as f64;
            let mut row = vec![0.0; src];
            row[lo] += 1.0 - t;
            row[hi] += t;
            row
        })
        .collect()
}

/// `[src*src, dst*dst]` matrix resampling a flattened square map bilinearly.
pub fn bilinear_matrix(src: usize, dst: usize, device: &Device) -> Result<Tensor> {
    let a = interp_weights(src, dst);
    let mut m = vec![0f32; src * src * dst * dst];
    for oy in 0..dst {
        for ox in 0..dst {
            for iy in 0..src {
                let wy = a[oy][iy];
                if wy == 0.0 {
                    continue;
                }
                for ix in 0..src {
                    let wx = a[ox][ix];
                    if wx != 0.0 {
                        m[(iy * src + ix) * dst * dst + oy * dst + ox] = (wy * wx) as f32;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(m, (src * src, dst * dst), device)?)
}

/// Resamples `[..., src, src]` maps to `[..., dst, dst]` with a precomputed matrix.
pub fn resample_square(x: &Tensor, matrix: &Tensor, dst: usize) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let n = dims.len();
    let src2 = dims[n - 2] * dims[n - 1];
    let rows = x.elem_count() / src2;
    let y = x.reshape((rows, src2))?.matmul(matrix)?;
    let mut out = dims[..n - 2].to_vec();
    out.extend([dst, dst]);
    Ok(y.reshape(out)?)
}

pub fn scalar_f32(t: &Tensor) -> Result<f32> {
    Ok(t.to_dtype(DType::F32)?.to_scalar::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|i| ((i * 37 % 11) as f32 - 5.0) / 7.0).collect();
        Tensor::from_vec(v, shape, &dev()).unwrap()
    }

    #[test]
    fn conv3x3_matches_candle_conv2d() {
        let x = ramp(&[2, 3, 5, 4]);
        let w = ramp(&[6, 3, 3, 3]);
        let b = Tensor::zeros(6, DType::F32, &dev()).unwrap();
        let expected = x.conv2d(&w, 1, 1, 1, 1).unwrap();
        let got = conv3x3(&x, &w.reshape((6, 27)).unwrap(), &b).unwrap();
        let diff = (expected - got).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-5);
    }

    #[test]
    fn patch_conv_matches_strided_conv2d() {
        let x = ramp(&[2, 3, 8, 4]);
        let w = ramp(&[5, 3, 2, 2]);
        let b = Tensor::zeros(5, DType::F32, &dev()).unwrap();
        let expected = x.conv2d(&w, 0, 2, 1, 1).unwrap();
        let got = patch_conv(&x, &w.reshape((5, 12)).unwrap(), &b, 2).unwrap();
        let diff = (expected - got).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-5);
    }

    #[test]
    fn up_then_down_is_identity() {
        let x = ramp(&[1, 2, 3, 4]);
        let y = downsample2x(&upsample2x(&x).unwrap()).unwrap();
        let diff = (x - y).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        for (s, d) in [(7, 14), (14, 28), (7, 3), (1, 5)] {
            for row in interp_weights(s, d) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // Same size is the identity.
        let m = bilinear_matrix(4, 4, &dev()).unwrap();
        let eye = Tensor::eye(16, DType::F32, &dev()).unwrap();
        let diff = (m - eye).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = ramp(&[3, 8]);
        let g = Tensor::ones(8, DType::F32, &dev()).unwrap();
        let b = Tensor::zeros(8, DType::F32, &dev()).unwrap();
        let y = layer_norm(&x, &g, &b).unwrap().to_vec2::<f32>().unwrap();
        for row in y {
            let m: f32 = row.iter().sum::<f32>() / 8.0;
            assert!(m.abs() < 1e-5);
        }
    }
}
