//! Custom CPU ops with hand-written backward passes for the few places
//! where composing generic tensor ops is slow: 3x3 patch extraction, layer
//! normalization and weighted row gathers.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Shape, Tensor};

type CResult<T> = candle_core::Result<T>;

fn contiguous<'a>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("custom op expects a contiguous input"),
    }
}

fn values(t: &Tensor) -> CResult<Vec<f32>> {
    t.contiguous()?.flatten_all()?.to_vec1::<f32>()
}

/// `[B, C, H, W]` to `[C * 9, B * H * W]`; row `c * 9 + dy * 3 + dx` holds the
/// input shifted by `(dy - 1, dx - 1)` with zero padding.
pub struct Im2Col3x3;

impl Im2Col3x3 {
    fn dims(l: &Layout) -> CResult<(usize, usize, usize, usize)> {
        l.shape().dims4()
    }
}

impl CustomOp1 for Im2Col3x3 {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = contiguous(s, l)?;
        let (b, c, h, w) = Self::dims(l)?;
        let cols = b * h * w;
        let mut out = vec![0f32; c * 9 * cols];
        for ci in 0..c {
            for dy in 0..3 {
                for dx in 0..3 {
                    let row = &mut out[(ci * 9 + dy * 3 + dx) * cols..][..cols];
                    for bi in 0..b {
                        let src = &x[(bi * c + ci) * h * w..][..h * w];
                        for y in 0..h {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let dst = &mut row[(bi * h + y) * w..][..w];
                            let srow = &src[sy as usize * w..][..w];
                            match dx {
                                0 => dst[1..].copy_from_slice(&srow[..w - 1]),
                                1 => dst.copy_from_slice(srow),
                                _ => dst[..w - 1].copy_from_slice(&srow[1..]),
                            }
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((c * 9, cols))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let g = values(grad)?;
        let cols = b * h * w;
        let mut dx_all = vec![0f32; b * c * h * w];
        for ci in 0..c {
            for dy in 0..3 {
                for dx in 0..3 {
                    let row = &g[(ci * 9 + dy * 3 + dx) * cols..][..cols];
                    for bi in 0..b {
                        let dst = &mut dx_all[(bi * c + ci) * h * w..][..h * w];
                        for y in 0..h {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let grow = &row[(bi * h + y) * w..][..w];
                            let drow = &mut dst[sy as usize * w..][..w];
                            match dx {
                                0 => drow[..w - 1].iter_mut().zip(&grow[1..]).for_each(|(d, g)| *d += g),
                                1 => drow.iter_mut().zip(grow).for_each(|(d, g)| *d += g),
                                _ => drow[1..].iter_mut().zip(&grow[..w - 1]).for_each(|(d, g)| *d += g),
                            }
                        }
                    }
                }
            }
        }
        Ok(Some(Tensor::from_vec(dx_all, (b, c, h, w), arg.device())?))
    }
}

pub const LN_EPS: f32 = 1e-5;

/// Layer normalization over the last dimension with affine parameters.
pub struct LayerNormOp;

fn ln_rows(x: &[f32], d: usize) -> impl Iterator<Item = (&[f32], f32, f32)> {
    x.chunks_exact(d).map(move |row| {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        (row, mean, 1.0 / (var + LN_EPS).sqrt())
    })
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let x = contiguous(s1, l1)?;
        let gamma = contiguous(s2, l2)?;
        let beta = contiguous(s3, l3)?;
        let d = gamma.len();
        let mut out = Vec::with_capacity(x.len());
        for (row, mean, rstd) in ln_rows(x, d) {
            for i in 0..d {
                out.push((row[i] - mean) * rstd * gamma[i] + beta[i]);
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let xv = values(x)?;
        let gv = values(gamma)?;
        let g = values(grad)?;
        let d = gv.len();
        let mut dx = vec![0f32; xv.len()];
        let mut dgamma = vec![0f32; d];
        let mut dbeta = vec![0f32; d];
        let mut xhat = vec![0f32; d];
        let mut dxhat = vec![0f32; d];
        for (r, (row, mean, rstd)) in ln_rows(&xv, d).enumerate() {
            let grow = &g[r * d..][..d];
            let (mut s1, mut s2) = (0f32, 0f32);
            for i in 0..d {
                xhat[i] = (row[i] - mean) * rstd;
                dxhat[i] = grow[i] * gv[i];
                dgamma[i] += grow[i] * xhat[i];
                dbeta[i] += grow[i];
                s1 += dxhat[i];
                s2 += dxhat[i] * xhat[i];
            }
            let (m1, m2) = (s1 / d as f32, s2 / d as f32);
            for i in 0..d {
                dx[r * d + i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
            }
        }
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), dev)?),
            Some(Tensor::from_vec(dgamma, d, dev)?),
            Some(Tensor::from_vec(dbeta, d, dev)?),
        ))
    }
}

/// Output row `r` is `sum_k weights[r * taps + k] * table[index[r * taps + k]]`.
pub struct WeightedGather {
    pub index: Vec<u32>,
    pub weights: Vec<f32>,
    pub taps: usize,
}

impl CustomOp1 for WeightedGather {
    fn name(&self) -> &'static str {
        "weighted-gather"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let table = contiguous(s, l)?;
        let (_, d) = l.shape().dims2()?;
        let rows = self.index.len() / self.taps;
        let mut out = vec![0f32; rows * d];
        for (r, dst) in out.chunks_exact_mut(d).enumerate() {
            for k in 0..self.taps {
                let j = r * self.taps + k;
                let wt = self.weights[j];
                if wt == 0.0 {
                    continue;
                }
                let src = &table[self.index[j] as usize * d..][..d];
                dst.iter_mut().zip(src).for_each(|(o, v)| *o += wt * v);
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((rows, d))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (t, d) = arg.dims2()?;
        let g = values(grad)?;
        let mut out = vec![0f32; t * d];
        for (r, grow) in g.chunks_exact(d).enumerate() {
            for k in 0..self.taps {
                let j = r * self.taps + k;
                let wt = self.weights[j];
                if wt == 0.0 {
                    continue;
                }
                let dst = &mut out[self.index[j] as usize * d..][..d];
                dst.iter_mut().zip(grow).for_each(|(o, v)| *o += wt * v);
            }
        }
        Ok(Some(Tensor::from_vec(out, (t, d), arg.device())?))
    }
}
