//! Region pooling from the feature pyramid and mask resampling between box
//! frames and the image canvas.

use candle_core::{Device, Tensor};

use super::kernels::WeightedGather;
use crate::error::Result;
use crate::geometry::{BinaryMask, BoxXyxy};

/// All pyramid levels flattened into one `[rows, D]` lookup table so a whole
/// batch of regions is pooled with a single gather.
pub struct FeatureTable {
    table: Tensor,
    levels: Vec<LevelInfo>,
}

#[derive(Debug, Clone, Copy)]
struct LevelInfo {
    offset: usize,
    height: usize,
    width: usize,
    stride: f64,
}

impl FeatureTable {
    /// `levels[l]` is `[B, D, H_l, W_l]` with stride `strides[l]`.
    pub fn new(levels: &[Tensor], strides: &[usize]) -> Result<Self> {
        let mut rows = Vec::with_capacity(levels.len());
        let mut info = Vec::with_capacity(levels.len());
        let mut offset = 0;
        for (x, &stride) in levels.iter().zip(strides) {
            let (b, d, h, w) = x.dims4()?;
            rows.push(x.permute((0, 2, 3, 1))?.reshape((b * h * w, d))?);
            info.push(LevelInfo {
                offset,
                height: h,
                width: w,
                stride: stride as f64,
            });
            offset += b * h * w;
        }
        Ok(FeatureTable {
            table: Tensor::cat(&rows, 0)?,
            levels: info,
        })
    }

    /// Level whose cells make a box of side `s` pixels roughly `pool` cells wide.
    fn level_for(&self, b: &BoxXyxy, pool: usize) -> usize {
        let side = (b.width() * b.height()).sqrt().max(1.0);
        let base = self.levels[0].stride * pool as f64;
        let l = (side / base).log2().round();
        l.clamp(0.0, (self.levels.len() - 1) as f64) as usize
    }

    /// Bilinear region pooling with one sample at each bin center.
    /// `rois` are `(batch index, pixel box)`; the result is `[R, pool * pool, D]`.
    pub fn pool(&self, rois: &[(usize, BoxXyxy)], pool: usize) -> Result<Tensor> {
        let per = pool * pool * 4;
        let mut idx = Vec::with_capacity(rois.len() * per);
        let mut wts = Vec::with_capacity(rois.len() * per);
        for (bi, b) in rois {
            let lv = self.levels[self.level_for(b, pool)];
            let base = lv.offset + bi * lv.height * lv.width;
            let axis = |lo: f64, span: f64, k: usize, n: usize| {
                let p = (lo + (k as f64 + 0.5) * span / pool as f64) / lv.stride - 0.5;
                let p = p.clamp(0.0, (n - 1) as f64);
                let i0 = p.floor() as usize;
                (i0, (i0 + 1).min(n - 1), p - i0 as f64)
            };
            for i in 0..pool {
                let (y0, y1, ty) = axis(b.y1, b.height(), i, lv.height);
                for j in 0..pool {
                    let (x0, x1, tx) = axis(b.x1, b.width(), j, lv.width);
                    for (y, x, w) in [
                        (y0, x0, (1.0 - ty) * (1.0 - tx)),
                        (y0, x1, (1.0 - ty) * tx),
                        (y1, x0, ty * (1.0 - tx)),
                        (y1, x1, ty * tx),
                    ] {
                        idx.push((base + y * lv.width + x) as u32);
                        wts.push(w as f32);
                    }
                }
            }
        }
        let d = self.table.dim(1)?;
        let op = WeightedGather { index: idx, weights: wts, taps: 4 };
        let g = self.table.contiguous()?.apply_op1(op)?;
        Ok(g.reshape((rois.len(), pool * pool, d))?)
    }

    pub fn device(&self) -> &Device {
        self.table.device()
    }
}

/// Samples `gt` at the centers of an `r x r` grid laid over `bbox`.
/// Cells falling outside the canvas are background.
pub fn crop_mask_target(gt: &BinaryMask, bbox: &BoxXyxy, r: usize) -> Vec<bool> {
    let (h, w) = gt.shape();
    let mut out = Vec::with_capacity(r * r);
    for i in 0..r {
        let y = bbox.y1 + (i as f64 + 0.5) * bbox.height() / r as f64;
        for j in 0..r {
            let x = bbox.x1 + (j as f64 + 0.5) * bbox.width() / r as f64;
            let inside = y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w;
            out.push(inside && gt.get(y as usize, x as usize));
        }
    }
    out
}

/// Pastes an `r x r` soft mask predicted inside `bbox` onto an `height x width`
/// canvas, binarized at `threshold`. Pixels outside the box stay empty.
pub fn paste_mask(
    prob: &[f32],
    r: usize,
    bbox: &BoxXyxy,
    height: usize,
    width: usize,
    threshold: f64,
) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    let (bw, bh) = (bbox.width(), bbox.height());
    if bw <= 0.0 || bh <= 0.0 {
        return mask;
    }
    let span = |lo: f64, hi: f64, n: usize| {
        let s = (lo - 0.5).ceil().max(0.0) as usize;
        let e = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
        s..e.max(s)
    };
    let coord = |p: f64, lo: f64, ext: f64| {
        let u = ((p + 0.5 - lo) / ext * r as f64 - 0.5).clamp(0.0, (r - 1) as f64);
        let i0 = u.floor() as usize;
        (i0, (i0 + 1).min(r - 1), u - i0 as f64)
    };
    for y in span(bbox.y1, bbox.y2, height) {
        let (y0, y1, ty) = coord(y as f64, bbox.y1, bh);
        for x in span(bbox.x1, bbox.x2, width) {
            let (x0, x1, tx) = coord(x as f64, bbox.x1, bw);
            let v = |a: usize, b: usize| prob[a * r + b] as f64;
            let p = (1.0 - ty) * ((1.0 - tx) * v(y0, x0) + tx * v(y0, x1))
                + ty * ((1.0 - tx) * v(y1, x0) + tx * v(y1, x1));
            if p >= threshold {
                mask.set(y, x, true);
            }
        }
    }
    mask
}
