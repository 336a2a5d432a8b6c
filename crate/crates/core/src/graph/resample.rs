//! Spatial resampling: pixel shuffle, bilinear upsampling, pooling.

use super::{as_bchw, Graph, Op};
use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::{NodeId, TensorND};

/// Source coordinate and blend weight for one output index under the
/// half-pixel-center convention. Both taps are clamped into [0, n).
fn bilinear_taps(out_i: usize, scale: usize, n: usize) -> (usize, usize, f64) {
    let src = (out_i as f64 + 0.5) / scale as f64 - 0.5;
    let i0 = src.floor();
    let w1 = src - i0;
    let lo = (i0.max(0.0) as usize).min(n - 1);
    let hi = ((i0 + 1.0).max(0.0) as usize).min(n - 1);
    (lo, hi, w1)
}

impl<S: Scalar> Graph<S> {
    /// Rearrange [B, C*r^2, H, W] into [B, C, H*r, W*r]:
    /// out(b, c, r*h + dy, r*w + dx) = in(b, c*r^2 + dy*r + dx, h, w).
    pub fn pixel_shuffle(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::InvalidArgument("pixel_shuffle factor must be >= 1".into()));
        }
        let (b, c_in, h, w, batched) = as_bchw(self.nodes[input].value.shape())?;
        let r2 = factor * factor;
        if c_in % r2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "pixel_shuffle needs channels divisible by {r2}, got {c_in}"
            )));
        }
        let c_out = c_in / r2;
        let (oh, ow) = (h * factor, w * factor);
        let x = self.nodes[input].value.data();
        let mut out = vec![S::zero(); b * c_out * oh * ow];
        for bi in 0..b {
            for co in 0..c_out {
                for dy in 0..factor {
                    for dx in 0..factor {
                        let ci = co * r2 + dy * factor + dx;
                        let in_base = (bi * c_in + ci) * h * w;
                        let out_base = (bi * c_out + co) * oh * ow;
                        for hi in 0..h {
                            let row_in = in_base + hi * w;
                            let row_out = out_base + (hi * factor + dy) * ow + dx;
                            for wi in 0..w {
                                out[row_out + wi * factor] = x[row_in + wi];
                            }
                        }
                    }
                }
            }
        }
        let shape =
            if batched { vec![b, c_out, oh, ow] } else { vec![c_out, oh, ow] };
        let value = TensorND::new(shape, out)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::PixelShuffle { input, factor }, value, rg))
    }

    pub(super) fn pixel_shuffle_backward(
        &mut self,
        input: NodeId,
        factor: usize,
        id: NodeId,
        gout: &[S],
    ) {
        let (b, c_in, h, w, _) = as_bchw(self.nodes[input].value.shape()).unwrap();
        let (_, c_out, oh, ow, _) = as_bchw(self.nodes[id].value.shape()).unwrap();
        let r2 = factor * factor;
        let mut gx = vec![S::zero(); b * c_in * h * w];
        for bi in 0..b {
            for co in 0..c_out {
                for dy in 0..factor {
                    for dx in 0..factor {
                        let ci = co * r2 + dy * factor + dx;
                        let in_base = (bi * c_in + ci) * h * w;
                        let out_base = (bi * c_out + co) * oh * ow;
                        for hi in 0..h {
                            let row_in = in_base + hi * w;
                            let row_out = out_base + (hi * factor + dy) * ow + dx;
                            for wi in 0..w {
                                gx[row_in + wi] = gout[row_out + wi * factor];
                            }
                        }
                    }
                }
            }
        }
        self.accumulate(input, &gx);
    }

    /// Upsample H and W by an integer factor with bilinear interpolation.
    /// Sample positions follow the half-pixel-center rule
    /// src = (i + 0.5)/scale - 0.5 with edge clamping.
    pub fn bilinear_up(&mut self, input: NodeId, scale: usize) -> Result<NodeId> {
        if scale == 0 {
            return Err(Error::InvalidArgument("bilinear_up scale must be >= 1".into()));
        }
        let (b, c, h, w, batched) = as_bchw(self.nodes[input].value.shape())?;
        let (oh, ow) = (h * scale, w * scale);
        let x = self.nodes[input].value.data();
        let mut out = vec![S::zero(); b * c * oh * ow];
        let one = S::one();
        for oy in 0..oh {
            let (y0, y1, wy) = bilinear_taps(oy, scale, h);
            let wy = sc::<S>(wy);
            for ox in 0..ow {
                let (x0, x1, wx) = bilinear_taps(ox, scale, w);
                let wx = sc::<S>(wx);
                for bc in 0..b * c {
                    let in_base = bc * h * w;
                    let v = (one - wy) * (one - wx) * x[in_base + y0 * w + x0]
                        + (one - wy) * wx * x[in_base + y0 * w + x1]
                        + wy * (one - wx) * x[in_base + y1 * w + x0]
                        + wy * wx * x[in_base + y1 * w + x1];
                    out[bc * oh * ow + oy * ow + ox] = v;
                }
            }
        }
        let shape = if batched { vec![b, c, oh, ow] } else { vec![c, oh, ow] };
        let value = TensorND::new(shape, out)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::BilinearUp { input, scale }, value, rg))
    }

    pub(super) fn bilinear_backward(&mut self, input: NodeId, scale: usize, gout: &[S]) {
        let (b, c, h, w, _) = as_bchw(self.nodes[input].value.shape()).unwrap();
        let (oh, ow) = (h * scale, w * scale);
        let mut gx = vec![S::zero(); b * c * h * w];
        let one = S::one();
        for oy in 0..oh {
            let (y0, y1, wy) = bilinear_taps(oy, scale, h);
            let wy = sc::<S>(wy);
            for ox in 0..ow {
                let (x0, x1, wx) = bilinear_taps(ox, scale, w);
                let wx = sc::<S>(wx);
                for bc in 0..b * c {
                    let g = gout[bc * oh * ow + oy * ow + ox];
                    let in_base = bc * h * w;
                    gx[in_base + y0 * w + x0] += (one - wy) * (one - wx) * g;
                    gx[in_base + y0 * w + x1] += (one - wy) * wx * g;
                    gx[in_base + y1 * w + x0] += wy * (one - wx) * g;
                    gx[in_base + y1 * w + x1] += wy * wx * g;
                }
            }
        }
        self.accumulate(input, &gx);
    }

    /// 2x2 max pooling with stride 2. Requires even spatial extents.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (b, c, h, w, batched) = as_bchw(self.nodes[input].value.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "max_pool2 needs even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.nodes[input].value.data();
        let mut out = vec![S::zero(); b * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for bc in 0..b * c {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = in_base + (2 * oy) * w + 2 * ox;
                    let mut best = x[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = in_base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_idx;
                }
            }
        }
        let shape = if batched { vec![b, c, oh, ow] } else { vec![c, oh, ow] };
        let value = TensorND::new(shape, out)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::MaxPool2 { input, argmax }, value, rg))
    }

    pub(super) fn max_pool2_backward(&mut self, input: NodeId, argmax: &[usize], gout: &[S]) {
        let mut gx = vec![S::zero(); self.nodes[input].value.numel()];
        for (o, &src) in argmax.iter().enumerate() {
            gx[src] += gout[o];
        }
        self.accumulate(input, &gx);
    }

    /// Average pooling over non-overlapping k x k blocks.
    pub fn avg_pool(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        if k == 0 {
            return Err(Error::InvalidArgument("avg_pool k must be >= 1".into()));
        }
        let (b, c, h, w, batched) = as_bchw(self.nodes[input].value.shape())?;
        if h % k != 0 || w % k != 0 {
            return Err(Error::ShapeMismatch(format!(
                "avg_pool needs extents divisible by {k}, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let x = self.nodes[input].value.data();
        let inv = S::one() / sc::<S>((k * k) as f64);
        let mut out = vec![S::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for dy in 0..k {
                        let row = in_base + (oy * k + dy) * w + ox * k;
                        acc += x[row..row + k].iter().copied().sum();
                    }
                    out[out_base + oy * ow + ox] = acc * inv;
                }
            }
        }
        let shape = if batched { vec![b, c, oh, ow] } else { vec![c, oh, ow] };
        let value = TensorND::new(shape, out)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::AvgPool { input, k }, value, rg))
    }

    pub(super) fn avg_pool_backward(&mut self, input: NodeId, k: usize, gout: &[S]) {
        let (b, c, h, w, _) = as_bchw(self.nodes[input].value.shape()).unwrap();
        let (oh, ow) = (h / k, w / k);
        let inv = S::one() / sc::<S>((k * k) as f64);
        let mut gx = vec![S::zero(); b * c * h * w];
        for bc in 0..b * c {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout[out_base + oy * ow + ox] * inv;
                    for dy in 0..k {
                        let row = in_base + (oy * k + dy) * w + ox * k;
                        for v in &mut gx[row..row + k] {
                            *v += g;
                        }
                    }
                }
            }
        }
        self.accumulate(input, &gx);
    }
}
