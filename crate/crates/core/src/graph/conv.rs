//! 2-D convolution with stride, zero padding, and dilation.

use super::{as_bchw, Graph, Op};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{NodeId, TensorND};

/// Inclusive output range [lo, hi] for which `o*stride + off` lands in [0, extent).
/// Returns None when empty.
fn valid_range(out_extent: usize, stride: usize, off: isize, extent: usize) -> Option<(usize, usize)> {
    // o*stride + off >= 0  =>  o >= ceil(-off / stride)
    let lo = if off >= 0 {
        0usize
    } else {
        let need = (-off) as usize;
        need.div_ceil(stride)
    };
    // o*stride + off <= extent-1  =>  o <= floor((extent-1-off) / stride)
    let top = extent as isize - 1 - off;
    if top < 0 {
        return None;
    }
    let hi = (top as usize / stride).min(out_extent.saturating_sub(1));
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

struct ConvDims {
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    batched: bool,
}

impl<S: Scalar> Graph<S> {
    fn conv_dims(
        &self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<ConvDims> {
        let (b, c_in, h, w, batched) = as_bchw(self.nodes[input].value.shape())?;
        let wshape = self.nodes[weight].value.shape();
        if wshape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d weight must be rank 4 [C_out,C_in,kh,kw], got {wshape:?}"
            )));
        }
        let (c_out, wc_in, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if wc_in != c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if let Some(bid) = bias {
            let bshape = self.nodes[bid].value.shape();
            if bshape != [c_out] {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d bias shape {bshape:?} does not match {c_out} output channels"
                )));
            }
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if dilation == 0 {
            return Err(Error::InvalidArgument("conv2d dilation must be >= 1".into()));
        }
        let eff_kh = dilation * (kh - 1) + 1;
        let eff_kw = dilation * (kw - 1) + 1;
        if eff_kh > h + 2 * padding || eff_kw > w + 2 * padding {
            return Err(Error::InvalidArgument(format!(
                "conv2d effective kernel {eff_kh}x{eff_kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - eff_kh) / stride + 1;
        let ow = (w + 2 * padding - eff_kw) / stride + 1;
        Ok(ConvDims { b, c_in, h, w, c_out, kh, kw, oh, ow, batched })
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<NodeId> {
        let d = self.conv_dims(input, weight, bias, stride, padding, dilation)?;
        let x = self.nodes[input].value.data();
        let wt = self.nodes[weight].value.data();
        let mut out = vec![S::zero(); d.b * d.c_out * d.oh * d.ow];

        if let Some(bid) = bias {
            let bv = self.nodes[bid].value.data();
            for bi in 0..d.b {
                for oc in 0..d.c_out {
                    let base = (bi * d.c_out + oc) * d.oh * d.ow;
                    out[base..base + d.oh * d.ow].iter_mut().for_each(|v| *v = bv[oc]);
                }
            }
        }

        for bi in 0..d.b {
            for oc in 0..d.c_out {
                let out_base = (bi * d.c_out + oc) * d.oh * d.ow;
                for ic in 0..d.c_in {
                    let in_base = (bi * d.c_in + ic) * d.h * d.w;
                    for ki in 0..d.kh {
                        let off_h = (ki * dilation) as isize - padding as isize;
                        let Some((oh_lo, oh_hi)) = valid_range(d.oh, stride, off_h, d.h) else {
                            continue;
                        };
                        for kj in 0..d.kw {
                            let off_w = (kj * dilation) as isize - padding as isize;
                            let Some((ow_lo, ow_hi)) = valid_range(d.ow, stride, off_w, d.w)
                            else {
                                continue;
                            };
                            let wv = wt[((oc * d.c_in + ic) * d.kh + ki) * d.kw + kj];
                            for oh in oh_lo..=oh_hi {
                                let ih = (oh * stride) as isize + off_h;
                                let row_in = in_base + ih as usize * d.w;
                                let row_out = out_base + oh * d.ow;
                                if stride == 1 {
                                    let iw0 = (ow_lo as isize + off_w) as usize;
                                    let n = ow_hi - ow_lo + 1;
                                    let src = &x[row_in + iw0..row_in + iw0 + n];
                                    let dst = &mut out[row_out + ow_lo..row_out + ow_lo + n];
                                    for (o, &s) in dst.iter_mut().zip(src) {
                                        *o += wv * s;
                                    }
                                } else {
                                    for ow in ow_lo..=ow_hi {
                                        let iw = (ow * stride) as isize + off_w;
                                        out[row_out + ow] += wv * x[row_in + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        let shape = if d.batched {
            vec![d.b, d.c_out, d.oh, d.ow]
        } else {
            vec![d.c_out, d.oh, d.ow]
        };
        let value = TensorND::new(shape, out)?;
        let mut ids = vec![input, weight];
        if let Some(bid) = bias {
            ids.push(bid);
        }
        let rg = self.requires(&ids);
        Ok(self.push(Op::Conv2d { input, weight, bias, stride, padding, dilation }, value, rg))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn conv2d_backward(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
        dilation: usize,
        _id: NodeId,
        gout: &[S],
    ) {
        let d = self
            .conv_dims(input, weight, bias, stride, padding, dilation)
            .expect("validated in forward");

        if let Some(bid) = bias {
            if self.nodes[bid].requires_grad {
                let mut gb = vec![S::zero(); d.c_out];
                for bi in 0..d.b {
                    for oc in 0..d.c_out {
                        let base = (bi * d.c_out + oc) * d.oh * d.ow;
                        gb[oc] += gout[base..base + d.oh * d.ow].iter().copied().sum();
                    }
                }
                self.accumulate(bid, &gb);
            }
        }

        let x = self.nodes[input].value.data();
        let wt = self.nodes[weight].value.data();
        let need_input = self.nodes[input].requires_grad;
        let need_weight = self.nodes[weight].requires_grad;
        let mut gx = if need_input { vec![S::zero(); x.len()] } else { Vec::new() };
        let mut gw = if need_weight { vec![S::zero(); wt.len()] } else { Vec::new() };

        for bi in 0..d.b {
            for oc in 0..d.c_out {
                let out_base = (bi * d.c_out + oc) * d.oh * d.ow;
                for ic in 0..d.c_in {
                    let in_base = (bi * d.c_in + ic) * d.h * d.w;
                    for ki in 0..d.kh {
                        let off_h = (ki * dilation) as isize - padding as isize;
                        let Some((oh_lo, oh_hi)) = valid_range(d.oh, stride, off_h, d.h) else {
                            continue;
                        };
                        for kj in 0..d.kw {
                            let off_w = (kj * dilation) as isize - padding as isize;
                            let Some((ow_lo, ow_hi)) = valid_range(d.ow, stride, off_w, d.w)
                            else {
                                continue;
                            };
                            let widx = ((oc * d.c_in + ic) * d.kh + ki) * d.kw + kj;
                            let wv = wt[widx];
                            let mut wacc = S::zero();
                            for oh in oh_lo..=oh_hi {
                                let ih = ((oh * stride) as isize + off_h) as usize;
                                let row_in = in_base + ih * d.w;
                                let row_out = out_base + oh * d.ow;
                                for ow in ow_lo..=ow_hi {
                                    let iw = ((ow * stride) as isize + off_w) as usize;
                                    let g = gout[row_out + ow];
                                    if need_weight {
                                        wacc += g * x[row_in + iw];
                                    }
                                    if need_input {
                                        gx[row_in + iw] += g * wv;
                                    }
                                }
                            }
                            if need_weight {
                                gw[widx] += wacc;
                            }
                        }
                    }
                }
            }
        }
        if need_input {
            self.accumulate(input, &gx);
        }
        if need_weight {
            self.accumulate(weight, &gw);
        }
    }
}
