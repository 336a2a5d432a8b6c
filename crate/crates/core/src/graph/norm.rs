//! Batch normalization over the channel axis of [B,C,H,W] tensors.

use super::{Graph, Op};
use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::{NodeId, TensorND};

/// Train mode normalizes with batch statistics and updates the running
/// estimates; eval mode normalizes with the running estimates as constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

impl<S: Scalar> Graph<S> {
    /// Per-channel normalization y = gamma * (x - mu) / sqrt(var + eps) + beta.
    /// Batch variance is the biased estimate (divide by m, not m - 1).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        momentum: f64,
        mode: BnMode,
        running_mean: &mut [S],
        running_var: &mut [S],
    ) -> Result<NodeId> {
        let shape = self.nodes[input].value.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm expects rank 4 [B,C,H,W], got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.nodes[id].value.shape();
            if s != [c] {
                return Err(Error::ShapeMismatch(format!(
                    "batch_norm {name} shape {s:?} does not match {c} channels"
                )));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm running stats must have length {c}"
            )));
        }

        let plane = h * w;
        let m = b * plane;
        let x = self.nodes[input].value.data();
        let gv = self.nodes[gamma].value.data();
        let bv = self.nodes[beta].value.data();
        let epss = sc::<S>(eps);

        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        match mode {
            BnMode::Train => {
                let minv = S::one() / sc::<S>(m as f64);
                for ci in 0..c {
                    let mut acc = S::zero();
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        acc += x[base..base + plane].iter().copied().sum();
                    }
                    mean[ci] = acc * minv;
                }
                for ci in 0..c {
                    let mu = mean[ci];
                    let mut acc = S::zero();
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for &v in &x[base..base + plane] {
                            let d = v - mu;
                            acc += d * d;
                        }
                    }
                    var[ci] = acc * minv;
                }
                let mom = sc::<S>(momentum);
                let keep = S::one() - mom;
                for ci in 0..c {
                    running_mean[ci] = keep * running_mean[ci] + mom * mean[ci];
                    running_var[ci] = keep * running_var[ci] + mom * var[ci];
                }
            }
            BnMode::Eval => {
                mean.copy_from_slice(running_mean);
                var.copy_from_slice(running_var);
            }
        }

        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + epss).sqrt()).collect();
        let mut x_hat = vec![S::zero(); x.len()];
        let mut out = vec![S::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (mu, is, g, be) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for i in base..base + plane {
                    let xh = (x[i] - mu) * is;
                    x_hat[i] = xh;
                    out[i] = g * xh + be;
                }
            }
        }

        let value = TensorND::new(shape, out)?;
        let rg = self.requires(&[input, gamma, beta]);
        Ok(self.push(Op::BatchNorm { input, gamma, beta, x_hat, inv_std, mode }, value, rg))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn batch_norm_backward(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: &[S],
        inv_std: &[S],
        mode: BnMode,
        gout: &[S],
    ) {
        let shape = self.nodes[input].value.shape();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let m = b * plane;
        let gv = self.nodes[gamma].value.data().to_vec();

        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let mut sg = S::zero();
                let mut sgx = S::zero();
                for i in base..base + plane {
                    sg += gout[i];
                    sgx += gout[i] * x_hat[i];
                }
                dbeta[ci] += sg;
                dgamma[ci] += sgx;
            }
        }

        if self.nodes[input].requires_grad {
            let mut gx = vec![S::zero(); x_hat.len()];
            match mode {
                BnMode::Train => {
                    // dx = inv_std * (dxhat - mean(dxhat) - x_hat * mean(dxhat*x_hat))
                    // with dxhat = gout * gamma, means taken over the m = B*H*W
                    // samples of each channel.
                    let minv = S::one() / sc::<S>(m as f64);
                    for ci in 0..c {
                        let g = gv[ci];
                        let mean_d = dbeta[ci] * g * minv;
                        let mean_dx = dgamma[ci] * g * minv;
                        let is = inv_std[ci];
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for i in base..base + plane {
                                let dxhat = gout[i] * g;
                                gx[i] = is * (dxhat - mean_d - x_hat[i] * mean_dx);
                            }
                        }
                    }
                }
                BnMode::Eval => {
                    for ci in 0..c {
                        let scale = gv[ci] * inv_std[ci];
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for i in base..base + plane {
                                gx[i] = gout[i] * scale;
                            }
                        }
                    }
                }
            }
            self.accumulate(input, &gx);
        }
        self.accumulate(gamma, &dgamma);
        self.accumulate(beta, &dbeta);
    }
}
