//! Objective terms: class-balanced cross-entropy, mean squared error, and
//! the region-statistics term, plus the per-variant composite.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ForwardBundle, Variant};
use crate::scalar::{sc, Scalar};
use crate::tensor::{NodeId, TensorND};

/// Probabilities are clamped to this range before any logarithm.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbceConfig {
    pub beta: f64,
}

impl Default for CbceConfig {
    fn default() -> Self {
        CbceConfig { beta: 0.9999 }
    }
}

impl CbceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "cbce beta must lie in [0,1), got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Per-class weight (1-beta)/(1-beta^n); classes absent from the image
    /// (n = 0) get weight 0.
    pub fn weight(&self, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        if self.beta == 0.0 {
            return 1.0;
        }
        (1.0 - self.beta) / (1.0 - self.beta.powf(n as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmiConfig {
    /// Region side; each region vector has r*r entries.
    pub radius: usize,
    /// Average-pool factor applied to both maps before region gathering.
    pub downsample_stride: usize,
    /// Diagonal jitter for the covariance inversions.
    pub eps: f64,
    /// Mix between the cross-entropy part and the region term.
    pub lambda: f64,
}

impl Default for RmiConfig {
    fn default() -> Self {
        RmiConfig { radius: 3, downsample_stride: 2, eps: 5e-4, lambda: 0.5 }
    }
}

impl RmiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 || self.downsample_stride == 0 {
            return Err(Error::InvalidArgument(
                "rmi radius and downsample_stride must be >= 1".into(),
            ));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidArgument("rmi eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument("rmi lambda must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub cbce: CbceConfig,
    pub rmi: RmiConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { cbce: CbceConfig::default(), rmi: RmiConfig::default() }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.cbce.validate()?;
        self.rmi.validate()
    }
}

/// Component values of one training step, for logging. Components that the
/// variant does not train are zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    pub cbce: f64,
    pub mse: f64,
    pub maf: f64,
}

fn check_one_hot<S: Scalar>(target: &TensorND<S>) -> Result<()> {
    let shape = target.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "one-hot target must be [B,C,H,W], got {shape:?}"
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let data = target.data();
    for bi in 0..b {
        for p in 0..plane {
            let mut ones = 0usize;
            for ci in 0..c {
                let v = data[(bi * c + ci) * plane + p];
                if v == S::one() {
                    ones += 1;
                } else if v != S::zero() {
                    return Err(Error::InvalidArgument(format!(
                        "target is not one-hot: value {v} at batch {bi}, pixel {p}"
                    )));
                }
            }
            if ones != 1 {
                return Err(Error::InvalidArgument(format!(
                    "target is not one-hot: {ones} hot channels at batch {bi}, pixel {p}"
                )));
            }
        }
    }
    Ok(())
}

fn same_shape<S: Scalar>(g: &Graph<S>, id: NodeId, t: &TensorND<S>, what: &str) -> Result<()> {
    if g.value(id).shape() != t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: prediction {:?} vs target {:?}",
            g.value(id).shape(),
            t.shape()
        )));
    }
    Ok(())
}

/// Class-balanced softmax cross-entropy.
///
/// Per image, class i gets weight (1-beta)/(1-beta^{n_i}) from its pixel
/// count n_i. The result is the weighted negative log-likelihood summed over
/// pixels, divided by the class count, averaged over the batch.
pub fn cbce_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    target: &TensorND<S>,
    cfg: &CbceConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    same_shape(g, logits, target, "cbce_loss")?;
    check_one_hot(target)?;
    let shape = target.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;

    // Fold the class weights into the one-hot mask so the graph sees a
    // single constant factor per element.
    let mut mask = vec![S::zero(); target.numel()];
    let data = target.data();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let n = data[base..base + plane].iter().filter(|&&v| v == S::one()).count();
            let w_i = sc::<S>(cfg.weight(n));
            for p in 0..plane {
                mask[base + p] = data[base + p] * w_i;
            }
        }
    }

    let z = g.softmax_channels(logits)?;
    let zc = g.clamp(z, sc::<S>(PROB_CLAMP), sc::<S>(1.0 - PROB_CLAMP));
    let logz = g.log(zc);
    let mask_id = g.constant(TensorND::new(shape.to_vec(), mask)?);
    let weighted = g.mul(mask_id, logz)?;
    let total = g.sum(weighted);
    Ok(g.affine(total, sc::<S>(-1.0 / (b * c) as f64), S::zero()))
}

/// Mean squared error over all elements.
pub fn mse_loss<S: Scalar>(g: &mut Graph<S>, pred: NodeId, target: &TensorND<S>) -> Result<NodeId> {
    same_shape(g, pred, target, "mse_loss")?;
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

fn binary_cross_entropy<S: Scalar>(
    g: &mut Graph<S>,
    probs: NodeId,
    target: &TensorND<S>,
) -> Result<NodeId> {
    let pc = g.clamp(probs, sc::<S>(PROB_CLAMP), sc::<S>(1.0 - PROB_CLAMP));
    let y = g.constant(target.clone());
    let log_p = g.log(pc);
    let pos = g.mul(y, log_p)?;
    let one_minus_p = g.affine(pc, -S::one(), S::one());
    let log_q = g.log(one_minus_p);
    let y_inv = g.affine(y, -S::one(), S::one());
    let neg = g.mul(y_inv, log_q)?;
    let s = g.add(pos, neg)?;
    let m = g.mean(s);
    Ok(g.affine(m, -S::one(), S::zero()))
}

/// The region term for one (batch, class) plane pair, already pooled.
fn region_term<S: Scalar>(
    g: &mut Graph<S>,
    y_plane: NodeId,
    p_plane: NodeId,
    cfg: &RmiConfig,
) -> Result<NodeId> {
    let r = cfg.radius;
    let d_r = r * r;
    // Non-overlapping tiling: stride equals the window side, so whole-block
    // permutations of the plane permute columns only.
    let y_mat = g.unfold(y_plane, r, r)?;
    let p_mat = g.unfold(p_plane, r, r)?;
    let l = g.value(y_mat).shape()[1];
    let inv_l = sc::<S>(1.0 / l as f64);
    let yc = g.center_rows(y_mat)?;
    let pc = g.center_rows(p_mat)?;

    let yct = g.transpose(yc)?;
    let pct = g.transpose(pc)?;
    let yy = g.matmul(yc, yct)?;
    let cov_yy = g.affine(yy, inv_l, S::zero());
    let yp = g.matmul(yc, pct)?;
    let cov_yp = g.affine(yp, inv_l, S::zero());
    let pp = g.matmul(pc, pct)?;
    let cov_pp = g.affine(pp, inv_l, S::zero());

    let eps_eye = |g: &mut Graph<S>, scale: f64| {
        let mut data = vec![S::zero(); d_r * d_r];
        for i in 0..d_r {
            data[i * d_r + i] = sc::<S>(scale);
        }
        g.constant(TensorND::new(vec![d_r, d_r], data).unwrap())
    };

    let jitter = eps_eye(g, cfg.eps);
    let pp_j = g.add(cov_pp, jitter)?;
    let pp_inv = g.mat_inverse(pp_j)?;
    let t1 = g.matmul(cov_yp, pp_inv)?;
    let cov_py = g.transpose(cov_yp)?;
    let t2 = g.matmul(t1, cov_py)?;
    let cond = g.sub(cov_yy, t2)?;

    let attempt = |g: &mut Graph<S>, cond: NodeId, scale: f64| -> Result<NodeId> {
        let mut data = vec![S::zero(); d_r * d_r];
        for i in 0..d_r {
            data[i * d_r + i] = sc::<S>(scale);
        }
        let eye = g.constant(TensorND::new(vec![d_r, d_r], data).unwrap());
        let m = g.add(cond, eye)?;
        g.cholesky_logdet(m)
    };
    // One retry with 10x jitter; a second non-SPD failure propagates.
    let logdet = match attempt(g, cond, cfg.eps) {
        Ok(id) => id,
        Err(Error::NotPositiveDefinite { .. }) => attempt(g, cond, 10.0 * cfg.eps)?,
        Err(e) => return Err(e),
    };
    Ok(g.affine(logdet, sc::<S>(1.0 / (2 * d_r) as f64), S::zero()))
}

/// Region mutual-information style loss.
///
/// Both maps are average-pooled by `downsample_stride`, cut per class into
/// non-overlapping r x r regions stacked as vectors, and compared through
/// the log-determinant of the conditional covariance of target regions
/// given prediction regions. The result mixes a plain binary cross-entropy
/// with the mean region term: lambda * BCE + (1 - lambda) * mean.
pub fn rmi_loss<S: Scalar>(
    g: &mut Graph<S>,
    probs: NodeId,
    target: &TensorND<S>,
    cfg: &RmiConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    same_shape(g, probs, target, "rmi_loss")?;
    check_one_hot(target)?;
    let shape = target.shape().to_vec();
    let (b, c) = (shape[0], shape[1]);

    let bce = binary_cross_entropy(g, probs, target)?;

    let target_id = g.constant(target.clone());
    let (probs_ds, target_ds) = if cfg.downsample_stride > 1 {
        (
            g.avg_pool(probs, cfg.downsample_stride)?,
            g.avg_pool(target_id, cfg.downsample_stride)?,
        )
    } else {
        (probs, target_id)
    };

    let mut acc: Option<NodeId> = None;
    for bi in 0..b {
        for ci in 0..c {
            let y_plane = g.plane(target_ds, bi, ci)?;
            let p_plane = g.plane(probs_ds, bi, ci)?;
            let term = region_term(g, y_plane, p_plane, cfg)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
    }
    let sum = acc.expect("batch and class counts are positive");
    let mean = g.affine(sum, sc::<S>(1.0 / (b * c) as f64), S::zero());

    let bce_w = g.affine(bce, sc::<S>(cfg.lambda), S::zero());
    let mean_w = g.affine(mean, sc::<S>(1.0 - cfg.lambda), S::zero());
    g.add(bce_w, mean_w)
}

/// Fusion-stream objective: region loss on the fused segmentation output
/// plus reconstruction error on the fused SR output.
pub fn maf_loss<S: Scalar>(
    g: &mut Graph<S>,
    o_fuseg: NodeId,
    y: &TensorND<S>,
    o_fusr: NodeId,
    hr: &TensorND<S>,
    cfg: &RmiConfig,
) -> Result<NodeId> {
    let probs = g.softmax_channels(o_fuseg)?;
    let rmi = rmi_loss(g, probs, y, cfg)?;
    let mse = mse_loss(g, o_fusr, hr)?;
    g.add(rmi, mse)
}

/// Per-variant composite objective. Returns the scalar loss node plus the
/// detached component values for logging.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    bundle: &ForwardBundle,
    y: &TensorND<S>,
    hr: Option<&TensorND<S>>,
    variant: Variant,
    cfg: &LossConfig,
) -> Result<(NodeId, LossParts)> {
    cfg.validate()?;
    let cbce = cbce_loss(g, bundle.o_seg, y, &cfg.cbce)?;
    let mut parts = LossParts { cbce: g.value(cbce).item().to_f64_c(), ..Default::default() };
    let mut total = cbce;

    if variant.has_sr() {
        let o_sr = bundle.o_sr.ok_or_else(|| {
            Error::InvalidArgument(format!("variant {} needs o_sr in the bundle", variant.as_str()))
        })?;
        let hr = hr.ok_or_else(|| {
            Error::InvalidArgument("SR variants need the high-resolution target".into())
        })?;
        let mse = mse_loss(g, o_sr, hr)?;
        parts.mse = g.value(mse).item().to_f64_c();
        total = g.add(total, mse)?;
    }

    if variant.has_maf() {
        let o_fuseg = bundle.o_fuseg.ok_or_else(|| {
            Error::InvalidArgument("fusion variant needs o_fuseg in the bundle".into())
        })?;
        let o_fusr = bundle.o_fusr.ok_or_else(|| {
            Error::InvalidArgument("fusion variant needs o_fusr in the bundle".into())
        })?;
        let hr = hr.expect("checked above");
        let maf = maf_loss(g, o_fuseg, y, o_fusr, hr, &cfg.rmi)?;
        parts.maf = g.value(maf).item().to_f64_c();
        total = g.add(total, maf)?;
    }

    parts.total = g.value(total).item().to_f64_c();
    Ok((total, parts))
}
