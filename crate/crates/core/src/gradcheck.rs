//! Central finite-difference verification of every differentiable
//! operation and loss, plus a whole-network check through the composite
//! objective. Runs in `f64` only; the relative error of
//! `(f(x+h) - f(x-h)) / 2h` against the reverse-mode gradient must stay
//! under the configured tolerance at every probed coordinate.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, NodeId};
use crate::losses::{
    cbce_loss, maf_loss, mse_loss, rmi_loss, total_loss, CbceConfig, LossConfig, RmiConfig,
};
use crate::model::{Model, ModelConfig, Variant};
use crate::rng::SplitMix64;
use crate::tensor::TensorND;

pub type T = TensorND<f64>;
pub type G = Graph<f64>;

#[derive(Debug, Clone)]
pub struct CheckOpts {
    /// Central-difference step.
    pub h: f64,
    /// Maximum allowed relative error per coordinate.
    pub tol: f64,
    /// Coordinate cap per case; everything is probed when under the cap.
    pub max_coords: usize,
    /// Randomized input draws per registry case.
    pub trials: usize,
    pub seed: u64,
    /// Deliberately bias the analytic gradient so the harness must fail.
    /// Exists to prove the comparison has teeth.
    pub corrupt: bool,
}

impl Default for CheckOpts {
    fn default() -> Self {
        CheckOpts {
            h: 1e-5,
            tol: 1e-4,
            max_coords: usize::MAX,
            trials: 20,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel: f64,
    pub coords: usize,
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / 1.0_f64.max(a.abs()).max(f.abs())
}

/// Verify one scalar-valued graph function against central differences.
///
/// `build` must be pure: called with fresh leaves for `inputs`, it returns
/// the loss node. Every probed coordinate of every input is perturbed both
/// ways and the slope compared against the reverse-mode gradient.
pub fn check(
    name: &str,
    inputs: &[T],
    build: impl Fn(&mut G, &[NodeId]) -> Result<NodeId>,
    opts: &CheckOpts,
) -> Result<CheckOutcome> {
    let eval = |tensors: &[T]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = G::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t, true)).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "gradient check {name}: loss must be scalar, got shape {:?}",
                g.value(loss).shape()
            )));
        }
        let v = g.value(loss).item();
        g.backward(loss)?;
        let grads = ids.iter().map(|&id| g.grad_or_zeros(id)).collect();
        Ok((v, grads))
    };

    let (_, mut grads) = eval(inputs)?;
    if opts.corrupt {
        grads[0][0] += 0.01 * (1.0 + grads[0][0].abs());
    }

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            coords.push((i, j));
        }
    }
    if coords.len() > opts.max_coords {
        let mut rng = SplitMix64::for_stream(opts.seed, 0x9e37);
        rng.shuffle(&mut coords);
        coords.truncate(opts.max_coords);
    }

    let mut max_rel = 0.0_f64;
    let mut work: Vec<T> = inputs.to_vec();
    for &(i, j) in &coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + opts.h;
        let (f_plus, _) = eval_value(&work, &build, name)?;
        work[i].data_mut()[j] = orig - opts.h;
        let (f_minus, _) = eval_value(&work, &build, name)?;
        work[i].data_mut()[j] = orig;

        let fd = (f_plus - f_minus) / (2.0 * opts.h);
        let a = grads[i][j];
        let rel = rel_err(a, fd);
        if rel > opts.tol {
            return Err(Error::InvalidArgument(format!(
                "gradient check {name} failed at input {i} coord {j}: \
                 analytic {a:.9e} vs finite-difference {fd:.9e} (rel {rel:.3e})"
            )));
        }
        max_rel = max_rel.max(rel);
    }
    Ok(CheckOutcome { name: name.to_string(), max_rel, coords: coords.len() })
}

fn eval_value(
    tensors: &[T],
    build: &impl Fn(&mut G, &[NodeId]) -> Result<NodeId>,
    name: &str,
) -> Result<(f64, ())> {
    let mut g = G::new();
    let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t, false)).collect();
    let loss = build(&mut g, &ids)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradient check {name}: loss must be scalar"
        )));
    }
    Ok((g.value(loss).item(), ()))
}

fn draw(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> T {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    TensorND::new(shape.to_vec(), data).unwrap()
}

/// Uniform draw that avoids a band around each point in `avoid`, so
/// piecewise functions are probed away from their kinks.
fn draw_avoiding(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64, avoid: &[f64]) -> T {
    let margin = 1e-3;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v = rng.uniform(lo, hi);
            if avoid.iter().all(|a| (v - a).abs() > margin) {
                break v;
            }
        })
        .collect();
    TensorND::new(shape.to_vec(), data).unwrap()
}

/// Draw where all entries of each 2x2 pooling window are well separated,
/// so a perturbation of `h` cannot flip an argmax.
fn draw_pool_safe(rng: &mut SplitMix64, b: usize, c: usize, h: usize, w: usize) -> T {
    'outer: loop {
        let t = draw(rng, &[b, c, h, w], -1.0, 1.0);
        let d = t.data();
        for bi in 0..b * c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut vals = [0.0; 4];
                    for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        vals[k] = d[bi * h * w + (2 * oy + dy) * w + 2 * ox + dx];
                    }
                    for a in 0..4 {
                        for bb in a + 1..4 {
                            if (vals[a] - vals[bb]).abs() < 1e-3 {
                                continue 'outer;
                            }
                        }
                    }
                }
            }
        }
        return t;
    }
}

fn draw_spd(rng: &mut SplitMix64, n: usize) -> T {
    let b = draw(rng, &[n, n], -1.0, 1.0);
    let mut out = vec![0.0; n * n];
    let d = b.data();
    for i in 0..n {
        for j in 0..n {
            let mut s = if i == j { 1.0 } else { 0.0 };
            for k in 0..n {
                s += d[k * n + i] * d[k * n + j];
            }
            out[i * n + j] = s;
        }
    }
    TensorND::new(vec![n, n], out).unwrap()
}

/// Random one-hot map over `c` channels.
fn draw_one_hot(rng: &mut SplitMix64, b: usize, c: usize, h: usize, w: usize) -> T {
    let mut data = vec![0.0; b * c * h * w];
    let plane = h * w;
    for bi in 0..b {
        for p in 0..plane {
            let ci = rng.uniform_usize(0, c - 1);
            data[(bi * c + ci) * plane + p] = 1.0;
        }
    }
    TensorND::new(vec![b, c, h, w], data).unwrap()
}

pub struct OpCheck {
    pub name: &'static str,
    pub run: Box<dyn Fn(&mut SplitMix64, &CheckOpts) -> Result<CheckOutcome>>,
}

macro_rules! case {
    ($vec:expr, $name:literal, $body:expr) => {
        $vec.push(OpCheck { name: $name, run: Box::new($body) });
    };
}

/// All per-operation checks. Each entry draws its own inputs from the
/// supplied stream and runs the harness once.
pub fn registry() -> Vec<OpCheck> {
    let mut v: Vec<OpCheck> = Vec::new();

    case!(v, "add_sub_mul", |rng, o| {
        let a = draw(rng, &[2, 3, 4], -1.0, 1.0);
        let b = draw(rng, &[2, 3, 4], -1.0, 1.0);
        check("add_sub_mul", &[a, b], |g, ids| {
            let s = g.add(ids[0], ids[1])?;
            let d = g.sub(ids[0], ids[1])?;
            let p = g.mul(s, d)?;
            let q = g.mul(p, ids[0])?;
            Ok(g.sum(q))
        }, o)
    });

    case!(v, "affine_relu", |rng, o| {
        let a = draw_avoiding(rng, &[3, 5], -1.0, 1.0, &[0.0]);
        check("affine_relu", &[a], |g, ids| {
            let y = g.affine(ids[0], 1.7, -0.3);
            let r = g.relu(y);
            let r2 = g.relu(ids[0]);
            let s = g.add(r, r2)?;
            Ok(g.sum(s))
        }, o)
    });

    case!(v, "sigmoid", |rng, o| {
        let a = draw(rng, &[2, 7], -3.0, 3.0);
        check("sigmoid", &[a], |g, ids| {
            let s = g.sigmoid(ids[0]);
            let p = g.mul(s, s)?;
            Ok(g.sum(p))
        }, o)
    });

    case!(v, "log", |rng, o| {
        let a = draw(rng, &[2, 6], 0.2, 3.0);
        check("log", &[a], |g, ids| {
            let l = g.log(ids[0]);
            Ok(g.sum(l))
        }, o)
    });

    case!(v, "clamp", |rng, o| {
        let a = draw_avoiding(rng, &[4, 4], -2.0, 2.0, &[-1.0, 1.0]);
        check("clamp", &[a], |g, ids| {
            let c = g.clamp(ids[0], -1.0, 1.0);
            let p = g.mul(c, c)?;
            Ok(g.sum(p))
        }, o)
    });

    case!(v, "softmax_channels", |rng, o| {
        let a = draw(rng, &[2, 3, 2, 2], -2.0, 2.0);
        let m = draw(rng, &[2, 3, 2, 2], 0.1, 1.0);
        check("softmax_channels", &[a], move |g, ids| {
            let s = g.softmax_channels(ids[0])?;
            let mask = g.constant(m.clone());
            let p = g.mul(s, mask)?;
            Ok(g.sum(p))
        }, o)
    });

    case!(v, "mean", |rng, o| {
        let a = draw(rng, &[3, 4], -1.0, 1.0);
        check("mean", &[a], |g, ids| {
            let sq = g.mul(ids[0], ids[0])?;
            Ok(g.mean(sq))
        }, o)
    });

    case!(v, "conv2d_s1p1", |rng, o| {
        let x = draw(rng, &[2, 2, 4, 4], -1.0, 1.0);
        let w = draw(rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b = draw(rng, &[3], -0.5, 0.5);
        check("conv2d_s1p1", &[x, w, b], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1, 1)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "conv2d_s2", |rng, o| {
        let x = draw(rng, &[1, 2, 5, 5], -1.0, 1.0);
        let w = draw(rng, &[2, 2, 3, 3], -0.5, 0.5);
        check("conv2d_s2", &[x, w], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], None, 2, 1, 1)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "conv2d_dilated", |rng, o| {
        let x = draw(rng, &[1, 2, 6, 6], -1.0, 1.0);
        let w = draw(rng, &[2, 2, 3, 3], -0.5, 0.5);
        let b = draw(rng, &[2], -0.2, 0.2);
        check("conv2d_dilated", &[x, w, b], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 2, 2)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "conv2d_1x1", |rng, o| {
        let x = draw(rng, &[2, 3, 3, 3], -1.0, 1.0);
        let w = draw(rng, &[2, 3, 1, 1], -0.5, 0.5);
        let b = draw(rng, &[2], -0.2, 0.2);
        check("conv2d_1x1", &[x, w, b], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 0, 1)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "batch_norm_train", |rng, o| {
        let x = draw(rng, &[2, 3, 3, 3], -1.0, 1.0);
        let gamma = draw(rng, &[3], 0.5, 1.5);
        let beta = draw(rng, &[3], -0.5, 0.5);
        check("batch_norm_train", &[x, gamma, beta], |g, ids| {
            let mut rm = vec![0.0; 3];
            let mut rv = vec![1.0; 3];
            let y = g.batch_norm(ids[0], ids[1], ids[2], 1e-5, 0.1, BnMode::Train, &mut rm, &mut rv)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "batch_norm_eval", |rng, o| {
        let x = draw(rng, &[2, 3, 3, 3], -1.0, 1.0);
        let gamma = draw(rng, &[3], 0.5, 1.5);
        let beta = draw(rng, &[3], -0.5, 0.5);
        check("batch_norm_eval", &[x, gamma, beta], |g, ids| {
            let mut rm = vec![0.2, -0.1, 0.05];
            let mut rv = vec![0.9, 1.1, 1.3];
            let y = g.batch_norm(ids[0], ids[1], ids[2], 1e-5, 0.1, BnMode::Eval, &mut rm, &mut rv)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "max_pool2", |rng, o| {
        let x = draw_pool_safe(rng, 1, 2, 4, 4);
        check("max_pool2", &[x], |g, ids| {
            let y = g.max_pool2(ids[0])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "avg_pool", |rng, o| {
        let x = draw(rng, &[1, 2, 4, 4], -1.0, 1.0);
        check("avg_pool", &[x], |g, ids| {
            let y = g.avg_pool(ids[0], 2)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "bilinear_up", |rng, o| {
        let x = draw(rng, &[1, 2, 3, 3], -1.0, 1.0);
        check("bilinear_up", &[x], |g, ids| {
            let y = g.bilinear_up(ids[0], 2)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "pixel_shuffle", |rng, o| {
        let x = draw(rng, &[1, 8, 2, 2], -1.0, 1.0);
        check("pixel_shuffle", &[x], |g, ids| {
            let y = g.pixel_shuffle(ids[0], 2)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "concat_slice", |rng, o| {
        let a = draw(rng, &[1, 2, 3, 3], -1.0, 1.0);
        let b = draw(rng, &[1, 3, 3, 3], -1.0, 1.0);
        check("concat_slice", &[a, b], |g, ids| {
            let cat = g.concat_channels(&[ids[0], ids[1]])?;
            let sl = g.slice_channels(cat, 1, 3)?;
            let sq = g.mul(sl, sl)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "matmul_transpose", |rng, o| {
        let a = draw(rng, &[3, 4], -1.0, 1.0);
        let b = draw(rng, &[3, 5], -1.0, 1.0);
        check("matmul_transpose", &[a, b], |g, ids| {
            let at = g.transpose(ids[0])?;
            let p = g.matmul(at, ids[1])?;
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "mat_inverse", |rng, o| {
        let a = draw_spd(rng, 4);
        check("mat_inverse", &[a], |g, ids| {
            let inv = g.mat_inverse(ids[0])?;
            let sq = g.mul(inv, inv)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "cholesky_logdet", |rng, o| {
        let a = draw_spd(rng, 4);
        check("cholesky_logdet", &[a], |g, ids| g.cholesky_logdet(ids[0]), o)
    });

    case!(v, "unfold_center", |rng, o| {
        let x = draw(rng, &[6, 6], -1.0, 1.0);
        check("unfold_center", &[x], |g, ids| {
            let u = g.unfold(ids[0], 3, 3)?;
            let c = g.center_rows(u)?;
            let sq = g.mul(u, u)?;
            let s1 = g.sum(sq);
            let s2 = g.sum(c);
            g.add(s1, s2)
        }, o)
    });

    case!(v, "plane", |rng, o| {
        let x = draw(rng, &[2, 3, 3, 3], -1.0, 1.0);
        check("plane", &[x], |g, ids| {
            let p = g.plane(ids[0], 1, 2)?;
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        }, o)
    });

    case!(v, "cbce", |rng, o| {
        let logits = draw(rng, &[2, 2, 4, 4], -2.0, 2.0);
        let y = draw_one_hot(rng, 2, 2, 4, 4);
        check("cbce", &[logits], move |g, ids| {
            cbce_loss(g, ids[0], &y, &CbceConfig::default())
        }, o)
    });

    case!(v, "mse", |rng, o| {
        let p = draw(rng, &[1, 3, 4, 4], -1.0, 1.0);
        let t = draw(rng, &[1, 3, 4, 4], -1.0, 1.0);
        check("mse", &[p], move |g, ids| mse_loss(g, ids[0], &t), o)
    });

    case!(v, "rmi", |rng, o| {
        let logits = draw(rng, &[1, 2, 12, 12], -2.0, 2.0);
        let y = draw_one_hot(rng, 1, 2, 12, 12);
        check("rmi", &[logits], move |g, ids| {
            let probs = g.softmax_channels(ids[0])?;
            rmi_loss(g, probs, &y, &RmiConfig::default())
        }, o)
    });

    case!(v, "maf_loss", |rng, o| {
        let fuseg = draw(rng, &[1, 2, 12, 12], -2.0, 2.0);
        let fusr = draw(rng, &[1, 3, 12, 12], -1.0, 1.0);
        let y = draw_one_hot(rng, 1, 2, 12, 12);
        let hr = draw(rng, &[1, 3, 12, 12], 0.0, 1.0);
        check("maf_loss", &[fuseg, fusr], move |g, ids| {
            maf_loss(g, ids[0], &y, ids[1], &hr, &RmiConfig::default())
        }, o)
    });

    v
}

/// Run every registry case (or just those whose name contains `filter`),
/// with `trials` independent input draws each.
pub fn run_registry(filter: Option<&str>, opts: &CheckOpts) -> Result<Vec<CheckOutcome>> {
    let cases = registry();
    let selected: Vec<&OpCheck> = cases
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no gradient-check case matches filter {:?}",
            filter.unwrap_or("")
        )));
    }
    let mut out = Vec::new();
    for case in selected {
        let mut worst = CheckOutcome { name: case.name.to_string(), max_rel: 0.0, coords: 0 };
        for trial in 0..opts.trials.max(1) {
            let mut rng = SplitMix64::for_stream(opts.seed, trial as u64);
            let r = (case.run)(&mut rng, opts)?;
            worst.max_rel = worst.max_rel.max(r.max_rel);
            worst.coords += r.coords;
        }
        out.push(worst);
    }
    Ok(out)
}

/// Finite-difference probe straight through the full forward pass and
/// composite objective, perturbing sampled trainable parameters.
pub fn check_model_end_to_end(
    variant: Variant,
    sample_params: usize,
    tol: f64,
    opts: &CheckOpts,
) -> Result<CheckOutcome> {
    let cfg = ModelConfig {
        base_width: 4,
        depth: 2,
        fusion_dim: 8,
        ssc_groups: 2,
        ..ModelConfig::default()
    };
    let cfg = ModelConfig { variant, ..cfg };
    let base: Model<f64> = Model::build(cfg.clone(), 17)?;

    let mut rng = SplitMix64::for_stream(opts.seed, 0xE2E);
    let x = draw(&mut rng, &[1, cfg.in_channels, 8, 8], 0.0, 1.0);
    let hr_extent = 8 * cfg.upscale;
    let y_extent = if cfg.variant.has_interp() { hr_extent } else { 8 };
    let y = draw_one_hot(&mut rng, 1, cfg.num_classes, y_extent, y_extent);
    let hr = draw(&mut rng, &[1, cfg.in_channels, hr_extent, hr_extent], 0.0, 1.0);
    let hr_opt = cfg.variant.has_sr().then_some(&hr);
    let lcfg = LossConfig::default();

    let eval_loss = |m: &Model<f64>| -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let mut m = m.clone();
        let mut g = G::new();
        let (bundle, bound) = m.forward_train(&mut g, &x, BnMode::Train)?;
        let (total, _) = total_loss(&mut g, &bundle, &y, hr_opt, cfg.variant, &lcfg)?;
        let v = g.value(total).item();
        g.backward(total)?;
        let mut grads = BTreeMap::new();
        for (name, &id) in &bound {
            grads.insert(name.clone(), g.grad_or_zeros(id));
        }
        Ok((v, grads))
    };

    let (_, grads) = eval_loss(&base)?;

    let mut coords: Vec<(String, usize)> = Vec::new();
    for name in base.store.trainable_names() {
        let n = base.store.get(&name).unwrap().tensor.numel();
        for j in 0..n {
            coords.push((name.clone(), j));
        }
    }
    let mut rng = SplitMix64::for_stream(opts.seed, 0xE2E + 1);
    rng.shuffle(&mut coords);
    coords.truncate(sample_params);

    let mut max_rel = 0.0_f64;
    for (name, j) in &coords {
        let mut plus = base.clone();
        plus.store.get_mut(name).unwrap().tensor.data_mut()[*j] += opts.h;
        let (f_plus, _) = eval_loss(&plus)?;
        let mut minus = base.clone();
        minus.store.get_mut(name).unwrap().tensor.data_mut()[*j] -= opts.h;
        let (f_minus, _) = eval_loss(&minus)?;
        let fd = (f_plus - f_minus) / (2.0 * opts.h);
        let a = grads[name][*j];
        let rel = rel_err(a, fd);
        if rel > tol {
            return Err(Error::InvalidArgument(format!(
                "end-to-end gradient check ({}) failed at {name}[{j}]: \
                 analytic {a:.9e} vs finite-difference {fd:.9e} (rel {rel:.3e})",
                variant.as_str()
            )));
        }
        max_rel = max_rel.max(rel);
    }
    Ok(CheckOutcome {
        name: format!("model_{}", variant.as_str()),
        max_rel,
        coords: coords.len(),
    })
}
