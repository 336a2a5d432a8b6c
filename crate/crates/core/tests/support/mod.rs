//! Naive reference implementations shared across test targets. Everything
//! here is straight-line scalar code, deliberately routed differently from
//! the library (integer powers, Gaussian elimination, per-threshold
//! rescans) so that agreement counts as evidence.
#![allow(dead_code)]

use ssmaf_core::losses::RmiConfig;
use ssmaf_core::metrics::ConfusionCounts;
use ssmaf_core::tensor::TensorND;
use ssmaf_core::SplitMix64;

pub type T = TensorND<f64>;

pub const CLAMP: f64 = 1e-6;

pub fn draw(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> T {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    TensorND::new(shape.to_vec(), data).unwrap()
}

pub fn draw_one_hot(rng: &mut SplitMix64, b: usize, c: usize, h: usize, w: usize) -> T {
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

pub fn draw_bools(rng: &mut SplitMix64, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.next_f64() < p).collect()
}

pub fn draw_scores(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.next_f64()).collect()
}

/// Quadruple-loop dilated convolution, cross-correlation orientation.
pub fn naive_conv(x: &T, w: &T, b: &[f64], pad: usize, dil: usize) -> T {
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = h + 2 * pad - dil * (k - 1);
    let ow = wd + 2 * pad - dil * (k - 1);
    let mut out = vec![0.0; bs * co * oh * ow];
    for n in 0..bs {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + (dil * ky) as isize - pad as isize;
                                let ix = ox as isize + (dil * kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * ci + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * ci + c) * k + ky) * k + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((n * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    TensorND::new(vec![bs, co, oh, ow], out).unwrap()
}

/// Naive class-balanced cross-entropy, all in straight-line scalar code.
/// The balance weight uses integer exponentiation, deliberately a different
/// route than the library's float power.
pub fn naive_cbce(logits: &T, target: &T, beta: f64) -> f64 {
    let [b, c, h, w] = *logits.shape() else { panic!() };
    let plane = h * w;
    let lx = logits.data();
    let ty = target.data();
    let mut total = 0.0;
    for bi in 0..b {
        let mut weights = vec![0.0; c];
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let n = ty[base..base + plane].iter().filter(|&&v| v == 1.0).count();
            weights[ci] = if n == 0 {
                0.0
            } else if beta == 0.0 {
                1.0
            } else {
                (1.0 - beta) / (1.0 - beta.powi(n as i32))
            };
        }
        for p in 0..plane {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(lx[(bi * c + ci) * plane + p]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                z += (lx[(bi * c + ci) * plane + p] - mx).exp();
            }
            for ci in 0..c {
                if ty[(bi * c + ci) * plane + p] == 1.0 {
                    let prob = ((lx[(bi * c + ci) * plane + p] - mx).exp() / z)
                        .clamp(CLAMP, 1.0 - CLAMP);
                    total += weights[ci] * prob.ln();
                }
            }
        }
    }
    -total / (b * c) as f64
}

pub fn naive_mse(pred: &T, target: &T) -> f64 {
    let n = pred.numel() as f64;
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

pub fn naive_bce(probs: &[f64], target: &[f64]) -> f64 {
    let n = probs.len() as f64;
    let s: f64 = probs
        .iter()
        .zip(target)
        .map(|(p, y)| {
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    -s / n
}

fn mat_mul(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    // a is n x m, b is m x k.
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            let mut s = 0.0;
            for p in 0..m {
                s += a[i * m + p] * b[p * k + j];
            }
            out[i * k + j] = s;
        }
    }
    out
}

fn gauss_inverse(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        for j in 0..n {
            m.swap(col * n + j, piv * n + j);
            inv.swap(col * n + j, piv * n + j);
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            for j in 0..n {
                m[r * n + j] -= f * m[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    inv
}

/// Cholesky logdet of the symmetrized input; None when a pivot fails.
fn chol_logdet(a: &[f64], n: usize) -> Option<f64> {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
        }
    }
    let mut l = vec![0.0; n * n];
    let mut logdet = 0.0;
    for i in 0..n {
        for j in 0..=i {
            let mut acc = s[i * n + j];
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return None;
                }
                l[i * n + i] = acc.sqrt();
                logdet += 2.0 * l[i * n + i].ln();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Some(logdet)
}

fn avg_pool_plane(plane: &[f64], h: usize, w: usize, k: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    s += plane[(oy * k + dy) * w + ox * k + dx];
                }
            }
            out[oy * ow + ox] = s / (k * k) as f64;
        }
    }
    (out, oh, ow)
}

/// Region vectors of one plane: non-overlapping r x r tiles, one column per
/// tile, rows ordered dy*r+dx, then mean-centred per row.
fn region_matrix(plane: &[f64], h: usize, w: usize, r: usize) -> (Vec<f64>, usize) {
    let nh = (h - r) / r + 1;
    let nw = (w - r) / r + 1;
    let l = nh * nw;
    let d = r * r;
    let mut m = vec![0.0; d * l];
    for wy in 0..nh {
        for wx in 0..nw {
            let col = wy * nw + wx;
            for dy in 0..r {
                for dx in 0..r {
                    m[(dy * r + dx) * l + col] = plane[(wy * r + dy) * w + wx * r + dx];
                }
            }
        }
    }
    for row in 0..d {
        let mean: f64 = m[row * l..(row + 1) * l].iter().sum::<f64>() / l as f64;
        for col in 0..l {
            m[row * l + col] -= mean;
        }
    }
    (m, l)
}

fn naive_region_term(y_plane: &[f64], p_plane: &[f64], h: usize, w: usize, cfg: &RmiConfig) -> f64 {
    let (yp, h2, w2) = if cfg.downsample_stride > 1 {
        let (a, hh, ww2) = avg_pool_plane(y_plane, h, w, cfg.downsample_stride);
        (a, hh, ww2)
    } else {
        (y_plane.to_vec(), h, w)
    };
    let pp = if cfg.downsample_stride > 1 {
        avg_pool_plane(p_plane, h, w, cfg.downsample_stride).0
    } else {
        p_plane.to_vec()
    };
    let r = cfg.radius;
    let d = r * r;
    let (ym, l) = region_matrix(&yp, h2, w2, r);
    let (pm, _) = region_matrix(&pp, h2, w2, r);
    let inv_l = 1.0 / l as f64;

    let mut ymt = vec![0.0; l * d];
    let mut pmt = vec![0.0; l * d];
    for i in 0..d {
        for j in 0..l {
            ymt[j * d + i] = ym[i * l + j];
            pmt[j * d + i] = pm[i * l + j];
        }
    }
    let cov_yy: Vec<f64> = mat_mul(&ym, &ymt, d, l, d).iter().map(|v| v * inv_l).collect();
    let cov_yp: Vec<f64> = mat_mul(&ym, &pmt, d, l, d).iter().map(|v| v * inv_l).collect();
    let cov_pp: Vec<f64> = mat_mul(&pm, &pmt, d, l, d).iter().map(|v| v * inv_l).collect();

    let mut pp_j = cov_pp.clone();
    for i in 0..d {
        pp_j[i * d + i] += cfg.eps;
    }
    let pp_inv = gauss_inverse(&pp_j, d);
    let t1 = mat_mul(&cov_yp, &pp_inv, d, d, d);
    let mut cov_py = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov_py[i * d + j] = cov_yp[j * d + i];
        }
    }
    let t2 = mat_mul(&t1, &cov_py, d, d, d);
    let mut cond = vec![0.0; d * d];
    for i in 0..d * d {
        cond[i] = cov_yy[i] - t2[i];
    }
    let with_eps = |scale: f64| {
        let mut m = cond.clone();
        for i in 0..d {
            m[i * d + i] += scale;
        }
        m
    };
    let logdet = chol_logdet(&with_eps(cfg.eps), d)
        .or_else(|| chol_logdet(&with_eps(10.0 * cfg.eps), d))
        .expect("jittered conditional covariance is positive definite");
    logdet / (2 * d) as f64
}

pub fn naive_rmi(probs: &T, target: &T, cfg: &RmiConfig) -> f64 {
    let [b, c, h, w] = *probs.shape() else { panic!() };
    let plane = h * w;
    let bce = naive_bce(probs.data(), target.data());
    let mut sum = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            sum += naive_region_term(
                &target.data()[base..base + plane],
                &probs.data()[base..base + plane],
                h,
                w,
                cfg,
            );
        }
    }
    let mean = sum / (b * c) as f64;
    cfg.lambda * bce + (1.0 - cfg.lambda) * mean
}

/// Straight tally, one branch per pixel.
pub fn naive_confusion(pred: &[bool], gt: &[bool]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Independent PR-curve area: same sweep convention, different code path
/// (per-threshold rescan instead of a sorted index walk).
pub fn naive_auc_pr(scores: &[f64], gt: &[bool]) -> f64 {
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return 1.0;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.extend([0.0, 1.0]);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.reverse();

    let mut pts: Vec<(f64, f64)> = Vec::new();
    for t in thresholds {
        let tp = scores
            .iter()
            .zip(gt)
            .filter(|(&s, &g)| s >= t && g)
            .count();
        let predicted = scores.iter().filter(|&&s| s >= t).count();
        if predicted == 0 {
            continue;
        }
        pts.push((tp as f64 / positives as f64, tp as f64 / predicted as f64));
    }
    if pts.is_empty() {
        return 0.0;
    }
    let mut area = 0.0;
    let (mut pr, mut ppr) = (0.0, pts[0].1);
    for (r, p) in pts {
        area += (r - pr) * (p + ppr) / 2.0;
        pr = r;
        ppr = p;
    }
    area.clamp(0.0, 1.0)
}
