//! Independent naive reimplementations of every loss, compared against the
//! graph-built versions on randomized instances, plus pinned closed-form
//! values.

#[path = "support/mod.rs"]
mod support;

use support::{draw, draw_one_hot, naive_cbce, naive_mse, naive_rmi};

use ssmaf_core::graph::Graph;
use ssmaf_core::losses::{
    cbce_loss, maf_loss, mse_loss, rmi_loss, total_loss, CbceConfig, LossConfig, RmiConfig,
};
use ssmaf_core::model::ForwardBundle;
use ssmaf_core::tensor::TensorND;
use ssmaf_core::{SplitMix64, Variant};

type T = TensorND<f64>;
type G = Graph<f64>;

fn graph_value(build: impl FnOnce(&mut G) -> ssmaf_core::Result<usize>) -> f64 {
    let mut g = G::new();
    let id = build(&mut g).unwrap();
    g.value(id).item()
}

#[test]
fn cbce_matches_naive_on_random_instances() {
    let mut rng = SplitMix64::new(21);
    for trial in 0..120 {
        let b = rng.uniform_usize(1, 2);
        let c = rng.uniform_usize(2, 4);
        let h = rng.uniform_usize(2, 5);
        let w = rng.uniform_usize(2, 5);
        let logits = draw(&mut rng, &[b, c, h, w], -3.0, 3.0);
        let y = draw_one_hot(&mut rng, b, c, h, w);
        let want = naive_cbce(&logits, &y, 0.9999);
        let got = graph_value(|g| {
            let l = g.leaf(&logits, false);
            cbce_loss(g, l, &y, &CbceConfig::default())
        });
        assert!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "trial {trial}: got {got} want {want}"
        );
    }
}

#[test]
fn cbce_weight_pinned_values() {
    let cfg = CbceConfig::default();
    assert_eq!(cfg.beta, 0.9999);
    assert_eq!(cfg.weight(1), 1.0, "a single pixel gets full weight");
    assert_eq!(cfg.weight(0), 0.0, "absent class contributes nothing");
    let w = cfg.weight(10_000);
    let want = 1e-4 / (1.0 - 0.9999_f64.powi(10_000));
    assert!((w - want).abs() / want <= 1e-9, "got {w} want {want}");
    assert!((w - 1.58193e-4).abs() / 1.58193e-4 < 1e-4, "magnitude check");
    // The weight grows toward 1 as the class gets rarer.
    assert!(cfg.weight(10) > cfg.weight(100));
    assert!(cfg.weight(100) > cfg.weight(10_000));
}

#[test]
fn cbce_rejects_non_one_hot_targets() {
    let mut g = G::new();
    let logits = g.leaf(&draw(&mut SplitMix64::new(1), &[1, 2, 2, 2], -1.0, 1.0), false);
    let bad = TensorND::new(vec![1, 2, 2, 2], vec![0.5; 8]).unwrap();
    assert!(cbce_loss(&mut g, logits, &bad, &CbceConfig::default()).is_err());
}

#[test]
fn mse_matches_naive_on_random_instances() {
    let mut rng = SplitMix64::new(22);
    for trial in 0..120 {
        let shape = [
            rng.uniform_usize(1, 2),
            rng.uniform_usize(1, 3),
            rng.uniform_usize(1, 6),
            rng.uniform_usize(1, 6),
        ];
        let p = draw(&mut rng, &shape, -2.0, 2.0);
        let t = draw(&mut rng, &shape, -2.0, 2.0);
        let want = naive_mse(&p, &t);
        let got = graph_value(|g| {
            let pi = g.leaf(&p, false);
            mse_loss(g, pi, &t)
        });
        assert!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "trial {trial}: got {got} want {want}"
        );
    }
}

#[test]
fn mse_identical_inputs_vanish() {
    let mut rng = SplitMix64::new(23);
    let p = draw(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
    let got = graph_value(|g| {
        let pi = g.leaf(&p, false);
        mse_loss(g, pi, &p)
    });
    assert_eq!(got, 0.0);
}

#[test]
fn rmi_matches_naive_on_random_instances() {
    let mut rng = SplitMix64::new(24);
    let cfg = RmiConfig::default();
    for trial in 0..100 {
        let b = 1;
        let c = 2;
        // Pooled extent must fit at least one r x r window.
        let h = [12, 16][rng.uniform_usize(0, 1)];
        let w = [12, 16][rng.uniform_usize(0, 1)];
        let logits = draw(&mut rng, &[b, c, h, w], -2.0, 2.0);
        let y = draw_one_hot(&mut rng, b, c, h, w);
        let mut g = G::new();
        let li = g.leaf(&logits, false);
        let probs_id = g.softmax_channels(li).unwrap();
        let probs = g.value(probs_id).clone();
        let loss = rmi_loss(&mut g, probs_id, &y, &cfg).unwrap();
        let got = g.value(loss).item();
        let want = naive_rmi(&probs, &y, &cfg);
        assert!(
            (got - want).abs() <= 1e-8 * want.abs().max(1.0),
            "trial {trial}: got {got} want {want}"
        );
    }
}

#[test]
fn rmi_constant_planes_hit_the_eps_floor() {
    // Both maps constant per plane: all covariances vanish and each region
    // term is logdet(eps I) / (2 d) = ln(eps) / 2.
    let cfg = RmiConfig { lambda: 0.0, ..RmiConfig::default() };
    let h = 12;
    let mut y_data = vec![0.0; 2 * h * h];
    y_data[h * h..].iter_mut().for_each(|v| *v = 1.0);
    let y = TensorND::new(vec![1, 2, h, h], y_data).unwrap();
    let probs = TensorND::new(vec![1, 2, h, h], vec![0.5; 2 * h * h]).unwrap();
    let got = graph_value(|g| {
        let p = g.leaf(&probs, false);
        rmi_loss(g, p, &y, &cfg)
    });
    let want = cfg.eps.ln() / 2.0;
    assert!((got - want).abs() < 1e-12, "got {got} want {want}");
}

#[test]
fn rmi_term_is_bounded_below_by_the_floor() {
    let mut rng = SplitMix64::new(25);
    let cfg = RmiConfig { lambda: 0.0, ..RmiConfig::default() };
    let floor = cfg.eps.ln() / 2.0;
    for _ in 0..20 {
        let logits = draw(&mut rng, &[1, 2, 12, 12], -2.0, 2.0);
        let y = draw_one_hot(&mut rng, 1, 2, 12, 12);
        let got = graph_value(|g| {
            let l = g.leaf(&logits, false);
            let p = g.softmax_channels(l)?;
            rmi_loss(g, p, &y, &cfg)
        });
        assert!(
            got >= floor - 1e-9,
            "region mean {got} fell under the floor {floor}"
        );
    }
}

#[test]
fn rmi_region_term_invariant_under_block_permutation() {
    // With no pooling, permuting whole non-overlapping tiles permutes region
    // columns only, which leaves every covariance unchanged.
    let cfg = RmiConfig { downsample_stride: 1, lambda: 0.0, ..RmiConfig::default() };
    let mut rng = SplitMix64::new(26);
    let h = 9;
    let logits = draw(&mut rng, &[1, 2, h, h], -2.0, 2.0);
    let y = draw_one_hot(&mut rng, 1, 2, h, h);

    let permute = |t: &T, perm: &[usize]| {
        // Move 3x3 tiles around with one fixed permutation of the 9 tiles.
        let mut out = t.clone();
        let [_, c, hh, ww] = *t.shape() else { panic!() };
        for ci in 0..c {
            for (dst, &src) in perm.iter().enumerate() {
                let (dy, dx) = (dst / 3, dst % 3);
                let (sy, sx) = (src / 3, src % 3);
                for iy in 0..3 {
                    for ix in 0..3 {
                        let d = (ci * hh + dy * 3 + iy) * ww + dx * 3 + ix;
                        let s = (ci * hh + sy * 3 + iy) * ww + sx * 3 + ix;
                        out.data_mut()[d] = t.data()[s];
                    }
                }
            }
        }
        out
    };
    let perm = [4, 7, 0, 2, 8, 1, 6, 3, 5];
    let lp = permute(&logits, &perm);
    let yp = permute(&y, &perm);

    let eval = |logits: &T, y: &T| {
        graph_value(|g| {
            let l = g.leaf(logits, false);
            let p = g.softmax_channels(l)?;
            rmi_loss(g, p, y, &cfg)
        })
    };
    let a = eval(&logits, &y);
    let b = eval(&lp, &yp);
    assert!((a - b).abs() < 1e-10, "permutation changed the term: {a} vs {b}");
}

#[test]
fn maf_loss_is_rmi_plus_mse() {
    let mut rng = SplitMix64::new(27);
    let cfg = RmiConfig::default();
    let fuseg = draw(&mut rng, &[1, 2, 12, 12], -2.0, 2.0);
    let fusr = draw(&mut rng, &[1, 3, 12, 12], 0.0, 1.0);
    let y = draw_one_hot(&mut rng, 1, 2, 12, 12);
    let hr = draw(&mut rng, &[1, 3, 12, 12], 0.0, 1.0);

    let got = graph_value(|g| {
        let a = g.leaf(&fuseg, false);
        let b = g.leaf(&fusr, false);
        maf_loss(g, a, &y, b, &hr, &cfg)
    });
    let rmi_part = graph_value(|g| {
        let a = g.leaf(&fuseg, false);
        let p = g.softmax_channels(a)?;
        rmi_loss(g, p, &y, &cfg)
    });
    let mse_part = graph_value(|g| {
        let b = g.leaf(&fusr, false);
        mse_loss(g, b, &hr)
    });
    assert!((got - (rmi_part + mse_part)).abs() < 1e-12);
}

#[test]
fn total_loss_composition_per_variant() {
    let mut rng = SplitMix64::new(28);
    let lcfg = LossConfig::default();
    let o_seg = draw(&mut rng, &[1, 2, 12, 12], -2.0, 2.0);
    let o_sr = draw(&mut rng, &[1, 3, 12, 12], 0.0, 1.0);
    let o_fuseg = draw(&mut rng, &[1, 2, 12, 12], -2.0, 2.0);
    let o_fusr = draw(&mut rng, &[1, 3, 12, 12], 0.0, 1.0);
    let y = draw_one_hot(&mut rng, 1, 2, 12, 12);
    let hr = draw(&mut rng, &[1, 3, 12, 12], 0.0, 1.0);

    let build_bundle = |g: &mut G, variant: Variant| {
        let seg = g.leaf(&o_seg, false);
        let sr = variant.has_sr().then(|| g.leaf(&o_sr, false));
        let fuseg = variant.has_maf().then(|| g.leaf(&o_fuseg, false));
        let fusr = variant.has_maf().then(|| g.leaf(&o_fusr, false));
        ForwardBundle {
            o_seg: seg,
            o_sr: sr,
            o_fuseg: fuseg,
            o_fusr: fusr,
            f_seg: seg,
            f_sr: None,
        }
    };

    let cbce_part = graph_value(|g| {
        let l = g.leaf(&o_seg, false);
        cbce_loss(g, l, &y, &lcfg.cbce)
    });
    let mse_part = graph_value(|g| {
        let l = g.leaf(&o_sr, false);
        mse_loss(g, l, &hr)
    });
    let maf_part = graph_value(|g| {
        let a = g.leaf(&o_fuseg, false);
        let b = g.leaf(&o_fusr, false);
        maf_loss(g, a, &y, b, &hr, &lcfg.rmi)
    });

    for (variant, want) in [
        (Variant::Baseline, cbce_part),
        (Variant::Interp, cbce_part),
        (Variant::InterpSr, cbce_part + mse_part),
        (Variant::InterpSrMaf, cbce_part + mse_part + maf_part),
    ] {
        let mut g = G::new();
        let bundle = build_bundle(&mut g, variant);
        let hr_opt = variant.has_sr().then_some(&hr);
        let (id, parts) = total_loss(&mut g, &bundle, &y, hr_opt, variant, &lcfg).unwrap();
        let got = g.value(id).item();
        assert!(
            (got - want).abs() < 1e-12,
            "{}: got {got} want {want}",
            variant.as_str()
        );
        assert!((parts.total - got).abs() < 1e-12);
        assert!((parts.cbce - cbce_part).abs() < 1e-12);
        if variant.has_sr() {
            assert!((parts.mse - mse_part).abs() < 1e-12);
        } else {
            assert_eq!(parts.mse, 0.0);
        }
        if variant.has_maf() {
            assert!((parts.maf - maf_part).abs() < 1e-12);
        } else {
            assert_eq!(parts.maf, 0.0);
        }
    }
}

#[test]
fn total_loss_requires_hr_for_sr_variants() {
    let mut rng = SplitMix64::new(29);
    let o_seg = draw(&mut rng, &[1, 2, 12, 12], -1.0, 1.0);
    let o_sr = draw(&mut rng, &[1, 3, 12, 12], 0.0, 1.0);
    let y = draw_one_hot(&mut rng, 1, 2, 12, 12);
    let mut g = G::new();
    let seg = g.leaf(&o_seg, false);
    let sr = g.leaf(&o_sr, false);
    let bundle = ForwardBundle {
        o_seg: seg,
        o_sr: Some(sr),
        o_fuseg: None,
        o_fusr: None,
        f_seg: seg,
        f_sr: None,
    };
    let err = total_loss(&mut g, &bundle, &y, None, Variant::InterpSr, &LossConfig::default());
    assert!(err.is_err(), "missing HR target must be rejected");
}
