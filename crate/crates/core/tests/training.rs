//! Training loop behavior: schedule values, optimizer arithmetic against a
//! hand-unrolled oracle, deterministic data order, checkpoint round-trips,
//! bit-exact reruns and resumes, and the config file format.

use std::collections::BTreeMap;
use std::fs;

use ssmaf_core::config::{
    checkpoint_header, loss_from_kv, loss_to_kv, model_from_kv, model_to_kv,
    parse_checkpoint_header, synth_from_kv, synth_to_kv, train_from_kv, train_to_kv, KvConfig,
};
use ssmaf_core::dataset::Dataset;
use ssmaf_core::model::{Model, ModelConfig, ParamKind, ParamStore, Variant};
use ssmaf_core::synth::generate_sample;
use ssmaf_core::tensor::TensorND;
use ssmaf_core::trainer::{
    epoch_permutation, evaluate, poly_lr, sgd_step, train, OptimizerState,
};
use ssmaf_core::{checkpoint, Error, LossConfig, SynthParams, TrainConfig};

fn tiny_model_cfg(variant: Variant) -> ModelConfig {
    ModelConfig {
        base_width: 4,
        depth: 2,
        fusion_dim: 8,
        ssc_groups: 2,
        variant,
        ..ModelConfig::default()
    }
}

fn tiny_dataset(n_train: usize, n_test: usize) -> Dataset<f64> {
    let params = SynthParams {
        hr_size: (16, 16),
        lesion_count_range: (1, 2),
        lesion_radius_range: (1.5, 3.0),
        vessel_count_range: (1, 1),
        seed: 77,
    };
    let mut ds = Dataset::default();
    for i in 0..n_train + n_test {
        let s = generate_sample(&params, i as u64).unwrap();
        if i < n_train {
            ds.train.push(s);
        } else {
            ds.test.push(s);
        }
    }
    ds
}

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        eval_every: 1,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn poly_schedule_pinned_values() {
    let cfg = TrainConfig::default();
    assert_eq!(poly_lr(0, 300, &cfg).unwrap(), 0.01);
    assert_eq!(poly_lr(300, 300, &cfg).unwrap(), 0.0);
    let mid = poly_lr(150, 300, &cfg).unwrap();
    assert!((mid - 0.0053589).abs() < 1e-7, "got {mid}");
    // Closed form at an arbitrary point.
    let v = poly_lr(60, 300, &cfg).unwrap();
    assert!((v - 0.01 * 0.8f64.powf(0.9)).abs() < 1e-15);
    assert!(poly_lr(301, 300, &cfg).is_err());
    assert!(poly_lr(0, 0, &cfg).is_err());
}

#[test]
fn sgd_matches_hand_unrolled_updates() {
    let mut store: ParamStore<f64> = ParamStore::new();
    store.insert("w", ParamKind::Weight, TensorND::new(vec![1], vec![1.0]).unwrap());
    let mut state = OptimizerState::new(&store);
    let cfg = TrainConfig { momentum: 0.9, weight_decay: 0.0, ..TrainConfig::default() };
    let grads: BTreeMap<String, Vec<f64>> = [("w".to_string(), vec![1.0])].into();

    // Mirror of the update arithmetic, one variable at a time.
    let (mut p, mut v) = (1.0f64, 0.0f64);
    for _ in 0..2 {
        sgd_step(&mut store, &grads, &mut state, 0.1, &cfg).unwrap();
        v = 0.9 * v + 1.0;
        p -= 0.1 * v;
        assert_eq!(store.get("w").unwrap().tensor.data()[0], p);
        assert_eq!(state.velocity["w"][0], v);
    }
    // After two steps: v = 1.9, p = 1 - 0.1 - 0.19.
    assert!((p - 0.71).abs() < 1e-15);
}

#[test]
fn weight_decay_applies_to_conv_weights_only() {
    let mut store: ParamStore<f64> = ParamStore::new();
    let one = || TensorND::new(vec![1], vec![1.0]).unwrap();
    store.insert("w", ParamKind::Weight, one());
    store.insert("b", ParamKind::Bias, one());
    store.insert("g", ParamKind::BnGamma, one());
    store.insert("rm", ParamKind::BnRunningMean, one());
    let mut state = OptimizerState::new(&store);
    assert!(!state.velocity.contains_key("rm"), "running stats are not optimized");

    let cfg = TrainConfig { momentum: 0.0, weight_decay: 0.5, ..TrainConfig::default() };
    let grads: BTreeMap<String, Vec<f64>> = ["w", "b", "g"]
        .into_iter()
        .map(|n| (n.to_string(), vec![0.0]))
        .collect();
    sgd_step(&mut store, &grads, &mut state, 1.0, &cfg).unwrap();
    // Only the conv weight moved, pulled toward zero by the decay term.
    assert_eq!(store.get("w").unwrap().tensor.data()[0], 0.5);
    assert_eq!(store.get("b").unwrap().tensor.data()[0], 1.0);
    assert_eq!(store.get("g").unwrap().tensor.data()[0], 1.0);
    assert_eq!(store.get("rm").unwrap().tensor.data()[0], 1.0);
}

#[test]
fn sgd_rejects_missing_or_misshapen_gradients() {
    let mut store: ParamStore<f64> = ParamStore::new();
    store.insert("w", ParamKind::Weight, TensorND::zeros(&[2]));
    let mut state = OptimizerState::new(&store);
    let cfg = TrainConfig::default();
    let empty: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    assert!(matches!(
        sgd_step(&mut store, &empty, &mut state, 0.1, &cfg),
        Err(Error::MissingGradient(_))
    ));
    let bad: BTreeMap<String, Vec<f64>> = [("w".to_string(), vec![0.0])].into();
    assert!(matches!(
        sgd_step(&mut store, &bad, &mut state, 0.1, &cfg),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn epoch_permutation_is_deterministic_and_complete() {
    let a = epoch_permutation(16, 9, 3);
    let b = epoch_permutation(16, 9, 3);
    assert_eq!(a, b);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..16).collect::<Vec<_>>());
    assert_ne!(a, epoch_permutation(16, 9, 4), "epochs should reshuffle");
    assert_ne!(a, epoch_permutation(16, 10, 3), "seeds should reshuffle");
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let base = TrainConfig::default();
    for bad in [
        TrainConfig { epochs: 0, ..base.clone() },
        TrainConfig { batch_size: 0, ..base.clone() },
        TrainConfig { eval_every: 0, ..base.clone() },
        TrainConfig { momentum: 1.0, ..base.clone() },
        TrainConfig { threshold: 1.5, ..base.clone() },
        TrainConfig { init_lr: 0.0, ..base.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn checkpoint_roundtrip_restores_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let mcfg = tiny_model_cfg(Variant::InterpSrMaf);
    let model = Model::<f64>::build(mcfg.clone(), 5).unwrap();
    let mut opt = OptimizerState::new(&model.store);
    for v in opt.velocity.values_mut() {
        for (i, x) in v.iter_mut().enumerate() {
            *x = i as f64 * 0.5;
        }
    }
    let tcfg = tiny_train_cfg();
    let lcfg = LossConfig::default();
    checkpoint::save(&path, &model, &opt, &tcfg, &lcfg, 42).unwrap();

    let loaded: checkpoint::Loaded<f64> = checkpoint::read(&path).unwrap();
    assert_eq!(loaded.iter, 42);
    assert_eq!(loaded.model_cfg, mcfg);
    assert_eq!(loaded.train_cfg, tcfg);
    assert_eq!(loaded.loss_cfg, lcfg);
    for (name, param) in model.store.iter() {
        assert_eq!(loaded.tensors[name].data(), param.tensor.data(), "{name}");
    }
    for (name, vel) in &opt.velocity {
        let key = format!("opt/velocity/{name}");
        assert_eq!(loaded.tensors[&key].data(), vel.as_slice(), "{key}");
    }

    // load_into restores the exact state.
    let mut model2 = Model::<f64>::build(mcfg.clone(), 99).unwrap();
    let mut opt2 = OptimizerState::new(&model2.store);
    let iter = checkpoint::load_into(&path, &mut model2, &mut opt2, &tcfg, &lcfg).unwrap();
    assert_eq!(iter, 42);
    for (name, param) in model.store.iter() {
        assert_eq!(model2.store.get(name).unwrap().tensor.data(), param.tensor.data());
    }
    assert_eq!(opt2.velocity, opt.velocity);

    // load_model rebuilds without an optimizer.
    let (model3, t3, l3, i3) = checkpoint::load_model::<f64>(&path).unwrap();
    assert_eq!((t3, l3, i3), (tcfg.clone(), lcfg.clone(), 42));
    assert_eq!(model3.cfg, mcfg);
}

#[test]
fn checkpoint_rejects_corruption_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let mcfg = tiny_model_cfg(Variant::Baseline);
    let model = Model::<f64>::build(mcfg.clone(), 1).unwrap();
    let opt = OptimizerState::new(&model.store);
    let tcfg = tiny_train_cfg();
    let lcfg = LossConfig::default();
    checkpoint::save(&path, &model, &opt, &tcfg, &lcfg, 7).unwrap();
    let good = fs::read(&path).unwrap();

    // Bad magic.
    let mut bytes = good.clone();
    bytes[0] ^= 0xff;
    fs::write(&path, &bytes).unwrap();
    assert!(checkpoint::read::<f64>(&path).is_err());

    // Unsupported version.
    let mut bytes = good.clone();
    bytes[6] = 99;
    fs::write(&path, &bytes).unwrap();
    assert!(checkpoint::read::<f64>(&path).is_err());

    // Truncation.
    fs::write(&path, &good[..good.len() / 2]).unwrap();
    assert!(checkpoint::read::<f64>(&path).is_err());

    // Trailing garbage.
    let mut bytes = good.clone();
    bytes.push(0);
    fs::write(&path, &bytes).unwrap();
    assert!(checkpoint::read::<f64>(&path).is_err());

    // Config mismatches are refused on resume.
    fs::write(&path, &good).unwrap();
    let mut model2 = Model::<f64>::build(mcfg.clone(), 1).unwrap();
    let mut opt2 = OptimizerState::new(&model2.store);
    let other_t = TrainConfig { seed: 1234, ..tcfg.clone() };
    assert!(checkpoint::load_into(&path, &mut model2, &mut opt2, &other_t, &lcfg).is_err());
    let other_l = LossConfig { ..Default::default() };
    let mut bad_l = other_l.clone();
    bad_l.rmi.lambda = 0.25;
    assert!(checkpoint::load_into(&path, &mut model2, &mut opt2, &tcfg, &bad_l).is_err());
    let mut model3 =
        Model::<f64>::build(tiny_model_cfg(Variant::InterpSrMaf), 1).unwrap();
    let mut opt3 = OptimizerState::new(&model3.store);
    assert!(checkpoint::load_into(&path, &mut model3, &mut opt3, &tcfg, &lcfg).is_err());
}

#[test]
fn identical_runs_are_bit_identical() {
    let ds = tiny_dataset(2, 1);
    let mcfg = tiny_model_cfg(Variant::InterpSrMaf);
    let tcfg = tiny_train_cfg();
    let lcfg = LossConfig::default();

    let run = |dir: &std::path::Path| {
        let mut model = Model::<f64>::build(mcfg.clone(), 5).unwrap();
        train(&mut model, &ds, &tcfg, &lcfg, dir, None, None).unwrap()
    };
    let da = tempfile::tempdir().unwrap();
    let db = tempfile::tempdir().unwrap();
    let oa = run(da.path());
    let ob = run(db.path());
    assert_eq!(oa.completed_iters, 2);
    assert_eq!(oa.max_iter, 2);
    let ca = fs::read(&oa.final_checkpoint).unwrap();
    let cb = fs::read(&ob.final_checkpoint).unwrap();
    assert_eq!(ca, cb, "checkpoints diverged");
    let la = fs::read_to_string(&oa.log_path).unwrap();
    let lb = fs::read_to_string(&ob.log_path).unwrap();
    assert_eq!(la, lb, "metric logs diverged");
    assert!(!la.is_empty());
    for line in la.lines() {
        assert!(line.starts_with("iter="), "{line}");
        for key in ["lr=", "loss_total=", "loss_cbce=", "dice=", "auc_pr="] {
            assert!(line.contains(key), "{line} lacks {key}");
        }
    }
}

#[test]
fn chunked_resume_reproduces_uninterrupted_run() {
    let ds = tiny_dataset(2, 1);
    let mcfg = tiny_model_cfg(Variant::InterpSrMaf);
    let tcfg = TrainConfig { epochs: 4, ..tiny_train_cfg() };
    let lcfg = LossConfig::default();

    let dfull = tempfile::tempdir().unwrap();
    let mut full = Model::<f64>::build(mcfg.clone(), 5).unwrap();
    let of = train(&mut full, &ds, &tcfg, &lcfg, dfull.path(), None, None).unwrap();
    assert_eq!(of.completed_iters, 4);

    let dchunk = tempfile::tempdir().unwrap();
    let mut part = Model::<f64>::build(mcfg.clone(), 5).unwrap();
    let o1 = train(&mut part, &ds, &tcfg, &lcfg, dchunk.path(), None, Some(2)).unwrap();
    assert_eq!(o1.completed_iters, 2);
    assert!(o1.final_checkpoint.ends_with("ckpt_2.bin"));

    // Resume into a freshly built model; everything comes from the file.
    let mut resumed = Model::<f64>::build(mcfg.clone(), 999).unwrap();
    let o2 = train(
        &mut resumed,
        &ds,
        &tcfg,
        &lcfg,
        dchunk.path(),
        Some(&o1.final_checkpoint),
        None,
    )
    .unwrap();
    assert_eq!(o2.completed_iters, 4);

    let a = fs::read(&of.final_checkpoint).unwrap();
    let b = fs::read(&o2.final_checkpoint).unwrap();
    assert_eq!(a, b, "resumed checkpoint differs from uninterrupted run");
    let la = fs::read_to_string(&of.log_path).unwrap();
    let lb = fs::read_to_string(&o2.log_path).unwrap();
    assert_eq!(la, lb, "resumed log differs from uninterrupted run");
}

#[test]
fn resume_past_schedule_end_is_rejected() {
    let ds = tiny_dataset(2, 0);
    let mcfg = tiny_model_cfg(Variant::Baseline);
    let tcfg = tiny_train_cfg();
    let lcfg = LossConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::<f64>::build(mcfg.clone(), 5).unwrap();
    let out = train(&mut model, &ds, &tcfg, &lcfg, dir.path(), None, None).unwrap();

    // Shrink the schedule below the checkpoint position.
    let short = TrainConfig { epochs: 1, ..tcfg.clone() };
    let mut m2 = Model::<f64>::build(mcfg, 5).unwrap();
    let err = train(
        &mut m2,
        &ds,
        &short,
        &lcfg,
        dir.path(),
        Some(&out.final_checkpoint),
        None,
    );
    assert!(err.is_err());
}

#[test]
fn empty_test_split_evaluates_training_data() {
    let ds = tiny_dataset(2, 0);
    let mcfg = tiny_model_cfg(Variant::Interp);
    let tcfg = TrainConfig { epochs: 1, ..tiny_train_cfg() };
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::<f64>::build(mcfg, 5).unwrap();
    let out = train(&mut model, &ds, &tcfg, &LossConfig::default(), dir.path(), None, None)
        .unwrap();
    let report = out.last_report.unwrap();
    assert_eq!(report.per_image.len(), 2, "evaluated the train split");
}

#[test]
fn nan_loss_aborts_with_location() {
    let ds = tiny_dataset(2, 0);
    let mut model = Model::<f64>::build(tiny_model_cfg(Variant::InterpSr), 5).unwrap();
    // Poison the reconstruction head: its output feeds the squared error
    // directly, with no rectification in between to swallow the NaN.
    model
        .store
        .get_mut("head_sr.conv1.weight")
        .unwrap()
        .tensor
        .data_mut()[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let err = train(
        &mut model,
        &ds,
        &tiny_train_cfg(),
        &LossConfig::default(),
        dir.path(),
        None,
        None,
    );
    match err {
        Err(Error::NanLoss { iteration, .. }) => assert_eq!(iteration, 0),
        other => panic!("expected NanLoss, got {other:?}"),
    }
}

#[test]
fn evaluate_reports_per_sample_metrics() {
    let ds = tiny_dataset(2, 0);
    let mut model = Model::<f64>::build(tiny_model_cfg(Variant::InterpSrMaf), 5).unwrap();
    let report = evaluate(&mut model, &ds.train, 0.5).unwrap();
    assert_eq!(report.per_image.len(), 2);
    for m in &report.per_image {
        assert!(m.dice.is_finite() && (0.0..=1.0).contains(&m.dice));
        assert!((0.0..=1.0).contains(&m.auc_pr));
    }
    assert!(evaluate(&mut model, &[], 0.5).is_err());
}

#[test]
fn kv_config_parse_and_serialize() {
    let text = "# top comment\n[model]\ndepth = 3\nvariant=interp_sr\n\n[train]\nseed=9\n";
    let kv = KvConfig::parse(text).unwrap();
    assert_eq!(kv.get("model", "depth"), Some("3"));
    assert_eq!(kv.get("model", "variant"), Some("interp_sr"));
    assert_eq!(kv.get("train", "seed"), Some("9"));
    assert_eq!(kv.section_names().collect::<Vec<_>>(), vec!["model", "train"]);

    // serialize -> parse is the identity on the map.
    let round = KvConfig::parse(&kv.serialize()).unwrap();
    assert_eq!(round, kv);

    assert!(kv.check_sections(&["model", "train"]).is_ok());
    assert!(kv.check_sections(&["model"]).is_err());

    let mut kv2 = kv.clone();
    kv2.set_path("train.seed", "11").unwrap();
    assert_eq!(kv2.get("train", "seed"), Some("11"));
    assert!(kv2.set_path("nodot", "1").is_err());
}

#[test]
fn kv_config_parse_rejections() {
    // Key before any section header.
    assert!(KvConfig::parse("depth=3\n").is_err());
    // Unclosed section header.
    assert!(KvConfig::parse("[model\ndepth=3\n").is_err());
    // Empty section name.
    assert!(KvConfig::parse("[]\n").is_err());
    // Line with no separator.
    assert!(KvConfig::parse("[m]\nnonsense\n").is_err());
    // Empty key.
    assert!(KvConfig::parse("[m]\n=3\n").is_err());
}

#[test]
fn config_kv_roundtrips() {
    let mcfg = ModelConfig {
        base_width: 8,
        depth: 4,
        variant: Variant::InterpSr,
        ..ModelConfig::default()
    };
    let mut kv = KvConfig::new();
    model_to_kv(&mcfg, &mut kv);
    let mut back = ModelConfig::default();
    model_from_kv(&mut back, kv.section("model").unwrap()).unwrap();
    assert_eq!(back, mcfg);

    let tcfg = TrainConfig { init_lr: 0.02, epochs: 7, ..TrainConfig::default() };
    let mut kv = KvConfig::new();
    train_to_kv(&tcfg, &mut kv);
    let mut back = TrainConfig::default();
    train_from_kv(&mut back, kv.section("train").unwrap()).unwrap();
    assert_eq!(back, tcfg);

    let mut lcfg = LossConfig::default();
    lcfg.cbce.beta = 0.999;
    lcfg.rmi.lambda = 0.25;
    let mut kv = KvConfig::new();
    loss_to_kv(&lcfg, &mut kv);
    let mut back = LossConfig::default();
    loss_from_kv(&mut back, kv.section("loss").unwrap()).unwrap();
    assert_eq!(back, lcfg);

    let scfg = SynthParams {
        hr_size: (64, 32),
        lesion_count_range: (2, 4),
        lesion_radius_range: (1.0, 5.0),
        vessel_count_range: (0, 3),
        seed: 13,
    };
    let mut kv = KvConfig::new();
    synth_to_kv(&scfg, &mut kv);
    let mut back = SynthParams::default();
    synth_from_kv(&mut back, kv.section("synth").unwrap()).unwrap();
    assert_eq!(back.hr_size, scfg.hr_size);
    assert_eq!(back.lesion_radius_range, scfg.lesion_radius_range);
    assert_eq!(back.seed, scfg.seed);

    // Unknown keys and unparseable values are refused.
    let mut kv = KvConfig::new();
    kv.set("model", "bogus", "1");
    assert!(model_from_kv(&mut ModelConfig::default(), kv.section("model").unwrap()).is_err());
    let mut kv = KvConfig::new();
    kv.set("model", "depth", "xyz");
    assert!(model_from_kv(&mut ModelConfig::default(), kv.section("model").unwrap()).is_err());
    let mut kv = KvConfig::new();
    kv.set("model", "variant", "bogus");
    assert!(model_from_kv(&mut ModelConfig::default(), kv.section("model").unwrap()).is_err());
}

#[test]
fn checkpoint_header_roundtrip() {
    let mcfg = tiny_model_cfg(Variant::InterpSr);
    let tcfg = TrainConfig { epochs: 12, ..TrainConfig::default() };
    let mut lcfg = LossConfig::default();
    lcfg.rmi.eps = 1e-3;
    let text = checkpoint_header(&mcfg, &tcfg, &lcfg, 42);
    let (m, t, l, i) = parse_checkpoint_header(&text).unwrap();
    assert_eq!(m, mcfg);
    assert_eq!(t, tcfg);
    assert_eq!(l, lcfg);
    assert_eq!(i, 42);
    assert!(parse_checkpoint_header("[bogus]\nx=1\n").is_err());
}
