//! Training loop: polynomial learning-rate decay, SGD with momentum and
//! selective weight decay, deterministic shuffling, periodic evaluation
//! and checkpointing, and bit-exact resume.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{total_loss, LossConfig, LossParts};
use crate::metrics::{aggregate, MetricsReport};
use crate::model::{BoundParams, Model, ParamStore};
use crate::rng::SplitMix64;
use crate::scalar::{sc, Scalar};
use crate::synth::Sample;
use crate::tensor::{stack_batch, TensorND};
use crate::{checkpoint, dataset};
use crate::graph::BnMode;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub init_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            init_lr: 0.01,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 300,
            batch_size: 2,
            seed: 0,
            eval_every: 50,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_lr > 0.0) {
            return Err(Error::InvalidArgument("init_lr must be positive".into()));
        }
        if !(self.power > 0.0) {
            return Err(Error::InvalidArgument("power must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight_decay must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument("threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Polynomial decay: `init_lr * (1 - iter/max_iter)^power` with `iter`
/// counted from zero. `iter == max_iter` yields zero.
pub fn poly_lr(iter: usize, max_iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
    }
    if iter > max_iter {
        return Err(Error::InvalidArgument(format!(
            "iter {iter} exceeds max_iter {max_iter}"
        )));
    }
    let frac = 1.0 - iter as f64 / max_iter as f64;
    Ok(cfg.init_lr * frac.powf(cfg.power))
}

/// Momentum buffers for every trainable parameter, keyed by name.
#[derive(Debug, Clone)]
pub struct OptimizerState<S: Scalar> {
    pub velocity: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let mut velocity = BTreeMap::new();
        for (name, param) in store.iter() {
            if param.kind.trainable() {
                velocity.insert(name.to_string(), vec![S::zero(); param.tensor.numel()]);
            }
        }
        Self { velocity }
    }
}

/// One SGD step over every trainable parameter:
/// `g += wd * p` (decaying kinds only), `v = momentum * v + g`, `p -= lr * v`.
pub fn sgd_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &BTreeMap<String, Vec<S>>,
    state: &mut OptimizerState<S>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let lr_s = sc::<S>(lr);
    let mom = sc::<S>(cfg.momentum);
    let wd = sc::<S>(cfg.weight_decay);
    for (name, param) in store.iter_mut() {
        if !param.kind.trainable() {
            continue;
        }
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        let vel = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| Error::MissingGradient(format!("velocity for {name}")))?;
        if grad.len() != param.tensor.numel() || vel.len() != param.tensor.numel() {
            return Err(Error::ShapeMismatch(format!(
                "gradient size mismatch for parameter {name}"
            )));
        }
        let decay = param.kind.decays();
        let data = param.tensor.data_mut();
        for i in 0..data.len() {
            let mut g = grad[i];
            if decay {
                g += wd * data[i];
            }
            vel[i] = mom * vel[i] + g;
            data[i] -= lr_s * vel[i];
        }
    }
    Ok(())
}

/// Deterministic epoch permutation: a pure function of (seed, epoch), so a
/// resumed run replays the identical sample order.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::for_stream(seed, epoch as u64);
    rng.shuffle(&mut order);
    order
}

fn flat_f64<S: Scalar>(data: &[S]) -> Vec<f64> {
    data.iter().map(|v| v.to_f64_c()).collect()
}

/// Score/label pairs for one sample at the resolution the variant is
/// evaluated at: full resolution normally, the low-res majority mask for
/// the variant that never upsamples.
fn eval_pair<S: Scalar>(
    model: &mut Model<S>,
    sample: &Sample<S>,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let x = batch_of(&[&sample.lr_image])?;
    let probs = model.forward_infer(&x)?;
    let (_, c, h, w) = shape4(probs.shape())?;
    if c < 2 {
        return Err(Error::InvalidArgument(
            "evaluation expects at least two classes".into(),
        ));
    }
    let plane = h * w;
    let fg = &probs.data()[plane..2 * plane];
    let scores = flat_f64(fg);
    let mask = if model.cfg.variant.has_interp() {
        sample.hr_mask.clone()
    } else {
        dataset::downsample_mask_majority(&sample.hr_mask)?
    };
    if mask.shape() != [h, w] {
        return Err(Error::ShapeMismatch(format!(
            "mask shape {:?} does not match prediction {h}x{w}",
            mask.shape()
        )));
    }
    let gt: Vec<bool> = mask.data().iter().map(|v| *v > sc::<S>(0.5)).collect();
    Ok((scores, gt))
}

fn shape4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        other => Err(Error::ShapeMismatch(format!(
            "expected a rank-4 tensor, got shape {other:?}"
        ))),
    }
}

/// Per-image and aggregate metrics over a split.
pub fn evaluate<S: Scalar>(
    model: &mut Model<S>,
    samples: &[Sample<S>],
    threshold: f64,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let mut pairs = Vec::with_capacity(samples.len());
    for sample in samples {
        pairs.push(eval_pair(model, sample)?);
    }
    aggregate(&pairs, threshold)
}

fn batch_of<S: Scalar>(images: &[&TensorND<S>]) -> Result<TensorND<S>> {
    stack_batch(images)
}

/// The observable outputs of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub completed_iters: usize,
    pub max_iter: usize,
    pub last_report: Option<MetricsReport>,
}

fn target_tensors<S: Scalar>(
    model: &Model<S>,
    samples: &[&Sample<S>],
) -> Result<(TensorND<S>, Option<TensorND<S>>)> {
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        let mask = if model.cfg.variant.has_interp() {
            s.hr_mask.clone()
        } else {
            dataset::downsample_mask_majority(&s.hr_mask)?
        };
        masks.push(dataset::mask_to_one_hot(&mask)?);
    }
    let refs: Vec<&TensorND<S>> = masks.iter().collect();
    let y = stack_batch(&refs)?;
    let hr = if model.cfg.variant.has_sr() {
        let imgs: Vec<&TensorND<S>> = samples.iter().map(|s| &s.hr_image).collect();
        Some(stack_batch(&imgs)?)
    } else {
        None
    };
    Ok((y, hr))
}

fn collect_grads<S: Scalar>(
    g: &Graph<S>,
    bound: &BoundParams,
    store: &ParamStore<S>,
) -> Result<BTreeMap<String, Vec<S>>> {
    let mut grads = BTreeMap::new();
    for name in store.trainable_names() {
        let id = bound
            .get(&name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let grad = g
            .grad(*id)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        grads.insert(name, grad.to_vec());
    }
    Ok(grads)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))
}

fn log_line(iter: usize, lr: f64, parts: &LossParts, report: &MetricsReport) -> String {
    format!(
        "iter={} lr={} loss_total={} loss_cbce={} loss_mse={} loss_maf={} dice={} iou={} recall={} auc_pr={}",
        iter,
        lr,
        parts.total,
        parts.cbce,
        parts.mse,
        parts.maf,
        report.mean_dice,
        report.mean_iou,
        report.mean_recall,
        report.mean_auc_pr,
    )
}

/// Run (or resume) training. The schedule length is fixed by
/// `epochs * ceil(n_train / batch_size)`; `max_steps` caps how many steps
/// this call executes, so long runs can be split into bit-exact chunks.
///
/// Evaluation and checkpointing happen after every `eval_every`-th step,
/// after the final step, and after the last step of a capped chunk. When
/// the test split is empty the training split is evaluated instead.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    ds: &Dataset<S>,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    max_steps: Option<usize>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    lcfg.validate()?;
    let n = ds.train.len();
    if n == 0 {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let steps_per_epoch = n.div_ceil(tcfg.batch_size);
    let max_iter = tcfg.epochs * steps_per_epoch;

    let mut opt = OptimizerState::new(&model.store);
    let mut start_iter = 0usize;
    if let Some(path) = resume {
        start_iter = checkpoint::load_into(path, model, &mut opt, tcfg, lcfg)?;
        if start_iter > max_iter {
            return Err(Error::InvalidArgument(format!(
                "checkpoint is at step {start_iter} but the schedule ends at {max_iter}"
            )));
        }
    }

    let log_path = out_dir.join("metrics.log");
    if resume.is_none() {
        std::fs::write(&log_path, "")
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    }

    let stop_iter = match max_steps {
        Some(cap) => max_iter.min(start_iter + cap),
        None => max_iter,
    };

    let eval_samples: &[Sample<S>] = if ds.test.is_empty() { &ds.train } else { &ds.test };

    let mut last_report = None;
    let mut last_ckpt = out_dir.join(format!("ckpt_{start_iter}.bin"));
    if start_iter == stop_iter {
        // Nothing to run; still make sure a checkpoint exists at this step.
        checkpoint::save(&last_ckpt, model, &opt, tcfg, lcfg, start_iter)?;
        return Ok(TrainOutcome {
            final_checkpoint: last_ckpt,
            log_path,
            completed_iters: start_iter,
            max_iter,
            last_report,
        });
    }

    let mut epoch_cache: Option<(usize, Vec<usize>)> = None;
    for iter in start_iter..stop_iter {
        let epoch = iter / steps_per_epoch;
        let slot = iter % steps_per_epoch;
        let order = match &epoch_cache {
            Some((e, order)) if *e == epoch => order,
            _ => {
                epoch_cache = Some((epoch, epoch_permutation(n, tcfg.seed, epoch)));
                &epoch_cache.as_ref().unwrap().1
            }
        };
        let lo = slot * tcfg.batch_size;
        let hi = (lo + tcfg.batch_size).min(n);
        let batch: Vec<&Sample<S>> = order[lo..hi].iter().map(|&i| &ds.train[i]).collect();

        let images: Vec<&TensorND<S>> = batch.iter().map(|s| &s.lr_image).collect();
        let x = batch_of(&images)?;
        let (y, hr) = target_tensors(model, &batch)?;

        let mut g = Graph::new();
        let (bundle, bound) = model.forward_train(&mut g, &x, BnMode::Train)?;
        let (total, parts) = total_loss(&mut g, &bundle, &y, hr.as_ref(), model.cfg.variant, lcfg)?;
        if !parts.total.is_finite() {
            return Err(Error::NanLoss {
                iteration: iter,
                batch_index: order[lo],
            });
        }
        g.backward(total)?;
        let grads = collect_grads(&g, &bound, &model.store)?;
        let lr = poly_lr(iter, max_iter, tcfg)?;
        sgd_step(&mut model.store, &grads, &mut opt, lr, tcfg)?;

        let done = iter + 1;
        let at_eval = done % tcfg.eval_every == 0 || done == stop_iter;
        if at_eval {
            let report = evaluate(model, eval_samples, tcfg.threshold)?;
            append_line(&log_path, &log_line(done, lr, &parts, &report))?;
            last_ckpt = out_dir.join(format!("ckpt_{done}.bin"));
            checkpoint::save(&last_ckpt, model, &opt, tcfg, lcfg, done)?;
            last_report = Some(report);
        }
    }

    Ok(TrainOutcome {
        final_checkpoint: last_ckpt,
        log_path,
        completed_iters: stop_iter,
        max_iter,
        last_report,
    })
}
