//! Command-line driver. Subcommands cover the full experiment loop:
//! `synth` writes a dataset directory, `train` fits a model and logs
//! metrics, `eval` scores a checkpoint, `infer` writes masks and overlay
//! images, `gradcheck` verifies derivatives against finite differences,
//! and `ablate` trains every variant over several seeds and tabulates the
//! results.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssmaf_core::config::{
    loss_from_kv, model_from_kv, synth_from_kv, train_from_kv, KvConfig,
};
use ssmaf_core::dataset::{downsample_mask_majority, load_dataset, write_dataset, Dataset};
use ssmaf_core::gradcheck::{check_model_end_to_end, run_registry, CheckOpts};
use ssmaf_core::model::{Model, ModelConfig, Variant};
use ssmaf_core::netpbm::write_netpbm;
use ssmaf_core::tensor::{stack_batch, TensorND};
use ssmaf_core::trainer::{evaluate, train};
use ssmaf_core::{checkpoint, Error, LossConfig, Sample, SynthParams, TrainConfig};

type Result<T> = std::result::Result<T, Error>;

/// Print a line, exiting quietly when the reader has gone away (EPIPE);
/// `println!` would panic with a backtrace instead.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        if writeln!(std::io::stdout(), $($arg)*).is_err() {
            std::process::exit(0);
        }
    }};
}

#[derive(Parser)]
#[command(name = "ssmaf", version, about = "Dual-stream lesion segmentation workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a model, writing checkpoints and a metrics log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write predicted masks and overlay images for a dataset split.
    Infer(InferArgs),
    /// Compare every derivative against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train all four variants over several seeds and tabulate medians.
    Ablate(AblateArgs),
}

/// Config file plus overrides, shared by the subcommands that build models.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key=value config file with [model], [train], [loss], [synth] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single-value override, section.key=value; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Model variant: baseline, interp, interp_sr, interp_sr_maf.
    #[arg(long)]
    variant: Option<String>,
    /// Seed for weight init, shuffling, and data generation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Foreground decision threshold on the class-1 probability.
    #[arg(long)]
    threshold: Option<f64>,
}

struct Configs {
    model: ModelConfig,
    train: TrainConfig,
    loss: LossConfig,
    synth: SynthParams,
}

fn load_configs(args: &ConfigArgs) -> Result<Configs> {
    let mut kv = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            KvConfig::parse(&text)?
        }
        None => KvConfig::new(),
    };
    for item in &args.set {
        let Some((path, value)) = item.split_once('=') else {
            return Err(Error::InvalidArgument(format!(
                "--set {item:?} must look like section.key=value"
            )));
        };
        kv.set_path(path, value)?;
    }
    kv.check_sections(&["model", "train", "loss", "synth"])?;

    let mut cfg = Configs {
        model: ModelConfig::default(),
        train: TrainConfig::default(),
        loss: LossConfig::default(),
        synth: SynthParams::default(),
    };
    if let Some(kvs) = kv.section("model") {
        model_from_kv(&mut cfg.model, kvs)?;
    }
    if let Some(kvs) = kv.section("train") {
        train_from_kv(&mut cfg.train, kvs)?;
    }
    if let Some(kvs) = kv.section("loss") {
        loss_from_kv(&mut cfg.loss, kvs)?;
    }
    if let Some(kvs) = kv.section("synth") {
        synth_from_kv(&mut cfg.synth, kvs)?;
    }

    if let Some(v) = &args.variant {
        cfg.model.variant = Variant::parse(v)?;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(t) = args.threshold {
        cfg.train.threshold = t;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.loss.validate()?;
    cfg.synth.validate()?;
    Ok(cfg)
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    n_train: usize,
    #[arg(long, default_value_t = 8)]
    n_test: usize,
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = load_configs(&args.cfg)?;
    let (nt, ns) = write_dataset::<f64>(&args.out, &cfg.synth, args.n_train, args.n_test)?;
    out!("train={nt} test={ns} dir={}", args.out.display());
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint; configs must match exactly.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Stop after this many optimizer steps (the schedule is unaffected).
    #[arg(long)]
    max_steps: Option<usize>,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_configs(&args.cfg)?;
    let ds: Dataset<f64> = load_dataset(&args.data)?;
    let mut model = Model::<f64>::build(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train(
        &mut model,
        &ds,
        &cfg.train,
        &cfg.loss,
        &args.out,
        args.checkpoint.as_deref(),
        args.max_steps,
    )?;
    out!(
        "variant={} steps={}/{} checkpoint={}",
        cfg.model.variant.as_str(),
        outcome.completed_iters,
        outcome.max_iter,
        outcome.final_checkpoint.display()
    );
    if let Some(report) = &outcome.last_report {
        for line in report.render_lines() {
            out!("{line}");
        }
    }
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory; the test split is scored (train when empty).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to score; it carries its model and loss configs.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override the stored decision threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write the report to <out>/eval_report.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn eval_split(ds: &Dataset<f64>) -> &[Sample<f64>] {
    if ds.test.is_empty() { &ds.train } else { &ds.test }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (mut model, tcfg, _lcfg, iter) = checkpoint::load_model::<f64>(&args.checkpoint)?;
    let ds: Dataset<f64> = load_dataset(&args.data)?;
    let threshold = args.threshold.unwrap_or(tcfg.threshold);
    let report = evaluate(&mut model, eval_split(&ds), threshold)?;
    let mut lines = vec![format!(
        "checkpoint={} step={iter} variant={} threshold={threshold}",
        args.checkpoint.display(),
        model.cfg.variant.as_str()
    )];
    lines.extend(report.render_lines());
    for line in &lines {
        out!("{line}");
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
        let path = out.join("eval_report.txt");
        std::fs::write(&path, lines.join("\n") + "\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for pred_<i>.pgm and overlay_<i>.ppm.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

/// Overlay legend: prediction-only red, truth-only green, agreement yellow,
/// everything else the dimmed source image.
fn overlay(backdrop: &TensorND<f64>, pred: &[bool], gt: &[bool]) -> TensorND<f64> {
    let (h, w) = (backdrop.shape()[1], backdrop.shape()[2]);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        let rgb = match (pred[i], gt[i]) {
            (true, true) => [1.0, 1.0, 0.0],
            (true, false) => [1.0, 0.0, 0.0],
            (false, true) => [0.0, 1.0, 0.0],
            (false, false) => [
                0.4 * backdrop.data()[i],
                0.4 * backdrop.data()[plane + i],
                0.4 * backdrop.data()[2 * plane + i],
            ],
        };
        for c in 0..3 {
            data[c * plane + i] = rgb[c];
        }
    }
    TensorND::new(vec![3, h, w], data).unwrap()
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let (mut model, tcfg, _lcfg, _iter) = checkpoint::load_model::<f64>(&args.checkpoint)?;
    let ds: Dataset<f64> = load_dataset(&args.data)?;
    let threshold = args.threshold.unwrap_or(tcfg.threshold);
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let samples = eval_split(&ds);
    for (i, sample) in samples.iter().enumerate() {
        let x = stack_batch(&[&sample.lr_image])?;
        let probs = model.forward_infer(&x)?;
        let (h, w) = (probs.shape()[2], probs.shape()[3]);
        let plane = h * w;
        let scores = &probs.data()[plane..2 * plane];
        let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();

        let mask_t = TensorND::new(
            vec![h, w],
            pred.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect(),
        )?;
        write_netpbm(&args.out.join(format!("pred_{i}.pgm")), &mask_t)?;

        let (gt_mask, backdrop) = if model.cfg.variant.has_interp() {
            (sample.hr_mask.clone(), &sample.hr_image)
        } else {
            (downsample_mask_majority(&sample.hr_mask)?, &sample.lr_image)
        };
        let gt: Vec<bool> = gt_mask.data().iter().map(|&v| v > 0.5).collect();
        let img = overlay(backdrop, &pred, &gt);
        write_netpbm(&args.out.join(format!("overlay_{i}.ppm")), &img)?;
    }
    out!("wrote {} predictions to {}", samples.len(), args.out.display());
    Ok(())
}

#[derive(Args)]
struct GradcheckArgs {
    /// Only run cases whose name contains this substring.
    #[arg(long)]
    filter: Option<String>,
    /// Random input draws per case.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Maximum allowed relative error against central differences.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Negative control: bias one analytic gradient so the run must fail.
    #[arg(long)]
    corrupt: bool,
    /// Skip the end-to-end whole-network check.
    #[arg(long)]
    ops_only: bool,
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let opts = CheckOpts {
        trials: args.trials,
        tol: args.tol,
        corrupt: args.corrupt,
        ..CheckOpts::default()
    };
    let outcomes = run_registry(args.filter.as_deref(), &opts)?;
    for o in &outcomes {
        out!("op {}: max_rel={:.3e} coords={}", o.name, o.max_rel, o.coords);
    }
    let mut total = outcomes.len();
    if args.filter.is_none() && !args.ops_only {
        let o = check_model_end_to_end(Variant::InterpSrMaf, 50, 1e-3, &opts)?;
        out!("op {}: max_rel={:.3e} coords={}", o.name, o.max_rel, o.coords);
        total += 1;
    }
    out!("all {total} gradient checks passed");
    Ok(())
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Output root; each run goes to <out>/<variant>_<seed>/.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

struct AblateRow {
    variant: Variant,
    seed: u64,
    dice: f64,
    iou: f64,
    recall: f64,
    auc_pr: f64,
}

fn run_one(
    cfg: &Configs,
    ds: &Dataset<f64>,
    out: &Path,
    variant: Variant,
    seed: u64,
) -> Result<AblateRow> {
    let mcfg = ModelConfig { variant, ..cfg.model.clone() };
    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let dir = out.join(format!("{}_{seed}", variant.as_str()));
    let mut model = Model::<f64>::build(mcfg, seed)?;
    let outcome = train(&mut model, ds, &tcfg, &cfg.loss, &dir, None, None)?;
    let report = match outcome.last_report {
        Some(r) => r,
        None => evaluate(&mut model, eval_split(ds), tcfg.threshold)?,
    };
    Ok(AblateRow {
        variant,
        seed,
        dice: report.mean_dice,
        iou: report.mean_iou,
        recall: report.mean_recall,
        auc_pr: report.mean_auc_pr,
    })
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn thread_cap(jobs: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = match std::env::var("SSMAF_THREADS") {
        Ok(v) => v.parse().unwrap_or(available),
        Err(_) => available,
    };
    cap.clamp(1, jobs.max(1))
}

const ALL_VARIANTS: [Variant; 4] = [
    Variant::Baseline,
    Variant::Interp,
    Variant::InterpSr,
    Variant::InterpSrMaf,
];

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    if args.seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let cfg = load_configs(&args.cfg)?;
    let ds: Dataset<f64> = load_dataset(&args.data)?;
    let jobs: Vec<(Variant, u64)> = ALL_VARIANTS
        .iter()
        .flat_map(|&v| args.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let workers = thread_cap(jobs.len());

    // Static round-robin assignment; every run owns its model and out dir,
    // so workers share nothing but the read-only dataset and configs.
    let mut rows: Vec<AblateRow> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for t in 0..workers {
            let jobs = &jobs;
            let cfg = &cfg;
            let ds = &ds;
            let out = &args.out;
            handles.push(scope.spawn(move || -> Result<Vec<AblateRow>> {
                let mut mine = Vec::new();
                for (variant, seed) in jobs.iter().skip(t).step_by(workers) {
                    mine.push(run_one(cfg, ds, out, *variant, *seed)?);
                }
                Ok(mine)
            }));
        }
        let mut rows = Vec::new();
        let mut first_err = None;
        for h in handles {
            match h.join().expect("ablation worker panicked") {
                Ok(mut r) => rows.append(&mut r),
                Err(e) => first_err = first_err.or(Some(e)),
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(rows),
        }
    })?;
    rows.sort_by_key(|r| (ALL_VARIANTS.iter().position(|&v| v == r.variant), r.seed));

    let mut lines = Vec::new();
    lines.push(format!(
        "{:<14} {:>8} {:>8} {:>8} {:>8}   (median over {} seeds)",
        "variant", "dice", "iou", "recall", "auc_pr", args.seeds.len()
    ));
    for variant in ALL_VARIANTS {
        let pick = |f: fn(&AblateRow) -> f64| -> f64 {
            let mut vals: Vec<f64> =
                rows.iter().filter(|r| r.variant == variant).map(f).collect();
            median(&mut vals)
        };
        lines.push(format!(
            "{:<14} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            variant.as_str(),
            pick(|r| r.dice),
            pick(|r| r.iou),
            pick(|r| r.recall),
            pick(|r| r.auc_pr),
        ));
    }
    lines.push(String::new());
    lines.push(format!("{:<14} {:>6} {:>8}", "variant", "seed", "dice"));
    for r in &rows {
        lines.push(format!("{:<14} {:>6} {:>8.4}", r.variant.as_str(), r.seed, r.dice));
    }
    for line in &lines {
        out!("{line}");
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let path = args.out.join("ablation.txt");
    std::fs::write(&path, lines.join("\n") + "\n")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
