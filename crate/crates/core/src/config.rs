//! Sectioned key=value configuration text, shared by the CLI config files
//! and the checkpoint header. Deterministic serialization: sections and
//! keys come out sorted.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, Variant};
use crate::synth::SynthParams;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `[section]` headers and `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<KvConfig> {
        let mut cfg = KvConfig::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Format(format!("line {}: unclosed section", lineno + 1)))?;
                section = name.trim().to_string();
                if section.is_empty() {
                    return Err(Error::Format(format!("line {}: empty section name", lineno + 1)));
                }
                cfg.sections.entry(section.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format(format!(
                    "line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            if section.is_empty() {
                return Err(Error::Format(format!(
                    "line {}: key=value before any [section]",
                    lineno + 1
                )));
            }
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Format(format!("line {}: empty key", lineno + 1)));
            }
            cfg.sections
                .get_mut(&section)
                .unwrap()
                .insert(key.to_string(), value.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (section, kv) in &self.sections {
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in kv {
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        out
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn section(&self, name: &str) -> Option<&BTreeMap<String, String>> {
        self.sections.get(name)
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    /// Reject any section outside `allowed`.
    pub fn check_sections(&self, allowed: &[&str]) -> Result<()> {
        for name in self.sections.keys() {
            if !allowed.contains(&name.as_str()) {
                return Err(Error::Format(format!(
                    "unknown config section [{name}] (expected one of {allowed:?})"
                )));
            }
        }
        Ok(())
    }

    /// Apply `section.key=value` (used for command-line overrides).
    pub fn set_path(&mut self, path: &str, value: &str) -> Result<()> {
        let Some((section, key)) = path.split_once('.') else {
            return Err(Error::InvalidArgument(format!(
                "override key {path:?} must look like section.key"
            )));
        };
        self.set(section, key, value);
        Ok(())
    }
}

fn parse_as<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Format(format!("[{section}] {key}={value:?} is not a valid value"))
    })
}

macro_rules! apply_keys {
    ($section:expr, $kv:expr, $($key:literal => $slot:expr),+ $(,)?) => {
        for (k, v) in $kv {
            match k.as_str() {
                $($key => $slot = parse_as($section, k, v)?,)+
                other => {
                    return Err(Error::Format(format!(
                        "unknown key {other:?} in [{}]", $section
                    )))
                }
            }
        }
    };
}

pub fn model_from_kv(cfg: &mut ModelConfig, kv: &BTreeMap<String, String>) -> Result<()> {
    for (k, v) in kv {
        match k.as_str() {
            "in_channels" => cfg.in_channels = parse_as("model", k, v)?,
            "num_classes" => cfg.num_classes = parse_as("model", k, v)?,
            "upscale" => cfg.upscale = parse_as("model", k, v)?,
            "base_width" => cfg.base_width = parse_as("model", k, v)?,
            "depth" => cfg.depth = parse_as("model", k, v)?,
            "fusion_dim" => cfg.fusion_dim = parse_as("model", k, v)?,
            "ssc_groups" => cfg.ssc_groups = parse_as("model", k, v)?,
            "variant" => cfg.variant = Variant::parse(v)?,
            other => return Err(Error::Format(format!("unknown key {other:?} in [model]"))),
        }
    }
    cfg.validate()
}

pub fn model_to_kv(cfg: &ModelConfig, out: &mut KvConfig) {
    out.set("model", "in_channels", cfg.in_channels);
    out.set("model", "num_classes", cfg.num_classes);
    out.set("model", "upscale", cfg.upscale);
    out.set("model", "base_width", cfg.base_width);
    out.set("model", "depth", cfg.depth);
    out.set("model", "fusion_dim", cfg.fusion_dim);
    out.set("model", "ssc_groups", cfg.ssc_groups);
    out.set("model", "variant", cfg.variant.as_str());
}

pub fn train_from_kv(cfg: &mut TrainConfig, kv: &BTreeMap<String, String>) -> Result<()> {
    apply_keys!("train", kv,
        "init_lr" => cfg.init_lr,
        "power" => cfg.power,
        "momentum" => cfg.momentum,
        "weight_decay" => cfg.weight_decay,
        "epochs" => cfg.epochs,
        "batch_size" => cfg.batch_size,
        "seed" => cfg.seed,
        "eval_every" => cfg.eval_every,
        "threshold" => cfg.threshold,
    );
    cfg.validate()
}

pub fn train_to_kv(cfg: &TrainConfig, out: &mut KvConfig) {
    out.set("train", "init_lr", cfg.init_lr);
    out.set("train", "power", cfg.power);
    out.set("train", "momentum", cfg.momentum);
    out.set("train", "weight_decay", cfg.weight_decay);
    out.set("train", "epochs", cfg.epochs);
    out.set("train", "batch_size", cfg.batch_size);
    out.set("train", "seed", cfg.seed);
    out.set("train", "eval_every", cfg.eval_every);
    out.set("train", "threshold", cfg.threshold);
}

pub fn loss_from_kv(cfg: &mut LossConfig, kv: &BTreeMap<String, String>) -> Result<()> {
    apply_keys!("loss", kv,
        "beta" => cfg.cbce.beta,
        "rmi_radius" => cfg.rmi.radius,
        "rmi_downsample_stride" => cfg.rmi.downsample_stride,
        "rmi_eps" => cfg.rmi.eps,
        "rmi_lambda" => cfg.rmi.lambda,
    );
    cfg.validate()
}

pub fn loss_to_kv(cfg: &LossConfig, out: &mut KvConfig) {
    out.set("loss", "beta", cfg.cbce.beta);
    out.set("loss", "rmi_radius", cfg.rmi.radius);
    out.set("loss", "rmi_downsample_stride", cfg.rmi.downsample_stride);
    out.set("loss", "rmi_eps", cfg.rmi.eps);
    out.set("loss", "rmi_lambda", cfg.rmi.lambda);
}

pub fn synth_from_kv(cfg: &mut SynthParams, kv: &BTreeMap<String, String>) -> Result<()> {
    apply_keys!("synth", kv,
        "hr_height" => cfg.hr_size.0,
        "hr_width" => cfg.hr_size.1,
        "lesions_min" => cfg.lesion_count_range.0,
        "lesions_max" => cfg.lesion_count_range.1,
        "radius_min" => cfg.lesion_radius_range.0,
        "radius_max" => cfg.lesion_radius_range.1,
        "vessels_min" => cfg.vessel_count_range.0,
        "vessels_max" => cfg.vessel_count_range.1,
        "seed" => cfg.seed,
    );
    cfg.validate()
}

pub fn synth_to_kv(cfg: &SynthParams, out: &mut KvConfig) {
    out.set("synth", "hr_height", cfg.hr_size.0);
    out.set("synth", "hr_width", cfg.hr_size.1);
    out.set("synth", "lesions_min", cfg.lesion_count_range.0);
    out.set("synth", "lesions_max", cfg.lesion_count_range.1);
    out.set("synth", "radius_min", cfg.lesion_radius_range.0);
    out.set("synth", "radius_max", cfg.lesion_radius_range.1);
    out.set("synth", "vessels_min", cfg.vessel_count_range.0);
    out.set("synth", "vessels_max", cfg.vessel_count_range.1);
    out.set("synth", "seed", cfg.seed);
}

/// The checkpoint header: model, train, and loss sections plus the
/// completed-step counter under [state].
pub fn checkpoint_header(
    model: &ModelConfig,
    train: &TrainConfig,
    loss: &LossConfig,
    iter: usize,
) -> String {
    let mut kv = KvConfig::new();
    model_to_kv(model, &mut kv);
    train_to_kv(train, &mut kv);
    loss_to_kv(loss, &mut kv);
    kv.set("state", "iter", iter);
    kv.serialize()
}

/// Parse a checkpoint header back into configs and the step counter.
pub fn parse_checkpoint_header(
    text: &str,
) -> Result<(ModelConfig, TrainConfig, LossConfig, usize)> {
    let kv = KvConfig::parse(text)?;
    kv.check_sections(&["model", "train", "loss", "state"])?;
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    let mut loss = LossConfig::default();
    if let Some(s) = kv.section("model") {
        model_from_kv(&mut model, s)?;
    }
    if let Some(s) = kv.section("train") {
        train_from_kv(&mut train, s)?;
    }
    if let Some(s) = kv.section("loss") {
        loss_from_kv(&mut loss, s)?;
    }
    let iter = match kv.get("state", "iter") {
        Some(v) => parse_as("state", "iter", v)?,
        None => 0,
    };
    Ok((model, train, loss, iter))
}
