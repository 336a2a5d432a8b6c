//! Binary checkpoints: a text config header plus a named tensor table
//! holding every model parameter, the batch-norm running statistics, and
//! the optimizer momentum buffers, so a resumed run continues bit-exactly.
//!
//! Layout, all integers little-endian:
//!   magic "SSMAF\0" | version u32 | cfg_len u32 | cfg bytes | n_tensors u32
//!   then per tensor: name_len u32 | name | rank u32 | extent u64 * rank |
//!   value f64 * product(extents)

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{checkpoint_header, parse_checkpoint_header};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Model, ModelConfig};
use crate::scalar::{sc, Scalar};
use crate::tensor::TensorND;
use crate::trainer::{OptimizerState, TrainConfig};

const MAGIC: &[u8; 6] = b"SSMAF\0";
const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "opt/velocity/";

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("{}: truncated checkpoint", self.path)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    push_u32(out, shape.len() as u32);
    for &e in shape {
        push_u64(out, e as u64);
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize the model, optimizer state, and configs at `iter` completed
/// steps.
pub fn save<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    opt: &OptimizerState<S>,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    iter: usize,
) -> Result<()> {
    let header = checkpoint_header(&model.cfg, tcfg, lcfg, iter);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, header.len() as u32);
    out.extend_from_slice(header.as_bytes());

    let n_params = model.store.len();
    let n_vel = opt.velocity.len();
    push_u32(&mut out, (n_params + n_vel) as u32);
    for (name, param) in model.store.iter() {
        let data: Vec<f64> = param.tensor.data().iter().map(|v| v.to_f64_c()).collect();
        push_tensor(&mut out, name, param.tensor.shape(), &data);
    }
    for (name, vel) in &opt.velocity {
        let shape = model
            .store
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?
            .tensor
            .shape()
            .to_vec();
        let data: Vec<f64> = vel.iter().map(|v| v.to_f64_c()).collect();
        push_tensor(&mut out, &format!("{VELOCITY_PREFIX}{name}"), &shape, &data);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Everything a checkpoint file holds, with tensors still keyed by name.
pub struct Loaded<S: Scalar> {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub iter: usize,
    pub tensors: BTreeMap<String, TensorND<S>>,
}

pub fn read<S: Scalar>(path: &Path) -> Result<Loaded<S>> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    let magic = cur.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", cur.path)));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            cur.path
        )));
    }
    let cfg_len = cur.u32()? as usize;
    let header = std::str::from_utf8(cur.take(cfg_len)?)
        .map_err(|_| Error::Format(format!("{}: config header is not UTF-8", cur.path)))?
        .to_string();
    let (model_cfg, train_cfg, loss_cfg, iter) = parse_checkpoint_header(&header)?;

    let n_tensors = cur.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format(format!("{}: tensor name is not UTF-8", cur.path)))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(sc::<S>(cur.f64()?));
        }
        if tensors.insert(name.clone(), TensorND::new(shape, data)?).is_some() {
            return Err(Error::Format(format!(
                "{}: duplicate tensor {name:?}",
                cur.path
            )));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after tensor table",
            cur.path,
            bytes.len() - cur.pos
        )));
    }
    Ok(Loaded {
        model_cfg,
        train_cfg,
        loss_cfg,
        iter,
        tensors,
    })
}

fn copy_into<S: Scalar>(
    name: &str,
    src: &TensorND<S>,
    dst: &mut TensorND<S>,
    path: &Path,
) -> Result<()> {
    if src.shape() != dst.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{}: tensor {name:?} has shape {:?}, expected {:?}",
            path.display(),
            src.shape(),
            dst.shape()
        )));
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

/// Restore model parameters and optimizer state for a resumed run. The
/// stored configs must match the live ones exactly; returns the number of
/// completed steps.
pub fn load_into<S: Scalar>(
    path: &Path,
    model: &mut Model<S>,
    opt: &mut OptimizerState<S>,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<usize> {
    let loaded: Loaded<S> = read(path)?;
    if loaded.model_cfg != model.cfg {
        return Err(Error::InvalidArgument(format!(
            "{}: checkpoint model config does not match (stored variant {}, live {})",
            path.display(),
            loaded.model_cfg.variant.as_str(),
            model.cfg.variant.as_str()
        )));
    }
    if &loaded.train_cfg != tcfg {
        return Err(Error::InvalidArgument(format!(
            "{}: checkpoint training config does not match the requested one",
            path.display()
        )));
    }
    if &loaded.loss_cfg != lcfg {
        return Err(Error::InvalidArgument(format!(
            "{}: checkpoint loss config does not match the requested one",
            path.display()
        )));
    }
    restore_params(path, &loaded, model)?;
    for (name, vel) in opt.velocity.iter_mut() {
        let key = format!("{VELOCITY_PREFIX}{name}");
        let src = loaded.tensors.get(&key).ok_or_else(|| {
            Error::Format(format!("{}: missing tensor {key:?}", path.display()))
        })?;
        if src.numel() != vel.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}: tensor {key:?} has {} values, expected {}",
                path.display(),
                src.numel(),
                vel.len()
            )));
        }
        vel.copy_from_slice(src.data());
    }
    let expected = model.store.len() + opt.velocity.len();
    if loaded.tensors.len() != expected {
        return Err(Error::Format(format!(
            "{}: checkpoint holds {} tensors, expected {expected}",
            path.display(),
            loaded.tensors.len()
        )));
    }
    Ok(loaded.iter)
}

fn restore_params<S: Scalar>(path: &Path, loaded: &Loaded<S>, model: &mut Model<S>) -> Result<()> {
    let names: Vec<String> = model.store.names().map(String::from).collect();
    for name in names {
        let src = loaded.tensors.get(&name).ok_or_else(|| {
            Error::Format(format!("{}: missing tensor {name:?}", path.display()))
        })?;
        let dst = &mut model.store.get_mut(&name).unwrap().tensor;
        copy_into(&name, src, dst, path)?;
    }
    Ok(())
}

/// Rebuild a model (plus its stored configs and step counter) from a
/// checkpoint, for inference and evaluation. Optimizer tensors are ignored.
pub fn load_model<S: Scalar>(
    path: &Path,
) -> Result<(Model<S>, TrainConfig, LossConfig, usize)> {
    let loaded: Loaded<S> = read(path)?;
    let mut model = Model::build(loaded.model_cfg.clone(), 0)?;
    restore_params(path, &loaded, &mut model)?;
    Ok((model, loaded.train_cfg, loaded.loss_cfg, loaded.iter))
}
