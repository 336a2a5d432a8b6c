//! On-disk dataset layout and split handling.
//!
//! `<root>/images/<idx>.ppm` holds the low-res inputs, `<root>/hr/<idx>.ppm`
//! the high-res targets, `<root>/masks/<idx>.pgm` the lesion masks, and
//! `<root>/manifest.txt` lists `<idx> train|test` one per line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::netpbm::{read_netpbm, write_netpbm};
use crate::scalar::Scalar;
use crate::synth::{generate_sample, Sample, SynthParams};
use crate::tensor::TensorND;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Default)]
pub struct Dataset<S> {
    pub train: Vec<Sample<S>>,
    pub test: Vec<Sample<S>>,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

fn sample_paths(root: &Path, idx: u64) -> (PathBuf, PathBuf, PathBuf) {
    (
        root.join("images").join(format!("{idx}.ppm")),
        root.join("hr").join(format!("{idx}.ppm")),
        root.join("masks").join(format!("{idx}.pgm")),
    )
}

/// Generate `n_train + n_test` samples and write the full directory layout.
/// Returns the per-split counts.
pub fn write_dataset<S: Scalar>(
    root: &Path,
    params: &SynthParams,
    n_train: usize,
    n_test: usize,
) -> Result<(usize, usize)> {
    if n_train == 0 {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    params.validate()?;
    for sub in ["images", "hr", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    let mut manifest = String::new();
    for idx in 0..(n_train + n_test) as u64 {
        let split = if (idx as usize) < n_train { Split::Train } else { Split::Test };
        let sample: Sample<S> = generate_sample(params, idx)?;
        let (lr, hr, mask) = sample_paths(root, idx);
        write_netpbm(&lr, &sample.lr_image)?;
        write_netpbm(&hr, &sample.hr_image)?;
        write_netpbm(&mask, &sample.hr_mask)?;
        writeln!(manifest, "{idx} {}", split.as_str()).unwrap();
    }
    let mpath = root.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| io_err(&mpath, e))?;
    Ok((n_train, n_test))
}

/// Load a dataset directory back into memory. Loaded samples carry no
/// lesion geometry (that exists only at generation time).
pub fn load_dataset<S: Scalar>(root: &Path) -> Result<Dataset<S>> {
    let mpath = root.join("manifest.txt");
    let manifest = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let mut ds = Dataset { train: Vec::new(), test: Vec::new() };
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let idx: u64 = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format(format!("manifest line {}: bad index", lineno + 1)))?;
        let split = match parts.next() {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            other => {
                return Err(Error::Format(format!(
                    "manifest line {}: bad split {other:?}",
                    lineno + 1
                )))
            }
        };
        let (lr_p, hr_p, mask_p) = sample_paths(root, idx);
        let lr_image = read_netpbm(&lr_p)?;
        let hr_image = read_netpbm(&hr_p)?;
        let mask_raw: TensorND<S> = read_netpbm(&mask_p)?;
        let hr_mask = mask_raw.map(|v| if v.to_f64_c() >= 0.5 { S::one() } else { S::zero() });
        let sample = Sample { lr_image, hr_image, hr_mask, lesions: Vec::new() };
        match split {
            Split::Train => ds.train.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    if ds.train.is_empty() {
        return Err(Error::Format(format!(
            "manifest {} lists no training samples",
            mpath.display()
        )));
    }
    Ok(ds)
}

/// Expand a binary [H,W] mask into a one-hot [2,H,W] target
/// (channel 0 background, channel 1 foreground).
pub fn mask_to_one_hot<S: Scalar>(mask: &TensorND<S>) -> Result<TensorND<S>> {
    let shape = mask.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "mask must be rank 2 [H,W], got {shape:?}"
        )));
    }
    let n = mask.numel();
    let mut data = vec![S::zero(); 2 * n];
    for (i, &v) in mask.data().iter().enumerate() {
        if v == S::one() {
            data[n + i] = S::one();
        } else if v == S::zero() {
            data[i] = S::one();
        } else {
            return Err(Error::InvalidArgument(format!("mask value {v} is not binary")));
        }
    }
    TensorND::new(vec![2, shape[0], shape[1]], data)
}

/// Halve a binary mask by 2x2 block majority: blocks averaging >= 0.5
/// become foreground.
pub fn downsample_mask_majority<S: Scalar>(mask: &TensorND<S>) -> Result<TensorND<S>> {
    let shape = mask.shape();
    if shape.len() != 2 || shape[0] % 2 != 0 || shape[1] % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "majority downsample needs an even rank 2 mask, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let (oh, ow) = (h / 2, w / 2);
    let data = mask.data();
    let mut out = vec![S::zero(); oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let i = (2 * oy) * w + 2 * ox;
            let s = data[i].to_f64_c()
                + data[i + 1].to_f64_c()
                + data[i + w].to_f64_c()
                + data[i + w + 1].to_f64_c();
            if s >= 2.0 {
                out[oy * ow + ox] = S::one();
            }
        }
    }
    TensorND::new(vec![oh, ow], out)
}
