//! Binary NetPBM image files: P5 grayscale for masks, P6 color for images.
//! Maxval is fixed at 255; tensors live in [0,1] and quantize by
//! round(v * 255) on write.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::TensorND;

fn quantize<S: Scalar>(v: S) -> u8 {
    let x = v.to_f64_c();
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Serialize to PGM (rank 2 [H,W]) or PPM (rank 3 [3,H,W]) bytes.
pub fn encode<S: Scalar>(tensor: &TensorND<S>) -> Result<Vec<u8>> {
    let shape = tensor.shape();
    let (magic, channels, h, w) = match shape {
        [h, w] => ("P5", 1usize, *h, *w),
        [3, h, w] => ("P6", 3usize, *h, *w),
        other => {
            return Err(Error::Format(format!(
                "netpbm supports [H,W] or [3,H,W] tensors, got {other:?}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let data = tensor.data();
    let plane = h * w;
    for p in 0..plane {
        for c in 0..channels {
            out.push(quantize(data[c * plane + p]));
        }
    }
    Ok(out)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    /// Next whitespace-delimited token, skipping '#' comments.
    fn token(&mut self) -> Result<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::Format("non-ascii netpbm header".into()))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::Format(format!("invalid {what} {tok:?} in netpbm header")))
    }
}

/// Parse P5/P6 bytes into a [H,W] or [3,H,W] tensor scaled to [0,1].
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<TensorND<S>> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let magic = cur.token()?;
    let channels = match magic {
        "P5" => 1usize,
        "P6" => 3usize,
        other => return Err(Error::Format(format!("unsupported netpbm magic {other:?}"))),
    };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported netpbm maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("degenerate netpbm dimensions {w}x{h}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let body_start = cur.pos + 1;
    let need = h * w * channels;
    if bytes.len() < body_start || bytes.len() - body_start < need {
        return Err(Error::Format(format!(
            "truncated netpbm body: need {need} bytes, have {}",
            bytes.len().saturating_sub(body_start)
        )));
    }
    let body = &bytes[body_start..body_start + need];
    let plane = h * w;
    let mut data = vec![S::zero(); need];
    for p in 0..plane {
        for c in 0..channels {
            data[c * plane + p] = sc::<S>(body[p * channels + c] as f64 / 255.0);
        }
    }
    let shape = if channels == 1 { vec![h, w] } else { vec![3, h, w] };
    TensorND::new(shape, data)
}

pub fn write_netpbm<S: Scalar>(path: &Path, tensor: &TensorND<S>) -> Result<()> {
    let bytes = encode(tensor)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_netpbm<S: Scalar>(path: &Path) -> Result<TensorND<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
