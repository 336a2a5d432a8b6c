//! Synthetic fundus-like images: a retina disc with radial falloff and
//! low-frequency tint noise, dark vessel curves, and bright irregular
//! lesions. Each sample is a (low-res input, high-res target, high-res
//! mask) triple where the low-res image is exactly the 2x2 block mean of
//! the high-res one.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::{sc, Scalar};
use crate::tensor::TensorND;

#[derive(Debug, Clone)]
pub struct SynthParams {
    /// High-resolution extents (height, width); both must be divisible by 4.
    pub hr_size: (usize, usize),
    pub lesion_count_range: (usize, usize),
    /// Base lesion radius range in HR pixels.
    pub lesion_radius_range: (f64, f64),
    pub vessel_count_range: (usize, usize),
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            hr_size: (128, 128),
            lesion_count_range: (1, 6),
            lesion_radius_range: (2.0, 12.0),
            vessel_count_range: (2, 5),
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.hr_size;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "hr_size {h}x{w} must be positive and divisible by 4"
            )));
        }
        if self.lesion_count_range.0 > self.lesion_count_range.1 {
            return Err(Error::InvalidArgument("empty lesion_count_range".into()));
        }
        if self.lesion_radius_range.0 > self.lesion_radius_range.1
            || self.lesion_radius_range.0 <= 0.0
        {
            return Err(Error::InvalidArgument("bad lesion_radius_range".into()));
        }
        if self.vessel_count_range.0 > self.vessel_count_range.1 {
            return Err(Error::InvalidArgument("empty vessel_count_range".into()));
        }
        Ok(())
    }
}

/// Boundary harmonics per lesion: rho(theta) = base_r * (1 + sum a_m cos(m theta + phi_m)).
pub const LESION_MODES: usize = 3;
/// Largest harmonic amplitude per mode; caps rho at base_r * (1 + 3 * 0.15).
pub const LESION_AMP_MAX: f64 = 0.15;

#[derive(Debug, Clone)]
pub struct LesionGeom {
    pub cy: f64,
    pub cx: f64,
    pub base_r: f64,
    pub amps: [f64; LESION_MODES],
    pub phases: [f64; LESION_MODES],
}

impl LesionGeom {
    /// Boundary radius in direction theta; modes start at m = 2.
    pub fn rho(&self, theta: f64) -> f64 {
        let mut m = 1.0;
        for i in 0..LESION_MODES {
            m += self.amps[i] * ((i as f64 + 2.0) * theta + self.phases[i]).cos();
        }
        self.base_r * m
    }

    pub fn max_rho(&self) -> f64 {
        self.base_r * (1.0 + self.amps.iter().sum::<f64>())
    }

    /// Membership test for the pixel center (y, x).
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let dist = (dy * dy + dx * dx).sqrt();
        dist <= self.rho(dy.atan2(dx))
    }
}

#[derive(Debug, Clone)]
pub struct Sample<S> {
    /// [3, H, W] network input.
    pub lr_image: TensorND<S>,
    /// [3, 2H, 2W] reconstruction target.
    pub hr_image: TensorND<S>,
    /// [2H, 2W] binary lesion mask.
    pub hr_mask: TensorND<S>,
    /// Geometry that produced the mask, kept for invariant checks.
    pub lesions: Vec<LesionGeom>,
}

/// Mean over non-overlapping 2x2 blocks along the two trailing axes.
pub fn downsample_area<S: Scalar>(hr: &TensorND<S>) -> Result<TensorND<S>> {
    let shape = hr.shape();
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch("downsample_area needs spatial axes".into()));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "downsample_area needs even extents, got {h}x{w}"
        )));
    }
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let data = hr.data();
    let quarter = sc::<S>(0.25);
    let mut out = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        let in_base = p * h * w;
        let out_base = p * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = in_base + (2 * oy) * w + 2 * ox;
                let s = data[i] + data[i + 1] + data[i + w] + data[i + w + 1];
                out[out_base + oy * ow + ox] = s * quarter;
            }
        }
    }
    let mut shape_out = shape.to_vec();
    let rank = shape_out.len();
    shape_out[rank - 2] = oh;
    shape_out[rank - 1] = ow;
    TensorND::new(shape_out, out)
}

struct Disc {
    cy: f64,
    cx: f64,
    radius: f64,
}

/// Deterministic sample generation: a pure function of (params.seed, index).
pub fn generate_sample<S: Scalar>(params: &SynthParams, index: u64) -> Result<Sample<S>> {
    params.validate()?;
    let (h, w) = params.hr_size;
    let mut rng = SplitMix64::for_stream(params.seed, index);
    let disc = Disc {
        cy: h as f64 / 2.0,
        cx: w as f64 / 2.0,
        radius: 0.48 * h.min(w) as f64,
    };

    // Three RGB base tones of a fundus-like backdrop.
    let base = [0.62 + 0.08 * rng.next_f64(), 0.28 + 0.08 * rng.next_f64(), 0.08 + 0.05 * rng.next_f64()];
    // Low-frequency tint: a few random plane waves per channel.
    let mut waves = [[0.0f64; 4]; 6];
    for wv in &mut waves {
        *wv = [
            rng.next_f64() * 2.0 * PI,
            (rng.next_f64() - 0.5) * 4.0 * PI / w as f64,
            (rng.next_f64() - 0.5) * 4.0 * PI / h as f64,
            0.02 + 0.03 * rng.next_f64(),
        ];
    }

    let mut img = vec![0.0f64; 3 * h * w];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - disc.cy;
            let dx = x as f64 - disc.cx;
            let r = (dy * dy + dx * dx).sqrt() / disc.radius;
            let inside = r <= 1.0;
            for c in 0..3 {
                let v = if inside {
                    let fall = 1.0 - 0.5 * r * r;
                    let ripple: f64 = waves[2 * c..2 * c + 2]
                        .iter()
                        .map(|wv| wv[3] * (wv[0] + wv[1] * x as f64 + wv[2] * y as f64).sin())
                        .sum();
                    (base[c] * fall + ripple).clamp(0.0, 1.0)
                } else {
                    0.02
                };
                img[c * plane + y * w + x] = v;
            }
        }
    }

    // Dark vessel curves: random quadratic arcs walked in small steps.
    let vessels = rng.uniform_usize(params.vessel_count_range.0, params.vessel_count_range.1);
    for _ in 0..vessels {
        let ang0 = rng.next_f64() * 2.0 * PI;
        let mut y = disc.cy + 0.2 * disc.radius * (rng.next_f64() - 0.5);
        let mut x = disc.cx + 0.2 * disc.radius * (rng.next_f64() - 0.5);
        let mut ang = ang0;
        let curvature = (rng.next_f64() - 0.5) * 0.2;
        let steps = (1.6 * disc.radius) as usize;
        let dark = 0.35 + 0.2 * rng.next_f64();
        for _ in 0..steps {
            y += ang.sin();
            x += ang.cos();
            ang += curvature;
            let (yi, xi) = (y.round() as isize, x.round() as isize);
            for (oy, ox) in [(0isize, 0isize), (0, 1), (1, 0)] {
                let (py, px) = (yi + oy, xi + ox);
                if py < 0 || px < 0 || py >= h as isize || px >= w as isize {
                    continue;
                }
                let dyc = py as f64 - disc.cy;
                let dxc = px as f64 - disc.cx;
                if (dyc * dyc + dxc * dxc).sqrt() > disc.radius {
                    continue;
                }
                for c in 0..3 {
                    let i = c * plane + py as usize * w + px as usize;
                    img[i] *= 1.0 - dark;
                }
            }
        }
    }

    // Lesions: bright blobs with harmonic boundary modulation. The first one
    // is pinned to the minimum radius so every sample carries a tiny lesion.
    let count = rng.uniform_usize(params.lesion_count_range.0, params.lesion_count_range.1);
    let (r_min, r_max) = params.lesion_radius_range;
    let mut lesions = Vec::with_capacity(count);
    for li in 0..count {
        let base_r = if li == 0 { r_min } else { r_min + (r_max - r_min) * rng.next_f64() };
        let max_extent = base_r * (1.0 + LESION_MODES as f64 * LESION_AMP_MAX);
        let margin = (disc.radius - max_extent - 2.0).max(1.0);
        let ang = rng.next_f64() * 2.0 * PI;
        let dist = margin * rng.next_f64().sqrt();
        let mut amps = [0.0; LESION_MODES];
        let mut phases = [0.0; LESION_MODES];
        for m in 0..LESION_MODES {
            amps[m] = rng.next_f64() * LESION_AMP_MAX;
            phases[m] = rng.next_f64() * 2.0 * PI;
        }
        lesions.push(LesionGeom {
            cy: disc.cy + dist * ang.sin(),
            cx: disc.cx + dist * ang.cos(),
            base_r,
            amps,
            phases,
        });
    }

    let mut mask = vec![0.0f64; plane];
    for lesion in &lesions {
        let reach = lesion.max_rho() + 1.0;
        let y0 = (lesion.cy - reach).floor().max(0.0) as usize;
        let y1 = ((lesion.cy + reach).ceil() as usize).min(h - 1);
        let x0 = (lesion.cx - reach).floor().max(0.0) as usize;
        let x1 = ((lesion.cx + reach).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if lesion.contains(y as f64, x as f64) {
                    mask[y * w + x] = 1.0;
                    let dyc = y as f64 - lesion.cy;
                    let dxc = x as f64 - lesion.cx;
                    let dist = (dyc * dyc + dxc * dxc).sqrt();
                    let rho = lesion.rho(dyc.atan2(dxc)).max(1e-9);
                    let shade = 1.0 - 0.35 * (dist / rho);
                    let i = y * w + x;
                    img[i] = (img[i].max(0.75) + 0.2 * shade).clamp(0.0, 1.0);
                    img[plane + i] = (img[plane + i].max(0.7) + 0.25 * shade).clamp(0.0, 1.0);
                    img[2 * plane + i] = (img[2 * plane + i].max(0.35) * shade).clamp(0.0, 1.0);
                }
            }
        }
    }

    let hr_image = TensorND::new(vec![3, h, w], img.iter().map(|&v| sc::<S>(v)).collect())?;
    let hr_mask = TensorND::new(vec![h, w], mask.iter().map(|&v| sc::<S>(v)).collect())?;
    let lr_image = downsample_area(&hr_image)?;
    Ok(Sample { lr_image, hr_image, hr_mask, lesions })
}
