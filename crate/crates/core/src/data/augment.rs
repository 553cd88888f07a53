//! The augmentation distribution: stochastic crop/flip sampling and the
//! exactly enumerable policies (flip group, quarter-turn group, scales).
//!
//! A transform is applied as crop, bilinear resize (corner-aligned), then
//! `quarter_turns` counter-clockwise rotations, then an optional horizontal
//! flip.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_CROP_FRACTION: f64 = 0.875;
pub const DEFAULT_SCALE_RANGE: (f64, f64) = (0.6, 1.0);
const ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentationPolicy {
    /// Centered square-ish crop of `fraction` of each side, resized to
    /// `output_size`.
    CentralCrop {
        fraction: f64,
        output_size: usize,
    },
    /// Crop covering a uniform `[s_lo, s_hi]` fraction of the source area
    /// with aspect ratio in `[3/4, 4/3]`, resized, flipped with probability
    /// one half.
    RandomResizedCropFlip {
        s_lo: f64,
        s_hi: f64,
        output_size: usize,
    },
    FlipGroup,
    Rot90Group,
    /// Full image resized by each factor relative to its native size.
    MultiScale {
        scales: Vec<f64>,
    },
}

impl AugmentationPolicy {
    pub fn central_crop(output_size: usize) -> Self {
        Self::CentralCrop {
            fraction: DEFAULT_CROP_FRACTION,
            output_size,
        }
    }

    pub fn random_resized_crop_flip(output_size: usize) -> Self {
        Self::RandomResizedCropFlip {
            s_lo: DEFAULT_SCALE_RANGE.0,
            s_hi: DEFAULT_SCALE_RANGE.1,
            output_size,
        }
    }

    pub fn multi_scale_default() -> Self {
        Self::MultiScale {
            scales: vec![
                std::f64::consts::FRAC_1_SQRT_2,
                1.0,
                std::f64::consts::SQRT_2,
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPolicy(m));
        match self {
            Self::CentralCrop {
                fraction,
                output_size,
            } => {
                if !(*fraction > 0.0 && *fraction <= 1.0) {
                    return bad(format!("crop fraction {fraction} not in (0, 1]"));
                }
                if *output_size == 0 {
                    return bad("output size 0".into());
                }
            }
            Self::RandomResizedCropFlip {
                s_lo,
                s_hi,
                output_size,
            } => {
                if !(*s_lo > 0.0 && s_lo <= s_hi && *s_hi <= 1.0) {
                    return bad(format!(
                        "scale range [{s_lo}, {s_hi}] violates 0 < lo <= hi <= 1"
                    ));
                }
                if *output_size == 0 {
                    return bad("output size 0".into());
                }
            }
            Self::FlipGroup | Self::Rot90Group => {}
            Self::MultiScale { scales } => {
                if scales.is_empty() {
                    return bad("no scales".into());
                }
                if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
                    return bad(format!("scale {s}"));
                }
            }
        }
        Ok(())
    }

    /// True when sampling ignores randomness entirely.
    pub fn is_deterministic(&self) -> bool {
        matches!(self, Self::CentralCrop { .. })
    }

    pub fn is_enumerable(&self) -> bool {
        matches!(
            self,
            Self::FlipGroup | Self::Rot90Group | Self::MultiScale { .. }
        )
    }

    /// Compact description stored alongside checkpoints and reports.
    pub fn descriptor(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for AugmentationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::CentralCrop {
                fraction,
                output_size,
            } => write!(f, "central_crop(fraction={fraction},out={output_size})"),
            Self::RandomResizedCropFlip {
                s_lo,
                s_hi,
                output_size,
            } => write!(
                f,
                "random_resized_crop_flip(scale={s_lo}..{s_hi},out={output_size})"
            ),
            Self::FlipGroup => f.write_str("flip_group"),
            Self::Rot90Group => f.write_str("rot90_group"),
            Self::MultiScale { scales } => {
                let s: Vec<String> = scales.iter().map(|s| format!("{s:.4}")).collect();
                write!(f, "multi_scale({})", s.join(","))
            }
        }
    }
}

/// One concrete augmentation of a source image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TransformParams {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub flip: bool,
    /// Counter-clockwise quarter turns, applied after resizing.
    pub quarter_turns: u8,
    pub out_h: usize,
    pub out_w: usize,
}

impl TransformParams {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            w,
            h,
            flip: false,
            quarter_turns: 0,
            out_h: h,
            out_w: w,
        }
    }

    fn is_full_frame(&self, h: usize, w: usize) -> bool {
        self.x0 == 0
            && self.y0 == 0
            && self.w == w
            && self.h == h
            && self.out_h == h
            && self.out_w == w
    }

    /// `self` followed by `next`, for full-frame flip/rotation transforms
    /// of a square `size`² image. `None` when either transform crops or
    /// resizes.
    pub fn then(&self, next: &TransformParams, size: usize) -> Option<TransformParams> {
        if !self.is_full_frame(size, size) || !next.is_full_frame(size, size) {
            return None;
        }
        // x -> F^f R^r x; R^r2 F^f1 = F^f1 R^(-r2) when f1 is set
        let r2 = if self.flip {
            (4 - next.quarter_turns % 4) % 4
        } else {
            next.quarter_turns % 4
        };
        Some(TransformParams {
            flip: self.flip ^ next.flip,
            quarter_turns: (self.quarter_turns + r2) % 4,
            ..*self
        })
    }
}

fn full_frame(h: usize, w: usize, flip: bool, quarter_turns: u8) -> TransformParams {
    TransformParams {
        flip,
        quarter_turns,
        ..TransformParams::identity(h, w)
    }
}

fn scaled(h: usize, w: usize, scale: f64) -> TransformParams {
    let out = |n: usize| ((n as f64 * scale).round() as usize).max(1);
    TransformParams {
        out_h: out(h),
        out_w: out(w),
        ..TransformParams::identity(h, w)
    }
}

fn central_box(h: usize, w: usize, fraction: f64, output_size: usize) -> TransformParams {
    let side = |n: usize| ((n as f64 * fraction).round() as usize).clamp(1, n);
    let (bw, bh) = (side(w), side(h));
    TransformParams {
        x0: (w - bw) / 2,
        y0: (h - bh) / 2,
        w: bw,
        h: bh,
        flip: false,
        quarter_turns: 0,
        out_h: output_size,
        out_w: output_size,
    }
}

/// Exact member list of an enumerable policy for an `h`×`w` source.
pub fn enumerate_group(
    policy: &AugmentationPolicy,
    h: usize,
    w: usize,
) -> Result<Vec<TransformParams>> {
    policy.validate()?;
    match policy {
        AugmentationPolicy::FlipGroup => {
            Ok(vec![full_frame(h, w, false, 0), full_frame(h, w, true, 0)])
        }
        AugmentationPolicy::Rot90Group => Ok((0..4).map(|r| full_frame(h, w, false, r)).collect()),
        AugmentationPolicy::MultiScale { scales } => {
            Ok(scales.iter().map(|&s| scaled(h, w, s)).collect())
        }
        other => Err(Error::NotEnumerable(other.descriptor())),
    }
}

/// Draws the `sample_index`-th augmentation of image `image_index`. A pure
/// function of its arguments; enumerable policies cycle through members.
pub fn sample_transform(
    policy: &AugmentationPolicy,
    src_h: usize,
    src_w: usize,
    global_seed: u64,
    image_index: u64,
    sample_index: u64,
) -> TransformParams {
    match policy {
        AugmentationPolicy::CentralCrop {
            fraction,
            output_size,
        } => central_box(src_h, src_w, *fraction, *output_size),
        AugmentationPolicy::RandomResizedCropFlip {
            s_lo,
            s_hi,
            output_size,
        } => {
            let mut r = rng::stream(global_seed, &[image_index, sample_index]);
            let area = (src_h * src_w) as f64;
            let (ln_lo, ln_hi) = (ASPECT_RANGE.0.ln(), ASPECT_RANGE.1.ln());
            let mut crop = None;
            for _ in 0..CROP_ATTEMPTS {
                let target = area
                    * if s_lo < s_hi {
                        r.gen_range(*s_lo..=*s_hi)
                    } else {
                        *s_lo
                    };
                let ratio = r.gen_range(ln_lo..=ln_hi).exp();
                let w = (target * ratio).sqrt().round() as usize;
                let h = (target / ratio).sqrt().round() as usize;
                if (1..=src_w).contains(&w) && (1..=src_h).contains(&h) {
                    let x0 = r.gen_range(0..=src_w - w);
                    let y0 = r.gen_range(0..=src_h - h);
                    crop = Some((x0, y0, w, h));
                    break;
                }
            }
            let (x0, y0, w, h) = crop.unwrap_or((0, 0, src_w, src_h));
            TransformParams {
                x0,
                y0,
                w,
                h,
                flip: r.gen_bool(0.5),
                quarter_turns: 0,
                out_h: *output_size,
                out_w: *output_size,
            }
        }
        AugmentationPolicy::FlipGroup => full_frame(src_h, src_w, sample_index % 2 == 1, 0),
        AugmentationPolicy::Rot90Group => full_frame(src_h, src_w, false, (sample_index % 4) as u8),
        AugmentationPolicy::MultiScale { scales } => scaled(
            src_h,
            src_w,
            scales[(sample_index % scales.len() as u64) as usize],
        ),
    }
}

fn resize_bilinear(plane: &[f32], t: &TransformParams, src_w: usize) -> Vec<f32> {
    // corner-aligned source coordinate of output index j
    let coord = |j: usize, out: usize, len: usize, start: usize| -> (usize, usize, f64) {
        let pos = if out > 1 {
            j as f64 * (len - 1) as f64 / (out - 1) as f64
        } else {
            (len - 1) as f64 / 2.0
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (start + lo, start + hi, pos - lo as f64)
    };
    let xs: Vec<_> = (0..t.out_w).map(|j| coord(j, t.out_w, t.w, t.x0)).collect();
    let mut out = Vec::with_capacity(t.out_h * t.out_w);
    for i in 0..t.out_h {
        let (y0, y1, fy) = coord(i, t.out_h, t.h, t.y0);
        for &(x0, x1, fx) in &xs {
            let p = |y: usize, x: usize| plane[y * src_w + x] as f64;
            let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
            let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
            out.push((top + (bottom - top) * fy) as f32);
        }
    }
    out
}

fn rotate_ccw(plane: &[f32], h: usize, w: usize) -> Vec<f32> {
    // new[i][j] = old[j][w - 1 - i], new shape w x h
    let mut out = Vec::with_capacity(h * w);
    for i in 0..w {
        for j in 0..h {
            out.push(plane[j * w + (w - 1 - i)]);
        }
    }
    out
}

pub fn apply_transform(image: &Tensor, t: &TransformParams) -> Result<Tensor> {
    let (c, src_h, src_w) = image.dims3()?;
    if t.w == 0
        || t.h == 0
        || t.x0 + t.w > src_w
        || t.y0 + t.h > src_h
        || t.out_h == 0
        || t.out_w == 0
    {
        return Err(Error::InvalidBox {
            x0: t.x0,
            y0: t.y0,
            w: t.w,
            h: t.h,
            src_w,
            src_h,
        });
    }
    let identity_resize = t.is_full_frame(src_h, src_w);
    let mut data = Vec::with_capacity(c * t.out_h * t.out_w);
    let (mut h, mut w) = (t.out_h, t.out_w);
    for plane in image.data().chunks(src_h * src_w) {
        let mut p = if identity_resize {
            plane.to_vec()
        } else {
            resize_bilinear(plane, t, src_w)
        };
        let (mut ph, mut pw) = (t.out_h, t.out_w);
        for _ in 0..t.quarter_turns % 4 {
            p = rotate_ccw(&p, ph, pw);
            std::mem::swap(&mut ph, &mut pw);
        }
        if t.flip {
            p.chunks_mut(pw).for_each(|row| row.reverse());
        }
        (h, w) = (ph, pw);
        data.extend(p);
    }
    Tensor::new(vec![c, h, w], data)
}
