//! Multi-crop augmentation: two global views and any number of local views
//! per sample.

use serde::{Deserialize, Serialize};

use crate::data::DataLayout;
use crate::numerics::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewsConfig {
    pub n_local: usize,
    /// Area fraction range of global crops (keep fraction in vector mode).
    pub global_scale: [f64; 2],
    pub local_scale: [f64; 2],
    /// Side length of local image views; 0 means half the image size.
    pub local_size: usize,
    pub flip: bool,
    pub color_jitter: bool,
    /// Additive noise standard deviation for vector views.
    pub jitter_std: f64,
}

impl Default for ViewsConfig {
    fn default() -> Self {
        Self {
            n_local: 10,
            global_scale: [0.25, 1.0],
            local_scale: [0.05, 0.25],
            local_size: 0,
            flip: true,
            color_jitter: false,
            jitter_std: 0.1,
        }
    }
}

impl ViewsConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, [lo, hi]) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(format!("{name} must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
            }
        }
        if self.jitter_std < 0.0 {
            return Err("jitter_std must be >= 0".into());
        }
        Ok(())
    }

    pub fn local_size_for(&self, size: usize) -> usize {
        if self.local_size == 0 {
            (size / 2).max(1)
        } else {
            self.local_size
        }
    }
}

/// Views of one sample: the two global views first, then the local ones.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    pub global: [Vec<f64>; 2],
    pub local: Vec<Vec<f64>>,
}

impl Views {
    pub fn len(&self) -> usize {
        2 + self.local.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn make_views(sample: &[f64], layout: &DataLayout, cfg: &ViewsConfig, rng: &mut RngStream) -> Views {
    match *layout {
        DataLayout::Image { size, channels } => {
            let local_size = cfg.local_size_for(size);
            let view = |scale: [f64; 2], out: usize, rng: &mut RngStream| {
                let mut v = resized_crop(sample, size, channels, scale, out, rng);
                if cfg.flip && rng.bernoulli(0.5) {
                    flip_horizontal(&mut v, out, channels);
                }
                if cfg.color_jitter {
                    color_jitter(&mut v, out, channels, rng);
                }
                v
            };
            let a = view(cfg.global_scale, size, rng);
            let b = view(cfg.global_scale, size, rng);
            let local = (0..cfg.n_local).map(|_| view(cfg.local_scale, local_size, rng)).collect();
            Views { global: [a, b], local }
        }
        DataLayout::Vector { .. } => {
            let jitter = |rng: &mut RngStream| -> Vec<f64> {
                sample.iter().map(|x| x + cfg.jitter_std * rng.normal()).collect()
            };
            let a = jitter(rng);
            let b = jitter(rng);
            let local = (0..cfg.n_local)
                .map(|_| {
                    let keep = rng.uniform_range(cfg.local_scale[0], cfg.local_scale[1]);
                    let mut v = jitter(rng);
                    for x in v.iter_mut() {
                        if !rng.bernoulli(keep) {
                            *x = 0.0;
                        }
                    }
                    v
                })
                .collect();
            Views { global: [a, b], local }
        }
    }
}

/// Crop covering a random area fraction in `scale` with aspect ratio in
/// [3/4, 4/3], resampled bilinearly to `out × out`.
fn resized_crop(img: &[f64], size: usize, channels: usize, scale: [f64; 2], out: usize, rng: &mut RngStream) -> Vec<f64> {
    let area = (size * size) as f64 * rng.uniform_range(scale[0], scale[1]);
    let log_ratio = rng.uniform_range((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let w = (area * ratio).sqrt().clamp(1.0, size as f64);
    let h = (area / ratio).sqrt().clamp(1.0, size as f64);
    let x0 = rng.uniform_range(0.0, size as f64 - w);
    let y0 = rng.uniform_range(0.0, size as f64 - h);
    let mut v = vec![0.0; out * out * channels];
    let max = (size - 1) as f64;
    for i in 0..out {
        let sy = (y0 + (i as f64 + 0.5) * h / out as f64 - 0.5).clamp(0.0, max);
        let (y_lo, fy) = (sy.floor() as usize, sy - sy.floor());
        let y_hi = (y_lo + 1).min(size - 1);
        for j in 0..out {
            let sx = (x0 + (j as f64 + 0.5) * w / out as f64 - 0.5).clamp(0.0, max);
            let (x_lo, fx) = (sx.floor() as usize, sx - sx.floor());
            let x_hi = (x_lo + 1).min(size - 1);
            for c in 0..channels {
                let at = |y: usize, x: usize| img[(y * size + x) * channels + c];
                let top = at(y_lo, x_lo) * (1.0 - fx) + at(y_lo, x_hi) * fx;
                let bot = at(y_hi, x_lo) * (1.0 - fx) + at(y_hi, x_hi) * fx;
                v[(i * out + j) * channels + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    v
}

fn flip_horizontal(v: &mut [f64], size: usize, channels: usize) {
    for y in 0..size {
        for x in 0..size / 2 {
            for c in 0..channels {
                v.swap((y * size + x) * channels + c, (y * size + size - 1 - x) * channels + c);
            }
        }
    }
}

/// Random brightness/contrast change and, half the time, a 3×3 blur.
fn color_jitter(v: &mut [f64], size: usize, channels: usize, rng: &mut RngStream) {
    let contrast = rng.uniform_range(0.6, 1.4);
    let brightness = rng.uniform_range(-0.4, 0.4);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x = (*x - mean) * contrast + mean + brightness;
    }
    if rng.bernoulli(0.5) {
        let src = v.to_vec();
        let k = [0.25, 0.5, 0.25];
        for y in 0..size {
            for x in 0..size {
                for c in 0..channels {
                    let mut acc = 0.0;
                    let mut norm = 0.0;
                    for (dy, wy) in k.iter().enumerate() {
                        for (dx, wx) in k.iter().enumerate() {
                            let (yy, xx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                            if yy < 0 || xx < 0 || yy >= size as isize || xx >= size as isize {
                                continue;
                            }
                            acc += wy * wx * src[(yy as usize * size + xx as usize) * channels + c];
                            norm += wy * wx;
                        }
                    }
                    v[(y * size + x) * channels + c] = acc / norm;
                }
            }
        }
    }
}
