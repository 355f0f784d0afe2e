//! Photometric augmentation. Every op works on [0, 1] values and leaves the
//! image geometry untouched, so labels stay valid.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;

/// Chance to apply an op, chance to draw its parameter per channel, and the
/// uniform parameter range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpChance {
    pub chance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_channel: Option<f64>,
    pub range: [f64; 2],
}

impl OpChance {
    pub const fn new(chance: f64, range: [f64; 2]) -> Self {
        Self {
            chance,
            per_channel: None,
            range,
        }
    }

    pub const fn per_channel(chance: f64, per_channel: f64, range: [f64; 2]) -> Self {
        Self {
            chance,
            per_channel: Some(per_channel),
            range,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.range[1] > self.range[0] {
            rng.random_range(self.range[0]..=self.range[1])
        } else {
            self.range[0]
        }
    }

    fn sample_channels<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        let split = self.per_channel.is_some_and(|p| rng.random_bool(p.clamp(0.0, 1.0)));
        if split {
            [self.sample(rng), self.sample(rng), self.sample(rng)]
        } else {
            [self.sample(rng); 3]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Gaussian sigma in pixels.
    pub gaussian_blur: OpChance,
    /// Kernel size of an average, median or motion blur, picked uniformly.
    pub average_median_motion_blur: OpChance,
    /// Sigma of both the spatial (pixels) and range (8-bit levels) terms.
    pub bilateral_blur: OpChance,
    /// Shift applied to hue and saturation on an 8-bit HSV scale.
    pub hue_saturation: OpChance,
    /// Blend factor towards the luma image.
    pub grayscale: OpChance,
    pub add: OpChance,
    pub multiply: OpChance,
    pub gamma_contrast: OpChance,
    /// Gain of `1 / (1 + exp(gain * (0.5 - x)))`.
    pub sigmoid_contrast: OpChance,
    /// Gain of `gain * log2(1 + x)`.
    pub log_contrast: OpChance,
    /// Factor of `0.5 + alpha * (x - 0.5)`.
    pub linear_contrast: OpChance,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            gaussian_blur: OpChance::new(0.2, [0.0, 2.0]),
            average_median_motion_blur: OpChance::new(0.2, [3.0, 7.0]),
            bilateral_blur: OpChance::new(0.2, [1.0, 7.0]),
            hue_saturation: OpChance::new(0.5, [-15.0, 15.0]),
            grayscale: OpChance::new(0.5, [0.0, 0.2]),
            add: OpChance::per_channel(0.5, 0.5, [-0.04, 0.04]),
            multiply: OpChance::per_channel(0.5, 0.5, [0.75, 1.25]),
            gamma_contrast: OpChance::per_channel(0.5, 0.5, [0.75, 1.25]),
            sigmoid_contrast: OpChance::per_channel(0.5, 0.5, [0.0, 10.0]),
            log_contrast: OpChance::per_channel(0.5, 0.5, [0.75, 1.0]),
            linear_contrast: OpChance::per_channel(0.5, 0.5, [0.7, 1.3]),
        }
    }
}

impl AugmentationConfig {
    /// Config that never changes an image.
    pub fn disabled() -> Self {
        let mut cfg = Self::default();
        for op in cfg.ops_mut() {
            op.chance = 0.0;
        }
        cfg
    }

    fn ops_mut(&mut self) -> [&mut OpChance; 11] {
        [
            &mut self.gaussian_blur,
            &mut self.average_median_motion_blur,
            &mut self.bilateral_blur,
            &mut self.hue_saturation,
            &mut self.grayscale,
            &mut self.add,
            &mut self.multiply,
            &mut self.gamma_contrast,
            &mut self.sigmoid_contrast,
            &mut self.log_contrast,
            &mut self.linear_contrast,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    GaussianBlur,
    AverageMedianMotionBlur,
    BilateralBlur,
    HueSaturation,
    Grayscale,
    Add,
    Multiply,
    GammaContrast,
    SigmoidContrast,
    LogContrast,
    LinearContrast,
}

const ALL_OPS: [Op; 11] = [
    Op::GaussianBlur,
    Op::AverageMedianMotionBlur,
    Op::BilateralBlur,
    Op::HueSaturation,
    Op::Grayscale,
    Op::Add,
    Op::Multiply,
    Op::GammaContrast,
    Op::SigmoidContrast,
    Op::LogContrast,
    Op::LinearContrast,
];

/// Applies the ops in a random order, each with its own chance.
pub fn augment<R: Rng + ?Sized>(rgb: &RgbImage, cfg: &AugmentationConfig, rng: &mut R) -> RgbImage {
    let mut order = ALL_OPS;
    order.shuffle(rng);
    let mut img = rgb.clone();
    for op in order {
        let c = match op {
            Op::GaussianBlur => &cfg.gaussian_blur,
            Op::AverageMedianMotionBlur => &cfg.average_median_motion_blur,
            Op::BilateralBlur => &cfg.bilateral_blur,
            Op::HueSaturation => &cfg.hue_saturation,
            Op::Grayscale => &cfg.grayscale,
            Op::Add => &cfg.add,
            Op::Multiply => &cfg.multiply,
            Op::GammaContrast => &cfg.gamma_contrast,
            Op::SigmoidContrast => &cfg.sigmoid_contrast,
            Op::LogContrast => &cfg.log_contrast,
            Op::LinearContrast => &cfg.linear_contrast,
        };
        if c.chance <= 0.0 || !rng.random_bool(c.chance.min(1.0)) {
            continue;
        }
        img = match op {
            Op::GaussianBlur => gaussian_blur(&img, c.sample(rng)),
            Op::AverageMedianMotionBlur => {
                let k = c.sample(rng).round().max(1.0) as usize;
                match rng.random_range(0..3) {
                    0 => average_blur(&img, k),
                    1 => median_blur(&img, k),
                    _ => motion_blur(&img, k, rng.random_range(0.0..std::f64::consts::PI)),
                }
            }
            Op::BilateralBlur => bilateral_blur(&img, c.sample(rng)),
            Op::HueSaturation => hue_saturation(&img, c.sample(rng)),
            Op::Grayscale => grayscale(&img, c.sample(rng)),
            Op::Add => pointwise(&img, c.sample_channels(rng), |x, v| x + v),
            Op::Multiply => pointwise(&img, c.sample_channels(rng), |x, v| x * v),
            Op::GammaContrast => gamma_contrast(&img, c.sample_channels(rng)),
            Op::SigmoidContrast => pointwise(&img, c.sample_channels(rng), |x, g| 1.0 / (1.0 + (g * (0.5 - x)).exp())),
            Op::LogContrast => pointwise(&img, c.sample_channels(rng), |x, g| g * (1.0 + x).log2()),
            Op::LinearContrast => pointwise(&img, c.sample_channels(rng), |x, a| 0.5 + a * (x - 0.5)),
        };
    }
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn pointwise(img: &RgbImage, params: [f64; 3], f: impl Fn(f64, f64) -> f64) -> RgbImage {
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = f(px[c] as f64, params[c]).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

fn gamma_contrast(img: &RgbImage, gamma: [f64; 3]) -> RgbImage {
    pointwise(img, gamma, |x, g| x.max(0.0).powf(g))
}

fn clamp_at(img: &RgbImage, x: isize, y: isize, c: usize) -> f32 {
    let x = x.clamp(0, img.width as isize - 1) as usize;
    let y = y.clamp(0, img.height as isize - 1) as usize;
    img.data[3 * (y * img.width + x) + c]
}

/// Separable 1D filter along x then y, borders replicated.
fn separable(img: &RgbImage, taps: &[(isize, f32)]) -> RgbImage {
    let mut tmp = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                tmp.data[3 * (y * img.width + x) + c] =
                    taps.iter().map(|&(d, w)| w * clamp_at(img, x as isize + d, y as isize, c)).sum();
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                out.data[3 * (y * img.width + x) + c] =
                    taps.iter().map(|&(d, w)| w * clamp_at(&tmp, x as isize, y as isize + d, c)).sum();
            }
        }
    }
    out
}

fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma < 1e-3 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    let taps: Vec<(isize, f32)> = (-r..=r).zip(raw).map(|(d, w)| (d, (w / sum) as f32)).collect();
    separable(img, &taps)
}

/// Offsets `-(k-1)/2 ..= k/2` covering a window of `k` pixels.
fn window(k: usize) -> std::ops::RangeInclusive<isize> {
    let k = k.max(1) as isize;
    -((k - 1) / 2)..=k / 2
}

fn average_blur(img: &RgbImage, k: usize) -> RgbImage {
    let w = 1.0 / k.max(1) as f32;
    let taps: Vec<(isize, f32)> = window(k).map(|d| (d, w)).collect();
    separable(img, &taps)
}

fn median_blur(img: &RgbImage, k: usize) -> RgbImage {
    let k = k | 1;
    let r = (k / 2) as isize;
    let mut out = img.clone();
    let mut buf = Vec::with_capacity(k * k);
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            for c in 0..3 {
                buf.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        buf.push(clamp_at(img, x + dx, y + dy, c));
                    }
                }
                buf.sort_by(f32::total_cmp);
                out.data[3 * (y as usize * img.width + x as usize) + c] = buf[buf.len() / 2];
            }
        }
    }
    out
}

/// Mean along a `k`-pixel line through each pixel at angle `theta`.
fn motion_blur(img: &RgbImage, k: usize, theta: f64) -> RgbImage {
    let (s, c) = theta.sin_cos();
    let centre = (k.max(1) as f64 - 1.0) / 2.0;
    let offsets: Vec<(isize, isize)> = (0..k.max(1))
        .map(|i| {
            let t = i as f64 - centre;
            ((t * c).round() as isize, (t * s).round() as isize)
        })
        .collect();
    let w = 1.0 / offsets.len() as f32;
    let mut out = img.clone();
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            for ch in 0..3 {
                out.data[3 * (y as usize * img.width + x as usize) + ch] =
                    offsets.iter().map(|&(dx, dy)| w * clamp_at(img, x + dx, y + dy, ch)).sum();
            }
        }
    }
    out
}

fn bilateral_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma < 1e-3 {
        return img.clone();
    }
    let r = (2.0 * sigma).ceil() as isize;
    let range_sigma = sigma / 255.0;
    let inv_space = -1.0 / (2.0 * sigma * sigma);
    let inv_range = -1.0 / (2.0 * range_sigma * range_sigma);
    let mut out = img.clone();
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            let i = 3 * (y as usize * img.width + x as usize);
            let centre = [img.data[i], img.data[i + 1], img.data[i + 2]];
            let mut acc = [0.0f64; 3];
            let mut norm = 0.0f64;
            for dy in -r..=r {
                for dx in -r..=r {
                    let p = [0, 1, 2].map(|c| clamp_at(img, x + dx, y + dy, c));
                    let d2: f64 = (0..3).map(|c| ((p[c] - centre[c]) as f64).powi(2)).sum();
                    let w = ((dx * dx + dy * dy) as f64 * inv_space + d2 * inv_range).exp();
                    norm += w;
                    for c in 0..3 {
                        acc[c] += w * p[c] as f64;
                    }
                }
            }
            for c in 0..3 {
                out.data[i + c] = (acc[c] / norm) as f32;
            }
        }
    }
    out
}

/// Adds `shift / 255` of a full turn to hue and `shift / 255` to saturation.
fn hue_saturation(img: &RgbImage, shift: f64) -> RgbImage {
    let d = shift / 255.0;
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv([px[0] as f64, px[1] as f64, px[2] as f64]);
        let rgb = hsv_to_rgb((h + d).rem_euclid(1.0), (s + d).clamp(0.0, 1.0), v);
        for c in 0..3 {
            px[c] = rgb[c] as f32;
        }
    }
    out
}

fn grayscale(img: &RgbImage, alpha: f64) -> RgbImage {
    let a = alpha.clamp(0.0, 1.0) as f32;
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        let y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            *v += a * (y - *v);
        }
    }
    out
}

/// Hue as a fraction of a turn, saturation and value in [0, 1].
fn rgb_to_hsv(c: [f64; 3]) -> (f64, f64, f64) {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == c[0] {
        ((c[1] - c[2]) / delta).rem_euclid(6.0) / 6.0
    } else if max == c[1] {
        ((c[2] - c[0]) / delta + 2.0) / 6.0
    } else {
        ((c[0] - c[1]) / delta + 4.0) / 6.0
    };
    let s = if max > 0.0 { delta / max } else { 0.0 };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
