//! Two-view stochastic augmentation for the contrastive branch.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::rng::{rng_for, Rng};

/// Fixed crop / flip / color-jitter / grayscale pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    /// Range of the crop aspect ratio (width / height).
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum hue rotation as a fraction of a full turn.
    pub hue: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.3, 1.0),
            crop_ratio: (0.75, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.5,
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Mild crop and flip with no color changes, for classification inputs.
    pub fn weak() -> Self {
        Self {
            crop_scale: (0.8, 1.0),
            flip_prob: 0.5,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            ..Self::identity()
        }
    }

    /// Pipeline that returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub view_a: Image,
    pub view_b: Image,
    pub source_index: usize,
    pub seed: u64,
}

/// Two independent views of `image`; a pure function of `(image, seed, config)`.
pub fn two_view_augment(image: &Image, source_index: usize, seed: u64, config: &AugmentConfig) -> AugmentedPair {
    AugmentedPair {
        view_a: augment(image, &mut rng_for(seed, &[0]), config),
        view_b: augment(image, &mut rng_for(seed, &[1]), config),
        source_index,
        seed,
    }
}

/// A single augmented view, a pure function of `(image, seed, config)`.
pub fn augment_image(image: &Image, seed: u64, config: &AugmentConfig) -> Image {
    augment(image, &mut rng_for(seed, &[]), config)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn augment(image: &Image, rng: &mut Rng, cfg: &AugmentConfig) -> Image {
    let mut out = resized_crop(image, rng, cfg);
    if rng.gen::<f64>() < cfg.flip_prob {
        flip(&mut out);
    }
    if out.channels == 3 {
        if rng.gen::<f64>() < cfg.jitter_prob {
            color_jitter(&mut out, rng, cfg);
        }
        if rng.gen::<f64>() < cfg.grayscale_prob {
            grayscale(&mut out);
        }
    }
    out
}

fn resized_crop(image: &Image, rng: &mut Rng, cfg: &AugmentConfig) -> Image {
    let (h, w) = (image.height as f64, image.width as f64);
    let area = h * w;
    let (mut cw, mut ch, mut x0, mut y0) = (w, h, 0.0, 0.0);
    for _ in 0..10 {
        let s = uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let r = libm::exp(uniform(rng, libm::log(cfg.crop_ratio.0), libm::log(cfg.crop_ratio.1)));
        let tw = libm::round(libm::sqrt(area * s * r));
        let th = libm::round(libm::sqrt(area * s / r));
        if tw >= 1.0 && th >= 1.0 && tw <= w && th <= h {
            cw = tw;
            ch = th;
            x0 = libm::floor(uniform(rng, 0.0, w - tw + 1.0)).min(w - tw);
            y0 = libm::floor(uniform(rng, 0.0, h - th + 1.0)).min(h - th);
            break;
        }
    }
    let mut out = Image::zeros(image.height, image.width, image.channels);
    let sx = cw / w;
    let sy = ch / h;
    for oy in 0..image.height {
        let fy = ((oy as f64 + 0.5) * sy - 0.5 + y0).clamp(0.0, h - 1.0);
        let yi = libm::floor(fy) as usize;
        let yj = (yi + 1).min(image.height - 1);
        let ty = fy - yi as f64;
        for ox in 0..image.width {
            let fx = ((ox as f64 + 0.5) * sx - 0.5 + x0).clamp(0.0, w - 1.0);
            let xi = libm::floor(fx) as usize;
            let xj = (xi + 1).min(image.width - 1);
            let tx = fx - xi as f64;
            for c in 0..image.channels {
                let v = if tx == 0.0 && ty == 0.0 {
                    image.get(yi, xi, c)
                } else {
                    let top = image.get(yi, xi, c) * (1.0 - tx) + image.get(yi, xj, c) * tx;
                    let bot = image.get(yj, xi, c) * (1.0 - tx) + image.get(yj, xj, c) * tx;
                    top * (1.0 - ty) + bot * ty
                };
                out.set(oy, ox, c, v);
            }
        }
    }
    out
}

fn flip(img: &mut Image) {
    let c = img.channels;
    for y in 0..img.height {
        let row = &mut img.data[y * img.width * c..(y + 1) * img.width * c];
        for x in 0..img.width / 2 {
            let (a, b) = (x * c, (img.width - 1 - x) * c);
            for k in 0..c {
                row.swap(a + k, b + k);
            }
        }
    }
}

fn luma(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn color_jitter(img: &mut Image, rng: &mut Rng, cfg: &AugmentConfig) {
    let b = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness).max(0.0);
    let k = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast).max(0.0);
    let s = uniform(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation).max(0.0);
    let theta = uniform(rng, -cfg.hue, cfg.hue) * 2.0 * core::f64::consts::PI;
    for v in img.data.iter_mut() {
        *v = (*v * b).clamp(0.0, 1.0);
    }
    let mean = img.data.chunks(3).map(luma).sum::<f64>() / (img.height * img.width) as f64;
    for v in img.data.iter_mut() {
        *v = ((*v - mean) * k + mean).clamp(0.0, 1.0);
    }
    for px in img.data.chunks_mut(3) {
        let g = luma(px);
        for v in px.iter_mut() {
            *v = ((*v - g) * s + g).clamp(0.0, 1.0);
        }
    }
    if theta != 0.0 {
        // Rotate chroma in YIQ space.
        let (sin, cos) = (libm::sin(theta), libm::cos(theta));
        for px in img.data.chunks_mut(3) {
            let (r, g, b) = (px[0], px[1], px[2]);
            let y = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i2, q2) = (i * cos - q * sin, i * sin + q * cos);
            px[0] = (y + 0.956 * i2 + 0.621 * q2).clamp(0.0, 1.0);
            px[1] = (y - 0.272 * i2 - 0.647 * q2).clamp(0.0, 1.0);
            px[2] = (y - 1.106 * i2 + 1.703 * q2).clamp(0.0, 1.0);
        }
    }
}

fn grayscale(img: &mut Image) {
    for px in img.data.chunks_mut(3) {
        let g = luma(px);
        px.iter_mut().for_each(|v| *v = g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn textured(seed: u64) -> Image {
        let mut rng = rng_for(seed, &[99]);
        let data: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.gen::<f64>()).collect();
        Image::new(16, 16, 3, data).unwrap()
    }

    #[test]
    fn deterministic_given_seed() {
        let img = textured(1);
        let cfg = AugmentConfig::default();
        assert_eq!(two_view_augment(&img, 3, 42, &cfg), two_view_augment(&img, 3, 42, &cfg));
    }

    #[test]
    fn identity_config_is_identity() {
        let img = textured(2);
        let p = two_view_augment(&img, 0, 5, &AugmentConfig::identity());
        assert_eq!(p.view_a, img);
        assert_eq!(p.view_b, img);
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let img = textured(3);
        for seed in 0..20 {
            let p = two_view_augment(&img, 0, seed, &AugmentConfig::default());
            assert!(p.view_a.data.iter().chain(&p.view_b.data).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_views() {
        let img = textured(4);
        let cfg = AugmentConfig::default();
        let views: Vec<Image> = (0..100).map(|s| two_view_augment(&img, 0, s, &cfg).view_a).collect();
        let mut collisions = 0;
        for i in 0..views.len() {
            for j in i + 1..views.len() {
                if views[i] == views[j] {
                    collisions += 1;
                }
            }
        }
        assert_eq!(collisions, 0);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = textured(5);
        let mut f = img.clone();
        flip(&mut f);
        assert_ne!(f, img);
        flip(&mut f);
        assert_eq!(f, img);
    }
}
