//! Synthetic feature-collision stream: color separates the classes of the
//! first task, while the second task reuses the same colors on swapped shapes
//! so that only shape tells the tasks apart.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::split::{Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Triangle,
    Circle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollisionSpec {
    pub image_size: usize,
    pub classes_per_task: usize,
    /// RGB triples in `[0, 1]`.
    pub color_palette: Vec<[f64; 3]>,
    pub shape_set: Vec<Shape>,
    /// Maximum offset of the shape center, as a fraction of the image size.
    pub position_jitter: f64,
    /// Range of the shape's equal-area square side, as a fraction of the image size.
    pub scale_range: (f64, f64),
    /// Multiplicative brightness jitter of the shape color.
    pub color_jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise_std: f64,
    pub samples_per_class: usize,
}

impl Default for CollisionSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            classes_per_task: 2,
            color_palette: alloc::vec![[0.9, 0.1, 0.1], [0.1, 0.8, 0.1]],
            shape_set: alloc::vec![Shape::Square, Shape::Triangle],
            position_jitter: 0.2,
            scale_range: (0.3, 0.45),
            color_jitter: 0.15,
            noise_std: 0.05,
            samples_per_class: 100,
        }
    }
}

impl CollisionSpec {
    pub fn num_classes(&self) -> usize {
        2 * self.classes_per_task
    }

    /// `(color index, shape)` of a class id.
    pub fn class_attributes(&self, class: usize) -> (usize, Shape) {
        let k = self.classes_per_task;
        let (task, c) = (class / k, class % k);
        (c, self.shape_set[(c + task) % k])
    }

    fn validate(&self) -> Result<()> {
        let k = self.classes_per_task;
        if k < 2 {
            return Err(Error::arg("collision dataset needs at least 2 classes per task"));
        }
        if self.color_palette.len() < k || self.shape_set.len() < k {
            return Err(Error::arg(format!(
                "{} colors and {} shapes cannot cover {k} classes per task",
                self.color_palette.len(),
                self.shape_set.len()
            )));
        }
        let distinct: BTreeSet<_> = self.shape_set[..k].iter().map(|s| *s as u8).collect();
        if distinct.len() < k {
            return Err(Error::arg("shape set must contain distinct shapes"));
        }
        if self.image_size < 4 || !(self.scale_range.0 > 0.0 && self.scale_range.1 >= self.scale_range.0) {
            return Err(Error::arg("invalid collision image geometry"));
        }
        Ok(())
    }
}

/// Renders both tasks; byte-identical for a fixed `(spec, seed)`.
pub fn generate_collision_dataset(spec: &CollisionSpec, seed: u64) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    let k = spec.classes_per_task;
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|_| Error::arg("noise_std"))?;
    let mut tasks = Vec::with_capacity(2);
    for t in 0..2 {
        let mut samples = Vec::with_capacity(k * spec.samples_per_class);
        for i in 0..spec.samples_per_class {
            for c in 0..k {
                let class = t * k + c;
                let mut rng = rng_for(seed, &[tag::DATA, class as u64, i as u64]);
                let (color, shape) = spec.class_attributes(class);
                let image = render(spec, spec.color_palette[color], shape, &mut rng, &noise);
                samples.push(Sample { image, label: class });
            }
        }
        tasks.push(TaskDataset {
            task_index: t,
            samples,
            class_set: (t * k..(t + 1) * k).collect(),
        });
    }
    Ok(tasks)
}

fn inside(shape: Shape, dx: f64, dy: f64, side: f64) -> bool {
    let area = side * side;
    match shape {
        Shape::Square => libm::fabs(dx) <= side / 2.0 && libm::fabs(dy) <= side / 2.0,
        Shape::Circle => dx * dx + dy * dy <= area / core::f64::consts::PI,
        Shape::Triangle => {
            // Upright equilateral triangle with the given area, centered on its centroid.
            let a = libm::sqrt(4.0 * area / libm::sqrt(3.0));
            let h = libm::sqrt(3.0) / 2.0 * a;
            let (top, base) = (-2.0 * h / 3.0, h / 3.0);
            if dy < top || dy > base {
                return false;
            }
            let half_width = (dy - top) / h * a / 2.0;
            libm::fabs(dx) <= half_width
        }
    }
}

fn render(spec: &CollisionSpec, color: [f64; 3], shape: Shape, rng: &mut crate::rng::Rng, noise: &Normal<f64>) -> Image {
    let s = spec.image_size as f64;
    let side = s * rng.gen_range(spec.scale_range.0..=spec.scale_range.1);
    // Keep the circumscribed radius of any shape inside the frame.
    let reach = side * 0.8;
    let max_off = (s / 2.0 - reach).max(0.0).min(spec.position_jitter * s);
    let cx = s / 2.0 + rng.gen_range(-1.0..=1.0) * max_off;
    let cy = s / 2.0 + rng.gen_range(-1.0..=1.0) * max_off;
    let gain = 1.0 + rng.gen_range(-1.0..=1.0) * spec.color_jitter;
    let mut img = Image::zeros(spec.image_size, spec.image_size, 3);
    for y in 0..spec.image_size {
        for x in 0..spec.image_size {
            let on = inside(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, side);
            for c in 0..3 {
                let base = if on { color[c] * gain } else { 0.0 };
                let v = (base + noise.sample(rng)).clamp(0.0, 1.0);
                img.set(y, x, c, libm::round(v * 255.0) / 255.0);
            }
        }
    }
    img
}
