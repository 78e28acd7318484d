use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Real, Tensor};
use crate::rng;

/// Side length of the textured patch.
pub const PATCH: usize = 16;
/// Background pixels are uniform in `[0, BACKGROUND]`.
pub const BACKGROUND: f64 = 0.3;
/// Patch stripes alternate between `PATCH_LOW` and 1.
pub const PATCH_LOW: f64 = 0.0;

/// Images `[n, h, w, c]` in `[0, 1]` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(shape_err("dataset", images.shape(), &[labels.len()]));
        }
        if !images.all_finite() {
            return Err(config_err("dataset pixels must be finite"));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// `(height, width, channels)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let (h, w, c) = self.image_shape();
        let n = h * w * c;
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into a batch, optionally mirrored left-right.
    pub fn batch<T: Real>(&self, indices: &[usize], flip: &[bool]) -> (Tensor<T>, Vec<usize>) {
        let (h, w, c) = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for (k, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            let mirror = flip.get(k).copied().unwrap_or(false);
            for y in 0..h {
                for x in 0..w {
                    let sx = if mirror { w - 1 - x } else { x };
                    let px = &img[(y * w + sx) * c..(y * w + sx + 1) * c];
                    data.extend(px.iter().map(|&v| T::from_f64(v as f64)));
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (
            Tensor::new(&[indices.len(), h, w, c], data).expect("batch shape"),
            labels,
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.batch::<f32>(indices, &[]);
        Self {
            images,
            labels: labels.into_iter().map(|l| l as u8).collect(),
        }
    }
}

/// Pixels that belong to the patch. Background noise is drawn per channel
/// while the patch is gray, so equal channels mark the patch. Row-major
/// `h * w` flags for sample `i`.
pub fn salient_mask(data: &Dataset, i: usize) -> Vec<bool> {
    let (_, _, c) = data.image_shape();
    data.image(i).chunks(c).map(|px| px.iter().all(|&v| v == px[0])).collect()
}

/// Synthetic salient-object data: a noisy background with one striped
/// 16x16 patch at a random spot. Stripe orientation and period encode the
/// label. Sample `i` draws from its own stream, so any subset can be
/// regenerated independently.
pub fn gen_salient_dataset(seed: u64, n: usize, classes: usize, size: usize) -> Result<Dataset> {
    if !(2..=10).contains(&classes) {
        return Err(config_err(format!("classes must be in 2..=10, got {classes}")));
    }
    if size < 32 {
        return Err(config_err(format!("image size must be at least 32, got {size}")));
    }
    let mut labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
    rng::shuffle(&mut rng::stream(seed, 0), &mut labels);
    let channels = 3;
    let mut images = vec![0f32; n * size * size * channels];
    for (i, img) in images.chunks_mut(size * size * channels).enumerate() {
        let mut r = rng::stream(seed, i as u64 + 1);
        let label = labels[i] as usize;
        let y0 = rng::below(&mut r, size - PATCH + 1);
        let x0 = rng::below(&mut r, size - PATCH + 1);
        let phase = rng::uniform(&mut r) * core::f64::consts::TAU;
        for v in img.iter_mut() {
            *v = (rng::uniform(&mut r) * BACKGROUND) as f32;
        }
        let theta = (label % 5) as f64 * core::f64::consts::PI / 5.0;
        let period = if label < 5 { 4.0 } else { 8.0 };
        let (sin, cos) = (libm::sin(theta), libm::cos(theta));
        for dy in 0..PATCH {
            for dx in 0..PATCH {
                let u = dx as f64 * cos + dy as f64 * sin;
                let on = libm::cos(core::f64::consts::TAU * u / period + phase) > 0.0;
                let v = if on { 1.0 } else { PATCH_LOW as f32 };
                let p = ((y0 + dy) * size + x0 + dx) * channels;
                img[p..p + channels].fill(v);
            }
        }
    }
    Dataset::new(Tensor::new(&[n, size, size, channels], images)?, labels)
}
