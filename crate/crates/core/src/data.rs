//! In-memory image datasets and the synthetic grating generator.

use std::f32::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images are `[channels×H×W]` tensors with values in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The label-free view consumed by distillation.
    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Config("dataset has no labels".into()))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub noise: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, classes: usize, seed: u64) -> Self {
        SyntheticSpec {
            n,
            classes,
            image_size: 32,
            noise: 0.25,
            seed,
        }
    }

    /// Class `c` is a sinusoidal grating at angle `π·c/C` with `2 + c` cycles
    /// per image width, plus Gaussian pixel noise, clamped to `[-1, 1]`.
    /// Sample `i` has label `i mod C`.
    pub fn generate(&self) -> Result<Dataset> {
        if self.classes < 2 || self.n < self.classes {
            return Err(Error::Config(format!(
                "synthetic data needs n >= C >= 2 (got n={}, C={})",
                self.n, self.classes
            )));
        }
        if self.image_size == 0 || self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Config("synthetic image size and noise must be valid".into()));
        }
        let s = self.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0f32, self.noise.max(f32::MIN_POSITIVE))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut images = Vec::with_capacity(self.n);
        let mut labels = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let c = i % self.classes;
            let angle = PI * c as f32 / self.classes as f32;
            let freq = (2 + c) as f32;
            let (sin, cos) = angle.sin_cos();
            let img = Tensor::from_fn([1, s, s], |p| {
                let (y, x) = ((p / s) as f32, (p % s) as f32);
                let clean = (2.0 * PI * freq * (x * cos + y * sin) / s as f32).sin();
                let noise = if self.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                (clean + noise).clamp(-1.0, 1.0)
            });
            images.push(img);
            labels.push(c);
        }
        Ok(Dataset {
            images,
            labels: Some(labels),
            num_classes: self.classes,
        })
    }
}

/// Default grating set: 32×32 single-channel images, noise σ = 0.25.
pub fn generate_synthetic(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec::new(n, classes, seed).generate()
}

/// Weak augmentation: a random resized crop (area 50-100%, aspect ratio
/// 3/4 to 4/3, nearest-neighbor resampling) followed by a horizontal flip
/// with probability 1/2.
pub fn augment(image: &Tensor, rng: &mut impl rand::Rng) -> Tensor {
    let &[c, h, w] = image.shape() else {
        return image.clone();
    };
    let area = (h * w) as f32 * rng.random_range(0.5f32..=1.0);
    let aspect = rng.random_range((0.75f32).ln()..=(4.0f32 / 3.0).ln()).exp();
    let cw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
    let ch = ((area / aspect).sqrt().round() as usize).clamp(1, h);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let flip = rng.random_bool(0.5);
    let src = image.data();
    Tensor::from_fn([c, h, w], |i| {
        let (ci, rest) = (i / (h * w), i % (h * w));
        let (y, x) = (rest / w, rest % w);
        let x = if flip { w - 1 - x } else { x };
        let sy = y0 + y * ch / h;
        let sx = x0 + x * cw / w;
        src[ci * h * w + sy * w + sx]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(16, 4, 3).unwrap();
        let b = generate_synthetic(16, 4, 3).unwrap();
        let c = generate_synthetic(16, 4, 4).unwrap();
        assert!(a.images.iter().zip(&b.images).all(|(x, y)| x.bit_eq(y)));
        assert!(!a.images.iter().zip(&c.images).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn noiseless_classes() {
        let ds = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::new(8, 4, 1)
        }
        .generate()
        .unwrap();
        assert!(ds.images[0].bit_eq(&ds.images[4]));
        assert!(ds.images[1].bit_eq(&ds.images[5]));
        for a in 0..4 {
            for b in (a + 1)..4 {
                assert!(!ds.images[a].bit_eq(&ds.images[b]));
            }
        }
    }

    #[test]
    fn balanced_and_bounded() {
        let ds = generate_synthetic(10, 3, 0).unwrap();
        let labels = ds.labels().unwrap();
        let counts: Vec<usize> = (0..3).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(ds.images.iter().all(|im| im.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        assert_eq!(ds.images[0].shape(), &[1, 32, 32]);
    }

    #[test]
    fn augment_keeps_shape_and_range() {
        let ds = generate_synthetic(4, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for im in &ds.images {
            let a = augment(im, &mut rng);
            assert_eq!(a.shape(), im.shape());
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_counts() {
        assert!(matches!(generate_synthetic(1, 2, 0), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(10, 1, 0), Err(Error::Config(_))));
    }
}
