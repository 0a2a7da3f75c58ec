//! Weak (teacher) and strong (student) photometric views of a page.
//!
//! Every transform here leaves pixel geometry untouched, so boxes predicted
//! on one view are valid on the other without remapping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Weak view: additive brightness drawn from `±weak_brightness`.
    pub weak_brightness: f64,
    pub strong_brightness: f64,
    /// Contrast factor drawn from `1 ± strong_contrast`.
    pub strong_contrast: f64,
    pub noise_sigma: f64,
    /// Up to this many erased rectangles (uniform in `0..=max_erase`).
    pub max_erase: usize,
    /// Largest area of one erased rectangle as a fraction of the page.
    pub erase_max_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_brightness: 0.05,
            strong_brightness: 0.3,
            strong_contrast: 0.3,
            noise_sigma: 0.03,
            max_erase: 3,
            erase_max_area: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    Brightness,
    Contrast,
    GaussianNoise,
    Erase,
}

impl TransformKind {
    /// True when the transform only changes pixel values, never positions.
    pub fn is_photometric(self) -> bool {
        match self {
            TransformKind::Brightness
            | TransformKind::Contrast
            | TransformKind::GaussianNoise
            | TransformKind::Erase => true,
        }
    }
}

/// Every transform the views are built from.
pub const REGISTRY: [TransformKind; 4] = [
    TransformKind::Brightness,
    TransformKind::Contrast,
    TransformKind::GaussianNoise,
    TransformKind::Erase,
];

pub const WEAK_PIPELINE: [TransformKind; 1] = [TransformKind::Brightness];
pub const STRONG_PIPELINE: [TransformKind; 4] = REGISTRY;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedViews {
    pub weak: Tensor,
    pub strong: Tensor,
}

fn clip(img: &mut Tensor) {
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
}

fn symmetric(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

fn apply(kind: TransformKind, img: &mut Tensor, strong: bool, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    match kind {
        TransformKind::Brightness => {
            let delta = symmetric(rng, if strong { cfg.strong_brightness } else { cfg.weak_brightness });
            img.data.iter_mut().for_each(|v| *v += delta);
        }
        TransformKind::Contrast => {
            let factor = 1.0 + symmetric(rng, cfg.strong_contrast);
            let mean = img.data.iter().sum::<f64>() / img.data.len().max(1) as f64;
            img.data.iter_mut().for_each(|v| *v = mean + factor * (*v - mean));
        }
        TransformKind::GaussianNoise => {
            if cfg.noise_sigma > 0.0 {
                let normal = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
                img.data.iter_mut().for_each(|v| *v += normal.sample(rng));
            }
        }
        TransformKind::Erase => {
            let (c, h, w) = img.chw();
            let page = (h * w) as f64;
            let count = rng.random_range(0..=cfg.max_erase);
            for _ in 0..count {
                let area = page * rng.random_range(0.1..=1.0) * cfg.erase_max_area;
                let aspect: f64 = rng.random_range(0.3..3.3);
                let ew = ((area * aspect).sqrt().floor() as usize).clamp(1, w);
                let eh = ((area / ew as f64).floor() as usize).clamp(1, h);
                if (ew * eh) as f64 > cfg.erase_max_area * page {
                    continue;
                }
                let x0 = rng.random_range(0..=w - ew);
                let y0 = rng.random_range(0..=h - eh);
                let fill: f64 = rng.random();
                for ci in 0..c {
                    for y in y0..y0 + eh {
                        let row = ci * h * w + y * w;
                        img.data[row + x0..row + x0 + ew].fill(fill);
                    }
                }
            }
        }
    }
    clip(img);
}

/// Weak and strong views of `image`; deterministic given `seed`.
pub fn make_views(image: &Tensor, seed: u64, cfg: &AugmentConfig) -> AugmentedViews {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weak = image.clone();
    for kind in WEAK_PIPELINE {
        apply(kind, &mut weak, false, cfg, &mut rng);
    }
    let mut strong = image.clone();
    for kind in STRONG_PIPELINE {
        apply(kind, &mut strong, true, cfg, &mut rng);
    }
    AugmentedViews { weak, strong }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(level: f64) -> Tensor {
        Tensor::from_vec(&[3, 40, 50], vec![level; 3 * 40 * 50]).unwrap()
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        let img = page(0.7);
        let a = make_views(&img, 3, &AugmentConfig::default());
        assert_eq!(a, make_views(&img, 3, &AugmentConfig::default()));
        assert_eq!(a.weak.shape, img.shape);
        assert_eq!(a.strong.shape, img.shape);
        assert!(a.strong.data.iter().chain(&a.weak.data).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn weak_view_of_white_page_stays_near_white() {
        for seed in 0..50 {
            let v = make_views(&page(1.0), seed, &AugmentConfig::default());
            assert!(v.weak.data.iter().all(|p| *p >= 0.95 - 1e-12));
        }
    }

    #[test]
    fn strong_view_changes_pixels() {
        let img = page(0.5);
        for seed in 0..100 {
            let v = make_views(&img, seed, &AugmentConfig::default());
            let changed = v.strong.data.iter().zip(&img.data).filter(|(a, b)| a != b).count();
            assert!(changed as f64 >= 0.01 * img.data.len() as f64);
        }
    }

    #[test]
    fn registry_is_photometric_only() {
        assert!(REGISTRY.iter().all(|k| k.is_photometric()));
        assert!(WEAK_PIPELINE.iter().chain(&STRONG_PIPELINE).all(|k| REGISTRY.contains(k)));
    }
}
