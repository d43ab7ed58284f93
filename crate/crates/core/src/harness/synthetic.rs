//! Seeded synthetic image classes for fast experiments.
//!
//! Every class owns a prototype made of a few Gaussian blobs at fixed
//! positions. A sample jitters each blob's centre and brightness, then adds
//! pixel noise and clips to `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::tensornet::Shape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub samples: usize,
    /// Images are `size x size`, single channel.
    pub size: usize,
    pub blobs_per_class: usize,
    /// Blob standard deviation in pixels.
    pub blob_sigma: f64,
    /// Standard deviation of per-sample blob displacement in pixels.
    pub jitter: f64,
    pub pixel_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 10,
            samples: 1000,
            size: 12,
            blobs_per_class: 3,
            blob_sigma: 1.2,
            jitter: 0.5,
            pixel_noise: 0.1,
        }
    }
}

struct Blob {
    y: f64,
    x: f64,
}

pub fn generate(spec: &SyntheticSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let margin = 1.5f64.min(spec.size as f64 / 4.0);
    let hi = spec.size as f64 - 1.0 - margin;
    let prototypes: Vec<Vec<Blob>> = (0..spec.classes)
        .map(|_| {
            (0..spec.blobs_per_class)
                .map(|_| Blob {
                    y: rng.gen_range(margin..=hi.max(margin)),
                    x: rng.gen_range(margin..=hi.max(margin)),
                })
                .collect()
        })
        .collect();

    let jitter = Normal::new(0.0, spec.jitter.max(0.0)).expect("finite jitter");
    let noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).expect("finite noise");
    let per = spec.size * spec.size;
    let mut images = Vec::with_capacity(spec.samples * per);
    let mut labels = Vec::with_capacity(spec.samples);
    let two_s2 = 2.0 * spec.blob_sigma * spec.blob_sigma;
    for i in 0..spec.samples {
        let label = if spec.classes == 0 { 0 } else { i % spec.classes };
        let blobs: Vec<(f64, f64, f64)> = prototypes
            .get(label)
            .map(|p| {
                p.iter()
                    .map(|b| {
                        (
                            b.y + jitter.sample(&mut rng),
                            b.x + jitter.sample(&mut rng),
                            rng.gen_range(0.6..1.0),
                        )
                    })
                    .collect()
            })
            .unwrap_or_default();
        for y in 0..spec.size {
            for x in 0..spec.size {
                let mut v = 0.0;
                for &(by, bx, amp) in &blobs {
                    let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                    v += amp * (-d2 / two_s2).exp();
                }
                v += noise.sample(&mut rng);
                images.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    Dataset {
        shape: Shape::new(1, spec.size, spec.size),
        num_classes: spec.classes,
        images,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticSpec {
            seed: 11,
            samples: 1000,
            ..Default::default()
        };
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        assert_eq!(a.num_classes, 10);
        let c = generate(&SyntheticSpec { seed: 12, ..spec });
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn pixels_in_unit_range_and_classes_balanced() {
        let d = generate(&SyntheticSpec {
            samples: 200,
            ..Default::default()
        });
        assert!(d.images.iter().all(|&p| (0.0..=1.0).contains(&p)));
        for c in 0..10 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 20);
        }
    }
}
