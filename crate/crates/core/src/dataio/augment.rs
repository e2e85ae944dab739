//! Training-time image augmentation.
//!
//! Geometric draws (flip axes, crop window, erase box) are made once per
//! sample in relative coordinates and shared by every modality; Gaussian
//! noise is drawn independently per modality. Labels, tabular records and
//! shapes are never changed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sample::{Image, MultimodalSample};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Standard deviation of additive Gaussian noise.
    #[serde(default)]
    pub gaussian_noise: Option<f64>,
    /// Minimum kept fraction per axis; the crop is zero-padded back in place.
    #[serde(default)]
    pub random_crop: Option<f64>,
    /// Per-axis flip probability.
    #[serde(default)]
    pub random_flip: Option<f64>,
    #[serde(default)]
    pub random_erase: Option<EraseParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EraseParams {
    pub probability: f64,
    /// Largest erased fraction per axis.
    pub max_fraction: f64,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.gaussian_noise.is_none()
            && self.random_crop.is_none()
            && self.random_flip.is_none()
            && self.random_erase.is_none()
    }

    /// Noise, crop, flip and erase at moderate strength.
    pub fn standard() -> Self {
        Self {
            gaussian_noise: Some(0.05),
            random_crop: Some(0.85),
            random_flip: Some(0.5),
            random_erase: Some(EraseParams {
                probability: 0.25,
                max_fraction: 0.3,
            }),
        }
    }
}

/// Axis-aligned box in relative coordinates `[start, end)` per axis.
#[derive(Clone, Debug)]
struct RelBox(Vec<(f64, f64)>);

impl RelBox {
    fn resolve(&self, spatial: &[usize]) -> Vec<(usize, usize)> {
        self.0
            .iter()
            .zip(spatial)
            .map(|(&(a, b), &e)| {
                let start = ((a * e as f64).floor() as usize).min(e.saturating_sub(1));
                let end = ((b * e as f64).ceil() as usize).clamp(start + 1, e);
                (start, end)
            })
            .collect()
    }
}

struct Geometry {
    flips: Vec<bool>,
    crop: Option<RelBox>,
    erase: Option<RelBox>,
}

fn random_box<R: Rng>(rng: &mut R, axes: usize, lo: f64, hi: f64) -> RelBox {
    RelBox(
        (0..axes)
            .map(|_| {
                let size = if hi > lo { rng.random_range(lo..=hi) } else { hi };
                let start = rng.random_range(0.0..=(1.0 - size).max(0.0));
                (start, start + size)
            })
            .collect(),
    )
}

fn draw_geometry<R: Rng>(policy: &AugmentPolicy, axes: usize, rng: &mut R) -> Geometry {
    let flips = match policy.random_flip {
        Some(p) => (0..axes).map(|_| rng.random_bool(p.clamp(0.0, 1.0))).collect(),
        None => vec![false; axes],
    };
    let crop = policy
        .random_crop
        .map(|min_keep| random_box(rng, axes, min_keep.clamp(0.05, 1.0), 1.0));
    let erase = policy.random_erase.and_then(|e| {
        rng.random_bool(e.probability.clamp(0.0, 1.0))
            .then(|| random_box(rng, axes, 0.05, e.max_fraction.clamp(0.05, 1.0)))
    });
    Geometry { flips, crop, erase }
}

fn coords(mut v: usize, spatial: &[usize], out: &mut [usize]) {
    for axis in (0..spatial.len()).rev() {
        out[axis] = v % spatial[axis];
        v /= spatial[axis];
    }
}

fn inside(c: &[usize], bounds: &[(usize, usize)]) -> bool {
    c.iter().zip(bounds).all(|(&x, &(a, b))| x >= a && x < b)
}

/// Reverses `image` along spatial `axis`.
pub fn flip_axis(image: &Image, axis: usize) -> Image {
    let mut flips = vec![false; image.spatial().len()];
    flips[axis] = true;
    apply_geometry(
        image,
        &Geometry {
            flips,
            crop: None,
            erase: None,
        },
    )
}

fn apply_geometry(image: &Image, geo: &Geometry) -> Image {
    let spatial = image.spatial().to_vec();
    let voxels = image.voxels();
    let crop = geo.crop.as_ref().map(|b| b.resolve(&spatial));
    let erase = geo.erase.as_ref().map(|b| b.resolve(&spatial));
    let mut out = Image::zeros(image.channels(), spatial.clone());
    let mut c = vec![0; spatial.len()];
    let mut src = vec![0; spatial.len()];
    for v in 0..voxels {
        coords(v, &spatial, &mut c);
        if crop.as_ref().is_some_and(|b| !inside(&c, b)) {
            continue;
        }
        if erase.as_ref().is_some_and(|b| inside(&c, b)) {
            continue;
        }
        for (axis, s) in src.iter_mut().enumerate() {
            *s = if geo.flips[axis] {
                spatial[axis] - 1 - c[axis]
            } else {
                c[axis]
            };
        }
        let src_idx = src
            .iter()
            .zip(&spatial)
            .fold(0, |acc, (&x, &e)| acc * e + x);
        for ch in 0..image.channels() {
            out.data_mut()[ch * voxels + v] = image.data()[ch * voxels + src_idx];
        }
    }
    out
}

/// Applies `policy` to every image of `sample`.
pub fn augment<R: Rng>(sample: &MultimodalSample, policy: &AugmentPolicy, rng: &mut R) -> MultimodalSample {
    MultimodalSample {
        id: sample.id.clone(),
        images: augment_images(&sample.images, policy, rng),
        tabular: sample.tabular.clone(),
        label: sample.label,
    }
}

/// Applies `policy` to the images of one sample, sharing the geometry.
pub fn augment_images<R: Rng>(images: &[Image], policy: &AugmentPolicy, rng: &mut R) -> Vec<Image> {
    if policy.is_identity() {
        return images.to_vec();
    }
    let axes = images.first().map_or(0, |i| i.spatial().len());
    let geo = draw_geometry(policy, axes, rng);
    let geometric = geo.flips.iter().any(|&f| f) || geo.crop.is_some() || geo.erase.is_some();
    images
        .iter()
        .map(|image| {
            let mut out = if geometric && image.spatial().len() == axes {
                apply_geometry(image, &geo)
            } else {
                image.clone()
            };
            if let Some(sigma) = policy.gaussian_noise.filter(|s| *s > 0.0) {
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                for v in out.data_mut() {
                    *v += normal.sample(rng) as f32;
                }
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::sample::TabularRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> MultimodalSample {
        let img = |k: f32| {
            Image::new(
                2,
                vec![4, 5, 3],
                (0..120).map(|i| i as f32 * k + 0.25).collect(),
            )
            .unwrap()
        };
        MultimodalSample {
            id: "x".into(),
            images: vec![img(1.0), img(-0.5)],
            tabular: TabularRecord::new(vec![("sex".into(), "male".into())]).unwrap(),
            label: 2,
        }
    }

    #[test]
    fn empty_policy_is_identity() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &AugmentPolicy::identity(), &mut rng), s);
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let policy = AugmentPolicy {
            gaussian_noise: Some(0.0),
            ..Default::default()
        };
        assert_eq!(augment(&s, &policy, &mut rng), s);
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let s = sample();
        let policy = AugmentPolicy {
            random_flip: Some(1.0),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let once = augment(&s, &policy, &mut rng);
        assert_ne!(once, s);
        let twice = augment(&once, &policy, &mut rng);
        assert_eq!(twice, s);
        for axis in 0..3 {
            let img = &s.images[0];
            assert_eq!(&flip_axis(&flip_axis(img, axis), axis), img);
        }
    }

    #[test]
    fn flip_reverses_last_axis() {
        let img = Image::new(1, vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(flip_axis(&img, 1).data(), &[3., 2., 1., 6., 5., 4.]);
        assert_eq!(flip_axis(&img, 0).data(), &[4., 5., 6., 1., 2., 3.]);
    }

    #[test]
    fn augmentation_preserves_label_tabular_and_shape() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = augment(&s, &AugmentPolicy::standard(), &mut rng);
            assert_eq!(out.label, s.label);
            assert_eq!(out.tabular, s.tabular);
            for (a, b) in out.images.iter().zip(&s.images) {
                assert_eq!(a.dims(), b.dims());
            }
        }
    }

    #[test]
    fn crop_zeroes_outside_the_window() {
        let s = sample();
        let policy = AugmentPolicy {
            random_crop: Some(0.5),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&s, &policy, &mut rng);
        let orig = s.images[0].data();
        // Every voxel is either kept or zeroed.
        for (o, i) in out.images[0].data().iter().zip(orig) {
            assert!(*o == 0.0 || o == i);
        }
        // Shared geometry: both modalities zero the same voxels.
        let zeros = |img: &Image| img.data().iter().map(|v| *v == 0.0).collect::<Vec<_>>();
        assert_eq!(zeros(&out.images[0]), zeros(&out.images[1]));
    }
}
