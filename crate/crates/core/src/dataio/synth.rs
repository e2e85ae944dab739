//! Synthetic multimodal classification data.
//!
//! Every class plants a signal in every modality: each image modality gets a
//! Gaussian blob whose centre depends on (modality, class), jittered per
//! sample over a noisy background; each tabular attribute takes a
//! class-specific categorical value, replaced by a uniformly random category
//! with probability `attribute_noise`.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetManifest, ModalitySpec, SampleEntry, MANIFEST_FORMAT};
use super::sample::{Image, MultimodalSample, TabularRecord};
use super::template::standard_attributes;
use crate::error::{CfcmlError, Result};

const WORDS: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Number of image modalities `m`.
    pub modalities: usize,
    pub channels: usize,
    pub spatial: Vec<usize>,
    /// Number of tabular attributes `t`.
    pub attributes: usize,
    pub attribute_noise: f64,
    /// Peak blob amplitude.
    pub signal: f64,
    /// Standard deviation of the background noise.
    pub noise_std: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            train_per_class: 60,
            val_per_class: 30,
            test_per_class: 0,
            modalities: 2,
            channels: 1,
            spatial: vec![16, 16, 16],
            attributes: 4,
            attribute_noise: 0.1,
            signal: 1.0,
            noise_std: 0.5,
            folds: 3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CfcmlError::InvalidDims(m));
        if self.n_classes < 2 {
            return bad(format!("need ≥ 2 classes, got {}", self.n_classes));
        }
        if self.train_per_class < 2 {
            return bad(format!(
                "need ≥ 2 training samples per class, got {}",
                self.train_per_class
            ));
        }
        if self.modalities == 0 || self.channels == 0 || self.attributes == 0 {
            return bad("modalities, channels and attributes must be ≥ 1".into());
        }
        if self.spatial.is_empty() || self.spatial.iter().any(|&d| d < 8) {
            return bad(format!(
                "every spatial dimension must be ≥ 8, got {:?}",
                self.spatial
            ));
        }
        if !(0.0..=1.0).contains(&self.attribute_noise) {
            return bad(format!(
                "attribute noise {} outside [0, 1]",
                self.attribute_noise
            ));
        }
        if self.folds == 0 {
            return bad("folds must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn attribute_names(&self) -> Vec<String> {
        let mut names: Vec<String> = standard_attributes()
            .take(self.attributes)
            .map(str::to_string)
            .collect();
        for k in names.len()..self.attributes {
            names.push(format!("attribute {}", k + 1));
        }
        names
    }

    fn vocabulary(&self) -> usize {
        self.n_classes + 2
    }
}

/// The canonical value of attribute `k` for category `v`.
pub fn category_word(attribute: usize, category: usize) -> String {
    let idx = category + 3 * attribute;
    let word = WORDS[idx % WORDS.len()];
    match category / WORDS.len() {
        0 => word.to_string(),
        n => format!("{word} {n}"),
    }
}

/// A generated split assignment plus its sample.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub split: String,
    pub fold: usize,
    pub sample: MultimodalSample,
}

fn blob_width(spatial: &[usize]) -> f64 {
    *spatial.iter().min().expect("non-empty") as f64 / 8.0
}

fn class_centres(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
    let sigma = blob_width(&cfg.spatial);
    let margin = 1.5 * sigma;
    (0..cfg.modalities)
        .map(|_| {
            let mut centres: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
            while centres.len() < cfg.n_classes {
                let candidate: Vec<f64> = cfg
                    .spatial
                    .iter()
                    .map(|&e| rng.random_range(margin..(e as f64 - 1.0 - margin).max(margin + 1e-9)))
                    .collect();
                let far = centres.iter().all(|c| {
                    c.iter()
                        .zip(&candidate)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                        >= 2.5 * sigma
                });
                // Tiny volumes cannot always fit far-apart centres; accept
                // after the class count has been tried many times.
                if far || rng.random_range(0..1000) == 0 {
                    centres.push(candidate);
                }
            }
            centres
        })
        .collect()
}

fn render_image(
    cfg: &SynthConfig,
    centre: &[f64],
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> Result<Image> {
    let sigma = blob_width(&cfg.spatial);
    let jittered: Vec<f64> = centre
        .iter()
        .map(|c| c + rng.random_range(-0.5 * sigma..0.5 * sigma))
        .collect();
    let amplitude = cfg.signal * rng.random_range(0.8..1.2);
    let voxels: usize = cfg.spatial.iter().product();
    let mut data = Vec::with_capacity(cfg.channels * voxels);
    for ch in 0..cfg.channels {
        let channel_gain = 1.0 / (1.0 + ch as f64);
        for v in 0..voxels {
            let mut rem = v;
            let mut dist2 = 0.0;
            for axis in (0..cfg.spatial.len()).rev() {
                let coord = (rem % cfg.spatial[axis]) as f64;
                rem /= cfg.spatial[axis];
                dist2 += (coord - jittered[axis]).powi(2);
            }
            let bump = amplitude * channel_gain * (-dist2 / (2.0 * sigma * sigma)).exp();
            data.push((bump + noise.sample(rng)) as f32);
        }
    }
    Image::new(cfg.channels, cfg.spatial.clone(), data)
}

/// Generates all samples in memory, deterministically from `cfg.seed`.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centres = class_centres(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0))
        .map_err(|e| CfcmlError::Config(format!("noise std: {e}")))?;
    let names = cfg.attribute_names();
    let splits = [
        ("train", cfg.train_per_class),
        ("val", cfg.val_per_class),
        ("test", cfg.test_per_class),
    ];
    let mut out = Vec::new();
    let mut counter = 0usize;
    for (split, per_class) in splits {
        for label in 0..cfg.n_classes {
            for _ in 0..per_class {
                let images = (0..cfg.modalities)
                    .map(|j| render_image(cfg, &centres[j][label], &mut rng, &noise))
                    .collect::<Result<Vec<_>>>()?;
                let attributes = names
                    .iter()
                    .enumerate()
                    .map(|(k, name)| {
                        let category = if rng.random_bool(cfg.attribute_noise) {
                            rng.random_range(0..cfg.vocabulary())
                        } else {
                            label
                        };
                        (name.clone(), category_word(k, category))
                    })
                    .collect();
                out.push(SynthSample {
                    split: split.to_string(),
                    fold: 0,
                    sample: MultimodalSample {
                        id: format!("s{counter:05}"),
                        images,
                        tabular: TabularRecord::new(attributes)?,
                        label,
                    },
                });
                counter += 1;
            }
        }
    }
    // Folds are assigned round-robin within each class so they stay
    // stratified.
    let mut per_class_seen = vec![0usize; cfg.n_classes];
    for s in &mut out {
        let seen = &mut per_class_seen[s.sample.label];
        s.fold = *seen % cfg.folds;
        *seen += 1;
    }
    Ok(out)
}

/// The manifest describing `samples` rooted at `root`.
pub fn manifest_for(cfg: &SynthConfig, root: &Path, samples: &[SynthSample]) -> DatasetManifest {
    let mut dims = vec![cfg.channels];
    dims.extend(&cfg.spatial);
    DatasetManifest {
        format: MANIFEST_FORMAT.to_string(),
        modalities: (0..cfg.modalities)
            .map(|j| ModalitySpec {
                name: format!("modality{}", j + 1),
                dims: dims.clone(),
            })
            .collect(),
        attributes: cfg.attribute_names(),
        classes: (0..cfg.n_classes).map(|c| format!("class{c}")).collect(),
        samples: samples
            .iter()
            .map(|s| SampleEntry {
                id: s.sample.id.clone(),
                split: s.split.clone(),
                label: s.sample.label,
                fold: Some(s.fold),
            })
            .collect(),
        root: root.to_path_buf(),
    }
}

/// Generates the dataset and writes it under `out_dir`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = synthesize(cfg)?;
    let manifest = manifest_for(cfg, out_dir, &samples);
    manifest.save()?;
    for s in &samples {
        manifest.write_sample(&s.split, &s.sample)?;
    }
    Ok(manifest)
}
