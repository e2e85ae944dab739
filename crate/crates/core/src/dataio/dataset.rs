//! On-disk dataset layout, manifest and mini-batch sampling.
//!
//! ```text
//! root/manifest.json
//! root/<split>/<class>/<sample-id>/<modality>.cft
//! root/<split>/<class>/<sample-id>/tabular.tsv
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blob::TensorBlob;
use super::sample::{Image, MultimodalSample, TabularRecord};
use crate::error::{CfcmlError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "cfcml-dataset/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    /// Blob dims, leading channel axis first.
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub split: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub modalities: Vec<ModalitySpec>,
    pub attributes: Vec<String>,
    pub classes: Vec<String>,
    pub samples: Vec<SampleEntry>,
    /// Directory holding the manifest; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn sample_dir(&self, entry: &SampleEntry) -> PathBuf {
        self.root
            .join(&entry.split)
            .join(&self.classes[entry.label])
            .join(&entry.id)
    }

    pub fn modality_path(&self, entry: &SampleEntry, modality: &ModalitySpec) -> PathBuf {
        self.sample_dir(entry).join(format!("{}.cft", modality.name))
    }

    pub fn splits(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.split.as_str()).collect()
    }

    pub fn entries<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a SampleEntry> + 'a {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }

    /// Structural checks that need no file access.
    pub fn validate_structure(&self) -> Result<()> {
        let bad = |msg: String| Err(CfcmlError::Dataset(msg));
        if self.format != MANIFEST_FORMAT {
            return bad(format!("unsupported manifest format `{}`", self.format));
        }
        if self.modalities.is_empty() {
            return bad("manifest lists no image modalities".into());
        }
        if self.attributes.is_empty() {
            return bad("manifest lists no attributes".into());
        }
        if self.classes.len() < 2 {
            return bad(format!("need ≥ 2 classes, got {}", self.classes.len()));
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if s.label >= self.classes.len() {
                return bad(format!("sample {} has label {} out of range", s.id, s.label));
            }
            // Ids are global, so a sample can never sit in two splits.
            if !ids.insert(s.id.as_str()) {
                return bad(format!("sample id {} appears twice", s.id));
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root)
            .map_err(|e| CfcmlError::io(format!("creating {}", self.root.display()), e))?;
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_json())
            .map_err(|e| CfcmlError::io(format!("writing {}", path.display()), e))
    }

    /// Reads a manifest from a dataset directory or the manifest file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file)
            .map_err(|e| CfcmlError::io(format!("reading {}", file.display()), e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| CfcmlError::Dataset(format!("{}: {e}", file.display())))?;
        manifest.root = file
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        manifest.validate_structure()?;
        Ok(manifest)
    }

    /// Full validation: every referenced file exists with the declared dims.
    pub fn validate_files(&self) -> Result<()> {
        self.validate_structure()?;
        for entry in &self.samples {
            self.load_entry(entry)?;
        }
        Ok(())
    }

    pub fn load_entry(&self, entry: &SampleEntry) -> Result<MultimodalSample> {
        let mut images = Vec::with_capacity(self.modalities.len());
        for modality in &self.modalities {
            let path = self.modality_path(entry, modality);
            let blob = TensorBlob::read(&path)?;
            if blob.dims != modality.dims {
                return Err(CfcmlError::CorruptBlob {
                    path,
                    reason: format!(
                        "dims {:?} differ from declared {:?}",
                        blob.dims, modality.dims
                    ),
                });
            }
            let (channels, spatial) = blob.dims.split_first().ok_or_else(|| {
                CfcmlError::CorruptBlob {
                    path: path.clone(),
                    reason: "rank 0 image".into(),
                }
            })?;
            images.push(Image::new(*channels, spatial.to_vec(), blob.data)?);
        }
        let tsv_path = self.sample_dir(entry).join("tabular.tsv");
        let text = fs::read_to_string(&tsv_path)
            .map_err(|e| CfcmlError::io(format!("reading {}", tsv_path.display()), e))?;
        let tabular = TabularRecord::from_tsv(&text)?;
        let names: Vec<&str> = tabular.names().collect();
        if names != self.attributes.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(CfcmlError::Dataset(format!(
                "{}: attributes {names:?} differ from schema {:?}",
                tsv_path.display(),
                self.attributes
            )));
        }
        Ok(MultimodalSample {
            id: entry.id.clone(),
            images,
            tabular,
            label: entry.label,
        })
    }

    pub fn write_sample(&self, split: &str, sample: &MultimodalSample) -> Result<()> {
        let entry = SampleEntry {
            id: sample.id.clone(),
            split: split.to_string(),
            label: sample.label,
            fold: None,
        };
        let dir = self.sample_dir(&entry);
        fs::create_dir_all(&dir)
            .map_err(|e| CfcmlError::io(format!("creating {}", dir.display()), e))?;
        for (modality, image) in self.modalities.iter().zip(&sample.images) {
            TensorBlob::new(image.dims(), image.data().to_vec())?
                .write(&self.modality_path(&entry, modality))?;
        }
        let tsv = dir.join("tabular.tsv");
        fs::write(&tsv, sample.tabular.to_tsv())
            .map_err(|e| CfcmlError::io(format!("writing {}", tsv.display()), e))
    }
}

/// Loads every sample of one split, in manifest order.
pub fn load_dataset(manifest: &DatasetManifest, split: &str) -> Result<Vec<MultimodalSample>> {
    manifest
        .entries(split)
        .map(|e| manifest.load_entry(e))
        .collect()
}

/// Shuffled mini-batches of sample indices covering every index exactly once.
///
/// A trailing batch of one sample is merged into the previous batch. With
/// `require_two_classes`, single-class batches are repaired by swapping a
/// member with another batch; [`CfcmlError::SingleClassBatch`] is returned
/// when that is impossible.
pub fn make_batches(
    labels: &[usize],
    batch_size: usize,
    shuffle_seed: u64,
    require_two_classes: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(CfcmlError::Config("batch size must be ≥ 1".into()));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    if require_two_classes {
        ensure_two_classes(labels, &mut batches)?;
    }
    Ok(batches)
}

fn distinct(labels: &[usize], batch: &[usize]) -> usize {
    batch.iter().map(|&i| labels[i]).collect::<BTreeSet<_>>().len()
}

fn ensure_two_classes(labels: &[usize], batches: &mut [Vec<usize>]) -> Result<()> {
    for b in 0..batches.len() {
        if distinct(labels, &batches[b]) >= 2 {
            continue;
        }
        if batches[b].len() < 2 {
            return Err(CfcmlError::SingleClassBatch(format!(
                "batch {b} holds a single sample"
            )));
        }
        let class = labels[batches[b][0]];
        let mut repaired = false;
        'search: for other in 0..batches.len() {
            if other == b {
                continue;
            }
            for pos in 0..batches[other].len() {
                let candidate = batches[other][pos];
                if labels[candidate] == class {
                    continue;
                }
                // The donor keeps two classes if something besides the
                // candidate differs from `class`.
                let donor_ok = batches[other]
                    .iter()
                    .enumerate()
                    .any(|(p, &i)| p != pos && labels[i] != class);
                if !donor_ok {
                    continue;
                }
                let give = batches[b].pop().expect("len ≥ 2");
                batches[other][pos] = give;
                batches[b].push(candidate);
                repaired = true;
                break 'search;
            }
        }
        if !repaired {
            return Err(CfcmlError::SingleClassBatch(format!(
                "batch {b} has only class {class} and no swap keeps every batch mixed"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|i| i % classes).collect()
    }

    #[test]
    fn batch_sizes_follow_arithmetic() {
        let b = make_batches(&labels(60, 3), 36, 1, true).unwrap();
        let sizes: Vec<usize> = b.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![36, 24]);
    }

    #[test]
    fn every_sample_once() {
        let b = make_batches(&labels(61, 3), 8, 3, true).unwrap();
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..61).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_order() {
        let l = labels(50, 2);
        assert_eq!(
            make_batches(&l, 7, 11, true).unwrap(),
            make_batches(&l, 7, 11, true).unwrap()
        );
        assert_ne!(
            make_batches(&l, 7, 11, true).unwrap(),
            make_batches(&l, 7, 12, true).unwrap()
        );
    }

    #[test]
    fn trailing_singleton_is_merged() {
        let b = make_batches(&labels(37, 2), 36, 0, false).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 37);
    }

    #[test]
    fn single_class_batches_are_repaired() {
        // 9 of class 0 and one of class 1, batches of 5: one batch must be
        // all class 0 unless repaired.
        let mut l = vec![0; 10];
        l[9] = 1;
        // Batch size 10 would trivially mix; with 5, only one batch can
        // hold class 1, so the other is unrepairable.
        assert!(matches!(
            make_batches(&l, 5, 0, true),
            Err(CfcmlError::SingleClassBatch(_))
        ));
        let l: Vec<usize> = (0..12).map(|i| usize::from(i >= 8)).collect();
        for seed in 0..20 {
            let b = make_batches(&l, 4, seed, true).unwrap();
            for batch in &b {
                assert!(distinct(&l, batch) >= 2, "seed {seed}: {batch:?}");
            }
        }
    }

    #[test]
    fn one_class_dataset_fails() {
        assert!(make_batches(&[0, 0, 0, 0], 2, 0, true).is_err());
        assert!(make_batches(&[0, 0, 0, 0], 2, 0, false).is_ok());
    }
}
