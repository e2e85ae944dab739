use std::collections::HashSet;

use crate::error::{CfcmlError, Result};

/// A channel-first image: `channels × spatial[0] × … × spatial[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    spatial: Vec<usize>,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, spatial: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let voxels: usize = spatial.iter().product();
        if channels == 0 || spatial.is_empty() || voxels == 0 {
            return Err(CfcmlError::InvalidDims(format!(
                "image needs channels ≥ 1 and non-empty spatial dims, got {channels} × {spatial:?}"
            )));
        }
        if data.len() != channels * voxels {
            return Err(CfcmlError::InvalidDims(format!(
                "{channels} × {spatial:?} needs {} values, got {}",
                channels * voxels,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            spatial,
            data,
        })
    }

    pub fn zeros(channels: usize, spatial: Vec<usize>) -> Self {
        let n = channels * spatial.iter().product::<usize>();
        Self {
            channels,
            spatial,
            data: vec![0.0; n],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    /// Blob dims: leading channel axis then spatial axes.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.channels)
            .chain(self.spatial.iter().copied())
            .collect()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Ordered `(name, value)` attribute pairs of one subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TabularRecord {
    attributes: Vec<(String, String)>,
}

impl TabularRecord {
    pub fn new(attributes: Vec<(String, String)>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(CfcmlError::Dataset(
                "tabular record needs at least one attribute".into(),
            ));
        }
        let mut seen = HashSet::new();
        for (name, _) in &attributes {
            if !seen.insert(name.trim().to_lowercase()) {
                return Err(CfcmlError::Dataset(format!(
                    "duplicate attribute `{name}`"
                )));
            }
        }
        Ok(Self { attributes })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.attributes
            .iter()
            .map(|(n, v)| (n.as_str(), v.as_str()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|(n, _)| n.as_str())
    }

    pub fn value(&self, name: &str) -> Option<&str> {
        self.attributes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    /// `name<TAB>value` per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (n, v) in &self.attributes {
            out.push_str(n);
            out.push('\t');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut attributes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, value) = line.split_once('\t').ok_or_else(|| {
                CfcmlError::Dataset(format!("tabular line {} lacks a tab", lineno + 1))
            })?;
            attributes.push((name.to_string(), value.to_string()));
        }
        Self::new(attributes)
    }
}

/// One subject: `m` images, the tabular record and the class label.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    pub images: Vec<Image>,
    pub tabular: TabularRecord,
    pub label: usize,
}
