//! The assembled model: per-modality encoders, frozen tabular embedding,
//! MG-CIE, pooling, dropout and an MLP head.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ccrm::{ccrm_losses, ContrastConfig};
use crate::dataio::{DatasetManifest, Image, ModalitySpec, MultimodalSample, TemplateTable};
use crate::encoders::{
    embed_tabular, image_to_tokens, HashEmbedder, ImageEncoder, PrecomputedEmbedder, SentenceEmbedder,
    StageShapeLaw, EMBED_DIM,
};
use crate::error::{CfcmlError, Result};
use crate::graph::{Graph, Var};
use crate::mgcie::MgCie;
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tensor::Matrix;

use super::config::ModelConfig;

/// Guard for the unit-length features fed to the head.
const NORM_EPS: f64 = 1e-12;

/// Data-derived part of the architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSchema {
    pub modalities: Vec<ModalitySpec>,
    pub attributes: Vec<String>,
    pub classes: Vec<String>,
}

impl ModelSchema {
    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        Self {
            modalities: manifest.modalities.clone(),
            attributes: manifest.attributes.clone(),
            classes: manifest.classes.clone(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// `M = m + 1`.
    pub fn total_modalities(&self) -> usize {
        self.modalities.len() + 1
    }
}

/// A sample with its tabular record already embedded.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub images: Vec<Image>,
    pub tabular: Matrix,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_sam: f64,
    pub l_up: f64,
    pub l_cp: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `B × N_c`.
    pub logits: Var,
    /// `(B·M) × C_d`, row `i·M + j`.
    pub pooled: Var,
}

pub fn load_embedder(file: Option<&Path>) -> Result<Arc<dyn SentenceEmbedder>> {
    Ok(match file {
        Some(path) => Arc::new(PrecomputedEmbedder::load(path)?),
        None => Arc::new(HashEmbedder),
    })
}

#[derive(Clone)]
pub struct CfcmlModel {
    pub config: ModelConfig,
    pub schema: ModelSchema,
    pub store: ParamStore,
    encoders: Vec<ImageEncoder>,
    mgcie: MgCie,
    head: Vec<(ParamId, ParamId)>,
    templates: TemplateTable,
    embedder: Arc<dyn SentenceEmbedder>,
}

impl fmt::Debug for CfcmlModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CfcmlModel")
            .field("config", &self.config)
            .field("schema", &self.schema)
            .field("parameters", &self.store.scalar_count())
            .finish()
    }
}

impl CfcmlModel {
    pub fn new<R: Rng>(
        config: ModelConfig,
        schema: ModelSchema,
        embedder: Arc<dyn SentenceEmbedder>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if schema.modalities.is_empty() || schema.attributes.is_empty() || schema.n_classes() < 2 {
            return Err(CfcmlError::Config(
                "model needs ≥ 1 image modality, ≥ 1 attribute and ≥ 2 classes".into(),
            ));
        }
        if embedder.dim() != EMBED_DIM {
            return Err(CfcmlError::Config(format!("embedder width {} ≠ {EMBED_DIM}", embedder.dim())));
        }
        let mut templates = TemplateTable::standard();
        if let Some(t) = &config.fallback_template {
            templates = templates.with_fallback(t.clone())?;
        }
        let mut law = StageShapeLaw::new(config.base_channels, config.spatial_mode);
        law.saturate = config.saturate;
        let mut store = ParamStore::new();
        let mut encoders = Vec::with_capacity(schema.modalities.len());
        let mut sources = Vec::with_capacity(schema.total_modalities());
        let mut counts = Vec::with_capacity(schema.total_modalities());
        for (j, spec) in schema.modalities.iter().enumerate() {
            if spec.dims.len() < 2 {
                return Err(CfcmlError::InvalidDims(format!(
                    "modality `{}` dims {:?} need a channel axis and ≥ 1 spatial axis",
                    spec.name, spec.dims
                )));
            }
            let enc = ImageEncoder::new(&format!("encoder{j}"), law, spec.dims[0], &spec.dims[1..], &mut store, rng)?;
            sources.push(enc.stage_shapes().iter().map(|s| (s.tokens(), s.channels)).collect());
            counts.push(config.image_tokens);
            encoders.push(enc);
        }
        sources.push(vec![(schema.attributes.len(), EMBED_DIM); 4]);
        counts.push(config.tabular_tokens);
        let mgcie = MgCie::new(
            "mgcie",
            config.granularity,
            &sources,
            &counts,
            config.common_dim,
            config.heads,
            &mut store,
            rng,
        )?;
        let mut head = Vec::new();
        let mut width = schema.total_modalities() * config.common_dim;
        let sizes: Vec<usize> = config.hidden.iter().copied().chain([schema.n_classes()]).collect();
        for (k, &out) in sizes.iter().enumerate() {
            let w = store.register_uniform(format!("head.layer{k}.weight"), width, out, width, rng);
            let b = store.register(format!("head.layer{k}.bias"), Matrix::zeros(1, out));
            head.push((w, b));
            width = out;
        }
        Ok(Self {
            config,
            schema,
            store,
            encoders,
            mgcie,
            head,
            templates,
            embedder,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.schema.n_classes()
    }

    pub fn total_modalities(&self) -> usize {
        self.schema.total_modalities()
    }

    pub fn mgcie(&self) -> &MgCie {
        &self.mgcie
    }

    pub fn prepare(&self, sample: &MultimodalSample) -> Result<PreparedSample> {
        if sample.images.len() != self.encoders.len() {
            return Err(CfcmlError::Shape(format!(
                "sample `{}` has {} images, model expects {}",
                sample.id,
                sample.images.len(),
                self.encoders.len()
            )));
        }
        for (img, enc) in sample.images.iter().zip(&self.encoders) {
            enc.check_input(img)?;
        }
        if sample.label >= self.n_classes() {
            return Err(CfcmlError::Dataset(format!(
                "sample `{}` label {} ≥ {} classes",
                sample.id,
                sample.label,
                self.n_classes()
            )));
        }
        if sample.tabular.len() != self.schema.attributes.len() {
            return Err(CfcmlError::Shape(format!(
                "sample `{}` has {} attributes, model expects {}",
                sample.id,
                sample.tabular.len(),
                self.schema.attributes.len()
            )));
        }
        let tabular = embed_tabular(&sample.tabular, &self.templates, self.embedder.as_ref())?;
        Ok(PreparedSample {
            id: sample.id.clone(),
            images: sample.images.clone(),
            tabular: tabular.0,
            label: sample.label,
        })
    }

    pub fn prepare_all(&self, samples: &[MultimodalSample]) -> Result<Vec<PreparedSample>> {
        samples.iter().map(|s| self.prepare(s)).collect()
    }

    /// Runs the batch. Dropout is applied only when `dropout_rng` is given.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &[&PreparedSample],
        dropout_rng: Option<&mut R>,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(CfcmlError::Shape("empty batch".into()));
        }
        let mut concat_rows = Vec::with_capacity(batch.len());
        let mut pooled_rows = Vec::with_capacity(batch.len() * self.total_modalities());
        for sample in batch {
            let mut features = Vec::with_capacity(self.total_modalities());
            for (img, enc) in sample.images.iter().zip(&self.encoders) {
                let tokens = g.constant(image_to_tokens(img));
                features.push(enc.forward(g, p, tokens)?);
            }
            let tab = g.constant(sample.tabular.clone());
            features.push(vec![tab; 4]);
            let out = self.mgcie.forward(g, p, &features)?;
            let pooled: Vec<Var> = out.features.iter().map(|&f| g.mean_rows(f)).collect();
            let unit: Vec<Var> = pooled.iter().map(|&v| g.normalize_rows(v, NORM_EPS)).collect();
            concat_rows.push(g.concat_cols(&unit));
            pooled_rows.extend(pooled);
        }
        let pooled = g.concat_rows(&pooled_rows);
        let mut x = g.concat_rows(&concat_rows);
        if let Some(rng) = dropout_rng {
            let rate = self.config.dropout;
            if rate > 0.0 {
                let (rows, cols) = g.value(x).shape();
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..rows * cols)
                    .map(|_| if rng.random_bool(1.0 - rate) { keep } else { 0.0 })
                    .collect();
                let mask = g.constant(Matrix::from_vec(rows, cols, mask)?);
                x = g.mul(x, mask);
            }
        }
        for (k, &(w, b)) in self.head.iter().enumerate() {
            x = g.matmul(x, p[w]);
            x = g.add_row_bias(x, p[b]);
            if k + 1 < self.head.len() {
                x = g.silu(x);
            }
        }
        Ok(ForwardOutput { logits: x, pooled })
    }
}

/// `L = L_cls + α·L_sam + β·L_up + γ·L_cp`. With `ccrm_enabled = false`
/// no contrastive node is built and the three terms are 0.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    pooled: Var,
    modalities: usize,
    cfg: &ContrastConfig,
    ccrm_enabled: bool,
    class_weights: Option<&[f64]>,
) -> Result<(Var, LossBundle)> {
    let (rows, n_classes) = g.value(logits).shape();
    if rows != labels.len() {
        return Err(CfcmlError::Shape(format!("{rows} logit rows for {} labels", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(CfcmlError::Shape(format!("label {y} ≥ {n_classes} classes")));
    }
    let cls = g.cross_entropy(logits, labels, class_weights);
    let mut bundle = LossBundle {
        l_cls: g.value(cls).item(),
        ..Default::default()
    };
    if !ccrm_enabled {
        bundle.total = bundle.l_cls;
        return Ok((cls, bundle));
    }
    let l = ccrm_losses(g, pooled, labels, modalities, n_classes, cfg)?;
    bundle.l_sam = g.value(l.sam).item();
    bundle.l_up = g.value(l.up).item();
    bundle.l_cp = g.value(l.cp).item();
    let mut total = cls;
    for (term, w) in [(l.sam, cfg.alpha), (l.up, cfg.beta), (l.cp, cfg.gamma)] {
        let scaled = g.scale(term, w);
        total = g.add(total, scaled);
    }
    bundle.total = g.value(total).item();
    Ok((total, bundle))
}

/// Inverse-frequency weights normalised to mean 1 over present classes.
pub fn inverse_frequency_weights(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1) as f64;
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c > 0 { labels.len() as f64 / c as f64 } else { 0.0 })
        .collect();
    let mean = raw.iter().sum::<f64>() / present;
    raw.iter().map(|w| w / mean).collect()
}
