//! Training, evaluation and cross-validation loops.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{augment_images, load_dataset, make_batches, DatasetManifest, MultimodalSample};
use crate::error::{CfcmlError, Result};
use crate::graph::Graph;
use crate::metrics::{argmax_rows, compute_multiclass_metrics, EvalReport};
use crate::tensor::Matrix;

use super::checkpoint::{Checkpoint, ModelSpec};
use super::config::RunConfig;
use super::model::{inverse_frequency_weights, load_embedder, total_loss, CfcmlModel, LossBundle, ModelSchema, PreparedSample};
use super::optim::{lr_at, Adam};

pub const LOG_FILE: &str = "epochs.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
const EVAL_CHUNK: usize = 32;

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBundle,
    pub val_acc: Option<f64>,
    pub val_macro_f1: Option<f64>,
    pub val_auc: Option<f64>,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
    /// `B × N_c`, rows sum to 1.
    pub probs: Matrix,
    /// `(B·M) × C_d`, row `i·M + j`.
    pub pooled: Matrix,
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Dropout-free, parameter-free-of-side-effects pass over `samples`.
pub fn evaluate(model: &CfcmlModel, samples: &[PreparedSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(CfcmlError::Dataset("nothing to evaluate".into()));
    }
    let mut prob_rows = Vec::with_capacity(samples.len());
    let mut pooled_rows = Vec::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g);
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let out = model.forward::<ChaCha8Rng>(&mut g, &p, &refs, None)?;
        prob_rows.extend(softmax_rows(g.value(out.logits)).to_rows());
        pooled_rows.extend(g.value(out.pooled).to_rows());
    }
    let probs = Matrix::from_rows(&prob_rows)?;
    Ok(Evaluation {
        labels: samples.iter().map(|s| s.label).collect(),
        predicted: argmax_rows(&probs),
        pooled: Matrix::from_rows(&pooled_rows)?,
        probs,
    })
}

/// Builds the model of `cfg` for `schema`, initialised from the seed.
pub fn build_model(cfg: &RunConfig, schema: ModelSchema) -> Result<CfcmlModel> {
    let embeddings = cfg.model.embeddings_file.as_ref().map(|f| cfg.resolve(f));
    let embedder = load_embedder(embeddings.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    CfcmlModel::new(cfg.model.clone(), schema, embedder, &mut rng)
}

/// Model, optimizer and random stream of one training run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: CfcmlModel,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u32,
}

/// Result of [`Trainer::fit`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Option<Checkpoint>,
    pub log: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, schema: ModelSchema) -> Result<Self> {
        let model = build_model(cfg, schema)?;
        let adam = Adam::new(&model.store, cfg.train.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(1);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            adam,
            rng,
            epoch: 0,
        })
    }

    pub fn resume(cfg: &RunConfig, schema: ModelSchema, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, schema)?;
        ckpt.check_compatible(&t.spec())?;
        ckpt.restore(&mut t.model.store, Some(&mut t.adam))?;
        t.rng = ckpt.rng.restore();
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            config: self.model.config.clone(),
            schema: self.model.schema.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.spec(), &self.model.store, &self.adam, self.epoch, &self.rng)
    }

    /// One pass over `train`; returns the sample-weighted mean losses.
    pub fn train_epoch(&mut self, train: &[PreparedSample]) -> Result<(f64, LossBundle)> {
        let epoch = self.epoch as usize + 1;
        let lr = lr_at(epoch, &self.cfg.train);
        let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
        let weights = self
            .cfg
            .train
            .class_weights
            .then(|| inverse_frequency_weights(&labels, self.model.n_classes()));
        let ccrm = self.model.config.ccrm_enabled;
        let batches = make_batches(&labels, self.cfg.train.batch_size, self.rng.next_u64(), ccrm)?;
        let m = self.model.total_modalities();
        let mut sum = LossBundle::default();
        for batch in &batches {
            let augmented: Vec<PreparedSample> = batch
                .iter()
                .map(|&i| PreparedSample {
                    images: augment_images(&train[i].images, &self.cfg.augment, &mut self.rng),
                    ..train[i].clone()
                })
                .collect();
            let refs: Vec<&PreparedSample> = augmented.iter().collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut g = Graph::new();
                let p = self.model.store.bind(&mut g);
                let out = self.model.forward(&mut g, &p, &refs, Some(&mut self.rng))?;
                let (loss, bundle) = total_loss(
                    &mut g,
                    out.logits,
                    &batch_labels,
                    out.pooled,
                    m,
                    &self.cfg.contrast,
                    ccrm,
                    weights.as_deref(),
                )?;
                let k = batch.len() as f64;
                sum.l_cls += k * bundle.l_cls;
                sum.l_sam += k * bundle.l_sam;
                sum.l_up += k * bundle.l_up;
                sum.l_cp += k * bundle.l_cp;
                sum.total += k * bundle.total;
                let mut grads = g.backward(loss);
                self.model
                    .store
                    .ids()
                    .map(|id| grads.take(p.var(id)))
                    .collect::<Vec<_>>()
            };
            self.adam.step(&mut self.model.store, &grads, lr);
        }
        self.epoch += 1;
        let n = train.len() as f64;
        Ok((
            lr,
            LossBundle {
                l_cls: sum.l_cls / n,
                l_sam: sum.l_sam / n,
                l_up: sum.l_up / n,
                l_cp: sum.l_cp / n,
                total: sum.total / n,
            },
        ))
    }

    /// Trains up to `cfg.train.epochs`, keeping the checkpoint with the best
    /// validation AUC (accuracy when AUC is undefined). When `out_dir` is
    /// given the epoch log and both checkpoints are written there.
    pub fn fit(
        &mut self,
        train: &[PreparedSample],
        val: &[PreparedSample],
        out_dir: Option<&Path>,
    ) -> Result<TrainOutcome> {
        let mut log_writer = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| CfcmlError::io(format!("creating {}", dir.display()), e))?;
                let path = dir.join(LOG_FILE);
                let file = File::create(&path).map_err(|e| CfcmlError::io(format!("creating {}", path.display()), e))?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        let mut best: Option<(f64, Checkpoint)> = None;
        let mut log = Vec::new();
        while (self.epoch as usize) < self.cfg.train.epochs {
            let (lr, loss) = self.train_epoch(train)?;
            let (mut val_acc, mut val_macro_f1, mut val_auc) = (None, None, None);
            let mut improved = false;
            if !val.is_empty() {
                let ev = evaluate(&self.model, val)?;
                let m = compute_multiclass_metrics(&ev.labels, &ev.predicted, &ev.probs)?;
                val_acc = Some(m.acc);
                val_macro_f1 = Some(m.macro_f1);
                val_auc = m.auc_macro_ovr;
                let score = m.auc_macro_ovr.unwrap_or(m.acc);
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, self.checkpoint()));
                    improved = true;
                }
            }
            let record = EpochRecord {
                epoch: self.epoch,
                lr,
                loss,
                val_acc,
                val_macro_f1,
                val_auc,
                best: improved,
            };
            if let Some(w) = log_writer.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&record).expect("record serializes"))
                    .and_then(|_| w.flush())
                    .map_err(|e| CfcmlError::io("writing epoch log".to_string(), e))?;
            }
            log.push(record);
        }
        let last = self.checkpoint();
        let best = best.map(|(_, c)| c);
        if let Some(dir) = out_dir {
            last.save(&dir.join(LAST_CHECKPOINT))?;
            best.as_ref().unwrap_or(&last).save(&dir.join(BEST_CHECKPOINT))?;
        }
        Ok(TrainOutcome { last, best, log })
    }
}

/// Loads the dataset named by `cfg`.
pub fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    DatasetManifest::load(&cfg.data_root())
}

/// Loads and embeds one split.
pub fn prepare_split(model: &CfcmlModel, manifest: &DatasetManifest, split: &str) -> Result<Vec<PreparedSample>> {
    model.prepare_all(&load_dataset(manifest, split)?)
}

/// `train` on the configured splits, writing to the configured out dir.
pub fn run_training(cfg: &RunConfig, resume: Option<&Checkpoint>) -> Result<(TrainOutcome, PathBuf)> {
    let manifest = load_manifest(cfg)?;
    let schema = ModelSchema::from_manifest(&manifest);
    let mut trainer = match resume {
        Some(c) => Trainer::resume(cfg, schema, c)?,
        None => Trainer::new(cfg, schema)?,
    };
    let train = prepare_split(&trainer.model, &manifest, &cfg.data.train_split)?;
    if train.is_empty() {
        return Err(CfcmlError::Dataset(format!("split `{}` is empty", cfg.data.train_split)));
    }
    let val = prepare_split(&trainer.model, &manifest, &cfg.data.val_split)?;
    let out_dir = cfg.out_dir();
    let outcome = trainer.fit(&train, &val, Some(&out_dir))?;
    Ok((outcome, out_dir))
}

/// Restores a model from `ckpt`, refusing a config that disagrees with it.
pub fn model_from_checkpoint(cfg: &RunConfig, manifest: &DatasetManifest, ckpt: &Checkpoint) -> Result<CfcmlModel> {
    let schema = ModelSchema::from_manifest(manifest);
    let spec = ModelSpec {
        config: cfg.model.clone(),
        schema: schema.clone(),
    };
    ckpt.check_compatible(&spec)?;
    let mut model = build_model(cfg, schema)?;
    ckpt.restore(&mut model.store, None)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation over folds.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<EvalReport>,
    pub acc: MeanStd,
    pub weighted_f1: MeanStd,
    pub macro_f1: MeanStd,
    pub auc: Option<MeanStd>,
}

/// K-fold cross-validation over every sample of the train and validation
/// splits that carries a fold id; fold `k` is held out in round `k`.
pub fn cross_validate(cfg: &RunConfig, config_text: &str, folds: usize) -> Result<CvReport> {
    if folds < 2 {
        return Err(CfcmlError::Config("cross-validation needs ≥ 2 folds".into()));
    }
    let manifest = load_manifest(cfg)?;
    let schema = ModelSchema::from_manifest(&manifest);
    let mut pool: Vec<(usize, MultimodalSample)> = Vec::new();
    for entry in manifest.samples.iter().filter(|e| e.split == cfg.data.train_split || e.split == cfg.data.val_split) {
        let fold = entry
            .fold
            .ok_or_else(|| CfcmlError::Dataset(format!("sample `{}` has no fold id", entry.id)))?;
        pool.push((fold % folds, manifest.load_entry(entry)?));
    }
    let mut reports = Vec::with_capacity(folds);
    for k in 0..folds {
        let mut trainer = Trainer::new(cfg, schema.clone())?;
        let split = |held: bool| -> Result<Vec<PreparedSample>> {
            pool.iter()
                .filter(|(f, _)| (*f == k) == held)
                .map(|(_, s)| trainer.model.prepare(s))
                .collect()
        };
        let (train, val) = (split(false)?, split(true)?);
        if train.is_empty() || val.is_empty() {
            return Err(CfcmlError::Dataset(format!("fold {k} is empty")));
        }
        trainer.fit(&train, &[], None)?;
        let ev = evaluate(&trainer.model, &val)?;
        reports.push(EvalReport::build(&format!("fold{k}"), &ev.labels, &ev.probs, config_text)?);
    }
    let collect = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let aucs: Option<Vec<f64>> = reports.iter().map(|r| r.multiclass.auc_macro_ovr).collect();
    Ok(CvReport {
        acc: MeanStd::of(&collect(&|r| r.multiclass.acc)),
        weighted_f1: MeanStd::of(&collect(&|r| r.multiclass.weighted_f1)),
        macro_f1: MeanStd::of(&collect(&|r| r.multiclass.macro_f1)),
        auc: aucs.map(|a| MeanStd::of(&a)),
        folds: reports,
    })
}
