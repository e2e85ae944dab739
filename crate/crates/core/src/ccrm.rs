//! Class-aware crossmodal relationship mining.
//!
//! Works on pooled features: one `C_d` vector per (sample, modality), stacked
//! into a `(B·M) × C_d` matrix with row `i·M + j` for sample `i`, modality
//! `j`. Prototypes are batch means that keep their gradient path (unless
//! `stop_grad_prototypes` is set). Each loss is the mean over anchors of
//! `−log(Op₊ / (Op₊ + Op₋))` where `Op(a, S) = Σ_k exp(cos(a, s_k)/τ)`.

use serde::{Deserialize, Serialize};

use crate::error::{CfcmlError, Result};
use crate::graph::{Graph, Var};
use crate::mgcie::TokenSequence;
use crate::tensor::Matrix;

pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Literal `exp(cos)/τ` instead of `exp(cos/τ)`.
    pub tau_outside_exp: bool,
    pub stop_grad_prototypes: bool,
    /// Prototype anchors only contrast against other classes' prototypes of
    /// their own modality.
    pub up_negatives_same_modality_only: bool,
    /// Sample anchors take only their own modality's prototype (plus the
    /// crossmodal one) as positives.
    pub sample_positives_own_modality: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            alpha: 0.06,
            beta: 0.04,
            gamma: 0.24,
            tau_outside_exp: false,
            stop_grad_prototypes: false,
            up_negatives_same_modality_only: false,
            sample_positives_own_modality: false,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CfcmlError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(CfcmlError::Config(format!("{name} must be ≥ 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Token-mean pooling.
pub fn pool_tokens(seq: &TokenSequence) -> Vec<f64> {
    let m = seq.matrix();
    let n = m.rows() as f64;
    (0..m.cols())
        .map(|c| (0..m.rows()).map(|r| m.get(r, c)).sum::<f64>() / n)
        .collect()
}

/// `cp`: `N_c × C_d`; `up`: `(N_c·M) × C_d` with row `l·M + j`. Rows of
/// absent classes are zero and masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub cp: Matrix,
    pub up: Matrix,
    pub present: Vec<bool>,
    pub modalities: usize,
}

impl PrototypeBank {
    pub fn n_classes(&self) -> usize {
        self.present.len()
    }

    pub fn cp(&self, class: usize) -> Option<&[f64]> {
        self.present[class].then(|| self.cp.row(class))
    }

    pub fn up(&self, class: usize, modality: usize) -> Option<&[f64]> {
        self.present[class].then(|| self.up.row(class * self.modalities + modality))
    }
}

/// Prototype nodes on a graph.
#[derive(Clone, Debug)]
pub struct GraphPrototypes {
    pub cp: Var,
    pub up: Var,
    pub present: Vec<bool>,
    pub modalities: usize,
}

fn check_batch(rows: usize, labels: &[usize], modalities: usize, n_classes: usize) -> Result<()> {
    if labels.is_empty() || modalities == 0 || rows != labels.len() * modalities {
        return Err(CfcmlError::Shape(format!(
            "{rows} pooled rows do not match {} samples × {modalities} modalities",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(CfcmlError::Shape(format!("label {l} ≥ {n_classes} classes")));
    }
    Ok(())
}

/// Averaging matrices `(A_up, A_cp)` so that `up = A_up·Z` and `cp = A_cp·Z`.
fn averaging_maps(labels: &[usize], modalities: usize, n_classes: usize) -> (Matrix, Matrix, Vec<bool>) {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let rows = labels.len() * modalities;
    let mut a_up = Matrix::zeros(n_classes * modalities, rows);
    let mut a_cp = Matrix::zeros(n_classes, rows);
    for (i, &l) in labels.iter().enumerate() {
        let w = 1.0 / counts[l] as f64;
        for j in 0..modalities {
            a_up.set(l * modalities + j, i * modalities + j, w);
            a_cp.set(l, i * modalities + j, w / modalities as f64);
        }
    }
    (a_up, a_cp, counts.iter().map(|&c| c > 0).collect())
}

pub fn prototypes_graph(
    g: &mut Graph,
    features: Var,
    labels: &[usize],
    modalities: usize,
    n_classes: usize,
) -> Result<GraphPrototypes> {
    check_batch(g.value(features).rows(), labels, modalities, n_classes)?;
    let (a_up, a_cp, present) = averaging_maps(labels, modalities, n_classes);
    let a_up = g.constant(a_up);
    let a_cp = g.constant(a_cp);
    Ok(GraphPrototypes {
        up: g.matmul(a_up, features),
        cp: g.matmul(a_cp, features),
        present,
        modalities,
    })
}

pub fn compute_prototypes(
    features: &Matrix,
    labels: &[usize],
    modalities: usize,
    n_classes: usize,
) -> Result<PrototypeBank> {
    let mut g = Graph::new();
    let z = g.constant(features.clone());
    let p = prototypes_graph(&mut g, z, labels, modalities, n_classes)?;
    Ok(PrototypeBank {
        cp: g.value(p.cp).clone(),
        up: g.value(p.up).clone(),
        present: p.present,
        modalities,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    dot / (na * nb)
}

/// `Σ_k exp(cos(anchor, s_k)/τ)`, or `Σ_k exp(cos)/τ` with `tau_outside_exp`.
pub fn op_similarity(anchor: &[f64], set: &[&[f64]], tau: f64, tau_outside_exp: bool) -> f64 {
    set.iter()
        .map(|s| {
            let c = cosine(anchor, s);
            if tau_outside_exp {
                c.exp() / tau
            } else {
                (c / tau).exp()
            }
        })
        .sum()
}

/// Per-anchor term `−log(Op₊ / (Op₊ + Op₋))`.
pub fn anchor_term(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]], cfg: &ContrastConfig) -> f64 {
    let p = op_similarity(anchor, positives, cfg.tau, cfg.tau_outside_exp);
    let n = op_similarity(anchor, negatives, cfg.tau, cfg.tau_outside_exp);
    (p + n).ln() - p.ln()
}

/// Mean anchor term over `anchors` (rows of `anchor_set`) against the rows
/// of `targets`. Masks are `anchors.len() × targets.rows()`.
fn contrast(
    g: &mut Graph,
    anchor_set: Var,
    anchors: &[usize],
    targets: Var,
    pos: Matrix,
    neg: Matrix,
    cfg: &ContrastConfig,
    what: &str,
) -> Result<Var> {
    let has_negative = (0..neg.rows()).any(|r| neg.row(r).iter().any(|&x| x > 0.0));
    if anchors.is_empty() || !has_negative {
        return Err(CfcmlError::DegenerateBatch(format!(
            "{what}: no anchor has a negative (need ≥ 2 classes)"
        )));
    }
    let cols = g.value(anchor_set).cols();
    let index = anchors
        .iter()
        .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
        .collect();
    let a = g.gather(anchor_set, index, anchors.len(), cols);
    let a = g.normalize_rows(a, COSINE_EPS);
    let t = g.normalize_rows(targets, COSINE_EPS);
    let tt = g.transpose(t);
    let sim = g.matmul(a, tt);
    let e = if cfg.tau_outside_exp {
        let e = g.exp(sim);
        g.scale(e, 1.0 / cfg.tau)
    } else {
        let s = g.scale(sim, 1.0 / cfg.tau);
        g.exp(s)
    };
    let pos = g.constant(pos);
    let neg = g.constant(neg);
    let ep = g.mul(e, pos);
    let en = g.mul(e, neg);
    let p = g.sum_cols(ep);
    let n = g.sum_cols(en);
    let total = g.add(p, n);
    let ln_total = g.ln(total);
    let ln_p = g.ln(p);
    let terms = g.sub(ln_total, ln_p);
    Ok(g.mean_all(terms))
}

fn maybe_detach(g: &mut Graph, v: Var, cfg: &ContrastConfig) -> Var {
    if cfg.stop_grad_prototypes {
        g.detach(v)
    } else {
        v
    }
}

/// Every (sample, modality) feature is an anchor. Targets are
/// `[Z; up; cp]`.
pub fn sample_anchor_loss_graph(
    g: &mut Graph,
    features: Var,
    labels: &[usize],
    protos: &GraphPrototypes,
    cfg: &ContrastConfig,
) -> Result<Var> {
    let m = protos.modalities;
    let nc = protos.present.len();
    check_batch(g.value(features).rows(), labels, m, nc)?;
    let rows = labels.len() * m;
    let width = rows + nc * m + nc;
    let mut pos = Matrix::zeros(rows, width);
    let mut neg = Matrix::zeros(rows, width);
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..m {
            let r = i * m + j;
            for jp in 0..m {
                if !cfg.sample_positives_own_modality || jp == j {
                    pos.set(r, rows + y * m + jp, 1.0);
                }
            }
            pos.set(r, rows + nc * m + y, 1.0);
            for (k, &yk) in labels.iter().enumerate() {
                if yk != y {
                    neg.set(r, k * m + j, 1.0);
                }
            }
        }
    }
    let up = maybe_detach(g, protos.up, cfg);
    let cp = maybe_detach(g, protos.cp, cfg);
    let targets = g.concat_rows(&[features, up, cp]);
    let anchors: Vec<usize> = (0..rows).collect();
    contrast(g, features, &anchors, targets, pos, neg, cfg, "sample anchors")
}

/// Every present `up^l_j` is an anchor; positive `cp^l`; negatives are the
/// unimodal prototypes of other classes. Targets are `[up; cp]`.
pub fn unimodal_anchor_loss_graph(g: &mut Graph, protos: &GraphPrototypes, cfg: &ContrastConfig) -> Result<Var> {
    let m = protos.modalities;
    let nc = protos.present.len();
    let anchors: Vec<usize> = (0..nc * m).filter(|r| protos.present[r / m]).collect();
    let width = nc * m + nc;
    let mut pos = Matrix::zeros(anchors.len(), width);
    let mut neg = Matrix::zeros(anchors.len(), width);
    for (a, &r) in anchors.iter().enumerate() {
        let (l, j) = (r / m, r % m);
        pos.set(a, nc * m + l, 1.0);
        for lp in (0..nc).filter(|&lp| lp != l && protos.present[lp]) {
            for jp in 0..m {
                if !cfg.up_negatives_same_modality_only || jp == j {
                    neg.set(a, lp * m + jp, 1.0);
                }
            }
        }
    }
    let up = maybe_detach(g, protos.up, cfg);
    let cp = maybe_detach(g, protos.cp, cfg);
    let targets = g.concat_rows(&[up, cp]);
    contrast(g, up, &anchors, targets, pos, neg, cfg, "unimodal prototype anchors")
}

/// Every present `cp^l` is an anchor; positives `up^l_j` for all `j`;
/// negatives the other classes' crossmodal prototypes.
pub fn crossmodal_anchor_loss_graph(g: &mut Graph, protos: &GraphPrototypes, cfg: &ContrastConfig) -> Result<Var> {
    let m = protos.modalities;
    let nc = protos.present.len();
    let anchors: Vec<usize> = (0..nc).filter(|&l| protos.present[l]).collect();
    let width = nc * m + nc;
    let mut pos = Matrix::zeros(anchors.len(), width);
    let mut neg = Matrix::zeros(anchors.len(), width);
    for (a, &l) in anchors.iter().enumerate() {
        for j in 0..m {
            pos.set(a, l * m + j, 1.0);
        }
        for lp in (0..nc).filter(|&lp| lp != l && protos.present[lp]) {
            neg.set(a, nc * m + lp, 1.0);
        }
    }
    let up = maybe_detach(g, protos.up, cfg);
    let cp = maybe_detach(g, protos.cp, cfg);
    let targets = g.concat_rows(&[up, cp]);
    contrast(g, cp, &anchors, targets, pos, neg, cfg, "crossmodal prototype anchors")
}

#[derive(Clone, Copy, Debug)]
pub struct CcrmLosses {
    pub sam: Var,
    pub up: Var,
    pub cp: Var,
}

/// All three losses from pooled features.
pub fn ccrm_losses(
    g: &mut Graph,
    features: Var,
    labels: &[usize],
    modalities: usize,
    n_classes: usize,
    cfg: &ContrastConfig,
) -> Result<CcrmLosses> {
    let protos = prototypes_graph(g, features, labels, modalities, n_classes)?;
    Ok(CcrmLosses {
        sam: sample_anchor_loss_graph(g, features, labels, &protos, cfg)?,
        up: unimodal_anchor_loss_graph(g, &protos, cfg)?,
        cp: crossmodal_anchor_loss_graph(g, &protos, cfg)?,
    })
}

fn bank_on_graph(g: &mut Graph, bank: &PrototypeBank) -> GraphPrototypes {
    GraphPrototypes {
        cp: g.constant(bank.cp.clone()),
        up: g.constant(bank.up.clone()),
        present: bank.present.clone(),
        modalities: bank.modalities,
    }
}

pub fn loss_sample_anchor(
    features: &Matrix,
    labels: &[usize],
    bank: &PrototypeBank,
    cfg: &ContrastConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(features.clone());
    let p = bank_on_graph(&mut g, bank);
    let l = sample_anchor_loss_graph(&mut g, z, labels, &p, cfg)?;
    Ok(g.value(l).item())
}

pub fn loss_unimodal_proto_anchor(bank: &PrototypeBank, cfg: &ContrastConfig) -> Result<f64> {
    let mut g = Graph::new();
    let p = bank_on_graph(&mut g, bank);
    let l = unimodal_anchor_loss_graph(&mut g, &p, cfg)?;
    Ok(g.value(l).item())
}

pub fn loss_crossmodal_proto_anchor(bank: &PrototypeBank, cfg: &ContrastConfig) -> Result<f64> {
    let mut g = Graph::new();
    let p = bank_on_graph(&mut g, bank);
    let l = crossmodal_anchor_loss_graph(&mut g, &p, cfg)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tau: f64) -> ContrastConfig {
        ContrastConfig {
            tau,
            ..Default::default()
        }
    }

    #[test]
    fn pooling_means_tokens() {
        let s = TokenSequence::new(Matrix::identity(2)).unwrap();
        assert_eq!(pool_tokens(&s), vec![0.5, 0.5]);
        let one = TokenSequence::new(Matrix::row_vector(&[3.0, -1.0])).unwrap();
        assert_eq!(pool_tokens(&one), vec![3.0, -1.0]);
    }

    #[test]
    fn op_similarity_examples() {
        assert_eq!(op_similarity(&[1.0, 0.0], &[], 0.5, false), 0.0);
        let e = op_similarity(&[0.3, 0.4], &[&[0.3, 0.4]], 1.0, false);
        assert!((e - std::f64::consts::E).abs() < 1e-12);
        let v = op_similarity(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]], 0.5, false);
        let expected = 2f64.exp() + 1.0 + (-2f64).exp();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn anchor_term_closed_forms() {
        let c = cfg(1.0);
        assert_eq!(anchor_term(&[1.0, 0.0], &[&[2.0, 0.0]], &[], &c), 0.0);
        let t = anchor_term(&[1.0, 0.0], &[&[1.0, 0.0]], &[&[-1.0, 0.0]], &c);
        let e = std::f64::consts::E;
        assert!((t - (-(e / (e + 1.0 / e)).ln())).abs() < 1e-12);
        assert!((t - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn single_member_prototypes() {
        let z = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let bank = compute_prototypes(&z, &[1], 3, 2).unwrap();
        assert_eq!(bank.present, vec![false, true]);
        assert_eq!(bank.cp(1).unwrap(), &[1.0, 2.0]);
        for j in 0..3 {
            assert_eq!(bank.up(1, j).unwrap(), &[1.0, 2.0]);
        }
        assert!(bank.cp(0).is_none());
    }

    #[test]
    fn one_class_is_degenerate() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.0]]).unwrap();
        let bank = compute_prototypes(&z, &[0, 0], 2, 2).unwrap();
        let c = cfg(0.1);
        assert!(matches!(loss_unimodal_proto_anchor(&bank, &c), Err(CfcmlError::DegenerateBatch(_))));
        assert!(matches!(loss_crossmodal_proto_anchor(&bank, &c), Err(CfcmlError::DegenerateBatch(_))));
        assert!(matches!(loss_sample_anchor(&z, &[0, 0], &bank, &c), Err(CfcmlError::DegenerateBatch(_))));
    }

    #[test]
    fn identical_classes_give_closed_form() {
        for m in 1..5 {
            let z = Matrix::filled(2 * m, 3, 0.7);
            let bank = compute_prototypes(&z, &[0, 1], m, 2).unwrap();
            let l = loss_crossmodal_proto_anchor(&bank, &cfg(0.07)).unwrap();
            let expected = -(m as f64 / (m as f64 + 1.0)).ln();
            assert!((l - expected).abs() < 1e-9, "m = {m}");
        }
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(cfg(0.0).validate().is_err());
        assert!(ContrastConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(ContrastConfig::default().validate().is_ok());
    }
}
