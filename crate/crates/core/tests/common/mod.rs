//! Independent reference implementations shared by the integration tests.
//! Everything here is written with explicit loops over `Vec<Vec<f64>>` and
//! does not call into the library's math.

#![allow(dead_code)]

use cfcml::params::{BoundParams, ParamStore};
use cfcml::{Graph, Matrix, Var};
use rand::Rng;

pub type Vector = Vec<f64>;

pub fn random_vec<R: Rng>(n: usize, rng: &mut R) -> Vector {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn to_rows(m: &Matrix) -> Vec<Vector> {
    (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.get(r, c)).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt().max(1e-12);
    let nb = dot(b, b).sqrt().max(1e-12);
    dot(a, b) / (na * nb)
}

// ---------------------------------------------------------------- ccrm

pub struct OracleBank {
    /// `up[l][j]`, `None` for absent classes.
    pub up: Vec<Vec<Option<Vector>>>,
    pub cp: Vec<Option<Vector>>,
}

/// `z[i][j]` is the pooled feature of sample `i`, modality `j`.
pub fn oracle_prototypes(z: &[Vec<Vector>], labels: &[usize], n_classes: usize) -> OracleBank {
    let m = z[0].len();
    let d = z[0][0].len();
    let mut up = vec![vec![None; m]; n_classes];
    let mut cp = vec![None; n_classes];
    for l in 0..n_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == l).collect();
        if members.is_empty() {
            continue;
        }
        let mut all = vec![0.0; d];
        for j in 0..m {
            let mut acc = vec![0.0; d];
            for &i in &members {
                for k in 0..d {
                    acc[k] += z[i][j][k];
                    all[k] += z[i][j][k];
                }
            }
            for a in acc.iter_mut() {
                *a /= members.len() as f64;
            }
            up[l][j] = Some(acc);
        }
        for a in all.iter_mut() {
            *a /= (members.len() * m) as f64;
        }
        cp[l] = Some(all);
    }
    OracleBank { up, cp }
}

fn op(anchor: &[f64], set: &[&Vector], tau: f64) -> f64 {
    let mut s = 0.0;
    for v in set {
        s += (cosine(anchor, v) / tau).exp();
    }
    s
}

fn term(anchor: &[f64], pos: &[&Vector], neg: &[&Vector], tau: f64) -> f64 {
    let p = op(anchor, pos, tau);
    let n = op(anchor, neg, tau);
    -(p / (p + n)).ln()
}

/// `None` when no anchor has a negative.
pub fn oracle_sample_loss(z: &[Vec<Vector>], labels: &[usize], bank: &OracleBank, tau: f64) -> Option<f64> {
    let m = z[0].len();
    let mut total = 0.0;
    let mut count = 0;
    let mut any_negative = false;
    for i in 0..z.len() {
        for j in 0..m {
            let y = labels[i];
            let mut pos: Vec<&Vector> = Vec::new();
            for jp in 0..m {
                pos.push(bank.up[y][jp].as_ref().unwrap());
            }
            pos.push(bank.cp[y].as_ref().unwrap());
            let mut neg: Vec<&Vector> = Vec::new();
            for k in 0..z.len() {
                if labels[k] != y {
                    neg.push(&z[k][j]);
                }
            }
            any_negative |= !neg.is_empty();
            total += term(&z[i][j], &pos, &neg, tau);
            count += 1;
        }
    }
    any_negative.then(|| total / count as f64)
}

pub fn oracle_unimodal_loss(bank: &OracleBank, tau: f64) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0;
    let mut any_negative = false;
    for l in 0..bank.cp.len() {
        for j in 0..bank.up[l].len() {
            let Some(anchor) = &bank.up[l][j] else { continue };
            let pos = vec![bank.cp[l].as_ref().unwrap()];
            let mut neg: Vec<&Vector> = Vec::new();
            for lp in 0..bank.cp.len() {
                if lp == l {
                    continue;
                }
                for v in bank.up[lp].iter().flatten() {
                    neg.push(v);
                }
            }
            any_negative |= !neg.is_empty();
            total += term(anchor, &pos, &neg, tau);
            count += 1;
        }
    }
    any_negative.then(|| total / count as f64)
}

pub fn oracle_crossmodal_loss(bank: &OracleBank, tau: f64) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0;
    let mut any_negative = false;
    for l in 0..bank.cp.len() {
        let Some(anchor) = &bank.cp[l] else { continue };
        let pos: Vec<&Vector> = bank.up[l].iter().flatten().collect();
        let mut neg: Vec<&Vector> = Vec::new();
        for lp in 0..bank.cp.len() {
            if lp != l {
                if let Some(v) = &bank.cp[lp] {
                    neg.push(v);
                }
            }
        }
        any_negative |= !neg.is_empty();
        total += term(anchor, &pos, &neg, tau);
        count += 1;
    }
    any_negative.then(|| total / count as f64)
}

/// Stacks `z[i][j]` into the library's `(B·M) × d` layout.
pub fn stack(z: &[Vec<Vector>]) -> Matrix {
    let rows: Vec<Vector> = z.iter().flat_map(|s| s.iter().cloned()).collect();
    Matrix::from_rows(&rows).unwrap()
}

// ---------------------------------------------------------------- attention

fn matmul(a: &[Vector], b: &[Vector]) -> Vec<Vector> {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for k in 0..b.len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Supplement and per-head attention of one primary over an auxiliary.
pub fn oracle_attention(
    primary: &[Vector],
    auxiliary: &[Vector],
    wq: &[Vector],
    wk: &[Vector],
    wv: &[Vector],
    heads: usize,
) -> (Vec<Vector>, Vec<Vec<Vector>>) {
    let q = matmul(primary, wq);
    let k = matmul(auxiliary, wk);
    let v = matmul(auxiliary, wv);
    let d = wq.len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; primary.len()];
    let mut maps = Vec::new();
    for h in 0..heads {
        let mut map = vec![vec![0.0; auxiliary.len()]; primary.len()];
        for r in 0..primary.len() {
            let mut scores = Vec::new();
            for c in 0..auxiliary.len() {
                let mut s = 0.0;
                for x in h * dh..(h + 1) * dh {
                    s += q[r][x] * k[c][x];
                }
                scores.push(s / (dh as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for c in 0..auxiliary.len() {
                map[r][c] = (scores[c] - max).exp() / denom;
                for x in h * dh..(h + 1) * dh {
                    out[r][x] += map[r][c] * v[c][x];
                }
            }
        }
        maps.push(map);
    }
    (out, maps)
}

pub struct OracleCieWeights {
    pub wq: Vec<Vector>,
    pub wk: Vec<Vector>,
    pub wv: Vec<Vector>,
    pub fold: Vec<Vector>,
}

/// Straight-line enhancement of every modality at one granularity.
pub fn oracle_cie(seqs: &[Vec<Vector>], weights: &[OracleCieWeights], heads: usize) -> Vec<Vec<Vector>> {
    let mut out = Vec::new();
    for b in 0..seqs.len() {
        let mut aux = Vec::new();
        for a in 0..seqs.len() {
            if a != b {
                aux.extend(seqs[a].iter().cloned());
            }
        }
        let w = &weights[b];
        let (sup, _) = oracle_attention(&seqs[b], &aux, &w.wq, &w.wk, &w.wv, heads);
        let mut cat = seqs[b].clone();
        cat.extend(sup);
        out.push(matmul(&w.fold, &cat));
    }
    out
}

// ---------------------------------------------------------------- gradients

pub struct GradCheck {
    /// Relative error per scalar parameter, with the parameter name.
    pub errors: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn fraction_below(&self, tol: f64) -> f64 {
        self.errors.iter().filter(|(_, e)| *e < tol).count() as f64 / self.errors.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.errors.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// `|a − n| / max(|a|, |n|)`; two exact zeros count as agreement, and
/// magnitudes below `floor` are measured absolutely against it.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    let scale = a.abs().max(n.abs()).max(floor);
    (a - n).abs() / scale
}

/// Central differences with step `h` on every scalar of `store`, compared
/// with the tape gradient of `build`.
pub fn check_param_gradients(
    store: &mut ParamStore,
    h: f64,
    floor: f64,
    build: impl Fn(&mut Graph, &BoundParams) -> Var,
) -> GradCheck {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let loss = build(&mut g, &p);
    let grads = g.backward(loss);
    let analytic: Vec<Matrix> = store
        .ids()
        .map(|id| {
            grads
                .get(p.var(id))
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(store.get(id).rows(), store.get(id).cols()))
        })
        .collect();
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let l = build(&mut g, &p);
        g.value(l).item()
    };
    let ids: Vec<_> = store.ids().collect();
    let mut errors = Vec::new();
    for (pi, id) in ids.into_iter().enumerate() {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[k];
            errors.push((format!("{}[{k}]", store.name(id)), relative_error(a, numeric, floor)));
        }
    }
    GradCheck { errors }
}

// ---------------------------------------------------------------- fixtures

/// Writes a synthetic dataset under `dir/data` and returns a config rooted
/// at `dir` with `extra` appended.
pub fn synth_run(dir: &std::path::Path, synth: &cfcml::dataio::SynthConfig, extra: &str) -> cfcml::trainer::RunConfig {
    cfcml::dataio::generate_synthetic_dataset(synth, &dir.join("data")).unwrap();
    cfcml::trainer::RunConfig::parse(extra, dir).unwrap()
}

/// A dataset small enough for tests that only exercise plumbing.
pub fn tiny_synth() -> cfcml::dataio::SynthConfig {
    cfcml::dataio::SynthConfig {
        train_per_class: 4,
        val_per_class: 2,
        ..Default::default()
    }
}

/// `C = 2`, `C_d = 4`, two 4×4 planar modalities, a batch of three.
pub fn micro_model(seed: u64) -> (cfcml::trainer::CfcmlModel, Vec<cfcml::trainer::PreparedSample>) {
    use cfcml::dataio::{Image, ModalitySpec, MultimodalSample, TabularRecord};
    use cfcml::encoders::SpatialMode;
    use cfcml::trainer::{CfcmlModel, ModelConfig, ModelSchema};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        base_channels: 2,
        spatial_mode: SpatialMode::Planar,
        saturate: true,
        common_dim: 4,
        heads: 2,
        image_tokens: 2,
        tabular_tokens: 2,
        hidden: vec![4],
        ..Default::default()
    };
    let schema = ModelSchema {
        modalities: (0..2)
            .map(|j| ModalitySpec {
                name: format!("m{j}"),
                dims: vec![1, 4, 4],
            })
            .collect(),
        attributes: vec!["sex".into(), "age".into()],
        classes: vec!["a".into(), "b".into()],
    };
    let embedder = cfcml::trainer::model::load_embedder(None).unwrap();
    let model = CfcmlModel::new(config, schema, embedder, &mut rng).unwrap();
    let samples = [0usize, 1, 0]
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let images = (0..2)
                .map(|_| Image::new(1, vec![4, 4], (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap())
                .collect();
            let tabular = TabularRecord::new(vec![
                ("sex".into(), ["male", "female"][label].into()),
                ("age".into(), format!("{}", 30 + 7 * i)),
            ])
            .unwrap();
            model
                .prepare(&MultimodalSample {
                    id: format!("s{i}"),
                    images,
                    tabular,
                    label,
                })
                .unwrap()
        })
        .collect();
    (model, samples)
}

/// Central differences (`h = 1e-4`) on `LossBundle.total` of the micro model
/// with CCRM enabled and dropout off.
pub fn micro_gradient_check(seed: u64) -> GradCheck {
    use cfcml::trainer::total_loss;

    let (mut model, samples) = micro_model(seed);
    let frozen = model.clone();
    let refs: Vec<_> = samples.iter().collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let cfg = cfcml::ccrm::ContrastConfig::default();
    check_param_gradients(&mut model.store, 1e-4, 1e-7, |g, p| {
        let out = frozen
            .forward(g, p, &refs, None::<&mut rand_chacha::ChaCha8Rng>)
            .unwrap();
        let (loss, _) = total_loss(g, out.logits, &labels, out.pooled, 3, &cfg, true, None).unwrap();
        loss
    })
}
