//! Multi-granularity crossmodal information enhancement.
//!
//! Every image modality contributes four stage features and the tabular
//! embedding contributes one `t × 512` matrix. At each granularity the
//! sequences are adapted to `n × C_d`, each modality in turn queries the
//! token concatenation of all the others, and a learned token map folds the
//! primary tokens and their supplement back to `n`. A final token map fuses
//! the granularities of each modality.
//!
//! Token maps (`Φ`) are left-multiplied `n_out × n_in` matrices without bias,
//! i.e. a kernel-1 convolution over the token axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::N_STAGES;
use crate::error::{CfcmlError, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tensor::Matrix;

/// `U(±0.1/cols)` entries.
fn jitter<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = 0.1 / cols as f64;
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Adaptive average pooling over the token axis plus [`jitter`]. Row `r`
/// averages source tokens `⌊r·n_in/n_out⌋ .. ⌈(r+1)·n_in/n_out⌉`.
pub fn pooling_map<R: Rng>(n_out: usize, n_in: usize, rng: &mut R) -> Matrix {
    let mut map = jitter(n_out, n_in, rng);
    for r in 0..n_out {
        let start = r * n_in / n_out;
        let end = ((r + 1) * n_in).div_ceil(n_out);
        let w = 1.0 / (end - start) as f64;
        for c in start..end {
            map.set(r, c, map.get(r, c) + w);
        }
    }
    map
}

/// An `n × C_d` token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    tokens: Matrix,
}

impl TokenSequence {
    pub fn new(tokens: Matrix) -> Result<Self> {
        if tokens.rows() == 0 || !tokens.is_finite() {
            return Err(CfcmlError::Shape(
                "token sequence must be non-empty and finite".into(),
            ));
        }
        Ok(Self { tokens })
    }

    pub fn n(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.tokens
    }

    pub fn into_matrix(self) -> Matrix {
        self.tokens
    }
}

/// Which granularities take part in enhancement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GranularityMode {
    /// All four stages, fused across granularities.
    Multi,
    /// Enhancement at one stage (1-based) only; no fusion.
    Single(usize),
    /// No enhancement: stage-4 features are adapted and passed through.
    Off,
}

impl GranularityMode {
    pub fn stages(self) -> Vec<usize> {
        match self {
            GranularityMode::Multi => (1..=N_STAGES).collect(),
            GranularityMode::Single(s) => vec![s],
            GranularityMode::Off => vec![N_STAGES],
        }
    }

    pub fn enhances(self) -> bool {
        self != GranularityMode::Off
    }
}

impl TryFrom<String> for GranularityMode {
    type Error = CfcmlError;

    fn try_from(s: String) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mg" => Ok(Self::Multi),
            "off" | "none" => Ok(Self::Off),
            other => other
                .strip_prefix("sg")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|k| (1..=N_STAGES).contains(k))
                .map(Self::Single)
                .ok_or_else(|| {
                    CfcmlError::Config(format!(
                        "granularity `{s}`: expected mg, sg1..sg4 or off"
                    ))
                }),
        }
    }
}

impl From<GranularityMode> for String {
    fn from(m: GranularityMode) -> String {
        match m {
            GranularityMode::Multi => "mg".into(),
            GranularityMode::Single(s) => format!("sg{s}"),
            GranularityMode::Off => "off".into(),
        }
    }
}

/// `Φ(fc(Re(f)))`: channel projection to `C_d`, then a token-count map.
#[derive(Clone, Debug)]
pub struct TokenAdapter {
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    pub token_map: ParamId,
    source_tokens: usize,
    source_channels: usize,
    target_tokens: usize,
    dim: usize,
}

impl TokenAdapter {
    pub fn new<R: Rng>(
        prefix: &str,
        source_tokens: usize,
        source_channels: usize,
        target_tokens: usize,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let fc_weight = store.register_uniform(
            format!("{prefix}.fc.weight"),
            source_channels,
            dim,
            source_channels,
            rng,
        );
        let fc_bias = store.register(format!("{prefix}.fc.bias"), Matrix::zeros(1, dim));
        let token_map = store.register(
            format!("{prefix}.token_map"),
            pooling_map(target_tokens, source_tokens, rng),
        );
        Self {
            fc_weight,
            fc_bias,
            token_map,
            source_tokens,
            source_channels,
            target_tokens,
            dim,
        }
    }

    pub fn source_shape(&self) -> (usize, usize) {
        (self.source_tokens, self.source_channels)
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.target_tokens, self.dim)
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, feature: Var) -> Result<Var> {
        let got = g.value(feature).shape();
        if got != self.source_shape() {
            return Err(CfcmlError::Shape(format!(
                "adapter expects {:?} features, got {got:?}",
                self.source_shape()
            )));
        }
        let projected = g.matmul(feature, p[self.fc_weight]);
        let projected = g.add_row_bias(projected, p[self.fc_bias]);
        Ok(g.matmul(p[self.token_map], projected))
    }
}

/// Multi-head cross-attention without output projection.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    heads: usize,
    dim: usize,
}

/// Supplement plus the per-head attention matrices.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub supplement: Var,
    pub weights: Vec<Var>,
}

impl CrossAttention {
    pub fn new<R: Rng>(
        prefix: &str,
        dim: usize,
        heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CfcmlError::Shape(format!(
                "C_d = {dim} is not divisible by {heads} heads"
            )));
        }
        let mut proj = |name: &str| {
            store.register_uniform(format!("{prefix}.{name}"), dim, dim, dim, rng)
        };
        Ok(Self {
            w_q: proj("w_q"),
            w_k: proj("w_k"),
            w_v: proj("w_v"),
            heads,
            dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        primary: Var,
        auxiliary: Var,
    ) -> Result<AttentionOutput> {
        for v in [primary, auxiliary] {
            if g.value(v).cols() != self.dim {
                return Err(CfcmlError::Shape(format!(
                    "attention expects C_d = {}, got {}",
                    self.dim,
                    g.value(v).cols()
                )));
            }
        }
        let q = g.matmul(primary, p[self.w_q]);
        let k = g.matmul(auxiliary, p[self.w_k]);
        let v = g.matmul(auxiliary, p[self.w_v]);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
            weights.push(attn);
        }
        let supplement = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        Ok(AttentionOutput {
            supplement,
            weights,
        })
    }
}

/// Enhancement at one granularity: one attention block and one `Φ_p` per
/// primary modality.
#[derive(Clone, Debug)]
pub struct CieBlock {
    pub attention: Vec<CrossAttention>,
    pub fold_maps: Vec<ParamId>,
    counts: Vec<usize>,
}

impl CieBlock {
    /// `counts[b]` is the token count of modality `b`. `Φ_p` starts as
    /// `[I | ε]`, so early enhancement passes the primary through.
    pub fn new<R: Rng>(
        prefix: &str,
        counts: &[usize],
        dim: usize,
        heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if counts.len() < 2 {
            return Err(CfcmlError::Shape(
                "enhancement needs at least two modalities".into(),
            ));
        }
        let mut attention = Vec::with_capacity(counts.len());
        let mut fold_maps = Vec::with_capacity(counts.len());
        for (b, &n) in counts.iter().enumerate() {
            attention.push(CrossAttention::new(
                &format!("{prefix}.m{b}.attn"),
                dim,
                heads,
                store,
                rng,
            )?);
            let bound = 0.1 / (n as f64).sqrt();
            let mut map = Matrix::zeros(n, 2 * n);
            for r in 0..n {
                map.set(r, r, 1.0);
                for c in n..2 * n {
                    map.set(r, c, rng.random_range(-bound..bound));
                }
            }
            fold_maps.push(store.register(format!("{prefix}.m{b}.fold"), map));
        }
        Ok(Self {
            attention,
            fold_maps,
            counts: counts.to_vec(),
        })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Enhanced sequences in modality order, plus every attention matrix
    /// (`[primary][head]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        sequences: &[Var],
    ) -> Result<(Vec<Var>, Vec<Vec<Var>>)> {
        if sequences.len() != self.counts.len() {
            return Err(CfcmlError::Shape(format!(
                "enhancement block built for {} modalities, got {}",
                self.counts.len(),
                sequences.len()
            )));
        }
        for (b, (&s, &n)) in sequences.iter().zip(&self.counts).enumerate() {
            if g.value(s).rows() != n {
                return Err(CfcmlError::Shape(format!(
                    "modality {b}: expected {n} tokens, got {}",
                    g.value(s).rows()
                )));
            }
        }
        let mut enhanced = Vec::with_capacity(sequences.len());
        let mut maps = Vec::with_capacity(sequences.len());
        for b in 0..sequences.len() {
            let others: Vec<Var> = sequences
                .iter()
                .enumerate()
                .filter(|(a, _)| *a != b)
                .map(|(_, v)| *v)
                .collect();
            let auxiliary = if others.len() == 1 {
                others[0]
            } else {
                g.concat_rows(&others)
            };
            let out = self.attention[b].forward(g, p, sequences[b], auxiliary)?;
            let cat = g.concat_rows(&[sequences[b], out.supplement]);
            enhanced.push(g.matmul(p[self.fold_maps[b]], cat));
            maps.push(out.weights);
        }
        Ok((enhanced, maps))
    }
}

/// `Φ^mg` of one modality: `N × (4·n)` over the stacked granularities.
#[derive(Clone, Debug)]
pub struct FusionMap {
    pub map: ParamId,
    inputs: usize,
    tokens: usize,
}

impl FusionMap {
    pub fn new<R: Rng>(
        name: &str,
        inputs: usize,
        tokens: usize,
        out_tokens: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let fan_in = inputs * tokens;
        let mut map = jitter(out_tokens, fan_in, rng);
        for r in 0..out_tokens {
            for k in 0..inputs {
                let c = k * tokens + r * tokens / out_tokens;
                map.set(r, c, map.get(r, c) + 1.0 / inputs as f64);
            }
        }
        let map = store.register(name, map);
        Self {
            map,
            inputs,
            tokens,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, enhanced: &[Var]) -> Result<Var> {
        if enhanced.len() != self.inputs {
            return Err(CfcmlError::Shape(format!(
                "fusion expects {} granularities, got {}",
                self.inputs,
                enhanced.len()
            )));
        }
        let dim = g.value(enhanced[0]).cols();
        for &e in enhanced {
            if g.value(e).shape() != (self.tokens, dim) {
                return Err(CfcmlError::Shape(format!(
                    "fusion expects {} × {dim} inputs, got {:?}",
                    self.tokens,
                    g.value(e).shape()
                )));
            }
        }
        let cat = g.concat_rows(enhanced);
        Ok(g.matmul(p[self.map], cat))
    }
}

/// Source feature shape of one modality at one stage (`tokens × channels`).
pub type SourceShape = (usize, usize);

/// Adapters, enhancement blocks and fusion maps for every modality
/// (images first, tabular last).
#[derive(Clone, Debug)]
pub struct MgCie {
    mode: GranularityMode,
    /// `[granularity][modality]`, granularities in `mode.stages()` order.
    adapters: Vec<Vec<TokenAdapter>>,
    blocks: Vec<CieBlock>,
    fusion: Vec<FusionMap>,
    counts: Vec<usize>,
}

/// Output of [`MgCie::forward`].
#[derive(Clone, Debug)]
pub struct MgCieOutput {
    /// Final `Z = {F_1 … F_m, O}`, one `n × C_d` sequence per modality.
    pub features: Vec<Var>,
    /// Attention matrices `[granularity][primary][head]`.
    pub attention: Vec<Vec<Vec<Var>>>,
}

impl MgCie {
    /// `sources[j][s]` is the stage-`s+1` feature shape of modality `j`;
    /// `counts[j]` its predefined token count.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        prefix: &str,
        mode: GranularityMode,
        sources: &[Vec<SourceShape>],
        counts: &[usize],
        dim: usize,
        heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if sources.len() != counts.len() || sources.iter().any(|s| s.len() != N_STAGES) {
            return Err(CfcmlError::Shape(
                "need four stage shapes and a token count per modality".into(),
            ));
        }
        if counts.contains(&0) {
            return Err(CfcmlError::Shape("token counts must be positive".into()));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(CfcmlError::Shape(format!(
                "C_d = {dim} is not divisible by {heads} heads"
            )));
        }
        let stages = mode.stages();
        let mut adapters = Vec::with_capacity(stages.len());
        let mut blocks = Vec::new();
        for &s in &stages {
            let row = sources
                .iter()
                .zip(counts)
                .enumerate()
                .map(|(j, (src, &n))| {
                    let (tokens, channels) = src[s - 1];
                    TokenAdapter::new(
                        &format!("{prefix}.g{s}.m{j}.adapter"),
                        tokens,
                        channels,
                        n,
                        dim,
                        store,
                        rng,
                    )
                })
                .collect();
            adapters.push(row);
            if mode.enhances() {
                blocks.push(CieBlock::new(
                    &format!("{prefix}.g{s}.cie"),
                    counts,
                    dim,
                    heads,
                    store,
                    rng,
                )?);
            }
        }
        let fusion = if mode == GranularityMode::Multi {
            counts
                .iter()
                .enumerate()
                .map(|(j, &n)| {
                    FusionMap::new(&format!("{prefix}.m{j}.fusion"), N_STAGES, n, n, store, rng)
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            mode,
            adapters,
            blocks,
            fusion,
            counts: counts.to_vec(),
        })
    }

    pub fn mode(&self) -> GranularityMode {
        self.mode
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn blocks(&self) -> &[CieBlock] {
        &self.blocks
    }

    /// `features[j][s]` is modality `j`'s stage-`s+1` feature.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, features: &[Vec<Var>]) -> Result<MgCieOutput> {
        if features.len() != self.counts.len() || features.iter().any(|f| f.len() != N_STAGES) {
            return Err(CfcmlError::Shape(format!(
                "expected {} modalities with {N_STAGES} stages each",
                self.counts.len()
            )));
        }
        let stages = self.mode.stages();
        let mut per_granularity = Vec::with_capacity(stages.len());
        let mut attention = Vec::new();
        for (gi, &s) in stages.iter().enumerate() {
            let adapted = self.adapters[gi]
                .iter()
                .zip(features)
                .map(|(a, f)| a.forward(g, p, f[s - 1]))
                .collect::<Result<Vec<_>>>()?;
            if self.mode.enhances() {
                let (enhanced, maps) = self.blocks[gi].forward(g, p, &adapted)?;
                per_granularity.push(enhanced);
                attention.push(maps);
            } else {
                per_granularity.push(adapted);
            }
        }
        let features = if self.mode == GranularityMode::Multi {
            (0..self.counts.len())
                .map(|j| {
                    let seqs: Vec<Var> = per_granularity.iter().map(|row| row[j]).collect();
                    self.fusion[j].forward(g, p, &seqs)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            per_granularity.pop().unwrap_or_default()
        };
        Ok(MgCieOutput {
            features,
            attention,
        })
    }
}

/// Adapts one feature matrix outside of training.
pub fn adapt_tokens(feature: &Matrix, adapter: &TokenAdapter, params: &ParamStore) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(feature.clone());
    let out = adapter.forward(&mut g, &p, x)?;
    TokenSequence::new(g.value(out).clone())
}

/// Cross-attention supplement of `primary` given `auxiliary`, with the
/// per-head attention matrices.
pub fn multihead_cross_attention(
    primary: &TokenSequence,
    auxiliary: &TokenSequence,
    attention: &CrossAttention,
    params: &ParamStore,
) -> Result<(TokenSequence, Vec<Matrix>)> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let q = g.constant(primary.matrix().clone());
    let a = g.constant(auxiliary.matrix().clone());
    let out = attention.forward(&mut g, &p, q, a)?;
    let weights = out.weights.iter().map(|w| g.value(*w).clone()).collect();
    Ok((TokenSequence::new(g.value(out.supplement).clone())?, weights))
}

/// Enhances every sequence of one granularity.
pub fn cie_enhance(
    sequences: &[TokenSequence],
    block: &CieBlock,
    params: &ParamStore,
) -> Result<Vec<TokenSequence>> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let vars: Vec<Var> = sequences
        .iter()
        .map(|s| g.constant(s.matrix().clone()))
        .collect();
    let (enhanced, _) = block.forward(&mut g, &p, &vars)?;
    enhanced
        .into_iter()
        .map(|v| TokenSequence::new(g.value(v).clone()))
        .collect()
}

/// Fuses the enhanced granularities of one modality.
pub fn fuse_multigranularity(
    enhanced: &[TokenSequence],
    fusion: &FusionMap,
    params: &ParamStore,
) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let vars: Vec<Var> = enhanced
        .iter()
        .map(|s| g.constant(s.matrix().clone()))
        .collect();
    let out = fusion.forward(&mut g, &p, &vars)?;
    TokenSequence::new(g.value(out).clone())
}
