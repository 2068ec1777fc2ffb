//! Tiny inference graphs (MLP stacks and Transformer blocks) and the
//! calibration driver that attaches one bias vector per quantized site.
//!
//! Every matmul in the graph is a *site*. A Transformer block exposes eight
//! of them in a fixed order: Q, K and V projections, the score and context
//! batched matmuls, the output projection, and the two feed-forward layers.
//! Softmax, layer norm, GELU and the attention scaling always run in float.

mod calibrate;
mod exec;
mod toy;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bias::{BiasPrecision, BiasVector};
use crate::error::{Error, Result};
use crate::quant::{quantize, Granularity, QuantConfig, QuantizedTensor, Scheme};
use crate::tensor::Tensor;

pub use calibrate::{calibrate, evaluate};
pub use exec::{forward_float, forward_quantized, FloatForward, QuantForward};
pub use toy::{synth_batch, Arch};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Gelu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Pre-norm encoder block without causal masking.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub bq: Option<Tensor>,
    pub bk: Option<Tensor>,
    pub bv: Option<Tensor>,
    pub bo: Option<Tensor>,
    pub b1: Option<Tensor>,
    pub b2: Option<Tensor>,
    pub ln1: Option<LayerNorm>,
    pub ln2: Option<LayerNorm>,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Block {
    Linear(Linear),
    Transformer(TransformerBlock),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteKind {
    QProj,
    KProj,
    VProj,
    /// `Q K^T`
    BmmScores,
    /// `softmax(.) V`
    BmmContext,
    OProj,
    Fc1,
    Fc2,
    Linear,
}

impl SiteKind {
    pub const TRANSFORMER_ORDER: [SiteKind; 8] = [
        SiteKind::QProj,
        SiteKind::KProj,
        SiteKind::VProj,
        SiteKind::BmmScores,
        SiteKind::BmmContext,
        SiteKind::OProj,
        SiteKind::Fc1,
        SiteKind::Fc2,
    ];

    pub fn is_bmm(self) -> bool {
        matches!(self, SiteKind::BmmScores | SiteKind::BmmContext)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::QProj => "q_proj",
            SiteKind::KProj => "k_proj",
            SiteKind::VProj => "v_proj",
            SiteKind::BmmScores => "bmm_scores",
            SiteKind::BmmContext => "bmm_context",
            SiteKind::OProj => "o_proj",
            SiteKind::Fc1 => "fc1",
            SiteKind::Fc2 => "fc2",
            SiteKind::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteInfo {
    pub index: usize,
    pub block: usize,
    pub kind: SiteKind,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSpec {
    pub blocks: Vec<Block>,
}

impl ModelSpec {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let spec = Self { blocks };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                Block::Linear(l) => validate_linear(i, l)?,
                Block::Transformer(t) => validate_transformer(i, t)?,
            }
        }
        Ok(())
    }

    /// Quantized sites in execution order.
    pub fn sites(&self) -> Vec<SiteInfo> {
        let mut sites = Vec::new();
        for (block, b) in self.blocks.iter().enumerate() {
            let kinds: &[SiteKind] = match b {
                Block::Linear(_) => &[SiteKind::Linear],
                Block::Transformer(_) => &SiteKind::TRANSFORMER_ORDER,
            };
            for &kind in kinds {
                sites.push(SiteInfo {
                    index: sites.len(),
                    block,
                    kind,
                    name: format!("block{block}.{}", kind.as_str()),
                });
            }
        }
        sites
    }

    /// Weight of a non-BMM site.
    pub fn site_weight(&self, site: &SiteInfo) -> Option<&Tensor> {
        match (&self.blocks[site.block], site.kind) {
            (Block::Linear(l), SiteKind::Linear) => Some(&l.weight),
            (Block::Transformer(t), kind) => match kind {
                SiteKind::QProj => Some(&t.wq),
                SiteKind::KProj => Some(&t.wk),
                SiteKind::VProj => Some(&t.wv),
                SiteKind::OProj => Some(&t.wo),
                SiteKind::Fc1 => Some(&t.w1),
                SiteKind::Fc2 => Some(&t.w2),
                _ => None,
            },
            _ => None,
        }
    }

    /// Flattened per-sample output length of `site` for inputs of `seq` rows
    /// (`seq = 1` for 2-D inputs).
    pub fn site_output_len(&self, site: &SiteInfo, seq: usize) -> usize {
        match (&self.blocks[site.block], site.kind) {
            (Block::Transformer(t), SiteKind::BmmScores) => t.n_heads * seq * seq,
            (Block::Transformer(t), SiteKind::BmmContext) => seq * t.d_model,
            _ => seq * self.site_weight(site).map_or(0, |w| w.shape()[1]),
        }
    }

    /// Inverse of [`Self::site_output_len`], if `len` is attainable.
    fn seq_for_output_len(&self, site: &SiteInfo, len: usize) -> Option<usize> {
        let per_row = match (&self.blocks[site.block], site.kind) {
            (Block::Transformer(t), SiteKind::BmmScores) => {
                let sq = len / t.n_heads.max(1);
                let seq = (sq as f64).sqrt().round() as usize;
                return (self.site_output_len(site, seq) == len).then_some(seq);
            }
            (Block::Transformer(t), SiteKind::BmmContext) => t.d_model,
            _ => self.site_weight(site)?.shape()[1],
        };
        (per_row > 0 && len.is_multiple_of(per_row)).then_some(len / per_row)
    }

    /// Width of the last axis the model expects on its input.
    pub fn input_features(&self) -> Option<usize> {
        self.blocks.first().map(|b| match b {
            Block::Linear(l) => l.weight.shape()[0],
            Block::Transformer(t) => t.d_model,
        })
    }
}

fn check_vec(site: String, v: &Option<Tensor>, n: usize) -> Result<()> {
    match v {
        Some(t) if t.shape() != [n] => Err(Error::Graph {
            site,
            reason: format!("bias shape {:?}, expected [{n}]", t.shape()),
        }),
        _ => Ok(()),
    }
}

fn check_mat(site: String, w: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if w.shape() != [rows, cols] {
        return Err(Error::Graph {
            site,
            reason: format!("weight shape {:?}, expected [{rows}, {cols}]", w.shape()),
        });
    }
    Ok(())
}

fn validate_linear(i: usize, l: &Linear) -> Result<()> {
    let name = format!("block{i}.linear");
    if l.weight.rank() != 2 {
        return Err(Error::Graph {
            site: name,
            reason: format!("weight must be rank 2, got {:?}", l.weight.shape()),
        });
    }
    check_vec(name, &l.bias, l.weight.shape()[1])
}

fn validate_transformer(i: usize, t: &TransformerBlock) -> Result<()> {
    let site = |k: SiteKind| format!("block{i}.{}", k.as_str());
    let (d, ff) = (t.d_model, t.d_ff);
    if t.n_heads == 0 || d % t.n_heads != 0 {
        return Err(Error::Graph {
            site: format!("block{i}"),
            reason: format!("d_model {d} not divisible by n_heads {}", t.n_heads),
        });
    }
    for (k, w, b, rows, cols) in [
        (SiteKind::QProj, &t.wq, &t.bq, d, d),
        (SiteKind::KProj, &t.wk, &t.bk, d, d),
        (SiteKind::VProj, &t.wv, &t.bv, d, d),
        (SiteKind::OProj, &t.wo, &t.bo, d, d),
        (SiteKind::Fc1, &t.w1, &t.b1, d, ff),
        (SiteKind::Fc2, &t.w2, &t.b2, ff, d),
    ] {
        check_mat(site(k), w, rows, cols)?;
        check_vec(site(k), b, cols)?;
    }
    for ln in [&t.ln1, &t.ln2].into_iter().flatten() {
        if ln.gamma.shape() != [d] || ln.beta.shape() != [d] {
            return Err(Error::Graph {
                site: format!("block{i}"),
                reason: "layer norm parameters must have length d_model".into(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBatch {
    inputs: Tensor,
}

impl CalibrationBatch {
    pub fn new(inputs: Tensor) -> Result<Self> {
        if inputs.rank() < 2 || inputs.batch() == 0 {
            return Err(Error::Argument(format!(
                "calibration batch needs shape [b, ...] with b >= 1, got {:?}",
                inputs.shape()
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::Value("calibration batch contains non-finite values".into()));
        }
        Ok(Self { inputs })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn b(&self) -> usize {
        self.inputs.batch()
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.b());
        let row: usize = self.inputs.shape()[1..].iter().product();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = n;
        Self::new(Tensor::new(shape, self.inputs.data()[..n * row].to_vec())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    WeightOnly,
    WeightActivation,
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::WeightOnly => "weight-only",
            QuantMode::WeightActivation => "weight-activation",
        })
    }
}

/// Model-wide quantizer choice; per-site configs derive from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSettings {
    pub weight: QuantConfig,
    pub mode: QuantMode,
}

impl QuantSettings {
    /// Activations are quantized per tensor with the weight bit width and scheme.
    pub fn activation_config(&self) -> Option<QuantConfig> {
        match self.mode {
            QuantMode::WeightOnly => None,
            QuantMode::WeightActivation => Some(QuantConfig {
                bits: self.weight.bits,
                scheme: self.weight.scheme,
                granularity: Granularity::PerTensor,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteState {
    pub info: SiteInfo,
    /// `None` for BMM sites, which have no weight.
    pub weight: Option<QuantizedTensor>,
    pub activation: Option<QuantConfig>,
    pub bias: Option<BiasVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    spec: ModelSpec,
    settings: QuantSettings,
    sites: Vec<SiteState>,
    dequantized: Vec<Option<Tensor>>,
    bias_precision: BiasPrecision,
}

impl QuantizedModel {
    /// Quantizes every site weight of `spec`; no biases are attached.
    pub fn quantize(spec: ModelSpec, settings: QuantSettings) -> Result<Self> {
        spec.validate()?;
        settings.weight.validate()?;
        let act = settings.activation_config();
        let sites = spec
            .sites()
            .into_iter()
            .map(|info| {
                let weight = match spec.site_weight(&info) {
                    Some(w) => Some(quantize(w, &settings.weight).map_err(|e| Error::Graph {
                        site: info.name.clone(),
                        reason: e.to_string(),
                    })?),
                    None => None,
                };
                Ok(SiteState {
                    info,
                    weight,
                    activation: act,
                    bias: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(spec, settings, sites)
    }

    /// Reassembles a model, checking that sites line up with the graph.
    pub fn from_parts(spec: ModelSpec, settings: QuantSettings, sites: Vec<SiteState>) -> Result<Self> {
        spec.validate()?;
        settings
            .weight
            .validate()
            .map_err(|e| Error::validation("settings.weight", e.to_string()))?;
        let expected = spec.sites();
        if expected.len() != sites.len() {
            return Err(Error::validation(
                "sites",
                format!("graph has {} sites, model lists {}", expected.len(), sites.len()),
            ));
        }
        for (want, got) in expected.iter().zip(&sites) {
            if *want != got.info {
                return Err(Error::validation("sites", format!("site {} does not match graph", got.info.name)));
            }
            match (spec.site_weight(want), &got.weight) {
                (Some(w), Some(q)) if q.shape() == w.shape() && *q.config() == settings.weight => {}
                (None, None) => {}
                _ => {
                    return Err(Error::validation(
                        format!("{}.weight", want.name),
                        "missing, misshapen or not quantized with the model settings",
                    ))
                }
            }
            let act_ok = got.activation == settings.activation_config();
            if !act_ok {
                return Err(Error::validation(
                    format!("{}.activation", want.name),
                    format!("activation config inconsistent with {} mode", settings.mode),
                ));
            }
        }
        check_bias_shapes(&spec, &sites)?;
        let dequantized = sites
            .iter()
            .map(|s| s.weight.as_ref().map(QuantizedTensor::dequantize))
            .collect();
        Ok(Self {
            spec,
            settings,
            sites,
            dequantized,
            bias_precision: BiasPrecision::F64,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn settings(&self) -> &QuantSettings {
        &self.settings
    }

    pub fn mode(&self) -> QuantMode {
        self.settings.mode
    }

    pub fn sites(&self) -> &[SiteState] {
        &self.sites
    }

    pub fn dequantized_weight(&self, site: usize) -> Option<&Tensor> {
        self.dequantized[site].as_ref()
    }

    /// `F32` when the biases went through a lossy 32-bit export.
    pub fn bias_precision(&self) -> BiasPrecision {
        self.bias_precision
    }

    pub(crate) fn set_bias_precision(&mut self, p: BiasPrecision) {
        self.bias_precision = p;
    }

    pub fn has_biases(&self) -> bool {
        self.sites.iter().any(|s| s.bias.is_some())
    }

    pub fn biases(&self) -> impl Iterator<Item = (&SiteInfo, &BiasVector)> {
        self.sites.iter().filter_map(|s| s.bias.as_ref().map(|b| (&s.info, b)))
    }

    /// Attaches (or replaces) the bias of one site. Weights are untouched.
    pub fn attach_bias(&mut self, site: usize, bias: BiasVector) -> Result<()> {
        let state = self
            .sites
            .get_mut(site)
            .ok_or_else(|| Error::Argument(format!("no site {site}")))?;
        state.bias = Some(bias);
        Ok(())
    }

    pub fn without_biases(&self) -> Self {
        let mut m = self.clone();
        for s in &mut m.sites {
            s.bias = None;
        }
        m
    }
}

/// All attached biases must come from one calibration batch: the same sample
/// count and a single sequence length across sites.
fn check_bias_shapes(spec: &ModelSpec, sites: &[SiteState]) -> Result<()> {
    let mut biased = sites.iter().filter_map(|s| s.bias.as_ref().map(|b| (&s.info, b)));
    let Some((first, b0)) = biased.next() else {
        return Ok(());
    };
    let field = |info: &SiteInfo| format!("{}.bias", info.name);
    let seq = spec
        .seq_for_output_len(first, b0.len())
        .filter(|&s| s > 0)
        .ok_or_else(|| Error::validation(field(first), format!("length {} fits no sequence length", b0.len())))?;
    for (info, b) in std::iter::once((first, b0)).chain(biased) {
        let want = spec.site_output_len(info, seq);
        if b.len() != want {
            return Err(Error::validation(
                field(info),
                format!("length {} but {want} expected for sequence length {seq}", b.len()),
            ));
        }
        if b.batch_size_used() != b0.batch_size_used() {
            return Err(Error::validation(
                field(info),
                format!("fitted on {} samples, other sites on {}", b.batch_size_used(), b0.batch_size_used()),
            ));
        }
    }
    Ok(())
}

/// Convenience for tests and the CLI: symmetric per-tensor settings.
pub fn settings(bits: u8, scheme: Scheme, granularity: Granularity, mode: QuantMode) -> Result<QuantSettings> {
    Ok(QuantSettings {
        weight: QuantConfig::new(bits, scheme, granularity)?,
        mode,
    })
}
