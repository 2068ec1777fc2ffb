//! The `QBCM` container and the model, batch, report and CSV writers built on it.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   magic       4 bytes  "QBCM"
//! offset 4   version     u32      1
//! offset 8   header_len  u64
//! offset 16  header      UTF-8 JSON, space-padded to a multiple of 8 bytes
//! ...        payload     raw little-endian tensor data
//! ```
//!
//! Tensor offsets are relative to the start of the payload and 8-byte
//! aligned. The header must open with a `checksum` field: the SHA-256 of the
//! header bytes (with the 64 checksum digits replaced by `0`) followed by the
//! payload. Unknown header fields, top-level and per tensor, survive a
//! read/write cycle.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::bias::{BiasPrecision, BiasVector};
use crate::error::{Error, Result};
use crate::model::{
    Activation, Block, CalibrationBatch, LayerNorm, Linear, ModelSpec, QuantSettings, QuantizedModel, SiteInfo,
    SiteState, TransformerBlock,
};
use crate::quant::{QuantConfig, QuantizedTensor};
use crate::report::{BiasStats, ErrorReport, SiteError};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"QBCM";
pub const VERSION: u32 = 1;
pub const PREAMBLE_LEN: usize = 16;
pub const REPORT_SCHEMA: &str = "biascomp.report/1";

const CHECKSUM_PREFIX: &[u8] = b"{\"checksum\":\"";
const CHECKSUM_HEX_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    I32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 | DType::I32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F64(_) => DType::F64,
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
    /// Unrecognized per-tensor header fields.
    pub extra: Map<String, Value>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: Value,
    pub tensors: Vec<NamedTensor>,
    /// Unrecognized top-level header fields.
    pub extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    // Must stay the first field: the checksum sits at a fixed byte position.
    checksum: String,
    kind: String,
    tensors: Vec<EntryHeader>,
    #[serde(default)]
    metadata: Value,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

fn truncated(what: &str) -> Error {
    Error::Io(std::io::Error::new(ErrorKind::UnexpectedEof, format!("truncated container: {what}")))
}

fn checksum(header: &[u8], payload: &[u8]) -> String {
    let mut h = Sha256::new();
    let start = CHECKSUM_PREFIX.len();
    h.update(&header[..start]);
    h.update([b'0'; CHECKSUM_HEX_LEN]);
    h.update(&header[start + CHECKSUM_HEX_LEN..]);
    h.update(payload);
    hex::encode(h.finalize())
}

impl Container {
    pub fn new(kind: impl Into<String>, metadata: Value) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            tensors: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let count: usize = t.shape.iter().product();
            if count != t.data.len() {
                return Err(Error::validation(
                    format!("{}.shape", t.name),
                    format!("shape {:?} does not hold {} elements", t.shape, t.data.len()),
                ));
            }
            payload.resize(align8(payload.len()), 0);
            let offset = payload.len();
            t.data.write_le(&mut payload);
            entries.push(EntryHeader {
                name: t.name.clone(),
                dtype: t.data.dtype(),
                shape: t.shape.clone(),
                offset: offset as u64,
                length: (payload.len() - offset) as u64,
                extra: t.extra.clone(),
            });
        }
        let header = Header {
            checksum: "0".repeat(CHECKSUM_HEX_LEN),
            kind: self.kind.clone(),
            tensors: entries,
            metadata: self.metadata.clone(),
            extra: self.extra.clone(),
        };
        let mut header_bytes = serde_json::to_vec(&header)?;
        debug_assert!(header_bytes.starts_with(CHECKSUM_PREFIX));
        header_bytes.resize(align8(header_bytes.len()), b' ');
        let sum = checksum(&header_bytes, &payload);
        let start = CHECKSUM_PREFIX.len();
        header_bytes[start..start + CHECKSUM_HEX_LEN].copy_from_slice(sum.as_bytes());

        let mut out = Vec::with_capacity(PREAMBLE_LEN + header_bytes.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE_LEN {
            return Err(truncated("preamble"));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = bytes.len() - PREAMBLE_LEN;
        if header_len > rest as u64 {
            return Err(truncated("header"));
        }
        let header_len = header_len as usize;
        let header_bytes = &bytes[PREAMBLE_LEN..PREAMBLE_LEN + header_len];
        let payload = &bytes[PREAMBLE_LEN + header_len..];
        let text = std::str::from_utf8(header_bytes).map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("malformed header: {e}")))?;

        let mut spans = Vec::with_capacity(header.tensors.len());
        for (i, e) in header.tensors.iter().enumerate() {
            let field = |f: &str| format!("tensors[{i}].{f}");
            if e.offset % 8 != 0 {
                return Err(Error::validation(field("offset"), format!("{} is not 8-byte aligned", e.offset)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|c| c.checked_mul(e.dtype.size()))
                .ok_or_else(|| Error::validation(field("shape"), "element count overflows"))?;
            if count as u64 != e.length {
                return Err(Error::validation(
                    field("length"),
                    format!("{} bytes declared, shape {:?} of {:?} needs {count}", e.length, e.shape, e.dtype),
                ));
            }
            if e.shape.is_empty() {
                return Err(Error::validation(field("shape"), "empty shape"));
            }
            let end = e
                .offset
                .checked_add(e.length)
                .ok_or_else(|| Error::validation(field("length"), "offset + length overflows"))?;
            spans.push((e.offset, end, i));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(Error::validation(
                    format!("tensors[{}].offset", w[1].2),
                    format!("overlaps tensors[{}]", w[0].2),
                ));
            }
        }
        if let Some(&(_, end, i)) = spans.iter().max_by_key(|s| s.1) {
            if end > payload.len() as u64 {
                return Err(truncated(&format!("tensors[{i}] ends at {end}, payload has {} bytes", payload.len())));
            }
        }
        let mut names: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::validation("tensors", format!("duplicate tensor name `{}`", w[0])));
        }

        let digest_ok = header_bytes.starts_with(CHECKSUM_PREFIX)
            && header.checksum.len() == CHECKSUM_HEX_LEN
            && header_bytes[CHECKSUM_PREFIX.len()..CHECKSUM_PREFIX.len() + CHECKSUM_HEX_LEN] == *header.checksum.as_bytes()
            && checksum(header_bytes, payload) == header.checksum;
        if !digest_ok {
            return Err(Error::validation("checksum", "header or payload does not match its checksum"));
        }

        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let start = e.offset as usize;
                let data = TensorData::read_le(e.dtype, &payload[start..start + e.length as usize]);
                NamedTensor {
                    name: e.name,
                    shape: e.shape,
                    data,
                    extra: e.extra,
                }
            })
            .collect();
        Ok(Self {
            kind: header.kind,
            metadata: header.metadata,
            tensors,
            extra: header.extra,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a `{kind}` container, found `{}`", self.kind)));
        }
        Ok(())
    }

    fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::validation(name, "missing tensor"))
    }

    fn f64_tensor(&self, name: &str) -> Result<Tensor> {
        let t = self.require(name)?;
        match &t.data {
            TensorData::F64(v) => {
                Tensor::new(t.shape.clone(), v.clone()).map_err(|e| Error::validation(name, e.to_string()))
            }
            other => Err(Error::validation(name, format!("expected f64, found {:?}", other.dtype()))),
        }
    }

    fn opt_f64_tensor(&self, name: &str) -> Result<Option<Tensor>> {
        match self.get(name) {
            Some(_) => self.f64_tensor(name).map(Some),
            None => Ok(None),
        }
    }

    fn i32_vec(&self, name: &str) -> Result<Vec<i32>> {
        match &self.require(name)?.data {
            TensorData::I32(v) => Ok(v.clone()),
            other => Err(Error::validation(name, format!("expected i32, found {:?}", other.dtype()))),
        }
    }

    fn f64_vec(&self, name: &str) -> Result<Vec<f64>> {
        match &self.require(name)?.data {
            TensorData::F64(v) => Ok(v.clone()),
            other => Err(Error::validation(name, format!("expected f64, found {:?}", other.dtype()))),
        }
    }
}

fn push_f64(c: &mut Container, name: String, t: &Tensor) {
    c.push(NamedTensor::new(name, t.shape().to_vec(), TensorData::F64(t.data().to_vec())));
}

fn push_opt(c: &mut Container, name: String, t: &Option<Tensor>) {
    if let Some(t) = t {
        push_f64(c, name, t);
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
enum BlockMeta {
    Linear { activation: Activation },
    Transformer { d_model: usize, n_heads: usize, d_ff: usize },
}

#[derive(Serialize, Deserialize)]
struct SiteMeta {
    info: SiteInfo,
    weight_config: Option<QuantConfig>,
    activation: Option<QuantConfig>,
    bias_batch_size: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct QuantMeta {
    settings: QuantSettings,
    sites: Vec<SiteMeta>,
    bias_precision: BiasPrecision,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    blocks: Vec<BlockMeta>,
    quantization: Option<QuantMeta>,
}

/// Either a float graph (as produced by `gen`) or a quantized model.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Float(ModelSpec),
    Quantized(QuantizedModel),
}

impl ModelFile {
    pub fn spec(&self) -> &ModelSpec {
        match self {
            ModelFile::Float(s) => s,
            ModelFile::Quantized(m) => m.spec(),
        }
    }
}

fn spec_into(c: &mut Container, spec: &ModelSpec) -> Vec<BlockMeta> {
    let mut metas = Vec::with_capacity(spec.blocks.len());
    for (i, block) in spec.blocks.iter().enumerate() {
        let p = |s: &str| format!("block{i}.{s}");
        match block {
            Block::Linear(l) => {
                push_f64(c, p("weight"), &l.weight);
                push_opt(c, p("bias"), &l.bias);
                metas.push(BlockMeta::Linear { activation: l.activation });
            }
            Block::Transformer(t) => {
                for (name, w) in [("wq", &t.wq), ("wk", &t.wk), ("wv", &t.wv), ("wo", &t.wo), ("w1", &t.w1), ("w2", &t.w2)] {
                    push_f64(c, p(name), w);
                }
                for (name, b) in [("bq", &t.bq), ("bk", &t.bk), ("bv", &t.bv), ("bo", &t.bo), ("b1", &t.b1), ("b2", &t.b2)] {
                    push_opt(c, p(name), b);
                }
                for (name, ln) in [("ln1", &t.ln1), ("ln2", &t.ln2)] {
                    if let Some(ln) = ln {
                        push_f64(c, p(&format!("{name}.gamma")), &ln.gamma);
                        push_f64(c, p(&format!("{name}.beta")), &ln.beta);
                    }
                }
                metas.push(BlockMeta::Transformer {
                    d_model: t.d_model,
                    n_heads: t.n_heads,
                    d_ff: t.d_ff,
                });
            }
        }
    }
    metas
}

fn spec_from(c: &Container, metas: &[BlockMeta]) -> Result<ModelSpec> {
    let mut blocks = Vec::with_capacity(metas.len());
    for (i, meta) in metas.iter().enumerate() {
        let p = |s: &str| format!("block{i}.{s}");
        let block = match *meta {
            BlockMeta::Linear { activation } => Block::Linear(Linear {
                weight: c.f64_tensor(&p("weight"))?,
                bias: c.opt_f64_tensor(&p("bias"))?,
                activation,
            }),
            BlockMeta::Transformer { d_model, n_heads, d_ff } => {
                let ln = |name: &str| -> Result<Option<LayerNorm>> {
                    let gamma = c.opt_f64_tensor(&p(&format!("{name}.gamma")))?;
                    let beta = c.opt_f64_tensor(&p(&format!("{name}.beta")))?;
                    match (gamma, beta) {
                        (Some(gamma), Some(beta)) => Ok(Some(LayerNorm { gamma, beta })),
                        (None, None) => Ok(None),
                        _ => Err(Error::validation(p(name), "layer norm needs both gamma and beta")),
                    }
                };
                Block::Transformer(TransformerBlock {
                    d_model,
                    n_heads,
                    d_ff,
                    wq: c.f64_tensor(&p("wq"))?,
                    wk: c.f64_tensor(&p("wk"))?,
                    wv: c.f64_tensor(&p("wv"))?,
                    wo: c.f64_tensor(&p("wo"))?,
                    w1: c.f64_tensor(&p("w1"))?,
                    w2: c.f64_tensor(&p("w2"))?,
                    bq: c.opt_f64_tensor(&p("bq"))?,
                    bk: c.opt_f64_tensor(&p("bk"))?,
                    bv: c.opt_f64_tensor(&p("bv"))?,
                    bo: c.opt_f64_tensor(&p("bo"))?,
                    b1: c.opt_f64_tensor(&p("b1"))?,
                    b2: c.opt_f64_tensor(&p("b2"))?,
                    ln1: ln("ln1")?,
                    ln2: ln("ln2")?,
                })
            }
        };
        blocks.push(block);
    }
    ModelSpec::new(blocks).map_err(|e| Error::validation("blocks", e.to_string()))
}

pub fn spec_to_container(spec: &ModelSpec) -> Result<Container> {
    let mut c = Container::new("model", Value::Null);
    let blocks = spec_into(&mut c, spec);
    c.metadata = serde_json::to_value(ModelMeta {
        blocks,
        quantization: None,
    })?;
    Ok(c)
}

pub fn model_to_container(model: &QuantizedModel, precision: BiasPrecision) -> Result<Container> {
    let mut c = Container::new("model", Value::Null);
    let blocks = spec_into(&mut c, model.spec());
    let mut sites = Vec::with_capacity(model.sites().len());
    for (j, s) in model.sites().iter().enumerate() {
        let p = |x: &str| format!("site{j}.{x}");
        if let Some(q) = &s.weight {
            c.push(NamedTensor::new(p("codes"), q.shape().to_vec(), TensorData::I32(q.codes().to_vec())));
            c.push(NamedTensor::new(p("scales"), vec![q.scales().len()], TensorData::F64(q.scales().to_vec())));
            if !q.zero_points().is_empty() {
                c.push(NamedTensor::new(
                    p("zero_points"),
                    vec![q.zero_points().len()],
                    TensorData::I32(q.zero_points().to_vec()),
                ));
            }
        }
        if let Some(b) = &s.bias {
            let data = match precision {
                BiasPrecision::F64 => TensorData::F64(b.values().to_vec()),
                BiasPrecision::F32 => TensorData::F32(b.values().iter().map(|&v| v as f32).collect()),
            };
            c.push(NamedTensor::new(p("bias"), vec![b.len()], data));
        }
        sites.push(SiteMeta {
            info: s.info.clone(),
            weight_config: s.weight.as_ref().map(|q| *q.config()),
            activation: s.activation,
            bias_batch_size: s.bias.as_ref().map(BiasVector::batch_size_used),
        });
    }
    let precision = match (precision, model.bias_precision()) {
        (BiasPrecision::F64, p) => p,
        (BiasPrecision::F32, _) => BiasPrecision::F32,
    };
    c.metadata = serde_json::to_value(ModelMeta {
        blocks,
        quantization: Some(QuantMeta {
            settings: *model.settings(),
            sites,
            bias_precision: precision,
        }),
    })?;
    Ok(c)
}

pub fn model_from_container(c: &Container) -> Result<ModelFile> {
    c.expect_kind("model")?;
    let meta: ModelMeta = serde_json::from_value(c.metadata.clone())
        .map_err(|e| Error::validation("metadata", e.to_string()))?;
    let spec = spec_from(c, &meta.blocks)?;
    let Some(q) = meta.quantization else {
        return Ok(ModelFile::Float(spec));
    };
    let mut sites = Vec::with_capacity(q.sites.len());
    for (j, s) in q.sites.into_iter().enumerate() {
        let p = |x: &str| format!("site{j}.{x}");
        let weight = match s.weight_config {
            Some(cfg) => {
                let codes = c.require(&p("codes"))?;
                let zero_points = match c.get(&p("zero_points")) {
                    Some(_) => c.i32_vec(&p("zero_points"))?,
                    None => Vec::new(),
                };
                Some(QuantizedTensor::from_parts(
                    c.i32_vec(&p("codes"))?,
                    c.f64_vec(&p("scales"))?,
                    zero_points,
                    codes.shape.clone(),
                    cfg,
                )?)
            }
            None => None,
        };
        let bias = match c.get(&p("bias")) {
            Some(t) => {
                let values = match &t.data {
                    TensorData::F64(v) => v.clone(),
                    TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
                    TensorData::I32(_) => return Err(Error::validation(p("bias"), "bias must be floating point")),
                };
                let b = s
                    .bias_batch_size
                    .ok_or_else(|| Error::validation(p("bias_batch_size"), "missing for attached bias"))?;
                Some(BiasVector::new(values, s.info.name.clone(), b).map_err(|e| Error::validation(p("bias"), e.to_string()))?)
            }
            None => None,
        };
        sites.push(SiteState {
            info: s.info,
            weight,
            activation: s.activation,
            bias,
        });
    }
    let mut model = QuantizedModel::from_parts(spec, q.settings, sites)?;
    model.set_bias_precision(q.bias_precision);
    Ok(ModelFile::Quantized(model))
}

pub fn write_spec(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<()> {
    spec_to_container(spec)?.write(path)
}

pub fn write_model(path: impl AsRef<Path>, model: &QuantizedModel) -> Result<()> {
    model_to_container(model, BiasPrecision::F64)?.write(path)
}

/// Writes biases as 32-bit floats. Lossy; the model file records it.
pub fn write_model_lossy_bias(path: impl AsRef<Path>, model: &QuantizedModel) -> Result<()> {
    model_to_container(model, BiasPrecision::F32)?.write(path)
}

pub fn read_model_file(path: impl AsRef<Path>) -> Result<ModelFile> {
    model_from_container(&Container::read(path)?)
}

/// Reads a quantized model; a float-only file is a format error.
pub fn read_model(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    match read_model_file(path)? {
        ModelFile::Quantized(m) => Ok(m),
        ModelFile::Float(_) => Err(Error::Format("model file holds no quantization state".into())),
    }
}

pub fn batch_to_container(batch: &CalibrationBatch) -> Container {
    let mut c = Container::new("batch", serde_json::json!({ "b": batch.b() }));
    push_f64(&mut c, "inputs".into(), batch.inputs());
    c
}

pub fn batch_from_container(c: &Container) -> Result<CalibrationBatch> {
    c.expect_kind("batch")?;
    CalibrationBatch::new(c.f64_tensor("inputs")?).map_err(|e| Error::validation("inputs", e.to_string()))
}

pub fn write_batch(path: impl AsRef<Path>, batch: &CalibrationBatch) -> Result<()> {
    batch_to_container(batch).write(path)
}

pub fn read_batch(path: impl AsRef<Path>) -> Result<CalibrationBatch> {
    batch_from_container(&Container::read(path)?)
}

#[derive(Serialize)]
struct ReportFileRef<'a> {
    schema: &'a str,
    reports: &'a [ErrorReport],
}

#[derive(Deserialize)]
struct ReportFile {
    schema: String,
    reports: Vec<ErrorReport>,
}

/// `{"schema": "biascomp.report/1", "reports": [...]}`
pub fn report_json(reports: &[ErrorReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ReportFileRef {
        schema: REPORT_SCHEMA,
        reports,
    })?)
}

pub fn write_report(path: impl AsRef<Path>, reports: &[ErrorReport]) -> Result<String> {
    let text = report_json(reports)?;
    fs::write(path, &text)?;
    Ok(text)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ErrorReport>> {
    let file: ReportFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.schema != REPORT_SCHEMA {
        return Err(Error::Format(format!("unknown report schema `{}`", file.schema)));
    }
    Ok(file.reports)
}

#[derive(Serialize)]
struct ErrorRow<'a> {
    site_index: usize,
    site_name: &'a str,
    base_error: f64,
    compensated_error: f64,
}

fn csv_text<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Per-site error series: `site_index,site_name,base_error,compensated_error`.
pub fn error_csv(series: &[SiteError]) -> Result<String> {
    let text = csv_text(series.iter().map(|s| ErrorRow {
        site_index: s.site_index,
        site_name: &s.site_name,
        base_error: s.base_error,
        compensated_error: s.compensated_error,
    }))?;
    Ok(if text.is_empty() {
        "site_index,site_name,base_error,compensated_error\n".into()
    } else {
        text
    })
}

pub fn write_csv(path: impl AsRef<Path>, series: &[SiteError]) -> Result<String> {
    let text = error_csv(series)?;
    fs::write(path, &text)?;
    Ok(text)
}

/// Bias distribution table: one row per site with an attached bias.
pub fn bias_csv(stats: &[BiasStats]) -> Result<String> {
    let text = csv_text(stats)?;
    Ok(if text.is_empty() {
        "site_index,site_name,len,mean,abs_mean,variance,min,max\n".into()
    } else {
        text
    })
}

pub fn write_bias_csv(path: impl AsRef<Path>, stats: &[BiasStats]) -> Result<String> {
    let text = bias_csv(stats)?;
    fs::write(path, &text)?;
    Ok(text)
}
