use crate::bias::apply_bias;
use crate::error::{Error, Result};
use crate::quant::fake_quant;
use crate::tensor::Tensor;

use super::{Activation, Block, CalibrationBatch, LayerNorm, Linear, ModelSpec, QuantizedModel, SiteInfo, SiteKind, TransformerBlock, LAYER_NORM_EPS};

/// What happens at each matmul site. The graph walker owns everything else.
pub(super) trait SiteExec {
    /// `x: [rows, m]`, `w: [m, n]` (float weight from the spec).
    fn linear(&mut self, site: &SiteInfo, x: &Tensor, w: &Tensor) -> Result<Tensor>;
    /// `a: [g, s, k]`, `c: [g, k, t]`.
    fn bmm(&mut self, site: &SiteInfo, a: &Tensor, c: &Tensor) -> Result<Tensor>;
    /// Receives the site output with the batch as leading axis and returns
    /// what downstream layers consume.
    fn finish(&mut self, site: &SiteInfo, out: Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct FloatForward {
    pub output: Tensor,
    /// Float output of every site, batch-leading, when recording.
    pub sites: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct QuantForward {
    pub output: Tensor,
    /// Site outputs before bias compensation.
    pub raw: Vec<Tensor>,
    /// Site outputs after bias compensation (equal to `raw` where no bias is attached).
    pub compensated: Vec<Tensor>,
}

struct FloatExec {
    record: bool,
    sites: Vec<Tensor>,
}

impl SiteExec for FloatExec {
    fn linear(&mut self, _: &SiteInfo, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        x.matmul(w)
    }

    fn bmm(&mut self, _: &SiteInfo, a: &Tensor, c: &Tensor) -> Result<Tensor> {
        a.batched_matmul(c)
    }

    fn finish(&mut self, _: &SiteInfo, out: Tensor) -> Result<Tensor> {
        if self.record {
            self.sites.push(out.clone());
        }
        Ok(out)
    }
}

/// Quantized matmuls for a model; shared by the plain and calibrating passes.
pub(super) fn quant_linear(model: &QuantizedModel, site: &SiteInfo, x: &Tensor) -> Result<Tensor> {
    let w = model.dequantized_weight(site.index).ok_or_else(|| Error::Graph {
        site: site.name.clone(),
        reason: "no quantized weight configured".into(),
    })?;
    match &model.sites()[site.index].activation {
        Some(cfg) => fake_quant(x, cfg)?.matmul(w),
        None => x.matmul(w),
    }
    .map_err(|e| at_site(site, e))
}

pub(super) fn quant_bmm(model: &QuantizedModel, site: &SiteInfo, a: &Tensor, c: &Tensor) -> Result<Tensor> {
    match &model.sites()[site.index].activation {
        Some(cfg) => fake_quant(a, cfg)?.batched_matmul(&fake_quant(c, cfg)?),
        None => a.batched_matmul(c),
    }
    .map_err(|e| at_site(site, e))
}

struct QuantExec<'m> {
    model: &'m QuantizedModel,
    record: bool,
    raw: Vec<Tensor>,
    compensated: Vec<Tensor>,
}

impl SiteExec for QuantExec<'_> {
    fn linear(&mut self, site: &SiteInfo, x: &Tensor, _: &Tensor) -> Result<Tensor> {
        quant_linear(self.model, site, x)
    }

    fn bmm(&mut self, site: &SiteInfo, a: &Tensor, c: &Tensor) -> Result<Tensor> {
        quant_bmm(self.model, site, a, c)
    }

    fn finish(&mut self, site: &SiteInfo, out: Tensor) -> Result<Tensor> {
        let comp = match &self.model.sites()[site.index].bias {
            Some(b) => apply_bias(&out, b).map_err(|e| at_site(site, e))?,
            None => out.clone(),
        };
        if self.record {
            self.raw.push(out);
            self.compensated.push(comp.clone());
        }
        Ok(comp)
    }
}

pub(super) fn at_site(site: &SiteInfo, e: Error) -> Error {
    match e {
        e @ (Error::Graph { .. } | Error::Numeric { .. }) => e,
        e => Error::Graph {
            site: site.name.clone(),
            reason: e.to_string(),
        },
    }
}

/// Float forward pass; records every site output when `record` is set.
pub fn forward_float(spec: &ModelSpec, batch: &CalibrationBatch, record: bool) -> Result<FloatForward> {
    let mut exec = FloatExec {
        record,
        sites: Vec::new(),
    };
    let output = run_graph(spec, batch.inputs(), &mut exec)?;
    Ok(FloatForward {
        output,
        sites: exec.sites,
    })
}

/// Quantized forward pass with attached biases applied after each site.
pub fn forward_quantized(model: &QuantizedModel, batch: &CalibrationBatch, record: bool) -> Result<QuantForward> {
    let mut exec = QuantExec {
        model,
        record,
        raw: Vec::new(),
        compensated: Vec::new(),
    };
    let output = run_graph(model.spec(), batch.inputs(), &mut exec)?;
    Ok(QuantForward {
        output,
        raw: exec.raw,
        compensated: exec.compensated,
    })
}

pub(super) fn run_graph(spec: &ModelSpec, input: &Tensor, exec: &mut dyn SiteExec) -> Result<Tensor> {
    let sites = spec.sites();
    let mut next = 0;
    let mut x = input.clone();
    for block in &spec.blocks {
        match block {
            Block::Linear(l) => {
                x = linear_block(l, &x, &sites[next], exec)?;
                next += 1;
            }
            Block::Transformer(t) => {
                x = transformer_block(t, &x, &sites[next..next + 8], exec)?;
                next += 8;
            }
        }
    }
    Ok(x)
}

/// Applies a site matmul along the last axis of `x` (rank 2 or 3).
fn site_linear(
    site: &SiteInfo,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    exec: &mut dyn SiteExec,
) -> Result<Tensor> {
    let shape = x.shape();
    let m = *shape.last().unwrap_or(&0);
    if shape.len() < 2 || m != w.shape()[0] {
        return Err(Error::Graph {
            site: site.name.clone(),
            reason: format!("input shape {shape:?} does not fit weight {:?}", w.shape()),
        });
    }
    let rows = x.len() / m.max(1);
    let flat = x.reshape(&[rows, m])?;
    let mut y = exec.linear(site, &flat, w)?;
    if let Some(b) = bias {
        y = y.add_bias_rows(b).map_err(|e| at_site(site, e))?;
    }
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().expect("rank >= 2") = w.shape()[1];
    exec.finish(site, y.reshape(&out_shape)?)
}

fn linear_block(l: &Linear, x: &Tensor, site: &SiteInfo, exec: &mut dyn SiteExec) -> Result<Tensor> {
    let y = site_linear(site, x, &l.weight, l.bias.as_ref(), exec)?;
    Ok(match l.activation {
        Activation::Identity => y,
        Activation::Gelu => y.map(gelu),
    })
}

fn transformer_block(t: &TransformerBlock, x: &Tensor, sites: &[SiteInfo], exec: &mut dyn SiteExec) -> Result<Tensor> {
    let [q_site, k_site, v_site, s_site, c_site, o_site, f1_site, f2_site] = sites else {
        unreachable!("transformer blocks own eight sites");
    };
    debug_assert_eq!(
        sites.iter().map(|s| s.kind).collect::<Vec<_>>(),
        SiteKind::TRANSFORMER_ORDER
    );
    let (b, s, d) = match x.shape() {
        &[b, s, d] if d == t.d_model => (b, s, d),
        other => {
            return Err(Error::Graph {
                site: q_site.name.clone(),
                reason: format!("expected input [b, s, {}], got {other:?}", t.d_model),
            })
        }
    };
    let heads = t.n_heads;
    let dh = d / heads;

    let h = layer_norm(x, t.ln1.as_ref());
    let q = site_linear(q_site, &h, &t.wq, t.bq.as_ref(), exec)?;
    let k = site_linear(k_site, &h, &t.wk, t.bk.as_ref(), exec)?;
    let v = site_linear(v_site, &h, &t.wv, t.bv.as_ref(), exec)?;

    let qh = split_heads(&q, heads);
    let kt = split_heads(&k, heads).transpose_last()?;
    let vh = split_heads(&v, heads);

    let scores = exec.bmm(s_site, &qh, &kt)?;
    let scores = exec.finish(s_site, scores.reshape(&[b, heads * s, s])?)?;
    let probs = softmax_rows(&scores.scale(1.0 / (dh as f64).sqrt()));
    let probs = probs.reshape(&[b * heads, s, s])?;

    let ctx = exec.bmm(c_site, &probs, &vh)?;
    let ctx = exec.finish(c_site, ctx.reshape(&[b, heads * s, dh])?)?;
    let merged = merge_heads(&ctx, b, heads, s, dh);

    let o = site_linear(o_site, &merged, &t.wo, t.bo.as_ref(), exec)?;
    let x1 = x.add(&o)?;

    let h2 = layer_norm(&x1, t.ln2.as_ref());
    let f1 = site_linear(f1_site, &h2, &t.w1, t.b1.as_ref(), exec)?.map(gelu);
    let f2 = site_linear(f2_site, &f1, &t.w2, t.b2.as_ref(), exec)?;
    x1.add(&f2)
}

/// `[b, s, heads*dh] -> [b*heads, s, dh]`
fn split_heads(x: &Tensor, heads: usize) -> Tensor {
    let (b, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for si in 0..s {
            for h in 0..heads {
                let from = (bi * s + si) * d + h * dh;
                let to = ((bi * heads + h) * s + si) * dh;
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    Tensor::from_parts(vec![b * heads, s, dh], out)
}

/// Inverse of [`split_heads`]; accepts any tensor holding `b*heads*s*dh` values.
fn merge_heads(x: &Tensor, b: usize, heads: usize, s: usize, dh: usize) -> Tensor {
    let src = x.data();
    let d = heads * dh;
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for h in 0..heads {
            for si in 0..s {
                let from = ((bi * heads + h) * s + si) * dh;
                let to = (bi * s + si) * d + h * dh;
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    Tensor::from_parts(vec![b, s, d], out)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("non-empty shape");
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(n.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn layer_norm(x: &Tensor, ln: Option<&LayerNorm>) -> Tensor {
    let Some(ln) = ln else {
        return x.clone();
    };
    let d = *x.shape().last().expect("non-empty shape");
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(ln.gamma.data()).zip(ln.beta.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// tanh approximation.
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}
