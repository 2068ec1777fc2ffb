//! Seeded synthetic models and data.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

use super::{Activation, Block, CalibrationBatch, LayerNorm, Linear, ModelSpec, TransformerBlock};

/// Architecture descriptor, e.g. `mlp:784-256-64` or
/// `transformer:blocks=2,d=32,heads=4,ff=64,seq=16`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Arch {
    Mlp {
        dims: Vec<usize>,
    },
    Transformer {
        blocks: usize,
        d: usize,
        heads: usize,
        ff: usize,
        seq: usize,
    },
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: String| Error::Argument(format!("invalid arch `{s}`: {why}"));
        let (kind, rest) = s.split_once(':').ok_or_else(|| bad("missing `kind:`".into()))?;
        let num = |v: &str| -> Result<usize> {
            match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(bad(format!("`{v}` is not a positive integer"))),
            }
        };
        match kind {
            "mlp" => {
                let dims = rest.split('-').map(num).collect::<Result<Vec<_>>>()?;
                if dims.len() < 2 {
                    return Err(bad("an MLP needs at least two widths".into()));
                }
                Ok(Arch::Mlp { dims })
            }
            "transformer" => {
                let (mut blocks, mut d, mut heads, mut ff, mut seq) = (None, None, None, None, None);
                for kv in rest.split(',') {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| bad(format!("expected key=value, got `{kv}`")))?;
                    let slot = match k.trim() {
                        "blocks" => &mut blocks,
                        "d" => &mut d,
                        "heads" => &mut heads,
                        "ff" => &mut ff,
                        "seq" => &mut seq,
                        other => return Err(bad(format!("unknown key `{other}`"))),
                    };
                    *slot = Some(num(v)?);
                }
                let need = |v: Option<usize>, k: &str| v.ok_or_else(|| bad(format!("missing `{k}`")));
                let arch = Arch::Transformer {
                    blocks: need(blocks, "blocks")?,
                    d: need(d, "d")?,
                    heads: need(heads, "heads")?,
                    ff: need(ff, "ff")?,
                    seq: need(seq, "seq")?,
                };
                if let Arch::Transformer { d, heads, .. } = arch {
                    if d % heads != 0 {
                        return Err(bad(format!("d={d} not divisible by heads={heads}")));
                    }
                }
                Ok(arch)
            }
            other => Err(bad(format!("unknown kind `{other}`"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Mlp { dims } => {
                let dims: Vec<String> = dims.iter().map(usize::to_string).collect();
                write!(f, "mlp:{}", dims.join("-"))
            }
            Arch::Transformer { blocks, d, heads, ff, seq } => {
                write!(f, "transformer:blocks={blocks},d={d},heads={heads},ff={ff},seq={seq}")
            }
        }
    }
}

fn dense(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Tensor {
    rng.normal_tensor(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

fn small(rng: &mut RngStream, n: usize) -> Option<Tensor> {
    Some(rng.normal_tensor(&[n], 0.02))
}

fn layer_norm(rng: &mut RngStream, d: usize) -> Option<LayerNorm> {
    Some(LayerNorm {
        gamma: rng.normal_tensor(&[d], 0.1).map(|v| 1.0 + v),
        beta: rng.normal_tensor(&[d], 0.1),
    })
}

impl Arch {
    /// Gaussian weights scaled by `1/sqrt(fan_in)`; every tensor draws from its own fork.
    pub fn build(&self, rng: &mut RngStream) -> Result<ModelSpec> {
        let blocks = match self {
            Arch::Mlp { dims } => dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    Block::Linear(Linear {
                        weight: dense(&mut rng.fork(), w[0], w[1]),
                        bias: small(&mut rng.fork(), w[1]),
                        activation: if i + 2 < dims.len() {
                            Activation::Gelu
                        } else {
                            Activation::Identity
                        },
                    })
                })
                .collect(),
            &Arch::Transformer { blocks, d, heads, ff, .. } => (0..blocks)
                .map(|_| {
                    Block::Transformer(TransformerBlock {
                        d_model: d,
                        n_heads: heads,
                        d_ff: ff,
                        wq: dense(&mut rng.fork(), d, d),
                        wk: dense(&mut rng.fork(), d, d),
                        wv: dense(&mut rng.fork(), d, d),
                        wo: dense(&mut rng.fork(), d, d),
                        w1: dense(&mut rng.fork(), d, ff),
                        w2: dense(&mut rng.fork(), ff, d),
                        bq: small(&mut rng.fork(), d),
                        bk: small(&mut rng.fork(), d),
                        bv: small(&mut rng.fork(), d),
                        bo: small(&mut rng.fork(), d),
                        b1: small(&mut rng.fork(), ff),
                        b2: small(&mut rng.fork(), d),
                        ln1: layer_norm(&mut rng.fork(), d),
                        ln2: layer_norm(&mut rng.fork(), d),
                    })
                })
                .collect(),
        };
        ModelSpec::new(blocks)
    }

    /// Input shape for a batch of `b` samples.
    pub fn input_shape(&self, b: usize) -> Vec<usize> {
        match self {
            Arch::Mlp { dims } => vec![b, dims[0]],
            &Arch::Transformer { d, seq, .. } => vec![b, seq, d],
        }
    }

    pub fn site_count(&self) -> usize {
        match self {
            Arch::Mlp { dims } => dims.len() - 1,
            Arch::Transformer { blocks, .. } => 8 * blocks,
        }
    }
}

/// Standard-normal inputs of the given shape.
pub fn synth_batch(shape: &[usize], rng: &mut RngStream) -> Result<CalibrationBatch> {
    CalibrationBatch::new(rng.normal_tensor(shape, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_descriptors() {
        let t: Arch = "transformer:blocks=2,d=32,heads=4,ff=64,seq=16".parse().unwrap();
        assert_eq!(
            t,
            Arch::Transformer { blocks: 2, d: 32, heads: 4, ff: 64, seq: 16 }
        );
        assert_eq!(t.to_string().parse::<Arch>().unwrap(), t);
        let m: Arch = "mlp:784-256-64".parse().unwrap();
        assert_eq!(m.site_count(), 2);
        assert_eq!(m.input_shape(3), vec![3, 784]);
    }

    #[test]
    fn rejects_bad_descriptors() {
        for bad in [
            "mlp:10",
            "mlp:10-x",
            "mlp:0-4",
            "cnn:1-2",
            "transformer:blocks=2,d=30,heads=4,ff=8,seq=4",
            "transformer:blocks=2,d=32,heads=4,ff=8",
            "transformer:blocks=2,d=32,heads=4,ff=8,seq=4,foo=1",
            "transformer",
        ] {
            assert!(bad.parse::<Arch>().is_err(), "{bad}");
        }
    }

    #[test]
    fn build_is_deterministic() {
        let arch: Arch = "transformer:blocks=1,d=8,heads=2,ff=16,seq=4".parse().unwrap();
        let a = arch.build(&mut RngStream::new(9)).unwrap();
        let b = arch.build(&mut RngStream::new(9)).unwrap();
        let c = arch.build(&mut RngStream::new(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.sites().len(), 8);
    }
}
