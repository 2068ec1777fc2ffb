//! Dense row-major `f64` tensors with up to three axes.
//!
//! Axis conventions: `[batch]`, `[batch, feature]` or `[batch, sequence, feature]`.
//! Whenever two-dimensional error math is needed, non-batch axes are flattened
//! into one row per batch element (see [`Tensor::flatten_batch`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting bad shapes and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "non-finite element {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Shape-checked constructor that skips the finiteness scan; used for
    /// results of arithmetic on already-validated tensors.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; len])
    }

    pub fn scalar_fill(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; len])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Value("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows along the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        check_shape(shape, self.data.len())?;
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Collapses all non-batch axes: `[b, s, d]` becomes `[b, s*d]`.
    pub fn flatten_batch(&self) -> Result<Self> {
        match self.shape.len() {
            0 => Err(Error::Value("cannot flatten a rank-0 tensor".into())),
            1 => self.reshape(&[self.shape[0], 1]),
            _ => {
                let b = self.shape[0];
                let n = self.shape[1..].iter().product();
                self.reshape(&[b, n])
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `[b, m] x [m, n] -> [b, n]`, accumulated in `f64` with a fixed loop order.
    pub fn matmul(&self, w: &Tensor) -> Result<Self> {
        if self.rank() != 2 || w.rank() != 2 || self.shape[1] != w.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &w.shape));
        }
        let (b, m, n) = (self.shape[0], self.shape[1], w.shape[1]);
        let mut out = vec![0.0; b * n];
        matmul_into(&self.data, &w.data, &mut out, b, m, n);
        Ok(Self::from_parts(vec![b, n], out))
    }

    /// `[b, s, k] x [b, k, t] -> [b, s, t]`, one matmul per batch slice.
    pub fn batched_matmul(&self, c: &Tensor) -> Result<Self> {
        if self.rank() != 3
            || c.rank() != 3
            || self.shape[0] != c.shape[0]
            || self.shape[2] != c.shape[1]
        {
            return Err(Error::dim("batched_matmul", &self.shape, &c.shape));
        }
        let (b, s, k, t) = (self.shape[0], self.shape[1], self.shape[2], c.shape[2]);
        let mut out = vec![0.0; b * s * t];
        for ((a, c), o) in self
            .data
            .chunks_exact(s * k)
            .zip(c.data.chunks_exact(k * t))
            .zip(out.chunks_exact_mut(s * t))
        {
            matmul_into(a, c, o, s, k, t);
        }
        Ok(Self::from_parts(vec![b, s, t], out))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last(&self) -> Result<Self> {
        let (b, r, c) = match self.shape.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => return Err(Error::Value(format!("cannot transpose shape {:?}", self.shape))),
        };
        let mut out = vec![0.0; self.data.len()];
        for (src, dst) in self.data.chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let shape = if self.rank() == 2 { vec![c, r] } else { vec![b, c, r] };
        Ok(Self::from_parts(shape, out))
    }

    /// Mean over the batch axis of a `[b, n]` tensor.
    pub fn row_mean(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Value(format!("row_mean expects rank 2, got {:?}", self.shape)));
        }
        let (b, n) = (self.shape[0], self.shape[1]);
        if b == 0 {
            return Err(Error::Argument("row_mean over an empty batch".into()));
        }
        let mut sums = vec![0.0; n];
        for row in self.data.chunks_exact(n.max(1)).take(b) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        let inv = b as f64;
        Ok(Self::from_parts(vec![n], sums.into_iter().map(|s| s / inv).collect()))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Adds `v` (length `n`) to every row of a `[b, n]` tensor.
    pub fn add_bias_rows(&self, v: &Tensor) -> Result<Self> {
        if self.rank() != 2 || v.len() != self.shape[1] {
            return Err(Error::dim("add_bias_rows", &self.shape, &v.shape));
        }
        let n = self.shape[1];
        let mut out = self.data.clone();
        if n > 0 {
            for row in out.chunks_exact_mut(n) {
                for (o, b) in row.iter_mut().zip(&v.data) {
                    *o += b;
                }
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Value(format!(
            "tensor rank must be 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::Value(format!(
            "shape {shape:?} needs {expected} elements, got {len}"
        )));
    }
    Ok(())
}

// i-k-j order: contiguous inner loop over the output row.
fn matmul_into(a: &[f64], w: &[f64], out: &mut [f64], b: usize, m: usize, n: usize) {
    for i in 0..b {
        let row = &mut out[i * n..(i + 1) * n];
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            let wk = &w[k * n..(k + 1) * n];
            for (o, &wkj) in row.iter_mut().zip(wk) {
                *o += aik * wkj;
            }
        }
    }
}

/// Seeded ChaCha8 stream. Same seed, same sequence, on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream, e.g. one per weight matrix.
    pub fn fork(&mut self) -> Self {
        Self::new(self.rng.gen())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.normal() * std).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.uniform(lo, hi)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn naive_matmul(a: &Tensor, w: &Tensor) -> Vec<f64> {
        let (b, m, n) = (a.shape()[0], a.shape()[1], w.shape()[1]);
        let mut out = vec![0.0; b * n];
        for i in 0..b {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += a.data()[i * m + k] * w.data()[k * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let w = t(&[&[3.0, 1.0], &[2.0, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&w).unwrap(), w);
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
        let r = t(&[&[1.0, 2.0]]).matmul(&t(&[&[1.0], &[1.0]])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn batched_matmul_examples() {
        let mut rng = RngStream::new(3);
        let c = rng.normal_tensor(&[2, 3, 4], 1.0);
        let mut eye = Tensor::zeros(&[2, 3, 3]);
        for b in 0..2 {
            for i in 0..3 {
                eye.data[b * 9 + i * 3 + i] = 1.0;
            }
        }
        assert_eq!(eye.batched_matmul(&c).unwrap(), c);

        let z = Tensor::zeros(&[2, 5, 3]).batched_matmul(&c).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let a = rng.normal_tensor(&[1, 5, 3], 1.0);
        let c1 = rng.normal_tensor(&[1, 3, 4], 1.0);
        let bmm = a.batched_matmul(&c1).unwrap();
        let mm = a.reshape(&[5, 3]).unwrap().matmul(&c1.reshape(&[3, 4]).unwrap()).unwrap();
        assert_eq!(bmm.data(), mm.data());

        assert!(a.batched_matmul(&c).is_err());
    }

    #[test]
    fn reductions() {
        let x = t(&[&[1.0, 3.0], &[3.0, 5.0]]);
        assert_eq!(x.row_mean().unwrap().data(), &[2.0, 4.0]);
        assert_eq!(x.frobenius_sq(), 44.0);
        let y = Tensor::zeros(&[2, 2])
            .add_bias_rows(&Tensor::from_vec(vec![1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(y, t(&[&[1.0, 2.0], &[1.0, 2.0]]));
        assert!(x.add_bias_rows(&Tensor::from_vec(vec![1.0]).unwrap()).is_err());
        assert!(Tensor::zeros(&[0, 3]).row_mean().is_err());
    }

    #[test]
    fn construction_rejects_non_finite_and_bad_shapes() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn flatten_and_transpose() {
        let x = RngStream::new(1).normal_tensor(&[2, 3, 4], 1.0);
        assert_eq!(x.flatten_batch().unwrap().shape(), &[2, 12]);
        let tt = x.transpose_last().unwrap().transpose_last().unwrap();
        assert_eq!(tt, x);
        let m = t(&[&[1.0, 2.0, 3.0]]).transpose_last().unwrap();
        assert_eq!(m.shape(), &[3, 1]);
    }

    #[test]
    fn rng_is_reproducible() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(42);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(42);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a[0], RngStream::new(43).next_u64());
    }

    proptest! {
        #[test]
        fn matmul_matches_triple_loop(b in 1usize..=32, m in 1usize..=32, n in 1usize..=32, seed: u64) {
            let mut rng = RngStream::new(seed);
            let a = rng.uniform_tensor(&[b, m], -10.0, 10.0);
            let w = rng.uniform_tensor(&[m, n], -10.0, 10.0);
            let got = a.matmul(&w).unwrap();
            let want = naive_matmul(&a, &w);
            // Relative to the magnitude of the summands, not the (possibly cancelled) result.
            for (i, (g, e)) in got.data().iter().zip(&want).enumerate() {
                let (r, c) = (i / n, i % n);
                let mag: f64 = (0..m).map(|k| (a.data()[r * m + k] * w.data()[k * n + c]).abs()).sum();
                prop_assert!((g - e).abs() <= 1e-12 * mag.max(f64::MIN_POSITIVE));
            }
        }

        #[test]
        fn frobenius_nonnegative(seed: u64, zero in any::<bool>()) {
            let mut rng = RngStream::new(seed);
            let x = if zero { Tensor::zeros(&[3, 4]) } else { rng.uniform_tensor(&[3, 4], -1.0, 1.0) };
            let f = x.frobenius_sq();
            prop_assert!(f >= 0.0);
            prop_assert_eq!(f == 0.0, x.data().iter().all(|&v| v == 0.0));
        }

        #[test]
        fn row_mean_is_linear_in_bias(seed: u64, b in 1usize..16, n in 1usize..16) {
            let mut rng = RngStream::new(seed);
            let x = rng.uniform_tensor(&[b, n], -5.0, 5.0);
            let v = rng.uniform_tensor(&[n], -5.0, 5.0);
            let lhs = x.add_bias_rows(&v).unwrap().row_mean().unwrap();
            let rhs = x.row_mean().unwrap().add(&v).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() <= 1e-12 * (l.abs().max(r.abs()) + 10.0));
            }
        }
    }
}
