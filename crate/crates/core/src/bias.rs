//! Output-bias compensation.
//!
//! For a quantized site with float output `X` and quantized output `Xq`
//! (both flattened to `[b, n]`), the residual `N = X - Xq` is corrected by a
//! single vector `B` added to every row of `Xq`. The error
//! `sum_j ||N(j) - B||^2` is a convex quadratic in `B` with Hessian `b * I`,
//! minimized by the column mean of `N`, and at the minimum it equals
//! `||N||^2 - b * ||mean||^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Storage precision of bias vectors in a model file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasPrecision {
    #[default]
    F64,
    /// Lossy export; values were rounded to 32-bit floats.
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVector {
    values: Vec<f64>,
    site_id: String,
    batch_size_used: usize,
}

impl BiasVector {
    pub fn new(values: Vec<f64>, site_id: impl Into<String>, batch_size_used: usize) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation("bias", format!("non-finite bias value {v}")));
        }
        Ok(Self {
            values,
            site_id: site_id.into(),
            batch_size_used,
        })
    }

    pub fn zeros(len: usize, site_id: impl Into<String>) -> Self {
        Self {
            values: vec![0.0; len],
            site_id: site_id.into(),
            batch_size_used: 0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn batch_size_used(&self) -> usize {
        self.batch_size_used
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.values.len()], self.values.clone())
    }
}

/// Per-site errors on the data the bias was fitted to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputErrorRecord {
    pub site_index: usize,
    pub site_id: String,
    /// `||N||^2`
    pub base_error: f64,
    /// `sum_j ||N(j) - B*||^2`
    pub compensated_error: f64,
    /// `b * ||B*||^2`
    pub reduction_term: f64,
    pub b: usize,
}

fn require_2d(n: &Tensor, op: &str) -> Result<(usize, usize)> {
    match n.shape() {
        &[b, cols] => Ok((b, cols)),
        s => Err(Error::Value(format!("{op} expects a [b, n] matrix, got {s:?}"))),
    }
}

fn require_batch(b: usize) -> Result<()> {
    if b == 0 {
        Err(Error::Argument("calibration batch is empty (b = 0)".into()))
    } else {
        Ok(())
    }
}

/// `x_float - x_quant`, flattened to `[b, n]`.
pub fn output_diff(x_float: &Tensor, x_quant: &Tensor) -> Result<Tensor> {
    if x_float.shape() != x_quant.shape() {
        return Err(Error::dim("output_diff", x_float.shape(), x_quant.shape()));
    }
    require_batch(x_float.batch())?;
    x_float.sub(x_quant)?.flatten_batch()
}

/// Squared Frobenius norm of a residual matrix.
pub fn output_error(n: &Tensor) -> Result<f64> {
    require_2d(n, "output_error")?;
    Ok(n.frobenius_sq())
}

/// Column mean of the residual: the minimizer of the compensated error.
pub fn optimal_bias(n: &Tensor, site_id: &str) -> Result<BiasVector> {
    let (b, _) = require_2d(n, "optimal_bias")?;
    require_batch(b)?;
    let mean = n.row_mean()?;
    BiasVector::new(mean.into_data(), site_id, b)
}

/// `sum_j ||N(j) - v||^2`.
pub fn compensated_error(n: &Tensor, v: &BiasVector) -> Result<f64> {
    let (_, cols) = require_2d(n, "compensated_error")?;
    if v.len() != cols {
        return Err(Error::dim("compensated_error", n.shape(), &[v.len()]));
    }
    if cols == 0 {
        return Ok(0.0);
    }
    Ok(n.data()
        .chunks_exact(cols)
        .flat_map(|row| row.iter().zip(v.values()).map(|(x, b)| (x - b) * (x - b)))
        .sum())
}

/// Gradient of [`compensated_error`] with respect to `v`: `2 (b v - sum_j N(j))`.
pub fn objective_gradient(n: &Tensor, v: &[f64]) -> Result<Vec<f64>> {
    let (b, cols) = require_2d(n, "objective_gradient")?;
    if v.len() != cols {
        return Err(Error::dim("objective_gradient", n.shape(), &[v.len()]));
    }
    let mut sums = vec![0.0; cols];
    if cols > 0 {
        for row in n.data().chunks_exact(cols) {
            for (s, x) in sums.iter_mut().zip(row) {
                *s += x;
            }
        }
    }
    Ok(v.iter()
        .zip(sums)
        .map(|(vi, s)| 2.0 * (b as f64 * vi - s))
        .collect())
}

/// Base error, optimal compensated error, and the reduction between them.
pub fn guarantee_decomposition(n: &Tensor, site_index: usize, site_id: &str) -> Result<OutputErrorRecord> {
    let bias = optimal_bias(n, site_id)?;
    let b = bias.batch_size_used();
    let base_error = n.frobenius_sq();
    let compensated_error = compensated_error(n, &bias)?;
    let reduction_term = b as f64 * bias.values().iter().map(|v| v * v).sum::<f64>();
    Ok(OutputErrorRecord {
        site_index,
        site_id: site_id.to_string(),
        base_error,
        compensated_error,
        reduction_term,
        b,
    })
}

/// `b * I`. Note the second derivative of [`compensated_error`] in `v` is `2b * I`.
pub fn hessian(n_features: usize, b: usize) -> Result<Tensor> {
    require_batch(b)?;
    if n_features == 0 {
        return Err(Error::Argument("hessian needs at least one feature".into()));
    }
    Ok(Tensor::identity(n_features).scale(b as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentParams {
    pub steps: usize,
    pub lr: f64,
    /// Stop once `||v - v*||_inf`, read off the gradient as `||g||_inf / 2b`, is below this.
    pub tol: f64,
}

impl DescentParams {
    /// A stable default for batch size `b`: `lr = 1 / (4 b)`.
    pub fn for_batch(b: usize) -> Self {
        Self {
            steps: 10_000,
            lr: 0.25 / b.max(1) as f64,
            tol: 1e-10,
        }
    }
}

/// Plain gradient descent on the compensated error, starting from zero.
///
/// Independent of [`optimal_bias`]; used to check the closed form.
pub fn gradient_descent_oracle(n: &Tensor, params: DescentParams, site_id: &str) -> Result<BiasVector> {
    let (b, cols) = require_2d(n, "gradient_descent_oracle")?;
    require_batch(b)?;
    let DescentParams { steps, lr, tol } = params;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Argument(format!("learning rate must be positive, got {lr}")));
    }
    if lr * b as f64 >= 1.0 {
        return Err(Error::Instability {
            lr,
            reason: format!("step size must be below 1/b = {}", 1.0 / b as f64),
        });
    }
    let mut v = BiasVector::zeros(cols, site_id);
    v.batch_size_used = b;
    let mut prev = compensated_error(n, &v)?;
    for _ in 0..steps {
        let grad = objective_gradient(n, &v.values)?;
        let dist = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) / (2.0 * b as f64);
        if dist <= tol {
            break;
        }
        for (x, g) in v.values.iter_mut().zip(&grad) {
            *x -= lr * g;
        }
        let err = compensated_error(n, &v)?;
        if !err.is_finite() || err > prev * (1.0 + 1e-12) + f64::MIN_POSITIVE {
            return Err(Error::Instability {
                lr,
                reason: format!("objective rose from {prev} to {err}"),
            });
        }
        prev = err;
    }
    Ok(v)
}

/// Adds `v` to every batch row of `x_quant`; the output keeps the input's shape.
pub fn apply_bias(x_quant: &Tensor, v: &BiasVector) -> Result<Tensor> {
    let flat = x_quant.flatten_batch()?;
    if flat.shape()[1] != v.len() {
        return Err(Error::dim("apply_bias", x_quant.shape(), &[v.len()]));
    }
    flat.add_bias_rows(&v.to_tensor())?.reshape(x_quant.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;
    use proptest::prelude::*;

    fn n_example() -> Tensor {
        Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap()
    }

    fn bias(values: &[f64]) -> BiasVector {
        BiasVector::new(values.to_vec(), "t", 2).unwrap()
    }

    #[test]
    fn output_diff_examples() {
        let a = Tensor::from_rows(&[vec![2.0, 4.0], vec![6.0, 8.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
        assert_eq!(output_diff(&a, &b).unwrap(), n_example());
        assert_eq!(output_diff(&a, &a).unwrap().frobenius_sq(), 0.0);
        let x = RngStream::new(0).normal_tensor(&[2, 3, 4], 1.0);
        assert_eq!(output_diff(&x, &x).unwrap().shape(), &[2, 12]);
        assert!(output_diff(&a, &x).is_err());
    }

    #[test]
    fn output_error_examples() {
        assert_eq!(output_error(&Tensor::zeros(&[2, 2])).unwrap(), 0.0);
        assert_eq!(output_error(&n_example()).unwrap(), 44.0);
        assert_eq!(output_error(&n_example().scale(3.0)).unwrap(), 9.0 * 44.0);
        assert!(output_error(&Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn optimal_bias_examples() {
        assert_eq!(optimal_bias(&n_example(), "s").unwrap().values(), &[2.0, 4.0]);
        let one = Tensor::from_rows(&[vec![0.3, -7.0, 2.5]]).unwrap();
        let b1 = optimal_bias(&one, "s").unwrap();
        assert_eq!(b1.values(), one.data());
        assert_eq!(compensated_error(&one, &b1).unwrap(), 0.0);
        assert!(optimal_bias(&Tensor::zeros(&[3, 2]), "s").unwrap().is_zero());
        assert!(matches!(
            optimal_bias(&Tensor::zeros(&[0, 2]), "s"),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn compensated_error_examples() {
        let n = n_example();
        assert_eq!(compensated_error(&n, &bias(&[0.0, 0.0])).unwrap(), 44.0);
        assert_eq!(compensated_error(&n, &bias(&[2.0, 4.0])).unwrap(), 4.0);
        let mut rng = RngStream::new(11);
        for _ in 0..100 {
            let v = [2.0 + rng.uniform(-1.0, 1.0), 4.0 + rng.uniform(-1.0, 1.0)];
            assert!(compensated_error(&n, &bias(&v)).unwrap() > 4.0);
        }
        assert!(compensated_error(&n, &bias(&[1.0])).is_err());
    }

    #[test]
    fn decomposition_examples() {
        let r = guarantee_decomposition(&n_example(), 0, "s").unwrap();
        assert_eq!((r.base_error, r.reduction_term, r.compensated_error), (44.0, 40.0, 4.0));

        let zm = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let r = guarantee_decomposition(&zm, 0, "s").unwrap();
        assert_eq!(r.reduction_term, 0.0);
        assert_eq!(r.compensated_error, r.base_error);

        let one = Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap();
        let r = guarantee_decomposition(&one, 0, "s").unwrap();
        assert_eq!(r.compensated_error, 0.0);
        assert_eq!(r.reduction_term, r.base_error);
    }

    #[test]
    fn hessian_examples() {
        let h = hessian(3, 2).unwrap();
        assert_eq!(h, Tensor::identity(3).scale(2.0));
        assert_eq!(hessian(5, 1).unwrap(), Tensor::identity(5));
        assert!(hessian(3, 0).is_err());
    }

    #[test]
    fn descent_examples() {
        let n = n_example();
        let v = gradient_descent_oracle(&n, DescentParams { steps: 100, lr: 0.25, tol: 1e-12 }, "s").unwrap();
        assert!(v.values().iter().zip([2.0, 4.0]).all(|(a, b)| (a - b).abs() <= 1e-6));

        let z = gradient_descent_oracle(&Tensor::zeros(&[3, 4]), DescentParams::for_batch(3), "s").unwrap();
        assert!(z.is_zero());

        // lr = 1/(2b) reaches the minimizer in exactly one step.
        let v = gradient_descent_oracle(&n, DescentParams { steps: 1, lr: 0.25, tol: 0.0 }, "s").unwrap();
        assert_eq!(v.values(), &[2.0, 4.0]);
    }

    #[test]
    fn descent_rejects_unstable_step() {
        let err = gradient_descent_oracle(&n_example(), DescentParams { steps: 10, lr: 0.6, tol: 0.0 }, "s")
            .unwrap_err();
        assert!(matches!(err, Error::Instability { lr, .. } if lr == 0.6));
        assert!(err.to_string().contains("0.6"));
        assert!(gradient_descent_oracle(&n_example(), DescentParams { steps: 10, lr: -1.0, tol: 0.0 }, "s").is_err());
    }

    #[test]
    fn apply_bias_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
        let y = apply_bias(&x, &bias(&[2.0, 4.0])).unwrap();
        assert_eq!(y, Tensor::from_rows(&[vec![3.0, 5.0], vec![5.0, 7.0]]).unwrap());
        assert_eq!(apply_bias(&x, &bias(&[0.0, 0.0])).unwrap(), x);

        let mut rng = RngStream::new(2);
        let xf = rng.normal_tensor(&[4, 3, 5], 1.0);
        let xq = rng.normal_tensor(&[4, 3, 5], 1.0);
        let b = optimal_bias(&output_diff(&xf, &xq).unwrap(), "s").unwrap();
        let comp = apply_bias(&xq, &b).unwrap();
        assert_eq!(comp.shape(), xq.shape());
        let resid_mean = output_diff(&xf, &comp).unwrap().row_mean().unwrap();
        assert!(resid_mean.max_abs() < 1e-12);
        assert!(apply_bias(&xq, &bias(&[1.0])).is_err());
    }

    proptest! {
        #[test]
        fn compensation_never_hurts(seed: u64, b in 1usize..12, cols in 1usize..24) {
            let n = RngStream::new(seed).uniform_tensor(&[b, cols], -10.0, 10.0);
            let r = guarantee_decomposition(&n, 0, "p").unwrap();
            prop_assert!(r.compensated_error <= r.base_error);
            let lhs = r.compensated_error + r.reduction_term;
            prop_assert!((lhs - r.base_error).abs() <= 1e-9 * r.base_error.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn bias_never_changes_the_residual(seed: u64) {
            let mut rng = RngStream::new(seed);
            let xf = rng.normal_tensor(&[5, 7], 1.0);
            let xq = rng.normal_tensor(&[5, 7], 1.0);
            let before = output_diff(&xf, &xq).unwrap();
            let _attached = apply_bias(&xq, &BiasVector::new(rng.normal_tensor(&[7], 1.0).into_data(), "p", 5).unwrap()).unwrap();
            prop_assert_eq!(output_diff(&xf, &xq).unwrap(), before);
        }
    }
}
