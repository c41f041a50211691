//! Dense vector/matrix primitives, the differentiable building blocks of the
//! model, the Adam optimizer, and a finite-difference gradient oracle.
//!
//! Everything here is f64: the gradient checks need the precision and the
//! problem sizes make f32 throughput irrelevant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix from explicit data; rejects length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {rows}x{cols} = {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix entry is not finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged row lengths".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Stacks two matrices with equal column counts, `self` on top.
    pub fn vstack(&self, bottom: &Tensor2) -> Result<Tensor2> {
        if self.cols != bottom.cols {
            return Err(Error::Shape(format!(
                "vstack of {} and {} columns",
                self.cols, bottom.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + bottom.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&bottom.data);
        Ok(Tensor2 { rows: self.rows + bottom.rows, cols: self.cols, data })
    }

    /// `self * other`
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(lhs) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`
    pub fn matmul_bt(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_bt {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(self.row(i), other.row(j));
            }
        }
        Ok(out)
    }

    /// `self^T * other`
    pub fn matmul_at(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "matmul_at {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            for i in 0..self.cols {
                let a = self.data[r * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[r * other.cols..(r + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add_row_broadcast(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!(
                "bias of length {} against {} columns",
                bias.len(),
                self.cols
            )));
        }
        for i in 0..self.rows {
            for (v, b) in self.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, v) in out.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor2) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape("add_assign shape mismatch".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) {
        return Err(Error::Normalization);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Backward pass of `l2_normalize`: applies the projection Jacobian
/// `(I - u u^T) / ||v||` to `d_out`, where `u = v / ||v||`.
pub fn l2_normalize_backward(v: &[f64], d_out: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) {
        return Err(Error::Normalization);
    }
    let u: Vec<f64> = v.iter().map(|x| x / n).collect();
    let proj = dot(&u, d_out);
    Ok(u.iter().zip(d_out).map(|(ui, di)| (di - proj * ui) / n).collect())
}

/// Cache for the backward pass of an affine (optionally ReLU) layer.
#[derive(Debug, Clone)]
pub struct AffineCache {
    pub input: Tensor2,
    /// Pre-activation values; only consulted when the layer applied ReLU.
    pub pre_activation: Option<Tensor2>,
}

/// `max(0, x W + b)` with a cache sufficient for the backward pass.
pub fn affine_relu_forward(
    x: &Tensor2,
    w: &Tensor2,
    b: &[f64],
) -> Result<(Tensor2, AffineCache)> {
    let mut pre = x.matmul(w)?;
    pre.add_row_broadcast(b)?;
    let mut out = pre.clone();
    for v in out.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok((out, AffineCache { input: x.clone(), pre_activation: Some(pre) }))
}

/// Plain affine layer `x W + b`.
pub fn affine_forward(x: &Tensor2, w: &Tensor2, b: &[f64]) -> Result<(Tensor2, AffineCache)> {
    let mut out = x.matmul(w)?;
    out.add_row_broadcast(b)?;
    Ok((out, AffineCache { input: x.clone(), pre_activation: None }))
}

/// Backward pass shared by `affine_forward` and `affine_relu_forward`.
///
/// ReLU uses the subgradient convention `relu'(0) = 0`. Returns
/// `(d_input, d_w, d_b)`.
pub fn affine_backward(
    cache: &AffineCache,
    w: &Tensor2,
    d_out: &Tensor2,
) -> Result<(Tensor2, Tensor2, Vec<f64>)> {
    let d_pre = match &cache.pre_activation {
        Some(pre) => {
            if pre.rows() != d_out.rows() || pre.cols() != d_out.cols() {
                return Err(Error::Shape("gradient does not match forward cache".into()));
            }
            let mut masked = d_out.clone();
            for (g, p) in masked.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            }
            masked
        }
        None => d_out.clone(),
    };
    let d_w = cache.input.matmul_at(&d_pre)?;
    let d_b = d_pre.col_sums();
    let d_input = d_pre.matmul_bt(w)?;
    Ok((d_input, d_w, d_b))
}

/// Adam hyperparameters. Weight decay is decoupled: it is applied directly to
/// the parameters rather than folded into the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adam optimizer state over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update with decoupled weight decay.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "adam over {} params got {} grads (state holds {})",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("gradient is not finite".into()));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.first_moment[i] = c.beta1 * self.first_moment[i] + (1.0 - c.beta1) * g;
            self.second_moment[i] = c.beta2 * self.second_moment[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.first_moment[i] / bc1;
            let v_hat = self.second_moment[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            params[i] -= c.learning_rate * c.weight_decay * params[i];
        }
        Ok(())
    }
}

/// Central-difference gradient check.
///
/// Perturbs each parameter by `±step`, evaluates `loss_fn`, and returns the
/// maximum over parameters of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "analytic gradient length mismatch");
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut buf = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..buf.len() {
        let orig = buf[i];
        buf[i] = orig + step;
        let plus = loss_fn(&buf);
        buf[i] = orig - step;
        let minus = loss_fn(&buf);
        buf[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn l2_normalize_pythagorean_triple() {
        let out = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_rejects_zero_vector() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::Normalization)));
    }

    #[test]
    fn l2_normalize_keeps_unit_vectors() {
        let u = [0.0, 1.0, 0.0];
        let out = l2_normalize(&u).unwrap();
        for (a, b) in out.iter().zip(&u) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_backward_matches_finite_differences() {
        let v = [0.7, -1.3, 2.1, 0.4];
        let d_out = [0.3, -0.5, 0.9, -0.1];
        let analytic = l2_normalize_backward(&v, &d_out).unwrap();
        let loss = |p: &[f64]| -> f64 {
            let u = l2_normalize(p).unwrap();
            dot(&u, &d_out)
        };
        let err = finite_diff_check(loss, &v, &analytic, 1e-6);
        assert!(err < 1e-7, "normalization jacobian mismatch: {err}");
    }

    #[test]
    fn affine_relu_identity_passthrough() {
        let x = Tensor2::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = x.clone();
        let (out, _) = affine_relu_forward(&x, &w, &[0.0, 0.0]).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn affine_relu_clamps_negative_bias() {
        let x = Tensor2::from_vec(1, 2, vec![2.0, 3.0]).unwrap();
        let w = Tensor2::zeros(2, 2);
        let (out, _) = affine_relu_forward(&x, &w, &[-1.0, -1.0]).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn affine_relu_sign_split() {
        let x = Tensor2::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let w = Tensor2::from_vec(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let (out, _) = affine_relu_forward(&x, &w, &[0.0, 0.0]).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn affine_relu_shape_mismatch_errors() {
        let x = Tensor2::zeros(1, 3);
        let w = Tensor2::zeros(2, 2);
        assert!(matches!(affine_relu_forward(&x, &w, &[0.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_layer_squared_loss_zero_gradient_at_optimum() {
        // y = x W exactly, so d(||xW - y||^2) = 0.
        let x = Tensor2::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor2::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let (y, cache) = affine_forward(&x, &w, &[0.0, 0.0]).unwrap();
        let d_out = Tensor2::zeros(y.rows(), y.cols()); // residual is zero
        let (_, d_w, d_b) = affine_backward(&cache, &w, &d_out).unwrap();
        assert!(d_w.as_slice().iter().all(|g| *g == 0.0));
        assert!(d_b.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn relu_dead_unit_blocks_gradient() {
        let x = Tensor2::from_vec(1, 1, vec![1.0]).unwrap();
        let w = Tensor2::from_vec(1, 2, vec![-2.0, 3.0]).unwrap();
        let (_, cache) = affine_relu_forward(&x, &w, &[0.0, 0.0]).unwrap();
        let d_out = Tensor2::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let (_, d_w, _) = affine_backward(&cache, &w, &d_out).unwrap();
        // First output unit is dead (pre-activation -2), so its weight gets no gradient.
        assert_eq!(d_w.row(0)[0], 0.0);
        assert_eq!(d_w.row(0)[1], 1.0);
    }

    #[test]
    fn affine_relu_backward_matches_finite_differences() {
        // Inputs chosen with pre-activations away from the ReLU kink.
        let x = Tensor2::from_vec(2, 3, vec![0.9, -0.4, 1.2, -0.7, 0.55, 0.3]).unwrap();
        let w = Tensor2::from_vec(3, 2, vec![0.8, -0.6, 0.43, 0.9, -1.1, 0.35]).unwrap();
        let b = [0.21, -0.5];
        let probe = Tensor2::from_vec(2, 2, vec![1.0, -2.0, 0.5, 0.7]).unwrap();

        let (_, cache) = affine_relu_forward(&x, &w, &b).unwrap();
        let (_, d_w, d_b) = affine_backward(&cache, &w, &probe).unwrap();

        let mut flat: Vec<f64> = w.as_slice().to_vec();
        flat.extend_from_slice(&b);
        let mut analytic: Vec<f64> = d_w.as_slice().to_vec();
        analytic.extend_from_slice(&d_b);

        let loss = |p: &[f64]| -> f64 {
            let w = Tensor2::from_vec(3, 2, p[..6].to_vec()).unwrap();
            let (out, _) = affine_relu_forward(&x, &w, &p[6..]).unwrap();
            dot(out.as_slice(), probe.as_slice())
        };
        let err = finite_diff_check(loss, &flat, &analytic, 1e-6);
        assert!(err < 1e-6, "affine+relu gradient mismatch: {err}");
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = AdamConfig { learning_rate: 0.01, weight_decay: 0.0, ..AdamConfig::default() };
        let mut adam = AdamState::new(1, cfg);
        let mut params = vec![1.0];
        adam.step(&mut params, &[1.0]).unwrap();
        // Bias-corrected first step is lr * g / (|g| + eps) = lr * sign(g).
        assert!((params[0] - (1.0 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut adam = AdamState::new(3, cfg);
        let mut params = vec![0.4, -2.0, 7.5];
        let before = params.clone();
        adam.step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_symmetric_gradients_give_opposite_updates() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut adam = AdamState::new(2, cfg);
        let mut params = vec![0.0, 0.0];
        adam.step(&mut params, &[1.0, -1.0]).unwrap();
        assert!((params[0] + params[1]).abs() < 1e-15);
        assert!(params[0] < 0.0 && params[1] > 0.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut adam = AdamState::new(1, AdamConfig::default());
        let mut params = vec![0.0];
        assert!(matches!(adam.step(&mut params, &[f64::NAN]), Err(Error::Numeric(_))));
    }

    #[test]
    fn finite_diff_check_accepts_exact_quadratic_gradient() {
        let params = vec![1.5, -2.0, 0.25];
        let loss = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
        let analytic: Vec<f64> = params.iter().map(|x| 2.0 * x).collect();
        let err = finite_diff_check(loss, &params, &analytic, 1e-5);
        assert!(err < 1e-8, "quadratic check failed: {err}");
    }

    #[test]
    fn finite_diff_check_detects_scaled_gradient() {
        let params = vec![1.5, -2.0, 0.25];
        let loss = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
        let analytic: Vec<f64> = params.iter().map(|x| 4.0 * x).collect(); // planted 2x bug
        let err = finite_diff_check(loss, &params, &analytic, 1e-5);
        assert!((err - 0.5).abs() < 1e-4, "planted bug not detected: {err}");
    }

    proptest! {
        #[test]
        fn l2_normalize_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..8)) {
            prop_assume!(norm(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            prop_assert!((norm(&once) - 1.0).abs() < 1e-12);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn adam_descends_against_constant_gradient(
            g in prop_oneof![Just(-1.0f64), Just(1.0f64)],
            steps in 1usize..20,
        ) {
            let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
            let mut adam = AdamState::new(1, cfg);
            let mut params = vec![0.0];
            let mut prev = 0.0;
            for _ in 0..steps {
                adam.step(&mut params, &[g]).unwrap();
                // Moves monotonically against the gradient direction.
                prop_assert!((prev - params[0]) * g > 0.0);
                prev = params[0];
            }
        }
    }
}
