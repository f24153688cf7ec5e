//! Multinomial softmax regression with L2-regularized cross-entropy.
//!
//! Parameters are stored flat: the `classes x features` weight matrix in
//! row-major order, followed by the `classes` biases. All derivatives are
//! closed-form; finite differences only appear in tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Shape of a softmax-regression parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub classes: usize,
    pub features: usize,
}

impl Layout {
    pub const fn new(classes: usize, features: usize) -> Self {
        Self { classes, features }
    }

    /// Total parameter count `C*F + C`.
    pub const fn dim(&self) -> usize {
        self.classes * self.features + self.classes
    }

    const fn bias_offset(&self) -> usize {
        self.classes * self.features
    }
}

/// Flat parameter vector tagged with its layout. Always finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct Params {
    layout: Layout,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawParams {
    layout: Layout,
    values: Vec<f64>,
}

impl TryFrom<RawParams> for Params {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        Params::new(raw.layout, raw.values)
    }
}

impl Params {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::LayoutMismatch {
                expected: layout.dim(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite value at index {i}")));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.dim()],
        }
    }

    /// Wraps values produced by arithmetic on valid params. Length is checked,
    /// finiteness is left to the caller (divergence guards).
    pub(crate) fn from_raw(layout: Layout, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), layout.dim(), "parameter length");
        Self { layout, values }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Row-major `classes x features` weight block.
    pub fn weights(&self) -> &[f64] {
        &self.values[..self.layout.bias_offset()]
    }

    pub fn bias(&self) -> &[f64] {
        &self.values[self.layout.bias_offset()..]
    }

    pub fn check_layout(&self, other: &Params) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch {
                expected: self.layout.dim(),
                got: other.layout.dim(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Params) -> f64 {
        linalg::dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.values)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &Params) {
        linalg::axpy(&mut self.values, a, &x.values);
    }

    pub fn scaled(&self, a: f64) -> Params {
        Params::from_raw(self.layout, self.values.iter().map(|v| a * v).collect())
    }

    pub fn sub(&self, other: &Params) -> Params {
        Params::from_raw(self.layout, linalg::sub(&self.values, &other.values))
    }
}

/// One labelled example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Self { x, y }
    }
}

/// Loss configuration: cross-entropy plus `reg_coeff / 2 * |theta|^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub reg_coeff: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { reg_coeff: 0.01 }
    }
}

impl LossSpec {
    pub fn new(reg_coeff: f64) -> Result<Self> {
        let spec = Self { reg_coeff };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reg_coeff >= 0.0 && self.reg_coeff.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "reg_coeff must be finite and >= 0, got {}",
                self.reg_coeff
            )));
        }
        Ok(())
    }
}

/// A twice-differentiable scalar function on flat parameter vectors.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn value(&self, theta: &[f64]) -> f64;

    fn gradient(&self, theta: &[f64]) -> Vec<f64>;

    fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        (self.value(theta), self.gradient(theta))
    }

    /// Hessian at `theta` applied to `v`.
    fn hvp(&self, theta: &[f64], v: &[f64]) -> Vec<f64>;
}

/// Empirical regularized cross-entropy over a validated batch.
#[derive(Clone, Copy, Debug)]
pub struct SoftmaxObjective<'a> {
    layout: Layout,
    samples: &'a [Sample],
    spec: LossSpec,
}

impl<'a> SoftmaxObjective<'a> {
    pub fn new(layout: Layout, samples: &'a [Sample], spec: LossSpec) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in samples {
            validate_sample(layout, s)?;
        }
        Ok(Self {
            layout,
            samples,
            spec,
        })
    }

    pub fn samples(&self) -> &'a [Sample] {
        self.samples
    }

    fn regularizer(&self, theta: &[f64]) -> f64 {
        0.5 * self.spec.reg_coeff * linalg::dot(theta, theta)
    }
}

impl Objective for SoftmaxObjective<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let mut z = vec![0.0; self.layout.classes];
        let total: f64 = self
            .samples
            .iter()
            .map(|s| {
                logits_into(self.layout, theta, &s.x, &mut z);
                let lse = log_sum_exp(&z);
                lse - z[s.y]
            })
            .sum();
        total / self.samples.len() as f64 + self.regularizer(theta)
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.value_and_gradient(theta).1
    }

    fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let layout = self.layout;
        let f = layout.features;
        let boff = layout.bias_offset();
        let mut grad = vec![0.0; layout.dim()];
        let mut z = vec![0.0; layout.classes];
        let mut total = 0.0;
        for s in self.samples {
            logits_into(layout, theta, &s.x, &mut z);
            let lse = log_sum_exp(&z);
            total += lse - z[s.y];
            for (c, zc) in z.iter().enumerate() {
                let r = (zc - lse).exp() - if c == s.y { 1.0 } else { 0.0 };
                linalg::axpy(&mut grad[c * f..(c + 1) * f], r, &s.x);
                grad[boff + c] += r;
            }
        }
        let inv_n = 1.0 / self.samples.len() as f64;
        let reg = self.spec.reg_coeff;
        for (g, t) in grad.iter_mut().zip(theta) {
            *g = *g * inv_n + reg * t;
        }
        (total * inv_n + self.regularizer(theta), grad)
    }

    fn hvp(&self, theta: &[f64], v: &[f64]) -> Vec<f64> {
        let layout = self.layout;
        let f = layout.features;
        let boff = layout.bias_offset();
        let mut out = vec![0.0; layout.dim()];
        let mut p = vec![0.0; layout.classes];
        let mut dz = vec![0.0; layout.classes];
        for s in self.samples {
            logits_into(layout, theta, &s.x, &mut p);
            softmax_in_place(&mut p);
            logits_into(layout, v, &s.x, &mut dz);
            let mean = linalg::dot(&p, &dz);
            for c in 0..layout.classes {
                let dp = p[c] * (dz[c] - mean);
                linalg::axpy(&mut out[c * f..(c + 1) * f], dp, &s.x);
                out[boff + c] += dp;
            }
        }
        let inv_n = 1.0 / self.samples.len() as f64;
        let reg = self.spec.reg_coeff;
        for (o, vi) in out.iter_mut().zip(v) {
            *o = *o * inv_n + reg * vi;
        }
        out
    }
}

pub(crate) fn validate_sample(layout: Layout, s: &Sample) -> Result<()> {
    if s.x.len() != layout.features {
        return Err(Error::InvalidSample(format!(
            "feature length {} != {}",
            s.x.len(),
            layout.features
        )));
    }
    if s.y >= layout.classes {
        return Err(Error::InvalidSample(format!(
            "label {} out of range for {} classes",
            s.y, layout.classes
        )));
    }
    if s.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSample("non-finite feature".into()));
    }
    Ok(())
}

/// `z = W x + b` for flat `theta` (or any vector in the same layout).
fn logits_into(layout: Layout, theta: &[f64], x: &[f64], z: &mut [f64]) {
    let f = layout.features;
    let boff = layout.bias_offset();
    for (c, zc) in z.iter_mut().enumerate() {
        *zc = linalg::dot(&theta[c * f..(c + 1) * f], x) + theta[boff + c];
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(z: &mut [f64]) {
    let lse = log_sum_exp(z);
    for v in z.iter_mut() {
        *v = (*v - lse).exp();
    }
}

/// Mean regularized cross-entropy over `batch`.
pub fn loss(params: &Params, batch: &[Sample], spec: &LossSpec) -> Result<f64> {
    let obj = SoftmaxObjective::new(params.layout, batch, *spec)?;
    Ok(obj.value(&params.values))
}

pub fn loss_and_grad(params: &Params, batch: &[Sample], spec: &LossSpec) -> Result<(f64, Params)> {
    let obj = SoftmaxObjective::new(params.layout, batch, *spec)?;
    let (value, grad) = obj.value_and_gradient(&params.values);
    Ok((value, Params::from_raw(params.layout, grad)))
}

/// Gradient of [`loss`] with respect to the parameters.
pub fn grad_theta(params: &Params, batch: &[Sample], spec: &LossSpec) -> Result<Params> {
    loss_and_grad(params, batch, spec).map(|(_, g)| g)
}

/// Hessian of [`loss`] at `params` applied to `v`.
pub fn hessian_vec(params: &Params, batch: &[Sample], spec: &LossSpec, v: &Params) -> Result<Params> {
    params.check_layout(v)?;
    let obj = SoftmaxObjective::new(params.layout, batch, *spec)?;
    Ok(Params::from_raw(params.layout, obj.hvp(&params.values, &v.values)))
}

/// Unregularized cross-entropy of a single sample.
pub fn sample_loss(params: &Params, sample: &Sample) -> Result<f64> {
    validate_sample(params.layout, sample)?;
    let mut z = vec![0.0; params.layout.classes];
    logits_into(params.layout, &params.values, &sample.x, &mut z);
    Ok(log_sum_exp(&z) - z[sample.y])
}

/// Gradient of the per-sample loss with respect to the input features,
/// `W^T (softmax(Wx + b) - onehot(y))`. The regularizer does not depend on x.
pub fn grad_x(params: &Params, sample: &Sample, _spec: &LossSpec) -> Result<Vec<f64>> {
    validate_sample(params.layout, sample)?;
    let layout = params.layout;
    let f = layout.features;
    let mut p = vec![0.0; layout.classes];
    logits_into(layout, &params.values, &sample.x, &mut p);
    softmax_in_place(&mut p);
    let mut g = vec![0.0; f];
    for (c, pc) in p.iter().enumerate() {
        let r = pc - if c == sample.y { 1.0 } else { 0.0 };
        linalg::axpy(&mut g, r, &params.values[c * f..(c + 1) * f]);
    }
    Ok(g)
}

/// Class probabilities for `x`.
pub fn predict_proba(params: &Params, x: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; params.layout.classes];
    logits_into(params.layout, &params.values, x, &mut p);
    softmax_in_place(&mut p);
    p
}

/// Arg-max class; ties go to the lowest index.
pub fn predict(params: &Params, x: &[f64]) -> usize {
    let mut z = vec![0.0; params.layout.classes];
    logits_into(params.layout, &params.values, x, &mut z);
    argmax(&z)
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LAYOUT: Layout = Layout::new(10, 60);

    fn random_params(rng: &mut ChaCha8Rng, layout: Layout, scale: f64) -> Params {
        let v = (0..layout.dim()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        Params::new(layout, v).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, layout: Layout, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let x = (0..layout.features).map(|_| rng.random_range(-1.0..1.0)).collect();
                Sample::new(x, rng.random_range(0..layout.classes))
            })
            .collect()
    }

    /// Independent scalar implementation: explicit exp/sum, no shared helpers.
    fn oracle_loss(theta: &[f64], layout: Layout, batch: &[Sample], reg: f64) -> f64 {
        let mut total = 0.0;
        for s in batch {
            let mut logits = Vec::new();
            for c in 0..layout.classes {
                let mut z = theta[layout.classes * layout.features + c];
                for k in 0..layout.features {
                    z += theta[c * layout.features + k] * s.x[k];
                }
                logits.push(z);
            }
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let denom: f64 = logits.iter().map(|z| (z - m).exp()).sum();
            total += -((logits[s.y] - m).exp() / denom).ln();
        }
        let sq: f64 = theta.iter().map(|t| t * t).sum();
        total / batch.len() as f64 + 0.5 * reg * sq
    }

    #[test]
    fn zero_params_give_ln_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, LAYOUT, 7);
        let zero = Params::zeros(LAYOUT);
        let l = loss(&zero, &batch, &LossSpec::new(0.0).unwrap()).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let l = loss(&zero, &batch, &LossSpec::new(0.1).unwrap()).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng, LAYOUT, 0.5);
        let batch = random_batch(&mut rng, LAYOUT, 5);
        let spec = LossSpec::new(0.03).unwrap();
        let got = loss(&p, &batch, &spec).unwrap();
        let want = oracle_loss(p.values(), LAYOUT, &batch, 0.03);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        let err = loss(&Params::zeros(LAYOUT), &[], &LossSpec::default()).unwrap_err();
        assert!(err.to_string().contains("empty dataset"));
        assert!(grad_theta(&Params::zeros(LAYOUT), &[], &LossSpec::default()).is_err());
    }

    #[test]
    fn bias_gradient_at_origin_two_classes() {
        let layout = Layout::new(2, 3);
        let s = Sample::new(vec![0.3, -1.0, 2.0], 1);
        let g = grad_theta(&Params::zeros(layout), &[s], &LossSpec::new(0.0).unwrap()).unwrap();
        assert_eq!(g.bias(), &[0.5, -0.5]);
    }

    #[test]
    fn grad_x_vanishes_for_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = &random_batch(&mut rng, LAYOUT, 1)[0];
        let g = grad_x(&Params::zeros(LAYOUT), s, &LossSpec::default()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_x_matches_closed_form_under_weight_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng, LAYOUT, 0.3);
        let s = &random_batch(&mut rng, LAYOUT, 1)[0];
        let p2 = p.scaled(2.0);
        // W^T (softmax - onehot), computed by hand for the doubled weights.
        let probs = predict_proba(&p2, &s.x);
        let mut want = vec![0.0; LAYOUT.features];
        for c in 0..LAYOUT.classes {
            let r = probs[c] - if c == s.y { 1.0 } else { 0.0 };
            for k in 0..LAYOUT.features {
                want[k] += r * p2.weights()[c * LAYOUT.features + k];
            }
        }
        let got = grad_x(&p2, s, &LossSpec::default()).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hvp_of_zero_is_zero_and_layout_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, LAYOUT, 0.3);
        let batch = random_batch(&mut rng, LAYOUT, 4);
        let hv = hessian_vec(&p, &batch, &LossSpec::default(), &Params::zeros(LAYOUT)).unwrap();
        assert!(hv.values().iter().all(|v| *v == 0.0));
        let other = Params::zeros(Layout::new(3, 4));
        assert!(matches!(
            hessian_vec(&p, &batch, &LossSpec::default(), &other),
            Err(Error::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn hvp_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(&mut rng, LAYOUT, 0.3);
        let batch = random_batch(&mut rng, LAYOUT, 6);
        let spec = LossSpec::default();
        for _ in 0..5 {
            let u = random_params(&mut rng, LAYOUT, 1.0);
            let v = random_params(&mut rng, LAYOUT, 1.0);
            let hu = hessian_vec(&p, &batch, &spec, &u).unwrap();
            let hv = hessian_vec(&p, &batch, &spec, &v).unwrap();
            assert!((hu.dot(&v) - u.dot(&hv)).abs() < 1e-10);
        }
    }

    #[test]
    fn invalid_samples_and_params_rejected() {
        let layout = Layout::new(2, 2);
        let bad_label = Sample::new(vec![0.0, 0.0], 2);
        assert!(loss(&Params::zeros(layout), &[bad_label], &LossSpec::default()).is_err());
        let bad_len = Sample::new(vec![0.0], 0);
        assert!(sample_loss(&Params::zeros(layout), &bad_len).is_err());
        assert!(Params::new(layout, vec![f64::NAN; 6]).is_err());
        assert!(Params::new(layout, vec![0.0; 5]).is_err());
        assert!(LossSpec::new(-1.0).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(predict(&Params::zeros(LAYOUT), &[0.0; 60]), 0);
    }

    #[test]
    fn params_deserialization_validates() {
        let ok: Params =
            serde_json::from_str(r#"{"layout":{"classes":1,"features":1},"values":[1.0,2.0]}"#).unwrap();
        assert_eq!(ok.values(), &[1.0, 2.0]);
        assert!(serde_json::from_str::<Params>(r#"{"layout":{"classes":1,"features":1},"values":[1.0]}"#).is_err());
    }
}
