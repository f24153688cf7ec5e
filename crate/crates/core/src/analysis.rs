//! Empirical smoothness/convexity/similarity constants and the closed-form
//! convergence quantities built from them.
//!
//! Constants are suprema/infima over a ball of probe points, so they are
//! ball-restricted estimates, not global constants. Hessian operator norms
//! come from power iteration on Hessian-vector products; no dense Hessian
//! is ever formed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Federation, NodeData};
use crate::error::{Error, Result};
use crate::federation::{self, init_params, meta_step, objective, FedConfig, RoundLog};
use crate::linalg;
use crate::model::{self, LossSpec, Objective, Params, Sample, SoftmaxObjective};

/// Dense quadratic `theta -> 0.5 theta^T A theta` with symmetric `A`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    dim: usize,
    a: Vec<f64>,
}

impl Quadratic {
    /// `a` is row-major `dim x dim` and must be symmetric.
    pub fn new(dim: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != dim * dim {
            return Err(Error::LayoutMismatch {
                expected: dim * dim,
                got: a.len(),
            });
        }
        for i in 0..dim {
            for j in 0..i {
                if (a[i * dim + j] - a[j * dim + i]).abs() > 1e-12 {
                    return Err(Error::InvalidParams("quadratic matrix is not symmetric".into()));
                }
            }
        }
        Ok(Self { dim, a })
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.a.chunks(self.dim).map(|row| linalg::dot(row, v)).collect()
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, theta: &[f64]) -> f64 {
        0.5 * linalg::dot(theta, &self.apply(theta))
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.apply(theta)
    }

    fn hvp(&self, _theta: &[f64], v: &[f64]) -> Vec<f64> {
        self.apply(v)
    }
}

/// The two losses a node contributes to the meta-objective.
#[derive(Clone, Debug)]
pub struct NodeObjectives<O> {
    pub train: O,
    pub test: O,
}

impl<O: Objective> NodeObjectives<O> {
    fn kinds(&self) -> [&O; 2] {
        [&self.train, &self.test]
    }

    /// `grad G_i(theta)` with exact second-order term.
    pub fn meta_gradient(&self, theta: &[f64], alpha: f64) -> Vec<f64> {
        meta_step(&self.train, &[&self.test], theta, alpha, false).grad
    }
}

pub fn softmax_nodes<'a>(nodes: &'a [NodeData], spec: &LossSpec, layout: model::Layout) -> Result<Vec<NodeObjectives<SoftmaxObjective<'a>>>> {
    nodes
        .iter()
        .map(|n| {
            Ok(NodeObjectives {
                train: objective(layout, &n.train, spec)?,
                test: objective(layout, &n.test, spec)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Random point pairs used for the gradient-based constants.
    pub num_pairs: usize,
    /// Pairs/points that also get Hessian power iterations (rho, sigma, mu, H).
    pub hessian_probes: usize,
    pub power_iters: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            num_pairs: 100,
            hessian_probes: 5,
            power_iters: 20,
            radius: 10.0,
            seed: 7,
        }
    }
}

impl ProbeConfig {
    fn validate(&self) -> Result<()> {
        if self.num_pairs < 100 {
            return Err(Error::InvalidConfig(format!(
                "need at least 100 probe pairs, got {}",
                self.num_pairs
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::DegenerateSampling(format!("probe radius {}", self.radius)));
        }
        Ok(())
    }
}

/// Assumption constants estimated over the probe ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub mu: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub rho: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub delta_i: Vec<f64>,
    pub sigma_i: Vec<f64>,
    pub delta: f64,
    pub sigma: f64,
    pub tau: f64,
}

/// Uniform point in the ball of `radius` around `center`.
pub fn ball_point<R: Rng>(rng: &mut R, center: &[f64], radius: f64) -> Vec<f64> {
    let d = center.len();
    let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = linalg::norm(&dir);
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    center.iter().zip(&dir).map(|(c, u)| c + r * u / n).collect()
}

fn unit_random<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = linalg::norm(&v);
    linalg::scale(&mut v, 1.0 / n);
    v
}

/// Largest `|op(v)|` over the unit iterates of a power iteration. For a
/// symmetric operator this approaches the spectral norm from below.
fn operator_norm<F: Fn(&[f64]) -> Vec<f64>>(op: F, mut v: Vec<f64>, iters: usize) -> f64 {
    let mut best = 0.0f64;
    for _ in 0..iters.max(1) {
        let w = op(&v);
        let n = linalg::norm(&w);
        best = best.max(n);
        if n == 0.0 {
            break;
        }
        v = w;
        linalg::scale(&mut v, 1.0 / n);
    }
    best
}

/// `(lambda_min, lambda_max)` estimates of a symmetric PSD operator.
fn extreme_eigs<F: Fn(&[f64]) -> Vec<f64>>(op: F, v0: Vec<f64>, iters: usize) -> (f64, f64) {
    let rayleigh_max = |op: &dyn Fn(&[f64]) -> Vec<f64>, mut v: Vec<f64>| {
        let mut lam = f64::NEG_INFINITY;
        for _ in 0..iters.max(1) {
            let w = op(&v);
            lam = lam.max(linalg::dot(&v, &w));
            let n = linalg::norm(&w);
            if n == 0.0 {
                break;
            }
            v = w;
            linalg::scale(&mut v, 1.0 / n);
        }
        lam
    };
    let lmax = rayleigh_max(&op, v0.clone());
    let shifted = |v: &[f64]| {
        let hv = op(v);
        v.iter().zip(&hv).map(|(vi, hi)| lmax * vi - hi).collect::<Vec<f64>>()
    };
    let top_shift = rayleigh_max(&shifted, v0);
    (lmax - top_shift, lmax)
}

fn weighted_sum_vecs(vecs: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; vecs[0].len()];
    for (v, w) in vecs.iter().zip(weights) {
        linalg::axpy(&mut out, *w, v);
    }
    out
}

/// Estimates `(mu, H, rho, B, delta_i, sigma_i)` for arbitrary node objectives.
///
/// * `mu`, `H`: extremes of `<dg, dθ>/|dθ|^2` and `|dg|/|dθ|` over pairs,
///   refined by Hessian eigenvalue estimates at the first `hessian_probes` points.
/// * `rho`: `|H(θ) - H(θ')| / |dθ|` via power iteration on the difference.
/// * `B`: largest gradient norm seen.
/// * `delta_i`, `sigma_i`: gradient / Hessian deviation of node `i` from the
///   weighted average, maximized over probes and over train/test losses.
pub fn estimate_constants_for<O: Objective>(
    nodes: &[NodeObjectives<O>],
    weights: &[f64],
    center: &[f64],
    probe: &ProbeConfig,
) -> Result<Constants> {
    probe.validate()?;
    if nodes.is_empty() || nodes.len() != weights.len() {
        return Err(Error::InvalidConfig("node/weight count mismatch".into()));
    }
    let d = center.len();
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..probe.num_pairs)
        .map(|_| (ball_point(&mut rng, center, probe.radius), ball_point(&mut rng, center, probe.radius)))
        .collect();
    for (a, b) in &pairs {
        if linalg::dist(a, b) <= 1e-12 * probe.radius {
            return Err(Error::DegenerateSampling("identical probe pair".into()));
        }
    }
    let n = nodes.len();
    let mut mu = f64::INFINITY;
    let mut h = 0.0f64;
    let mut b = 0.0f64;
    let mut rho = 0.0f64;
    let mut delta_i = vec![0.0f64; n];
    let mut sigma_i = vec![0.0f64; n];

    for (k, (p, q)) in pairs.iter().enumerate() {
        let dtheta = linalg::sub(p, q);
        let dn2 = linalg::dot(&dtheta, &dtheta);
        // grads[i][kind] at p and q
        let grads: Vec<[(Vec<f64>, Vec<f64>); 2]> = nodes
            .par_iter()
            .map(|node| node.kinds().map(|o| (o.gradient(p), o.gradient(q))))
            .collect();
        for g in &grads {
            for (gp, gq) in g {
                let dg = linalg::sub(gp, gq);
                mu = mu.min(linalg::dot(&dg, &dtheta) / dn2);
                h = h.max(linalg::norm(&dg) / dn2.sqrt());
                b = b.max(linalg::norm(gp)).max(linalg::norm(gq));
            }
        }
        for kind in 0..2 {
            for at_p in [true, false] {
                let per_node: Vec<Vec<f64>> = grads
                    .iter()
                    .map(|g| if at_p { g[kind].0.clone() } else { g[kind].1.clone() })
                    .collect();
                let avg = weighted_sum_vecs(&per_node, weights);
                for (i, g) in per_node.iter().enumerate() {
                    delta_i[i] = delta_i[i].max(linalg::dist(g, &avg));
                }
            }
        }

        if k < probe.hessian_probes {
            let seed_v = unit_random(&mut rng, d);
            let iters = probe.power_iters;
            let dn = dn2.sqrt();
            let local: Vec<(f64, f64, f64)> = nodes
                .par_iter()
                .flat_map_iter(|node| node.kinds().map(|o| (o, seed_v.clone())))
                .map(|(o, v0)| {
                    let diff = |v: &[f64]| linalg::sub(&o.hvp(p, v), &o.hvp(q, v));
                    let r = operator_norm(diff, v0.clone(), iters) / dn;
                    let (lmin, lmax) = extreme_eigs(|v| o.hvp(p, v), v0, iters);
                    (r, lmin, lmax)
                })
                .collect();
            for (r, lmin, lmax) in local {
                rho = rho.max(r);
                mu = mu.min(lmin);
                h = h.max(lmax);
            }
            for kind in 0..2 {
                let sig: Vec<f64> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let op = |v: &[f64]| {
                            let hv: Vec<Vec<f64>> = nodes.iter().map(|nd| nd.kinds()[kind].hvp(p, v)).collect();
                            let avg = weighted_sum_vecs(&hv, weights);
                            linalg::sub(&hv[i], &avg)
                        };
                        operator_norm(op, seed_v.clone(), iters)
                    })
                    .collect();
                for (s, v) in sigma_i.iter_mut().zip(sig) {
                    *s = s.max(v);
                }
            }
        }
    }
    let delta = linalg::dot(weights, &delta_i);
    let sigma = linalg::dot(weights, &sigma_i);
    let tau = weights
        .iter()
        .zip(delta_i.iter().zip(&sigma_i))
        .map(|(w, (dl, sg))| w * dl * sg)
        .sum();
    Ok(Constants {
        mu,
        h,
        rho,
        b,
        delta_i,
        sigma_i,
        delta,
        sigma,
        tau,
    })
}

/// Constants for a federation's source nodes, probed around `center`.
pub fn estimate_constants(fed: &Federation, spec: &LossSpec, probe: &ProbeConfig, center: &Params) -> Result<Constants> {
    let nodes = softmax_nodes(&fed.sources, spec, fed.layout)?;
    estimate_constants_for(&nodes, &fed.weights, center.values(), probe)
}

/// `min{mu / (2 mu H + rho B), 1 / mu}`.
pub fn alpha_cap(c: &Constants) -> f64 {
    (c.mu / (2.0 * c.mu * c.h + c.rho * c.b)).min(1.0 / c.mu)
}

/// `mu (1 - alpha H)^2 - alpha rho B`.
pub fn mu_prime(c: &Constants, alpha: f64) -> f64 {
    c.mu * (1.0 - alpha * c.h).powi(2) - alpha * c.rho * c.b
}

/// `H (1 - alpha mu)^2 + alpha rho B`.
pub fn h_prime(c: &Constants, alpha: f64) -> f64 {
    c.h * (1.0 - alpha * c.mu).powi(2) + alpha * c.rho * c.b
}

/// `min{1 / (2 mu'), 2 / H'}`; NaN when `mu' <= 0`.
pub fn beta_cap(mu_p: f64, h_p: f64) -> f64 {
    if mu_p <= 0.0 {
        return f64::NAN;
    }
    (1.0 / (2.0 * mu_p)).min(2.0 / h_p)
}

/// Contraction factor `1 - 2 beta mu' (1 - H' beta / 2)`.
pub fn contraction(beta: f64, mu_p: f64, h_p: f64) -> f64 {
    1.0 - 2.0 * beta * mu_p * (1.0 - h_p * beta / 2.0)
}

/// `beta [delta + alpha C (H delta + B sigma + tau)]`.
pub fn alpha_prime(c: &Constants, alpha: f64, beta: f64, c_const: f64) -> f64 {
    beta * (c.delta + alpha * c_const * (c.h * c.delta + c.b * c.sigma + c.tau))
}

/// `h(x) = alpha'/(beta H') ((1 + beta H')^x - 1) - alpha' x` for integer
/// `x >= 1`, evaluated as `alpha' * sum_{k<x} ((1 + beta H')^k - 1)` so that
/// `h(1)` is exactly zero.
pub fn local_steps_penalty(x: usize, alpha_p: f64, beta: f64, h_p: f64) -> f64 {
    let base = 1.0 + beta * h_p;
    let mut pow = 1.0;
    let mut acc = 0.0;
    for _ in 0..x {
        acc += pow - 1.0;
        pow *= base;
    }
    alpha_p * acc
}

/// Estimated constants plus every derived quantity for one `(alpha, beta, T0, C)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    #[serde(flatten)]
    pub constants: Constants,
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "T0")]
    pub t0: usize,
    /// Gradient-gap constant fitted on probes.
    #[serde(rename = "C")]
    pub c: f64,
    pub alpha_cap: f64,
    pub beta_cap: f64,
    pub mu_prime: f64,
    #[serde(rename = "H_prime")]
    pub h_prime: f64,
    pub xi: f64,
    pub alpha_prime: f64,
    #[serde(rename = "h_T0")]
    pub h_t0: f64,
}

impl ConstantsReport {
    pub fn derive(constants: Constants, alpha: f64, beta: f64, t0: usize, c: f64) -> Self {
        let mu_p = mu_prime(&constants, alpha);
        let h_p = h_prime(&constants, alpha);
        let a_p = alpha_prime(&constants, alpha, beta, c);
        Self {
            alpha_cap: alpha_cap(&constants),
            beta_cap: beta_cap(mu_p, h_p),
            mu_prime: mu_p,
            h_prime: h_p,
            xi: contraction(beta, mu_p, h_p),
            alpha_prime: a_p,
            h_t0: local_steps_penalty(t0, a_p, beta, h_p),
            constants,
            alpha,
            beta,
            t0,
            c,
        }
    }

    /// Errors unless `alpha <= alpha_cap`, `beta < beta_cap` and `xi in (0, 1)`.
    pub fn check_caps(&self) -> Result<()> {
        let k = &self.constants;
        if !(self.alpha <= self.alpha_cap) {
            return Err(Error::LearningRateCap(format!(
                "alpha = {} exceeds min{{mu/(2 mu H + rho B), 1/mu}} = {:e} (mu = {:e}, H = {:e}, rho = {:e}, B = {:e})",
                self.alpha, self.alpha_cap, k.mu, k.h, k.rho, k.b
            )));
        }
        if !(self.beta < self.beta_cap) {
            return Err(Error::LearningRateCap(format!(
                "beta = {} not below min{{1/(2 mu'), 2/H'}} = {:e} (mu' = {:e}, H' = {:e})",
                self.beta, self.beta_cap, self.mu_prime, self.h_prime
            )));
        }
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(Error::LearningRateCap(format!("xi = {} outside (0, 1)", self.xi)));
        }
        Ok(())
    }
}

/// Bound on `G(θ^t) - G(θ*)` after `t` iterations:
/// `xi^t (G(θ^0) - G(θ*)) + B (1 - alpha mu) / (1 - xi^T0) h(T0)`.
pub fn theorem2_bound_at(report: &ConstantsReport, g0_minus_gstar: f64, t: usize) -> Result<f64> {
    report.check_caps()?;
    let k = &report.constants;
    let xi = report.xi;
    let transient = xi.powi(t as i32) * g0_minus_gstar;
    let steady = k.b * (1.0 - report.alpha * k.mu) / (1.0 - xi.powi(report.t0 as i32)) * report.h_t0;
    Ok(transient + steady)
}

/// [`theorem2_bound_at`] with `t = cfg.iterations`.
pub fn theorem2_bound(report: &ConstantsReport, g0_minus_gstar: f64, cfg: &FedConfig) -> Result<f64> {
    if cfg.alpha != report.alpha || cfg.beta != report.beta || cfg.local_steps != report.t0 {
        return Err(Error::InvalidConfig("report was derived for different (alpha, beta, T0)".into()));
    }
    theorem2_bound_at(report, g0_minus_gstar, cfg.iterations)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessCheck {
    pub pass: bool,
    pub mu_prime: f64,
    pub h_prime: f64,
    /// `min |d grad G_i| / |dθ|` over pairs, divided by `mu'`.
    pub worst_lower_ratio: f64,
    /// `max |d grad G_i| / |dθ|` over pairs, divided by `H'`.
    pub worst_upper_ratio: f64,
}

/// Samples pairs and checks `mu' |dθ| <= |grad G_i(θ) - grad G_i(θ')| <= H' |dθ|`.
pub fn lemma1_check_for<O: Objective>(
    node: &NodeObjectives<O>,
    alpha: f64,
    constants: &Constants,
    num_pairs: usize,
    seed: u64,
    center: &[f64],
    radius: f64,
) -> Result<SmoothnessCheck> {
    let cap = alpha_cap(constants);
    if !(alpha <= cap) {
        return Err(Error::LearningRateCap(format!(
            "alpha = {alpha} exceeds {cap:e} (mu = {:e}, H = {:e}, rho = {:e}, B = {:e})",
            constants.mu, constants.h, constants.rho, constants.b
        )));
    }
    let mu_p = mu_prime(constants, alpha);
    let h_p = h_prime(constants, alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..num_pairs)
        .map(|_| (ball_point(&mut rng, center, radius), ball_point(&mut rng, center, radius)))
        .collect();
    let ratios: Vec<f64> = pairs
        .par_iter()
        .map(|(p, q)| {
            let dg = linalg::sub(&node.meta_gradient(p, alpha), &node.meta_gradient(q, alpha));
            linalg::norm(&dg) / linalg::dist(p, q)
        })
        .collect();
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    // Relative slack for rounding in the gradient differences.
    let tol = 1e-9;
    Ok(SmoothnessCheck {
        pass: lo >= mu_p * (1.0 - tol) && hi <= h_p * (1.0 + tol),
        mu_prime: mu_p,
        h_prime: h_p,
        worst_lower_ratio: lo / mu_p,
        worst_upper_ratio: hi / h_p,
    })
}

pub fn lemma1_check(
    node: &NodeData,
    spec: &LossSpec,
    alpha: f64,
    constants: &Constants,
    num_pairs: usize,
    seed: u64,
    center: &Params,
    radius: f64,
) -> Result<SmoothnessCheck> {
    let nodes = softmax_nodes(std::slice::from_ref(node), spec, center.layout())?;
    lemma1_check_for(&nodes[0], alpha, constants, num_pairs, seed, center.values(), radius)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientGapOutcome {
    /// Per node: `max_θ |grad G_i(θ) - grad G(θ)|` over the probes.
    pub gap: Vec<f64>,
    /// Per node: `delta_i + alpha C (H delta_i + B sigma_i + tau)`.
    pub bound: Vec<f64>,
    pub c: f64,
}

impl GradientGapOutcome {
    pub fn holds(&self) -> bool {
        self.gap.iter().zip(&self.bound).all(|(g, b)| g <= b)
    }
}

/// Measures the meta-gradient dissimilarity on fresh probes. With
/// `c = None` the constant is fitted as the smallest value that makes the
/// bound hold on these probes; with `Some(c)` it is taken as given.
pub fn theorem1_gap_for<O: Objective>(
    nodes: &[NodeObjectives<O>],
    weights: &[f64],
    constants: &Constants,
    alpha: f64,
    probes: usize,
    seed: u64,
    center: &[f64],
    radius: f64,
    c: Option<f64>,
) -> Result<GradientGapOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gap = vec![0.0f64; nodes.len()];
    let mut c_fit = 0.0f64;
    for _ in 0..probes {
        let p = ball_point(&mut rng, center, radius);
        let grads: Vec<Vec<f64>> = nodes.par_iter().map(|n| n.meta_gradient(&p, alpha)).collect();
        let avg = weighted_sum_vecs(&grads, weights);
        for (i, g) in grads.iter().enumerate() {
            let gi = linalg::dist(g, &avg);
            gap[i] = gap[i].max(gi);
            let scale = alpha * (constants.h * constants.delta_i[i] + constants.b * constants.sigma_i[i] + constants.tau);
            if gi > constants.delta_i[i] && scale > 0.0 {
                c_fit = c_fit.max((gi - constants.delta_i[i]) / scale);
            }
        }
    }
    let c = c.unwrap_or(c_fit);
    let bound = (0..nodes.len())
        .map(|i| {
            constants.delta_i[i]
                + alpha * c * (constants.h * constants.delta_i[i] + constants.b * constants.sigma_i[i] + constants.tau)
        })
        .collect();
    Ok(GradientGapOutcome { gap, bound, c })
}

pub fn theorem1_gap(
    fed: &Federation,
    constants: &Constants,
    spec: &LossSpec,
    alpha: f64,
    probes: usize,
    seed: u64,
    center: &Params,
    radius: f64,
    c: Option<f64>,
) -> Result<GradientGapOutcome> {
    let nodes = softmax_nodes(&fed.sources, spec, fed.layout)?;
    theorem1_gap_for(&nodes, &fed.weights, constants, alpha, probes, seed, center.values(), radius, c)
}

/// Approximate minimum of `G` from an over-trained reference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptimum {
    pub g_star: f64,
    /// Improvement over the last tenth of the reference run; a proxy for how
    /// far `g_star` may still sit above the true minimum.
    pub tolerance: f64,
    pub theta: Params,
    pub final_beta: f64,
}

/// Full-gradient descent on `G` (the `T0 = 1` schedule) for `iterations`
/// steps from the run's initial point, halving the step whenever `G` stops
/// decreasing.
pub fn reference_optimum(fed: &Federation, cfg: &FedConfig, spec: &LossSpec, iterations: usize) -> Result<ReferenceOptimum> {
    cfg.validate()?;
    let nodes = softmax_nodes(&fed.sources, spec, fed.layout)?;
    let mut theta = init_params(fed.layout, cfg.seed).into_values();
    let mut beta = cfg.beta;
    let eval = |th: &[f64]| -> (f64, Vec<f64>) {
        let parts: Vec<(f64, Vec<f64>)> = nodes
            .par_iter()
            .map(|n| {
                let ms = meta_step(&n.train, &[&n.test], th, cfg.alpha, false);
                (ms.query_loss, ms.grad)
            })
            .collect();
        let g = parts.iter().zip(&fed.weights).map(|((l, _), w)| w * l).sum();
        let grads: Vec<Vec<f64>> = parts.into_iter().map(|(_, g)| g).collect();
        (g, weighted_sum_vecs(&grads, &fed.weights))
    };
    let (mut g_cur, mut grad) = eval(&theta);
    let mut history = Vec::with_capacity(iterations + 1);
    history.push(g_cur);
    let mut steps = 0;
    while steps < iterations {
        let mut cand = theta.clone();
        linalg::axpy(&mut cand, -beta, &grad);
        let (g_new, grad_new) = eval(&cand);
        if !g_new.is_finite() || g_new > g_cur {
            beta *= 0.5;
            if beta < 1e-12 {
                return Err(Error::Diverged {
                    node: usize::MAX,
                    t: steps,
                    loss: g_new,
                });
            }
            continue;
        }
        theta = cand;
        g_cur = g_new;
        grad = grad_new;
        history.push(g_cur);
        steps += 1;
    }
    let tenth = (history.len() / 10).max(1);
    let tolerance = history[history.len() - 1 - tenth.min(history.len() - 1)] - g_cur;
    Ok(ReferenceOptimum {
        g_star: g_cur,
        tolerance,
        theta: Params::new(fed.layout, theta)?,
        final_beta: beta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceGap {
    /// `(t, G(θ^t) - G*)` at every aggregation.
    pub gaps: Vec<(usize, f64)>,
    pub g_star: f64,
    pub reference_tolerance: f64,
}

/// Gap trajectory of a FedML run against a given reference. `G*` is lowered
/// to the run's own minimum if the run ever dips below the reference, so
/// the gaps are nonnegative.
pub fn gap_from_logs(logs: &[RoundLog], reference: &ReferenceOptimum) -> ConvergenceGap {
    let run_min = logs.iter().map(|l| l.global_loss).fold(f64::INFINITY, f64::min);
    let g_star = reference.g_star.min(run_min);
    ConvergenceGap {
        gaps: logs.iter().map(|l| (l.t, l.global_loss - g_star)).collect(),
        g_star,
        reference_tolerance: reference.tolerance,
    }
}

pub fn convergence_gap_against(
    fed: &Federation,
    cfg: &FedConfig,
    spec: &LossSpec,
    reference: &ReferenceOptimum,
) -> Result<ConvergenceGap> {
    let (_, logs) = federation::run_fedml(fed, cfg, spec)?;
    Ok(gap_from_logs(&logs, reference))
}

/// Empirical optimality gaps with a reference run of `10 T` iterations.
pub fn empirical_convergence_gap(fed: &Federation, cfg: &FedConfig, spec: &LossSpec) -> Result<ConvergenceGap> {
    let reference = reference_optimum(fed, cfg, spec, 10 * cfg.iterations.max(1))?;
    convergence_gap_against(fed, cfg, spec, &reference)
}

/// Coarse input/parameter cross-smoothness estimates and the resulting
/// lower bound on `lambda` for strong convexity of the robust objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaThreshold {
    pub h_xx: f64,
    pub h_theta_x: f64,
    pub h_x_theta: f64,
    pub mu: f64,
    /// `H_xx + H_θx H_xθ / mu`.
    pub lambda_min: f64,
}

/// Difference-quotient estimates over random perturbations of the given
/// samples (inputs moved by `N(0, input_scale^2)`, parameters drawn from
/// the probe ball).
pub fn lambda_threshold(
    samples: &[Sample],
    spec: &LossSpec,
    mu: f64,
    center: &Params,
    radius: f64,
    input_scale: f64,
    probes: usize,
    seed: u64,
) -> Result<LambdaThreshold> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let layout = center.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut h_xx, mut h_tx, mut h_xt) = (0.0f64, 0.0f64, 0.0f64);
    for j in 0..probes {
        let s = &samples[j % samples.len()];
        let theta = Params::new(layout, ball_point(&mut rng, center.values(), radius))?;
        let theta2 = Params::new(layout, ball_point(&mut rng, center.values(), radius))?;
        let x2: Vec<f64> = s
            .x
            .iter()
            .map(|v| v + input_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let s2 = Sample::new(x2, s.y);
        let dx = linalg::dist(&s.x, &s2.x);
        let dt = linalg::dist(theta.values(), theta2.values());
        let gx = model::grad_x(&theta, s, spec)?;
        let gx2 = model::grad_x(&theta, &s2, spec)?;
        h_xx = h_xx.max(linalg::dist(&gx, &gx2) / dx);
        let gt = model::grad_theta(&theta, std::slice::from_ref(s), spec)?;
        let gt2 = model::grad_theta(&theta, std::slice::from_ref(&s2), spec)?;
        h_tx = h_tx.max(gt.sub(&gt2).norm() / dx);
        let gx_t2 = model::grad_x(&theta2, s, spec)?;
        h_xt = h_xt.max(linalg::dist(&gx, &gx_t2) / dt);
    }
    Ok(LambdaThreshold {
        h_xx,
        h_theta_x: h_tx,
        h_x_theta: h_xt,
        mu,
        lambda_min: h_xx + h_tx * h_xt / mu,
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSimilarity {
    /// Per target: `|θ_t* - θ_c|`, the distance between the target's own
    /// optimum and the meta-model.
    pub distance: Vec<f64>,
    /// Per target: test loss after one adaptation step.
    pub adapted_loss: Vec<f64>,
    pub rank_correlation: f64,
}

/// Relates each target's post-adaptation loss to how far its solo optimum
/// (gradient descent on its full local data) lies from the meta-model.
pub fn target_similarity(
    fed: &Federation,
    theta_meta: &Params,
    alpha: f64,
    spec: &LossSpec,
    solo_steps: usize,
    solo_rate: f64,
) -> Result<TargetSimilarity> {
    let rows: Vec<(f64, f64)> = fed
        .targets
        .par_iter()
        .map(|t| -> Result<(f64, f64)> {
            let all = t.all_samples();
            let obj = objective(fed.layout, &all, spec)?;
            let mut th = vec![0.0; fed.layout.dim()];
            for _ in 0..solo_steps {
                let g = obj.gradient(&th);
                linalg::axpy(&mut th, -solo_rate, &g);
            }
            let dist = linalg::dist(&th, theta_meta.values());
            let adapted = federation::fast_adapt(theta_meta, t, alpha, 1, spec)?;
            Ok((dist, model::loss(&adapted, &t.test, spec)?))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;
    let distance: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let adapted_loss: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let rank_correlation = spearman(&distance, &adapted_loss);
    Ok(TargetSimilarity {
        distance,
        adapted_loss,
        rank_correlation,
    })
}

/// Least-squares line through `(t, ln gap)`; returns `(slope, R^2)`.
pub fn log_linear_fit(points: &[(usize, f64)]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, g)| *g > 0.0)
        .map(|&(t, g)| (t as f64, g.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, (sxy * sxy) / (sxx * syy))
}
