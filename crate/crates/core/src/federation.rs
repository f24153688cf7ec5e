//! The simulated platform and its edge nodes: FedML meta-training, the FedAvg
//! baseline, and fast adaptation at target nodes.
//!
//! Node updates inside a round run on the ambient rayon pool. Results are
//! collected in source order and reduced left to right, so the final
//! parameters do not depend on the number of worker threads.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Federation, NodeData};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, Layout, LossSpec, Objective, Params, Sample, SoftmaxObjective};

/// Any node loss above this aborts the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Standard deviation of the random initial meta-model.
pub const INIT_STDDEV: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    /// Inner (adaptation) learning rate.
    pub alpha: f64,
    /// Meta learning rate; also the FedAvg local rate.
    pub beta: f64,
    /// Total local iterations T.
    #[serde(alias = "T")]
    pub iterations: usize,
    /// Local iterations per communication round T0.
    #[serde(alias = "T0")]
    pub local_steps: usize,
    #[serde(alias = "K")]
    pub k: usize,
    pub seed: u64,
    /// Drop the Hessian term of the meta-gradient.
    pub first_order: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.01,
            iterations: 500,
            local_steps: 10,
            k: 5,
            seed: 1,
            first_order: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.local_steps == 0 {
            return Err(Error::InvalidConfig("T0 must be >= 1".into()));
        }
        if self.iterations % self.local_steps != 0 {
            return Err(Error::InvalidConfig(format!(
                "T = {} is not a multiple of T0 = {}",
                self.iterations, self.local_steps
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.iterations / self.local_steps
    }
}

/// State of the platform after an aggregation (or at t = 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub t: usize,
    pub comm_round: usize,
    /// The objective being minimized: G for FedML, L_w for FedAvg.
    pub global_loss: f64,
    pub node_losses: Vec<f64>,
    pub elapsed_ms: u64,
}

impl RoundLog {
    pub fn min_node_loss(&self) -> f64 {
        self.node_losses.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_node_loss(&self) -> f64 {
        self.node_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// One meta-gradient evaluation.
#[derive(Clone, Debug)]
pub struct MetaStep {
    /// Adapted parameters `theta - alpha * grad L_train(theta)`.
    pub phi: Vec<f64>,
    /// `(I - alpha * H_train(theta)) * sum_q grad L_q(phi)`.
    pub grad: Vec<f64>,
    /// `sum_q L_q(phi)`.
    pub query_loss: f64,
}

/// Meta-gradient of `theta -> sum_q L_q(theta - alpha * grad L_train(theta))`
/// using a single Hessian-vector product.
pub fn meta_step<O: Objective>(
    train: &O,
    queries: &[&O],
    theta: &[f64],
    alpha: f64,
    first_order: bool,
) -> MetaStep {
    let mut phi = theta.to_vec();
    linalg::axpy(&mut phi, -alpha, &train.gradient(theta));
    let mut grad = vec![0.0; theta.len()];
    let mut query_loss = 0.0;
    for q in queries {
        let (l, g) = q.value_and_gradient(&phi);
        query_loss += l;
        linalg::axpy(&mut grad, 1.0, &g);
    }
    if !first_order && alpha != 0.0 {
        let hv = train.hvp(theta, &grad);
        linalg::axpy(&mut grad, -alpha, &hv);
    }
    MetaStep {
        phi,
        grad,
        query_loss,
    }
}

pub(crate) fn objective<'a>(layout: Layout, samples: &'a [Sample], spec: &LossSpec) -> Result<SoftmaxObjective<'a>> {
    SoftmaxObjective::new(layout, samples, *spec)
}

/// `phi = theta - alpha * grad L(theta, train)`.
pub fn inner_update(theta: &Params, node: &NodeData, alpha: f64, spec: &LossSpec) -> Result<Params> {
    let g = model::grad_theta(theta, &node.train, spec)?;
    let mut phi = theta.clone();
    phi.axpy(-alpha, &g);
    Ok(phi)
}

/// Exact meta-gradient `(I - alpha H_train(theta)) grad L_test(phi)`, or just
/// `grad L_test(phi)` when `first_order` is set.
pub fn meta_gradient(
    theta: &Params,
    node: &NodeData,
    alpha: f64,
    spec: &LossSpec,
    first_order: bool,
) -> Result<Params> {
    let layout = theta.layout();
    let train = objective(layout, &node.train, spec)?;
    let test = objective(layout, &node.test, spec)?;
    let step = meta_step(&train, &[&test], theta.values(), alpha, first_order);
    Ok(Params::from_raw(layout, step.grad))
}

/// `G_i(theta) = L(phi_i(theta), test)`.
pub fn node_meta_loss(theta: &Params, node: &NodeData, alpha: f64, spec: &LossSpec) -> Result<f64> {
    let phi = inner_update(theta, node, alpha, spec)?;
    model::loss(&phi, &node.test, spec)
}

/// Weighted meta-objective `G(theta)` and the per-node `G_i(theta)`.
pub fn meta_objective(theta: &Params, fed: &Federation, alpha: f64, spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    let per_node = fed
        .sources
        .par_iter()
        .map(|n| node_meta_loss(theta, n, alpha, spec))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    Ok((weighted_sum(&per_node, &fed.weights), per_node))
}

/// FedAvg objective `L_w(theta)` over full local datasets, with per-node losses.
pub fn fedavg_objective(theta: &Params, fed: &Federation, spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    let full: Vec<Vec<Sample>> = fed.sources.iter().map(NodeData::all_samples).collect();
    fedavg_objective_on(theta, &full, &fed.weights, spec)
}

fn fedavg_objective_on(theta: &Params, full: &[Vec<Sample>], weights: &[f64], spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    let per_node = full
        .iter()
        .map(|s| model::loss(theta, s, spec))
        .collect::<Result<Vec<f64>>>()?;
    Ok((weighted_sum(&per_node, weights), per_node))
}

fn weighted_sum(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| v * w).sum()
}

fn check_divergence(node: usize, t: usize, loss: f64, theta: &[f64]) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD || theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { node, t, loss });
    }
    Ok(())
}

/// `T0` meta-gradient steps `theta <- theta - beta * meta_gradient(theta)`.
pub fn local_round(theta_in: &Params, node: &NodeData, cfg: &FedConfig, spec: &LossSpec) -> Result<Params> {
    let layout = theta_in.layout();
    let train = objective(layout, &node.train, spec)?;
    let test = objective(layout, &node.test, spec)?;
    let mut theta = theta_in.values().to_vec();
    for step in 1..=cfg.local_steps {
        let ms = meta_step(&train, &[&test], &theta, cfg.alpha, cfg.first_order);
        check_divergence(node.node_id, step, ms.query_loss, &theta)?;
        linalg::axpy(&mut theta, -cfg.beta, &ms.grad);
    }
    check_divergence(node.node_id, cfg.local_steps, 0.0, &theta)?;
    Ok(Params::from_raw(layout, theta))
}

/// Weighted average `sum_i w_i theta_i`, accumulated in input order.
pub fn aggregate(params_list: &[Params], weights: &[f64]) -> Result<Params> {
    let first = params_list.first().ok_or(Error::EmptyDataset)?;
    if weights.len() != params_list.len() {
        return Err(Error::InvalidConfig(format!(
            "{} weights for {} parameter vectors",
            weights.len(),
            params_list.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("aggregation weights sum to {total}")));
    }
    let mut out = vec![0.0; first.values().len()];
    for (p, w) in params_list.iter().zip(weights) {
        first.check_layout(p)?;
        linalg::axpy(&mut out, *w, p.values());
    }
    Ok(Params::from_raw(first.layout(), out))
}

/// Seeded `N(0, INIT_STDDEV^2)` initial meta-model.
pub fn init_params(layout: Layout, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..layout.dim())
        .map(|_| INIT_STDDEV * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Params::from_raw(layout, v)
}

fn collect_in_order<T>(results: Vec<Result<T>>, round_start: usize) -> Result<Vec<T>> {
    results
        .into_iter()
        .map(|r| {
            r.map_err(|e| match e {
                Error::Diverged { node, t, loss } => Error::Diverged {
                    node,
                    t: round_start + t,
                    loss,
                },
                other => other,
            })
        })
        .collect()
}

/// Shared Algorithm-1 schedule: every round runs `local` on each source from
/// the current global model, then aggregates and logs `objective`.
fn run_schedule<L, O>(fed: &Federation, cfg: &FedConfig, local: L, objective: O) -> Result<(Params, Vec<RoundLog>)>
where
    L: Fn(&Params, usize) -> Result<Params> + Sync,
    O: Fn(&Params) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    fed.validate()?;
    let start = Instant::now();
    let mut theta = init_params(fed.layout, cfg.seed);
    let mut logs = Vec::with_capacity(cfg.rounds() + 1);
    let log = |theta: &Params, round: usize| -> Result<RoundLog> {
        let (global_loss, node_losses) = objective(theta)?;
        Ok(RoundLog {
            t: round * cfg.local_steps,
            comm_round: round,
            global_loss,
            node_losses,
            elapsed_ms: start.elapsed().as_millis() as u64,
        })
    };
    logs.push(log(&theta, 0)?);
    for round in 1..=cfg.rounds() {
        let results: Vec<Result<Params>> = (0..fed.sources.len())
            .into_par_iter()
            .map(|i| local(&theta, i))
            .collect();
        let updated = collect_in_order(results, (round - 1) * cfg.local_steps)?;
        theta = aggregate(&updated, &fed.weights)?;
        logs.push(log(&theta, round)?);
    }
    Ok((theta, logs))
}

/// Federated meta-learning.
pub fn run_fedml(fed: &Federation, cfg: &FedConfig, spec: &LossSpec) -> Result<(Params, Vec<RoundLog>)> {
    run_schedule(
        fed,
        cfg,
        |theta, i| local_round(theta, &fed.sources[i], cfg, spec),
        |theta| meta_objective(theta, fed, cfg.alpha, spec),
    )
}

/// FedAvg baseline: same schedule, plain gradient steps with rate `beta` on
/// each node's full local dataset.
pub fn run_fedavg(fed: &Federation, cfg: &FedConfig, spec: &LossSpec) -> Result<(Params, Vec<RoundLog>)> {
    let full: Vec<Vec<Sample>> = fed.sources.iter().map(NodeData::all_samples).collect();
    run_schedule(
        fed,
        cfg,
        |theta, i| {
            let obj = objective(theta.layout(), &full[i], spec)?;
            let mut th = theta.values().to_vec();
            for step in 1..=cfg.local_steps {
                let (l, g) = obj.value_and_gradient(&th);
                check_divergence(fed.sources[i].node_id, step, l, &th)?;
                linalg::axpy(&mut th, -cfg.beta, &g);
            }
            check_divergence(fed.sources[i].node_id, cfg.local_steps, 0.0, &th)?;
            Ok(Params::from_raw(theta.layout(), th))
        },
        |theta| fedavg_objective_on(theta, &full, &fed.weights, spec),
    )
}

/// `steps` gradient steps with rate `alpha` on the target's K training samples.
pub fn fast_adapt(theta: &Params, target: &NodeData, alpha: f64, steps: usize, spec: &LossSpec) -> Result<Params> {
    let obj = objective(theta.layout(), &target.train, spec)?;
    let mut th = theta.values().to_vec();
    for _ in 0..steps {
        let g = obj.gradient(&th);
        linalg::axpy(&mut th, -alpha, &g);
    }
    Params::new(theta.layout(), th)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and top-1 accuracy (ties resolved to the lowest class).
pub fn evaluate(theta: &Params, samples: &[Sample], spec: &LossSpec) -> Result<Evaluation> {
    let loss = model::loss(theta, samples, spec)?;
    let correct = samples
        .iter()
        .filter(|s| model::predict(theta, &s.x) == s.y)
        .count();
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / samples.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, split_sources_targets, SizeSpec, WeightMode};

    fn small_fed(alpha_t: f64, seed: u64) -> Federation {
        let set = gen_synthetic(alpha_t, alpha_t, 8, seed, &SizeSpec::synthetic_default(), 5).unwrap();
        split_sources_targets(set, 0.75, 5, seed, WeightMode::FullSize).unwrap()
    }

    fn cfg(t: usize, t0: usize) -> FedConfig {
        FedConfig {
            iterations: t,
            local_steps: t0,
            ..FedConfig::default()
        }
    }

    #[test]
    fn inner_update_with_zero_rate_is_identity() {
        let fed = small_fed(0.5, 1);
        let theta = init_params(fed.layout, 3);
        let phi = inner_update(&theta, &fed.sources[0], 0.0, &LossSpec::default()).unwrap();
        assert_eq!(phi, theta);
    }

    #[test]
    fn meta_gradient_with_zero_alpha_is_test_gradient() {
        let fed = small_fed(0.5, 1);
        let spec = LossSpec::default();
        let theta = init_params(fed.layout, 3);
        let node = &fed.sources[0];
        let mg = meta_gradient(&theta, node, 0.0, &spec, false).unwrap();
        let g = model::grad_theta(&theta, &node.test, &spec).unwrap();
        assert_eq!(mg, g);
    }

    #[test]
    fn first_order_differs_by_hvp_term() {
        let fed = small_fed(0.5, 2);
        let spec = LossSpec::default();
        let theta = init_params(fed.layout, 5).scaled(30.0);
        let node = &fed.sources[1];
        let alpha = 0.05;
        let exact = meta_gradient(&theta, node, alpha, &spec, false).unwrap();
        let fo = meta_gradient(&theta, node, alpha, &spec, true).unwrap();
        let hv = model::hessian_vec(&theta, &node.train, &spec, &fo).unwrap();
        let mut rebuilt = fo.clone();
        rebuilt.axpy(-alpha, &hv);
        assert!(rebuilt.sub(&exact).norm() < 1e-10);
    }

    #[test]
    fn local_round_zero_beta_and_composition() {
        let fed = small_fed(0.5, 3);
        let spec = LossSpec::default();
        let theta = init_params(fed.layout, 1);
        let node = &fed.sources[0];
        let frozen = FedConfig { beta: 0.0, ..cfg(1, 1) };
        assert_eq!(local_round(&theta, node, &frozen, &spec).unwrap(), theta);

        let one = local_round(&theta, node, &cfg(1, 1), &spec).unwrap();
        let chained = local_round(&one, node, &cfg(1, 1), &spec).unwrap();
        let two = local_round(&theta, node, &cfg(2, 2), &spec).unwrap();
        assert_eq!(two, chained);
    }

    #[test]
    fn divergence_is_reported_with_node() {
        let fed = small_fed(0.5, 3);
        let spec = LossSpec::new(0.01).unwrap();
        let wild = FedConfig {
            beta: 1e8,
            ..cfg(20, 20)
        };
        let theta = init_params(fed.layout, 1);
        let err = local_round(&theta, &fed.sources[0], &wild, &spec).unwrap_err();
        assert!(matches!(err, Error::Diverged { node, .. } if node == fed.sources[0].node_id));
        assert!(err.to_string().contains("diverged"));
    }

    #[test]
    fn aggregate_basics() {
        let layout = Layout::new(2, 1);
        let a = Params::new(layout, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Params::new(layout, vec![3.0, 0.0, -1.0, 4.0]).unwrap();
        assert_eq!(aggregate(&[a.clone(), b.clone()], &[0.5, 0.5]).unwrap().values(), &[2.0, 1.0, 1.0, 4.0]);
        assert_eq!(aggregate(&[a.clone(), a.clone(), a.clone()], &[0.2, 0.3, 0.5]).unwrap(), a);
        let c = Params::zeros(Layout::new(1, 1));
        assert!(aggregate(&[a.clone(), c], &[0.5, 0.5]).is_err());
        assert!(aggregate(&[a, b], &[0.5, 0.6]).is_err());
    }

    #[test]
    fn aggregate_matches_reversed_accumulation() {
        let layout = Layout::new(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ps: Vec<Params> = (0..7)
            .map(|_| Params::new(layout, (0..layout.dim()).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap())
            .collect();
        let raw: Vec<f64> = (0..7).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let got = aggregate(&ps, &w).unwrap();
        for j in 0..layout.dim() {
            let rev: f64 = (0..7).rev().map(|i| w[i] * ps[i].values()[j]).sum();
            assert!((got.values()[j] - rev).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_adapt_zero_and_one_step() {
        let fed = small_fed(0.5, 4);
        let spec = LossSpec::default();
        let theta = init_params(fed.layout, 2);
        let target = &fed.targets[0];
        assert_eq!(fast_adapt(&theta, target, 0.01, 0, &spec).unwrap(), theta);
        assert_eq!(
            fast_adapt(&theta, target, 0.01, 1, &spec).unwrap(),
            inner_update(&theta, target, 0.01, &spec).unwrap()
        );
    }

    #[test]
    fn evaluate_counts() {
        let layout = Layout::new(3, 1);
        let samples: Vec<Sample> = (0..9).map(|i| Sample::new(vec![i as f64], i % 3)).collect();
        let ev = evaluate(&Params::zeros(layout), &samples, &LossSpec::default()).unwrap();
        assert!((ev.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!(evaluate(&Params::zeros(layout), &[], &LossSpec::default()).is_err());

        // Separable by sign of x: large-margin weights classify perfectly.
        let layout = Layout::new(2, 1);
        let pts: Vec<Sample> = [-3.0, -1.0, 1.0, 2.0]
            .iter()
            .map(|&x| Sample::new(vec![x], usize::from(x > 0.0)))
            .collect();
        let theta = Params::new(layout, vec![-50.0, 50.0, 0.0, 0.0]).unwrap();
        assert_eq!(evaluate(&theta, &pts, &LossSpec::default()).unwrap().accuracy, 1.0);
    }

    #[test]
    fn run_fedml_logs_every_aggregation() {
        let fed = small_fed(0.5, 5);
        let (theta, logs) = run_fedml(&fed, &cfg(20, 5), &LossSpec::default()).unwrap();
        assert_eq!(logs.len(), 5);
        assert_eq!(logs.iter().map(|l| l.t).collect::<Vec<_>>(), vec![0, 5, 10, 15, 20]);
        assert!(logs.iter().all(|l| l.comm_round == l.t / 5));
        assert!(theta.is_finite());
        assert!(run_fedml(&fed, &cfg(7, 5), &LossSpec::default()).is_err());
    }

    #[test]
    fn zero_iterations_return_initial_state() {
        let fed = small_fed(0.5, 5);
        let c = cfg(0, 5);
        let (theta, logs) = run_fedml(&fed, &c, &LossSpec::default()).unwrap();
        assert_eq!(theta, init_params(fed.layout, c.seed));
        assert_eq!(logs.len(), 1);
    }
}
