//! Robust FedML: Wasserstein-penalized adversarial sample construction,
//! the combined clean + adversarial meta-update, and FGSM evaluation.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Federation, NodeData};
use crate::error::{Error, Result};
use crate::federation::{self, aggregate, init_params, meta_step, objective, FedConfig, RoundLog};
use crate::linalg;
use crate::model::{self, LossSpec, Params, Sample};

/// Update used for each ascent step on `l(phi, x) - lambda * |x - x0|^2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AscentRule {
    /// `x <- x + nu * (grad_x l - 2 lambda (x - x0))`. Unstable once
    /// `nu * lambda >= 1`.
    Explicit,
    /// Gradient step on the loss, exact step on the penalty:
    /// `x <- (x + nu * grad_x l + 2 nu lambda x0) / (1 + 2 nu lambda)`.
    /// Same fixed points as `Explicit`, stable for every `nu * lambda`.
    #[default]
    SemiImplicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    /// Penalty on the transport cost; smaller means a larger uncertainty set.
    pub lambda: f64,
    /// Ascent step size.
    pub nu: f64,
    #[serde(alias = "T_a")]
    pub ascent_steps: usize,
    /// Generation happens every `generation_interval * T0` iterations.
    #[serde(alias = "N0")]
    pub generation_interval: usize,
    /// At most this many generations per node.
    #[serde(alias = "R")]
    pub max_generations: usize,
    /// FGSM strength used for evaluation.
    pub fgsm_xi: f64,
    /// Box that perturbed features are clipped to (e.g. `[0, 1]` pixels).
    pub feature_range: Option<(f64, f64)>,
    pub ascent_rule: AscentRule,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            nu: 1.0,
            ascent_steps: 10,
            generation_interval: 7,
            max_generations: 2,
            fgsm_xi: 0.2,
            feature_range: None,
            ascent_rule: AscentRule::SemiImplicit,
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidConfig(format!("nu must be >= 0, got {}", self.nu)));
        }
        if self.generation_interval == 0 {
            return Err(Error::InvalidConfig("N0 must be >= 1".into()));
        }
        if !(self.fgsm_xi >= 0.0) {
            return Err(Error::InvalidConfig("fgsm_xi must be >= 0".into()));
        }
        if let Some((lo, hi)) = self.feature_range {
            if !(lo <= hi) {
                return Err(Error::InvalidConfig(format!("empty feature range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// `|x - x'|^2` when labels agree, `+inf` when they differ.
pub fn transport_cost(a: &Sample, b: &Sample) -> Result<f64> {
    if a.x.len() != b.x.len() {
        return Err(Error::InvalidSample(format!(
            "feature dimensions {} and {} differ",
            a.x.len(),
            b.x.len()
        )));
    }
    if a.y != b.y {
        return Ok(f64::INFINITY);
    }
    Ok(a.x.iter().zip(&b.x).map(|(u, v)| (u - v) * (u - v)).sum())
}

fn clip(x: &mut [f64], range: Option<(f64, f64)>) {
    if let Some((lo, hi)) = range {
        for v in x {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Penalized ascent objective `l(phi, (x, y)) - lambda * c((x, y), anchor)`.
pub fn ascent_objective(phi: &Params, x: &Sample, anchor: &Sample, lambda: f64) -> Result<f64> {
    Ok(model::sample_loss(phi, x)? - lambda * transport_cost(x, anchor)?)
}

/// Runs the ascent and also returns the objective at every iterate
/// (`ascent_steps + 1` values, starting at the anchor).
pub fn adversarial_ascent_traced(
    phi: &Params,
    anchor: &Sample,
    rc: &RobustConfig,
    spec: &LossSpec,
) -> Result<(Sample, Vec<f64>)> {
    let mut cur = anchor.clone();
    let mut trace = Vec::with_capacity(rc.ascent_steps + 1);
    trace.push(ascent_objective(phi, &cur, anchor, rc.lambda)?);
    for _ in 0..rc.ascent_steps {
        ascent_step(phi, &mut cur, anchor, rc, spec)?;
        trace.push(ascent_objective(phi, &cur, anchor, rc.lambda)?);
    }
    Ok((cur, trace))
}

fn ascent_step(phi: &Params, cur: &mut Sample, anchor: &Sample, rc: &RobustConfig, spec: &LossSpec) -> Result<()> {
    let g = model::grad_x(phi, cur, spec)?;
    let (nu, lam) = (rc.nu, rc.lambda);
    match rc.ascent_rule {
        AscentRule::Explicit => {
            for ((x, x0), gi) in cur.x.iter_mut().zip(&anchor.x).zip(&g) {
                *x += nu * (gi - 2.0 * lam * (*x - x0));
            }
        }
        AscentRule::SemiImplicit => {
            let denom = 1.0 + 2.0 * nu * lam;
            for ((x, x0), gi) in cur.x.iter_mut().zip(&anchor.x).zip(&g) {
                *x += nu * (gi - 2.0 * lam * (*x - x0)) / denom;
            }
        }
    }
    clip(&mut cur.x, rc.feature_range);
    if cur.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::AscentDiverged);
    }
    Ok(())
}

/// `ascent_steps` ascent steps from `anchor`; the label never moves.
pub fn adversarial_ascent(phi: &Params, anchor: &Sample, rc: &RobustConfig, spec: &LossSpec) -> Result<Sample> {
    let mut cur = anchor.clone();
    for _ in 0..rc.ascent_steps {
        ascent_step(phi, &mut cur, anchor, rc, spec)?;
    }
    Ok(cur)
}

fn generate_from<R: Rng>(
    phi: &Params,
    test: &[Sample],
    adversarial: &[Sample],
    rc: &RobustConfig,
    spec: &LossSpec,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pool = test.len() + adversarial.len();
    (0..test.len())
        .map(|_| {
            let j = rng.random_range(0..pool);
            let anchor = if j < test.len() { &test[j] } else { &adversarial[j - test.len()] };
            adversarial_ascent(phi, anchor, rc, spec)
        })
        .collect()
}

/// Draws `|test|` anchors uniformly (with replacement) from
/// `test ∪ adversarial` and perturbs each one.
pub fn generate_adversarial_set<R: Rng>(
    phi: &Params,
    node: &NodeData,
    rc: &RobustConfig,
    spec: &LossSpec,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    generate_from(phi, &node.test, &node.adversarial, rc, spec, rng)
}

/// Local robust round: returns the updated parameters and the last `phi`.
fn robust_round_inner(
    theta_in: &Params,
    node: &NodeData,
    adversarial: &[Sample],
    cfg: &FedConfig,
    spec: &LossSpec,
) -> Result<(Params, Params)> {
    let layout = theta_in.layout();
    let train = objective(layout, &node.train, spec)?;
    let test = objective(layout, &node.test, spec)?;
    let adv = if adversarial.is_empty() {
        None
    } else {
        Some(objective(layout, adversarial, spec)?)
    };
    let mut theta = theta_in.values().to_vec();
    let mut phi = theta.clone();
    for step in 1..=cfg.local_steps {
        let ms = match &adv {
            None => meta_step(&train, &[&test], &theta, cfg.alpha, cfg.first_order),
            Some(a) => meta_step(&train, &[&test, a], &theta, cfg.alpha, cfg.first_order),
        };
        if !ms.query_loss.is_finite() || ms.query_loss > federation::DIVERGENCE_THRESHOLD {
            return Err(Error::Diverged {
                node: node.node_id,
                t: step,
                loss: ms.query_loss,
            });
        }
        phi = ms.phi;
        linalg::axpy(&mut theta, -cfg.beta, &ms.grad);
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            node: node.node_id,
            t: cfg.local_steps,
            loss: f64::NAN,
        });
    }
    Ok((Params::from_raw(layout, theta), Params::from_raw(layout, phi)))
}

/// `T0` steps of `theta <- theta - beta * grad{L(phi, test) + L(phi, adv)}`
/// using `node.adversarial` as the adversarial set.
pub fn robust_local_round(
    theta: &Params,
    node: &NodeData,
    cfg: &FedConfig,
    rc: &RobustConfig,
    spec: &LossSpec,
) -> Result<Params> {
    rc.validate()?;
    robust_round_inner(theta, node, &node.adversarial, cfg, spec).map(|(t, _)| t)
}

/// Gradient of `theta -> L(phi(theta), test) + L(phi(theta), adv)`.
pub fn robust_meta_gradient(theta: &Params, node: &NodeData, alpha: f64, spec: &LossSpec) -> Result<Params> {
    let layout = theta.layout();
    let train = objective(layout, &node.train, spec)?;
    let test = objective(layout, &node.test, spec)?;
    let ms = if node.adversarial.is_empty() {
        meta_step(&train, &[&test], theta.values(), alpha, false)
    } else {
        let adv = objective(layout, &node.adversarial, spec)?;
        meta_step(&train, &[&test, &adv], theta.values(), alpha, false)
    };
    Ok(Params::from_raw(layout, ms.grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustRoundLog {
    pub round: RoundLog,
    /// `sum_i w_i L(phi_i, test_i)`.
    pub clean_loss: f64,
    /// Weighted `L(phi_i, adv_i)` over nodes that hold adversarial samples;
    /// NaN before the first generation.
    pub adv_loss: f64,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub adv_set_size: usize,
    /// Nodes that generated adversarial samples at this step.
    pub generated: usize,
}

struct NodeState {
    adversarial: Vec<Sample>,
    generations: usize,
    rng: ChaCha8Rng,
}

fn node_rng(seed: u64, node_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xad5e_7000_0000_0000);
    rng.set_stream(node_id as u64);
    rng
}

fn robust_log(
    theta: &Params,
    fed: &Federation,
    states: &[NodeState],
    cfg: &FedConfig,
    spec: &LossSpec,
    round: usize,
    generated: usize,
    start: &Instant,
) -> Result<RobustRoundLog> {
    let rows = fed
        .sources
        .par_iter()
        .zip(states)
        .map(|(node, st)| -> Result<_> {
            let phi = federation::inner_update(theta, node, cfg.alpha, spec)?;
            let clean = federation::evaluate(&phi, &node.test, spec)?;
            let adv = if st.adversarial.is_empty() {
                None
            } else {
                Some(federation::evaluate(&phi, &st.adversarial, spec)?)
            };
            Ok((clean, adv))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut clean_loss = 0.0;
    let mut clean_acc = 0.0;
    let (mut adv_loss, mut adv_acc, mut adv_w) = (0.0, 0.0, 0.0);
    for ((clean, adv), w) in rows.iter().zip(&fed.weights) {
        clean_loss += w * clean.loss;
        clean_acc += w * clean.accuracy;
        if let Some(a) = adv {
            adv_loss += w * a.loss;
            adv_acc += w * a.accuracy;
            adv_w += w;
        }
    }
    let (adv_loss, adv_acc) = if adv_w > 0.0 {
        (adv_loss / adv_w, adv_acc / adv_w)
    } else {
        (f64::NAN, f64::NAN)
    };
    let node_losses: Vec<f64> = rows.iter().map(|(c, _)| c.loss).collect();
    Ok(RobustRoundLog {
        round: RoundLog {
            t: round * cfg.local_steps,
            comm_round: round,
            global_loss: clean_loss,
            node_losses,
            elapsed_ms: start.elapsed().as_millis() as u64,
        },
        clean_loss,
        adv_loss,
        clean_acc,
        adv_acc,
        adv_set_size: states.iter().map(|s| s.adversarial.len()).sum(),
        generated,
    })
}

/// Robust federated meta-learning. Each source starts with an
/// empty adversarial set and extends it every `N0 * T0` iterations, at most
/// `R` times, using the `phi` of its last local step.
pub fn run_robust_fedml(
    fed: &Federation,
    cfg: &FedConfig,
    rc: &RobustConfig,
    spec: &LossSpec,
) -> Result<(Params, Vec<RobustRoundLog>)> {
    cfg.validate()?;
    rc.validate()?;
    fed.validate()?;
    let start = Instant::now();
    let mut theta = init_params(fed.layout, cfg.seed);
    let mut states: Vec<NodeState> = fed
        .sources
        .iter()
        .map(|n| NodeState {
            adversarial: Vec::new(),
            generations: 0,
            rng: node_rng(cfg.seed, n.node_id),
        })
        .collect();
    let mut logs = vec![robust_log(&theta, fed, &states, cfg, spec, 0, 0, &start)?];
    let period = rc.generation_interval * cfg.local_steps;
    for round in 1..=cfg.rounds() {
        let results: Vec<Result<(Params, Params)>> = fed
            .sources
            .par_iter()
            .zip(&states)
            .map(|(node, st)| robust_round_inner(&theta, node, &st.adversarial, cfg, spec))
            .collect();
        let offset = (round - 1) * cfg.local_steps;
        let mut updated = Vec::with_capacity(results.len());
        let mut phis = Vec::with_capacity(results.len());
        for r in results {
            let (th, phi) = r.map_err(|e| match e {
                Error::Diverged { node, t, loss } => Error::Diverged {
                    node,
                    t: offset + t,
                    loss,
                },
                other => other,
            })?;
            updated.push(th);
            phis.push(phi);
        }
        theta = aggregate(&updated, &fed.weights)?;

        let t = round * cfg.local_steps;
        let mut generated = 0;
        if t % period == 0 {
            let due: Vec<bool> = states.iter().map(|s| s.generations < rc.max_generations).collect();
            generated = due.iter().filter(|d| **d).count();
            states
                .par_iter_mut()
                .zip(&fed.sources)
                .zip(&phis)
                .zip(&due)
                .map(|(((st, node), phi), due)| -> Result<()> {
                    if *due {
                        let NodeState { adversarial, rng, .. } = st;
                        let new = generate_from(phi, &node.test, adversarial, rc, spec, rng)?;
                        st.adversarial.extend(new);
                        st.generations += 1;
                    }
                    Ok(())
                })
                .collect::<Vec<_>>()
                .into_iter()
                .collect::<Result<()>>()?;
        }
        logs.push(robust_log(&theta, fed, &states, cfg, spec, round, generated, &start)?);
    }
    Ok((theta, logs))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// FGSM: `x' = x + xi * sign(grad_x l(theta, (x, y)))`, optionally clipped.
pub fn fgsm_attack(
    theta: &Params,
    samples: &[Sample],
    xi: f64,
    spec: &LossSpec,
    feature_range: Option<(f64, f64)>,
) -> Result<Vec<Sample>> {
    if !(xi >= 0.0) {
        return Err(Error::InvalidConfig(format!("FGSM xi must be >= 0, got {xi}")));
    }
    samples
        .iter()
        .map(|s| {
            let g = model::grad_x(theta, s, spec)?;
            let mut x: Vec<f64> = s.x.iter().zip(&g).map(|(v, gi)| v + xi * sign(*gi)).collect();
            clip(&mut x, feature_range);
            Ok(Sample::new(x, s.y))
        })
        .collect()
}
