use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedml_core::analysis::{self, ConstantsReport, TargetSimilarity};
use fedml_core::data::{
    gen_synthetic, load_mnist_idx, partition_mnist, size_stats, split_sources_targets, Federation, NodeData,
};
use fedml_core::federation::{evaluate, fast_adapt, run_fedavg, run_fedml, RoundLog};
use fedml_core::model::{LossSpec, Params};
use fedml_core::robust::{fgsm_attack, run_robust_fedml, RobustRoundLog};
use fedml_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, DatasetSpec, ExperimentConfig};
use crate::error::CliError;
use crate::output::{ensure_dir, hash_file, num, write_json, InputHash, Manifest, Table};

pub const FEDERATION_FILE: &str = "federation.json";
pub const PARAMS_FILE: &str = "params.json";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ADAPT_FILE: &str = "adapt.csv";
pub const ATTACK_FILE: &str = "attack.csv";
pub const REPORT_FILE: &str = "report.json";
pub const BOUND_FILE: &str = "bound.csv";

#[derive(Serialize)]
struct FederationOut<'a> {
    manifest: &'a Manifest,
    federation: &'a Federation,
}

#[derive(Deserialize)]
struct FederationIn {
    federation: Federation,
}

/// A trained model plus the settings needed to adapt it consistently.
#[derive(Serialize, Deserialize)]
pub struct ParamsFile {
    pub manifest: serde_json::Value,
    pub alpha: f64,
    pub loss: LossSpec,
    pub params: Params,
}

/// Reads a federation written by `generate`, or a bare federation JSON.
pub fn read_federation(path: &Path) -> Result<Federation, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let fed = match serde_json::from_slice::<FederationIn>(&bytes) {
        Ok(wrapped) => wrapped.federation,
        Err(_) => serde_json::from_slice::<Federation>(&bytes).map_err(CoreError::from)?,
    };
    fed.validate()?;
    Ok(fed)
}

pub fn read_params(path: &Path) -> Result<ParamsFile, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes).map_err(CoreError::from)?)
}

/// Builds the federation described by the config, with hashes of every file read.
pub fn load_federation(cfg: &ExperimentConfig) -> Result<(Federation, Vec<InputHash>), CliError> {
    let k = cfg.fed.k;
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            alpha_tilde,
            beta_tilde,
            num_nodes,
            size,
        } => {
            let set = gen_synthetic(*alpha_tilde, *beta_tilde, *num_nodes, cfg.seed, size, k)?;
            Ok((split_sources_targets(set, cfg.source_fraction, k, cfg.seed, cfg.weight_mode)?, vec![]))
        }
        DatasetSpec::Mnist {
            images,
            labels,
            num_nodes,
            partition,
        } => {
            let inputs = vec![hash_file(images)?, hash_file(labels)?];
            let samples = load_mnist_idx(images, labels)?;
            let set = partition_mnist(&samples, *num_nodes, cfg.seed, partition, k)?;
            Ok((split_sources_targets(set, cfg.source_fraction, k, cfg.seed, cfg.weight_mode)?, inputs))
        }
        DatasetSpec::File { path } => {
            let fed = read_federation(path)?;
            if fed.k != k {
                return Err(CliError::Config(format!(
                    "{} was split with K = {}, config has K = {k}",
                    path.display(),
                    fed.k
                )));
            }
            Ok((fed, vec![hash_file(path)?]))
        }
    }
}

pub struct GenerateSummary {
    pub nodes: usize,
    pub samples: usize,
    pub mean: f64,
    pub stdev: f64,
    /// (min, max) number of distinct labels held by a node.
    pub labels_per_node: (usize, usize),
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<GenerateSummary, CliError> {
    let (fed, inputs) = load_federation(cfg)?;
    ensure_dir(out)?;
    let manifest = Manifest::new("generate", cfg.seed, cfg, inputs)?;
    write_json(
        &out.join(FEDERATION_FILE),
        &FederationOut {
            manifest: &manifest,
            federation: &fed,
        },
    )?;
    let all: Vec<&NodeData> = fed.sources.iter().chain(&fed.targets).collect();
    let sizes: Vec<usize> = all.iter().map(|n| n.len()).collect();
    let (mean, stdev) = size_stats(&sizes);
    let label_counts: Vec<usize> = all
        .iter()
        .map(|n| n.train.iter().chain(&n.test).map(|s| s.y).collect::<BTreeSet<_>>().len())
        .collect();
    Ok(GenerateSummary {
        nodes: all.len(),
        samples: sizes.iter().sum(),
        mean,
        stdev,
        labels_per_node: (
            label_counts.iter().copied().min().unwrap_or(0),
            label_counts.iter().copied().max().unwrap_or(0),
        ),
    })
}

fn round_row(log: &RoundLog, timing: bool) -> Vec<String> {
    vec![
        log.t.to_string(),
        log.comm_round.to_string(),
        num(log.global_loss),
        num(log.min_node_loss()),
        num(log.max_node_loss()),
        if timing { log.elapsed_ms.to_string() } else { "0".into() },
    ]
}

const ROUND_COLUMNS: [&str; 6] = ["t", "comm_round", "global_loss", "min_node_loss", "max_node_loss", "wall_ms"];
const ROBUST_COLUMNS: [&str; 5] = ["clean_loss", "adv_loss", "clean_acc", "adv_acc", "adv_set_size"];

pub struct TrainSummary {
    pub final_loss: f64,
    pub rounds: usize,
    pub elapsed_ms: u128,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, timing: bool) -> Result<TrainSummary, CliError> {
    let start = Instant::now();
    let (fed, inputs) = load_federation(cfg)?;
    ensure_dir(out)?;
    let manifest = Manifest::new("train", cfg.seed, cfg, inputs)?;
    let (theta, table, final_loss, rounds) = match cfg.algorithm {
        Algorithm::Fedml | Algorithm::Fedavg => {
            let run = if cfg.algorithm == Algorithm::Fedml { run_fedml } else { run_fedavg };
            let (theta, logs) = run(&fed, &cfg.fed, &cfg.loss)?;
            let mut table = Table::new(&ROUND_COLUMNS);
            for log in &logs {
                table.push(round_row(log, timing));
            }
            let last = logs.last().map_or(f64::NAN, |l| l.global_loss);
            (theta, table, last, logs.len())
        }
        Algorithm::RobustFedml => {
            let rc = cfg.robust.as_ref().expect("resolved config has a robust section");
            let (theta, logs) = run_robust_fedml(&fed, &cfg.fed, rc, &cfg.loss)?;
            let header: Vec<&'static str> = ROUND_COLUMNS.iter().chain(&ROBUST_COLUMNS).copied().collect();
            let mut table = Table::new(&header);
            for log in &logs {
                table.push(robust_row(log, timing));
            }
            let last = logs.last().map_or(f64::NAN, |l| l.round.global_loss);
            (theta, table, last, logs.len())
        }
    };
    table.write(&out.join(ROUNDS_FILE), &manifest)?;
    write_json(
        &out.join(PARAMS_FILE),
        &ParamsFile {
            manifest: serde_json::to_value(&manifest).map_err(CoreError::from)?,
            alpha: cfg.fed.alpha,
            loss: cfg.loss,
            params: theta,
        },
    )?;
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(TrainSummary {
        final_loss,
        rounds,
        elapsed_ms: start.elapsed().as_millis(),
    })
}

fn robust_row(log: &RobustRoundLog, timing: bool) -> Vec<String> {
    let mut row = round_row(&log.round, timing);
    row.extend([
        num(log.clean_loss),
        num(log.adv_loss),
        num(log.clean_acc),
        num(log.adv_acc),
        log.adv_set_size.to_string(),
    ]);
    row
}

#[derive(Clone, Debug, Serialize)]
pub struct AdaptArgs {
    pub params: PathBuf,
    pub dataset: PathBuf,
    pub steps: usize,
    /// Re-split each target with this many adaptation samples.
    pub k: Option<usize>,
    /// Adaptation step size; defaults to the training alpha.
    pub rate: Option<f64>,
}

/// Targets with their train split resized to `k` samples (first `k` of
/// train followed by test).
fn resplit(targets: &[NodeData], k: usize) -> Result<Vec<NodeData>, CliError> {
    targets
        .iter()
        .map(|t| {
            let all = t.all_samples();
            if all.len() <= k {
                return Err(CoreError::NodeTooSmall {
                    node: t.node_id,
                    size: all.len(),
                    needed: k + 1,
                }
                .into());
            }
            let (train, test) = all.split_at(k);
            Ok(NodeData {
                node_id: t.node_id,
                train: train.to_vec(),
                test: test.to_vec(),
                adversarial: vec![],
            })
        })
        .collect()
}

fn targets_for(fed: &Federation, k: Option<usize>) -> Result<Vec<NodeData>, CliError> {
    if fed.targets.is_empty() {
        return Err(CoreError::InvalidConfig("dataset has no target nodes".into()).into());
    }
    match k {
        Some(k) if k != fed.k => {
            if k == 0 {
                return Err(CliError::Config("K must be >= 1".into()));
            }
            resplit(&fed.targets, k)
        }
        _ => Ok(fed.targets.clone()),
    }
}

/// Mean of each column over per-target rows.
fn mean_rows(per_target: &[Vec<f64>]) -> Vec<f64> {
    let n = per_target.len() as f64;
    (0..per_target[0].len())
        .map(|j| per_target.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect()
}

pub fn cmd_adapt(args: &AdaptArgs, out: &Path) -> Result<Vec<f64>, CliError> {
    let pf = read_params(&args.params)?;
    let fed = read_federation(&args.dataset)?;
    pf.params.check_layout(&Params::zeros(fed.layout))?;
    let targets = targets_for(&fed, args.k)?;
    let rate = args.rate.unwrap_or(pf.alpha);
    let inputs = vec![hash_file(&args.params)?, hash_file(&args.dataset)?];
    let manifest = Manifest::new("adapt", 0, args, inputs)?;
    let mut table = Table::new(&["target", "step", "train_loss", "test_loss", "test_acc"]);
    let mut per_step: Vec<Vec<Vec<f64>>> = vec![Vec::new(); args.steps + 1];
    for t in &targets {
        let mut theta = pf.params.clone();
        for step in 0..=args.steps {
            if step > 0 {
                theta = fast_adapt(&theta, t, rate, 1, &pf.loss)?;
            }
            let train = evaluate(&theta, &t.train, &pf.loss)?;
            let test = evaluate(&theta, &t.test, &pf.loss)?;
            let vals = vec![train.loss, test.loss, test.accuracy];
            let mut row = vec![t.node_id.to_string(), step.to_string()];
            row.extend(vals.iter().map(|v| num(*v)));
            table.push(row);
            per_step[step].push(vals);
        }
    }
    let mut mean_acc = Vec::with_capacity(args.steps + 1);
    for (step, rows) in per_step.iter().enumerate() {
        let m = mean_rows(rows);
        mean_acc.push(m[2]);
        let mut row = vec!["mean".to_string(), step.to_string()];
        row.extend(m.iter().map(|v| num(*v)));
        table.push(row);
    }
    ensure_dir(out)?;
    table.write(&out.join(ADAPT_FILE), &manifest)?;
    Ok(mean_acc)
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackArgs {
    pub params: PathBuf,
    pub dataset: PathBuf,
    pub xi: Vec<f64>,
    /// Adaptation steps on clean target training data before the attack.
    pub steps: usize,
    pub rate: Option<f64>,
    pub clip: Option<(f64, f64)>,
}

/// Returns mean `(clean_acc, adv_acc)` per xi.
pub fn cmd_attack(args: &AttackArgs, out: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let pf = read_params(&args.params)?;
    let fed = read_federation(&args.dataset)?;
    pf.params.check_layout(&Params::zeros(fed.layout))?;
    let targets = targets_for(&fed, None)?;
    let rate = args.rate.unwrap_or(pf.alpha);
    let inputs = vec![hash_file(&args.params)?, hash_file(&args.dataset)?];
    let manifest = Manifest::new("attack", 0, args, inputs)?;
    let mut table = Table::new(&["target", "xi", "clean_loss", "clean_acc", "adv_loss", "adv_acc"]);
    let mut per_xi: Vec<Vec<Vec<f64>>> = vec![Vec::new(); args.xi.len()];
    for t in &targets {
        let adapted = fast_adapt(&pf.params, t, rate, args.steps, &pf.loss)?;
        let clean = evaluate(&adapted, &t.test, &pf.loss)?;
        for (j, &xi) in args.xi.iter().enumerate() {
            let adv_set = fgsm_attack(&adapted, &t.test, xi, &pf.loss, args.clip)?;
            let adv = evaluate(&adapted, &adv_set, &pf.loss)?;
            let vals = vec![clean.loss, clean.accuracy, adv.loss, adv.accuracy];
            let mut row = vec![t.node_id.to_string(), num(xi)];
            row.extend(vals.iter().map(|v| num(*v)));
            table.push(row);
            per_xi[j].push(vals);
        }
    }
    let mut summary = Vec::with_capacity(args.xi.len());
    for (j, rows) in per_xi.iter().enumerate() {
        let m = mean_rows(rows);
        summary.push((m[1], m[3]));
        let mut row = vec!["mean".to_string(), num(args.xi[j])];
        row.extend(m.iter().map(|v| num(*v)));
        table.push(row);
    }
    ensure_dir(out)?;
    table.write(&out.join(ATTACK_FILE), &manifest)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalysisReport {
    pub manifest: Manifest,
    #[serde(flatten)]
    pub report: ConstantsReport,
    /// Dissimilarity constant refit on holdout probes must not exceed the fitted one.
    pub c_holdout_holds: bool,
    pub caps_ok: bool,
    pub caps_error: Option<String>,
    pub g0: f64,
    pub g_star: f64,
    pub reference_tolerance: f64,
    pub lambda_threshold: analysis::LambdaThreshold,
    pub target_similarity: Option<TargetSimilarity>,
}

pub struct AnalyzeOutcome {
    pub report: AnalysisReport,
    /// `(t, empirical gap, bound)`; bound is NaN when the caps fail.
    pub rows: Vec<(usize, f64, f64)>,
}

/// Runs the analysis end to end and writes `report.json` and `bound.csv`.
/// A learning-rate cap violation is returned as an error after the
/// artifacts are written, so the offending constants are on disk.
pub fn cmd_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<AnalyzeOutcome, CliError> {
    if cfg.algorithm != Algorithm::Fedml {
        return Err(CliError::Config("analyze covers the fedml algorithm only".into()));
    }
    let (fed, inputs) = load_federation(cfg)?;
    let manifest = Manifest::new("analyze", cfg.seed, cfg, inputs)?;
    let spec = &cfg.loss;
    let ac = &cfg.analysis;
    let center = fedml_core::federation::init_params(fed.layout, cfg.seed);
    let constants = analysis::estimate_constants(&fed, spec, &ac.probe, &center)?;
    let radius = ac.probe.radius;
    let fit = analysis::theorem1_gap(&fed, &constants, spec, cfg.fed.alpha, ac.c_probes, cfg.seed, &center, radius, None)?;
    let holdout = analysis::theorem1_gap(
        &fed,
        &constants,
        spec,
        cfg.fed.alpha,
        ac.c_probes,
        cfg.seed.wrapping_add(1),
        &center,
        radius,
        Some(fit.c),
    )?;
    let report = ConstantsReport::derive(constants.clone(), cfg.fed.alpha, cfg.fed.beta, cfg.fed.local_steps, fit.c);

    let reference = analysis::reference_optimum(&fed, &cfg.fed, spec, ac.reference_factor * cfg.fed.iterations.max(1))?;
    let (theta, logs) = run_fedml(&fed, &cfg.fed, spec)?;
    let gap = analysis::gap_from_logs(&logs, &reference);
    let g0 = gap.gaps[0].1;
    let caps = report.check_caps();
    let rows: Vec<(usize, f64, f64)> = gap
        .gaps
        .iter()
        .map(|&(t, g)| {
            let b = if caps.is_ok() {
                analysis::theorem2_bound_at(&report, g0, t).unwrap_or(f64::NAN)
            } else {
                f64::NAN
            };
            (t, g, b)
        })
        .collect();

    let probe_samples: Vec<_> = fed.sources.iter().flat_map(|n| n.test.iter().cloned()).take(64).collect();
    let lambda_threshold = analysis::lambda_threshold(&probe_samples, spec, constants.mu, &center, radius, 0.1, 64, cfg.seed)?;
    let target_similarity = if fed.targets.len() >= 2 {
        Some(analysis::target_similarity(&fed, &theta, cfg.fed.alpha, spec, 300, 0.05)?)
    } else {
        None
    };

    let result = AnalysisReport {
        manifest,
        report,
        c_holdout_holds: holdout.holds(),
        caps_ok: caps.is_ok(),
        caps_error: caps.as_ref().err().map(|e| e.to_string()),
        g0,
        g_star: gap.g_star,
        reference_tolerance: gap.reference_tolerance,
        lambda_threshold,
        target_similarity,
    };
    ensure_dir(out)?;
    write_json(&out.join(REPORT_FILE), &result)?;
    let mut table = Table::new(&["t", "empirical_gap", "bound"]);
    for (t, g, b) in &rows {
        table.push(vec![t.to_string(), num(*g), num(*b)]);
    }
    table.write(&out.join(BOUND_FILE), &result.manifest)?;
    caps?;
    Ok(AnalyzeOutcome { report: result, rows })
}
