//! Round loop: local training, reporting, server-side aggregation and
//! temperature adaptation, broadcast.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{
    adapt_meta_params, aggregate, cohort_errors, fedavg_weights, meta_agg, phi_objective,
    AggregationMode, ClientReport, MetaParams,
};
use crate::datagen::{label_distribution, load_csv, make_blobs, partition_dirichlet, ClientDataset, PartitionConfig};
use crate::error::{Error, Result};
use crate::metafeatures::extract;
use crate::models::{evaluate, init_params, local_loss, train_local, ModelSpec, PerformanceMetrics, TrainConfig};
use crate::numerics::{derive_seed, ParamVector, Rng, WeightVector};

/// Smoothing applied to zero denominators in the KL diagnostic.
pub const KL_EPSILON: f64 = 1e-12;

// stream identifiers for derive_seed
const STREAM_DATA: u64 = 1;
const STREAM_HOLDOUT: u64 = 2;
const STREAM_PARTITION: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_TRAIN: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    MetaflClosed,
    MetaflMirror,
    MetaflProjected,
    Fedavg,
}

impl AggregatorKind {
    fn mode(self) -> Option<AggregationMode> {
        match self {
            AggregatorKind::MetaflClosed => Some(AggregationMode::ClosedForm),
            AggregatorKind::MetaflMirror => Some(AggregationMode::IterativeMirror),
            AggregatorKind::MetaflProjected => Some(AggregationMode::IterativeProjected),
            AggregatorKind::Fedavg => None,
        }
    }
}

/// Where the pooled dataset comes from before the server holdout and
/// client partition are carved out of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Total samples drawn from the synthetic generator.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Cluster standard deviation relative to the closest centroid pair.
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Fraction of pooled samples held out as the server's validation set.
    #[serde(default = "default_global_val_fraction")]
    pub global_val_fraction: f64,
    /// Optional CSV file replacing the synthetic generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub csv_header: bool,
}

fn default_samples() -> usize {
    4000
}

fn default_spread() -> f64 {
    1.0
}

fn default_global_val_fraction() -> f64 {
    0.2
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples: default_samples(),
            spread: default_spread(),
            global_val_fraction: default_global_val_fraction(),
            csv: None,
            csv_header: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// `log|H|` fed to the generalization bound.
    #[serde(default)]
    pub log_h: f64,
    /// Sampled pairs for the contraction estimate.
    #[serde(default = "default_contraction_samples")]
    pub contraction_samples: usize,
}

fn default_contraction_samples() -> usize {
    1000
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            log_h: 0.0,
            contraction_samples: default_contraction_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub seed: u64,
    pub aggregator: AggregatorKind,
    /// Temperatures searched every round on the server's validation set.
    /// Empty disables adaptation.
    #[serde(default)]
    pub alpha_grid: Vec<f64>,
    /// Accuracy level used for rounds-to-target reporting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    pub model: ModelSpec,
    #[serde(default)]
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub train: TrainConfig,
    pub meta: MetaParams,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be >= 1"));
        }
        self.model.validate()?;
        self.partition.validate()?;
        self.train.validate()?;
        self.meta.validate()?;
        if let Some(a) = self.alpha_grid.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::invalid(format!("alpha_grid entry {a} must be >= 0")));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid("target_accuracy must be in [0,1]"));
            }
        }
        let d = &self.data;
        if !(d.global_val_fraction > 0.0 && d.global_val_fraction < 1.0) {
            return Err(Error::invalid("data.global_val_fraction must be in (0,1)"));
        }
        if !(d.spread > 0.0 && d.spread.is_finite()) {
            return Err(Error::invalid("data.spread must be > 0"));
        }
        if d.csv.is_none() && d.samples < self.model.num_classes {
            return Err(Error::invalid("data.samples must be >= model.num_classes"));
        }
        if self.diagnostics.contraction_samples == 0 {
            return Err(Error::invalid("diagnostics.contraction_samples must be >= 1"));
        }
        if !(self.diagnostics.log_h.is_finite() && self.diagnostics.log_h >= 0.0) {
            return Err(Error::invalid("diagnostics.log_h must be >= 0"));
        }
        Ok(())
    }

    /// True when both configs produce the same clients, data and local
    /// training, so that only the aggregation can differ.
    pub fn shares_data_setup(&self, other: &ExperimentConfig) -> bool {
        self.seed == other.seed
            && self.rounds == other.rounds
            && self.model == other.model
            && self.data == other.data
            && self.partition == other.partition
            && self.train == other.train
    }
}

/// Per-round observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub weights: WeightVector,
    pub alpha_used: f64,
    pub global_val_loss: f64,
    pub global_val_accuracy: f64,
    pub per_client_val_loss: Vec<f64>,
    pub errors: Vec<f64>,
    pub phi_value: f64,
    /// Excluded from determinism guarantees.
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct FederatedData {
    /// `(train, val)` per client, in client-id order.
    pub clients: Vec<(ClientDataset, ClientDataset)>,
    /// Server-held IID holdout, drawn before partitioning.
    pub global_val: ClientDataset,
}

impl FederatedData {
    /// Every client's train and validation rows combined.
    pub fn client_pools(&self) -> Result<Vec<ClientDataset>> {
        self.clients
            .iter()
            .map(|(t, v)| ClientDataset::concat(&[t, v]))
            .collect()
    }

    pub fn total_train_samples(&self) -> usize {
        self.clients.iter().map(|(t, _)| t.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_theta: ParamVector,
    pub history: Vec<RoundRecord>,
    pub final_meta: MetaParams,
}

/// Builds the pooled dataset, carves off the server holdout and partitions
/// the rest across clients, all from seeds derived from `cfg.seed`.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<FederatedData> {
    cfg.validate()?;
    let pooled = match &cfg.data.csv {
        Some(path) => load_csv(path, cfg.model.num_classes, cfg.data.csv_header)?,
        None => make_blobs(
            cfg.model.num_classes,
            cfg.model.input_dim,
            cfg.data.samples,
            cfg.data.spread,
            derive_seed(cfg.seed, &[STREAM_DATA]),
        )?,
    };
    if pooled.dim() != cfg.model.input_dim {
        return Err(Error::DimensionMismatch {
            index: 0,
            expected: cfg.model.input_dim,
            found: pooled.dim(),
        });
    }
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.shuffle(&mut Rng::new(derive_seed(cfg.seed, &[STREAM_HOLDOUT])));
    let n_global = ((cfg.data.global_val_fraction * pooled.len() as f64).round() as usize)
        .clamp(1, pooled.len().saturating_sub(1).max(1));
    let global_val = pooled.subset(&order[..n_global])?;
    let rest = pooled.subset(&order[n_global..])?;

    let partition = PartitionConfig {
        seed: derive_seed(cfg.seed, &[STREAM_PARTITION]),
        ..cfg.partition.clone()
    };
    let clients = partition_dirichlet(&rest, &partition)?;
    Ok(FederatedData { clients, global_val })
}

/// Local training, evaluation and meta-feature extraction for one client.
pub fn client_update(
    spec: &ModelSpec,
    global: &ParamVector,
    client_id: usize,
    train: &ClientDataset,
    val: &ClientDataset,
    cfg: &TrainConfig,
) -> Result<ClientReport> {
    let theta = train_local(spec, global, train, cfg)?;
    let val_eval = evaluate(spec, &theta, val)?;
    let train_loss = local_loss(spec, &theta, train)?;
    let meta = extract(spec, global, &theta, train, val, cfg)?;
    Ok(ClientReport {
        client_id,
        theta,
        perf: PerformanceMetrics::new(val_eval, train_loss)?,
        meta,
        n_k: train.len(),
    })
}

/// Local work for every client in parallel, collected in client-id order.
pub fn collect_reports(
    cfg: &ExperimentConfig,
    data: &FederatedData,
    global: &ParamVector,
    round: usize,
) -> Result<Vec<ClientReport>> {
    data.clients
        .par_iter()
        .enumerate()
        .map(|(k, (train, val))| {
            let train_cfg = TrainConfig {
                seed: derive_seed(cfg.seed, &[STREAM_TRAIN, round as u64, k as u64]),
                ..cfg.train.clone()
            };
            client_update(&cfg.model, global, k, train, val, &train_cfg).map_err(|e| Error::Client {
                round,
                client: k,
                source: Box::new(e),
            })
        })
        .collect()
}

struct ServerStep {
    theta: ParamVector,
    weights: WeightVector,
    errors: Vec<f64>,
    phi_value: f64,
    meta: MetaParams,
}

fn server_step(
    cfg: &ExperimentConfig,
    data: &FederatedData,
    reports: &[ClientReport],
    meta: &MetaParams,
) -> Result<ServerStep> {
    match cfg.aggregator.mode() {
        None => {
            let n: Vec<usize> = reports.iter().map(|r| r.n_k).collect();
            let weights = fedavg_weights(&n)?;
            let theta = aggregate(reports, &weights, meta.lambda)?;
            let errors = cohort_errors(reports, &meta.c)?;
            let phi_value = phi_objective(&weights, &errors, meta.effective_tau().unwrap_or(0.0))?;
            Ok(ServerStep {
                theta,
                weights,
                errors,
                phi_value,
                meta: meta.clone(),
            })
        }
        Some(mode) => {
            let meta = if cfg.alpha_grid.is_empty() {
                meta.clone()
            } else {
                adapt_meta_params(meta, &cfg.alpha_grid, reports, &cfg.model, &data.global_val)?
            };
            let out = meta_agg(reports, &meta, mode)?;
            Ok(ServerStep {
                theta: out.theta_g,
                weights: out.weights,
                errors: out.errors,
                phi_value: out.phi_value,
                meta,
            })
        }
    }
}

/// Global model every client starts round 1 from.
pub fn initial_params(cfg: &ExperimentConfig) -> ParamVector {
    init_params(&cfg.model, derive_seed(cfg.seed, &[STREAM_INIT]))
}

/// Runs `cfg.rounds` federated rounds and returns the final global model
/// with one [`RoundRecord`] per round. Apart from `wall_ms`, the output is
/// a pure function of `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let data = prepare_data(cfg)?;
    run_on_data(cfg, &data)
}

/// [`run_experiment`] on an already prepared federation.
pub fn run_on_data(cfg: &ExperimentConfig, data: &FederatedData) -> Result<RunResult> {
    cfg.validate()?;
    let mut theta = initial_params(cfg);
    let mut meta = cfg.meta.clone();
    let mut history = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let reports = collect_reports(cfg, data, &theta, round)?;
        let step = server_step(cfg, data, &reports, &meta).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })?;
        let global = evaluate(&cfg.model, &step.theta, &data.global_val).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })?;
        history.push(RoundRecord {
            round,
            weights: step.weights,
            alpha_used: step.meta.alpha,
            global_val_loss: global.loss,
            global_val_accuracy: global.accuracy,
            per_client_val_loss: reports.iter().map(|r| r.perf.val_loss).collect(),
            errors: step.errors,
            phi_value: step.phi_value,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        theta = step.theta;
        meta = step.meta;
    }
    Ok(RunResult {
        final_theta: theta,
        history,
        final_meta: meta,
    })
}

/// First round whose global validation accuracy reaches `target`.
pub fn rounds_to_target(history: &[RoundRecord], target: f64) -> Option<usize> {
    history
        .iter()
        .find(|r| r.global_val_accuracy >= target)
        .map(|r| r.round)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub round: usize,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    pub loss_a: f64,
    pub loss_b: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    /// `cfg_a.target_accuracy` if set, otherwise run b's terminal accuracy.
    pub target_accuracy: f64,
    pub rounds_to_target_a: Option<usize>,
    pub rounds_to_target_b: Option<usize>,
    /// Terminal accuracy of a minus that of b.
    pub terminal_accuracy_diff: f64,
    pub run_a: RunResult,
    pub run_b: RunResult,
}

/// Runs two configurations that differ only in aggregation on the same
/// federation and pairs their per-round metrics. Run b is the baseline.
pub fn compare_runs(cfg_a: &ExperimentConfig, cfg_b: &ExperimentConfig) -> Result<Comparison> {
    cfg_a.validate()?;
    cfg_b.validate()?;
    if !cfg_a.shares_data_setup(cfg_b) {
        return Err(Error::invalid("configs must share data setup"));
    }
    let data = prepare_data(cfg_a)?;
    let run_a = run_on_data(cfg_a, &data)?;
    let run_b = run_on_data(cfg_b, &data)?;
    let rows: Vec<CompareRow> = run_a
        .history
        .iter()
        .zip(&run_b.history)
        .map(|(a, b)| CompareRow {
            round: a.round,
            accuracy_a: a.global_val_accuracy,
            accuracy_b: b.global_val_accuracy,
            loss_a: a.global_val_loss,
            loss_b: b.global_val_loss,
        })
        .collect();
    let last = rows.last().expect("rounds >= 1");
    let target_accuracy = cfg_a.target_accuracy.unwrap_or(last.accuracy_b);
    Ok(Comparison {
        target_accuracy,
        rounds_to_target_a: rounds_to_target(&run_a.history, target_accuracy),
        rounds_to_target_b: rounds_to_target(&run_b.history, target_accuracy),
        terminal_accuracy_diff: last.accuracy_a - last.accuracy_b,
        rows,
        run_a,
        run_b,
    })
}

/// Mean over clients of `KL(p_k ‖ p̄)`, with `p_k` each client's label
/// distribution and `p̄` their average.
pub fn kl_divergence_diagnostic(clients: &[ClientDataset], num_classes: usize) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let dists: Vec<Vec<f64>> = clients
        .iter()
        .map(|c| label_distribution(c, num_classes))
        .collect();
    let k = dists.len() as f64;
    let avg: Vec<f64> = (0..num_classes)
        .map(|j| dists.iter().map(|d| d[j]).sum::<f64>() / k)
        .collect();
    let kl = |p: &[f64]| -> f64 {
        p.iter()
            .zip(&avg)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| p * (p / q.max(KL_EPSILON)).ln())
            .sum()
    };
    Ok((dists.iter().map(|d| kl(d)).sum::<f64>() / k).max(0.0))
}
