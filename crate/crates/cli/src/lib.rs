//! Config loading, output writers and the `run`, `compare` and `diagnose`
//! commands behind the `metafl` binary.
//!
//! Config files are TOML. Sections may be written as dotted keys
//! (`model.input_dim = 10`) or as tables; both parse to the same
//! [`ExperimentConfig`]. A config argument that names a shipped preset
//! (for example `preset_noisy_clients`) and is not an existing file loads
//! the embedded preset instead.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use metafl_core::aggregator::{
    contraction_estimate, generalization_bound, jensen_gap, meta_agg, AggregationMode,
};
use metafl_core::federation::{
    collect_reports, compare_runs, initial_params, kl_divergence_diagnostic, prepare_data,
    rounds_to_target, run_on_data, AggregatorKind, Comparison, ExperimentConfig, FederatedData,
    RoundRecord, RunResult,
};
use metafl_core::numerics::{derive_seed, Rng};

/// Environment variable that replaces the `seed` of every loaded config.
pub const SEED_ENV: &str = "METAFL_SEED";

/// Version of the rounds.csv and compare.csv column layouts.
pub const CSV_SCHEMA_VERSION: u32 = 1;

const STREAM_DIAGNOSTICS: u64 = 6;

/// Presets shipped inside the binary, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("preset_noisy_clients", include_str!("../presets/preset_noisy_clients.toml")),
    (
        "preset_noisy_clients_fedavg",
        include_str!("../presets/preset_noisy_clients_fedavg.toml"),
    ),
    ("preset_iid", include_str!("../presets/preset_iid.toml")),
    ("preset_skew", include_str!("../presets/preset_skew.toml")),
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<metafl_core::Error> for CliError {
    fn from(e: metafl_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Parses and validates a config from TOML text.
pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config from a file path or preset name, then applies the
/// `METAFL_SEED` override if set.
pub fn load_config(source: &str) -> CliResult<ExperimentConfig> {
    let path = Path::new(source);
    let text = if path.exists() {
        fs::read_to_string(path).map_err(|e| io_err(path, e))?
    } else if let Some(text) = preset(source) {
        text.to_string()
    } else {
        return Err(CliError::Io(format!("{source}: no such file or preset")));
    };
    let mut cfg = parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{source}: {m}")),
        other => other,
    })?;
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.seed = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer seed")))?;
    }
    Ok(cfg)
}

/// Canonical TOML form of a config; parses back to an equal value.
pub fn config_echo(cfg: &ExperimentConfig) -> CliResult<String> {
    toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Per-round table. One row per round; wall-clock column only when
/// `timing` is set.
pub fn rounds_csv(history: &[RoundRecord], timing: bool) -> String {
    let k = history.first().map_or(0, |r| r.weights.len());
    let mut header = vec![
        "round".to_string(),
        "alpha_used".into(),
        "global_val_loss".into(),
        "global_val_accuracy".into(),
        "phi_value".into(),
    ];
    header.extend((0..k).map(|i| format!("w_{i}")));
    header.extend((0..k).map(|i| format!("loss_{i}")));
    if timing {
        header.push("wall_ms".into());
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in history {
        let mut cells = vec![
            r.round.to_string(),
            num(r.alpha_used),
            num(r.global_val_loss),
            num(r.global_val_accuracy),
            num(r.phi_value),
        ];
        cells.extend(r.weights.iter().map(|w| num(*w)));
        cells.extend(r.per_client_val_loss.iter().map(|l| num(*l)));
        if timing {
            cells.push(r.wall_ms.to_string());
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub terminal_accuracy: f64,
    pub terminal_loss: f64,
    pub rounds_to_target: Option<usize>,
    pub weights_final: Vec<f64>,
    pub alpha_final: f64,
    pub contraction_estimate: f64,
    pub kl_diagnostic: f64,
    pub generalization_bound: f64,
}

/// Diagnostics of a single seeded round started from the initial model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub contraction_estimate: f64,
    pub jensen_gap: f64,
    pub kl_diagnostic: f64,
    pub generalization_bound: f64,
    pub num_clients: usize,
    pub total_train_samples: usize,
}

fn kl_and_bound(cfg: &ExperimentConfig, data: &FederatedData) -> CliResult<(f64, f64)> {
    let kl = kl_divergence_diagnostic(&data.client_pools()?, cfg.model.num_classes)?;
    let bound = generalization_bound(cfg.diagnostics.log_h, data.total_train_samples(), kl)?;
    Ok((kl, bound))
}

fn contraction(cfg: &ExperimentConfig, errors: &[f64], meta: &metafl_core::aggregator::MetaParams) -> CliResult<f64> {
    let mut rng = Rng::new(derive_seed(cfg.seed, &[STREAM_DIAGNOSTICS]));
    Ok(contraction_estimate(errors, meta, cfg.diagnostics.contraction_samples, &mut rng)?)
}

pub fn summarize(cfg: &ExperimentConfig, data: &FederatedData, run: &RunResult) -> CliResult<Summary> {
    let last = run.history.last().expect("rounds >= 1");
    let (kl_diagnostic, generalization_bound) = kl_and_bound(cfg, data)?;
    Ok(Summary {
        terminal_accuracy: last.global_val_accuracy,
        terminal_loss: last.global_val_loss,
        rounds_to_target: cfg
            .target_accuracy
            .and_then(|t| rounds_to_target(&run.history, t)),
        weights_final: last.weights.as_slice().to_vec(),
        alpha_final: run.final_meta.alpha,
        contraction_estimate: contraction(cfg, &last.errors, &run.final_meta)?,
        kl_diagnostic,
        generalization_bound,
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// `metafl run`: writes rounds.csv, summary.json and config_echo.toml.
pub fn cmd_run(config: &str, out_dir: &Path, timing: bool) -> CliResult<Summary> {
    let cfg = load_config(config)?;
    ensure_dir(out_dir)?;
    write_file(out_dir, "config_echo.toml", &config_echo(&cfg)?)?;
    let data = prepare_data(&cfg)?;
    let run = run_on_data(&cfg, &data)?;
    let summary = summarize(&cfg, &data, &run)?;
    write_file(out_dir, "rounds.csv", &rounds_csv(&run.history, timing))?;
    write_file(out_dir, "summary.json", &json(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub target_accuracy: f64,
    pub rounds_to_target_a: Option<usize>,
    pub rounds_to_target_b: Option<usize>,
    pub terminal_accuracy_a: f64,
    pub terminal_accuracy_b: f64,
    pub terminal_accuracy_diff: f64,
    /// `"a"`, `"b"` or `"tie"` by terminal accuracy, then by rounds to target.
    pub winner: String,
}

fn rounds_cell(r: Option<usize>) -> String {
    r.map_or_else(|| "not_reached".to_string(), |r| r.to_string())
}

/// Paired per-round table. The rounds-to-target columns repeat the run-level
/// value on every row so the file stands alone.
pub fn compare_csv(cmp: &Comparison) -> String {
    let mut out = String::from(
        "round,accuracy_a,accuracy_b,accuracy_diff,loss_a,loss_b,loss_diff,rounds_to_target_a,rounds_to_target_b\n",
    );
    let (ra, rb) = (rounds_cell(cmp.rounds_to_target_a), rounds_cell(cmp.rounds_to_target_b));
    for r in &cmp.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{ra},{rb}",
            r.round,
            num(r.accuracy_a),
            num(r.accuracy_b),
            num(r.accuracy_a - r.accuracy_b),
            num(r.loss_a),
            num(r.loss_b),
            num(r.loss_a - r.loss_b),
        );
    }
    out
}

fn winner(cmp: &Comparison) -> &'static str {
    if cmp.terminal_accuracy_diff > 0.0 {
        return "a";
    }
    if cmp.terminal_accuracy_diff < 0.0 {
        return "b";
    }
    let key = |r: Option<usize>| r.unwrap_or(usize::MAX);
    match key(cmp.rounds_to_target_a).cmp(&key(cmp.rounds_to_target_b)) {
        std::cmp::Ordering::Less => "a",
        std::cmp::Ordering::Greater => "b",
        std::cmp::Ordering::Equal => "tie",
    }
}

/// `metafl compare`: writes compare.csv and compare_summary.json. Config b
/// is the baseline whose terminal accuracy sets the target unless config a
/// names one.
pub fn cmd_compare(config_a: &str, config_b: &str, out_dir: &Path) -> CliResult<CompareSummary> {
    let cfg_a = load_config(config_a)?;
    let cfg_b = load_config(config_b)?;
    if !cfg_a.shares_data_setup(&cfg_b) {
        return Err(CliError::Config("configs must share data setup".into()));
    }
    ensure_dir(out_dir)?;
    let cmp = compare_runs(&cfg_a, &cfg_b)?;
    let last = cmp.rows.last().expect("rounds >= 1");
    let summary = CompareSummary {
        target_accuracy: cmp.target_accuracy,
        rounds_to_target_a: cmp.rounds_to_target_a,
        rounds_to_target_b: cmp.rounds_to_target_b,
        terminal_accuracy_a: last.accuracy_a,
        terminal_accuracy_b: last.accuracy_b,
        terminal_accuracy_diff: cmp.terminal_accuracy_diff,
        winner: winner(&cmp).to_string(),
    };
    write_file(out_dir, "compare.csv", &compare_csv(&cmp))?;
    write_file(out_dir, "compare_summary.json", &json(&summary)?)?;
    Ok(summary)
}

pub fn diagnose(cfg: &ExperimentConfig) -> CliResult<Diagnostics> {
    let data = prepare_data(cfg)?;
    let theta0 = initial_params(cfg);
    let reports = collect_reports(cfg, &data, &theta0, 1)?;
    let mode = match cfg.aggregator {
        AggregatorKind::MetaflMirror => AggregationMode::IterativeMirror,
        AggregatorKind::MetaflProjected => AggregationMode::IterativeProjected,
        _ => AggregationMode::ClosedForm,
    };
    let out = meta_agg(&reports, &cfg.meta, mode)?;
    let thetas: Vec<_> = reports.iter().map(|r| r.theta.clone()).collect();
    let (kl_diagnostic, generalization_bound) = kl_and_bound(cfg, &data)?;
    Ok(Diagnostics {
        contraction_estimate: contraction(cfg, &out.errors, &cfg.meta)?,
        jensen_gap: jensen_gap(&cfg.model, &thetas, &out.weights, &data.global_val)?,
        kl_diagnostic,
        generalization_bound,
        num_clients: data.clients.len(),
        total_train_samples: data.total_train_samples(),
    })
}

/// `metafl diagnose`: writes diagnostics.json.
pub fn cmd_diagnose(config: &str, out_dir: &Path) -> CliResult<Diagnostics> {
    let cfg = load_config(config)?;
    ensure_dir(out_dir)?;
    let diag = diagnose(&cfg)?;
    write_file(out_dir, "diagnostics.json", &json(&diag)?)?;
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for (name, text) in PRESETS {
            parse_config(text).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn missing_rounds_names_key() {
        let text = preset("preset_iid").unwrap().replace("rounds = 10\n", "");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("rounds"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        for (_, text) in PRESETS {
            let cfg = parse_config(text).unwrap();
            assert_eq!(parse_config(&config_echo(&cfg).unwrap()).unwrap(), cfg);
        }
    }

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, 2.5e-300, -7.0, 0.0] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn numerical_errors_map_to_3() {
        let e: CliError = metafl_core::Error::NonFiniteErrorMetric.into();
        assert_eq!(e.exit_code(), 3);
        let e: CliError = metafl_core::Error::EmptyCohort.into();
        assert_eq!(e.exit_code(), 2);
    }
}
