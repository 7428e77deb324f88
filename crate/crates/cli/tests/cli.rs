use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metafl_cli::{parse_config, preset};
use serde_json::Value;
use tempfile::TempDir;

fn metafl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metafl"))
        .args(args)
        .env_remove("METAFL_SEED")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a preset with some lines replaced and returns its path.
fn variant(dir: &TempDir, name: &str, base: &str, edits: &[(&str, &str)]) -> PathBuf {
    let mut lines: Vec<String> = preset(base).unwrap().lines().map(str::to_string).collect();
    for (key, value) in edits {
        let prefix = format!("{key} =");
        match lines.iter().position(|l| l.starts_with(&prefix)) {
            Some(i) if value.is_empty() => {
                lines.remove(i);
            }
            Some(i) => lines[i] = format!("{key} = {value}"),
            None => lines.push(format!("{key} = {value}")),
        }
    }
    let path = dir.path().join(name);
    fs::write(&path, lines.join("\n")).unwrap();
    path
}

fn small(dir: &TempDir, name: &str, edits: &[(&str, &str)]) -> PathBuf {
    let mut all = vec![
        ("rounds", "2"),
        ("partition.num_clients", "2"),
        ("data.samples", "200"),
    ];
    all.extend_from_slice(edits);
    variant(dir, name, "preset_iid", &all)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn minimal_run_writes_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = small(&dir, "min.toml", &[]);
    let out_dir = dir.path().join("out");
    let out = metafl(&["run", s(&cfg), "-o", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let csv = fs::read_to_string(out_dir.join("rounds.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(
        lines[0],
        "round,alpha_used,global_val_loss,global_val_accuracy,phi_value,w_0,w_1,loss_0,loss_1,wall_ms"
    );
    assert!(lines[1].starts_with("1,"));

    let summary = read_json(out_dir.join("summary.json"));
    let mut keys: Vec<&str> = summary.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "alpha_final",
            "contraction_estimate",
            "generalization_bound",
            "kl_diagnostic",
            "rounds_to_target",
            "terminal_accuracy",
            "terminal_loss",
            "weights_final",
        ]
    );
    let w: f64 = summary["weights_final"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .sum();
    assert!((w - 1.0).abs() < 1e-9);

    let echo = fs::read_to_string(out_dir.join("config_echo.toml")).unwrap();
    let original = parse_config(&fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(parse_config(&echo).unwrap(), original);
}

#[test]
fn no_timing_drops_wall_clock_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = small(&dir, "min.toml", &[]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&metafl(&["run", s(&cfg), "-o", s(d), "--no-timing"])), 0);
    }
    let csv = fs::read(a.join("rounds.csv")).unwrap();
    assert!(!String::from_utf8_lossy(&csv).contains("wall_ms"));
    assert_eq!(csv, fs::read(b.join("rounds.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("summary.json")).unwrap(),
        fs::read(b.join("summary.json")).unwrap()
    );
}

#[test]
fn seed_env_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = small(&dir, "min.toml", &[]);
    let run = |seed: Option<&str>, sub: &str| {
        let out_dir = dir.path().join(sub);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_metafl"));
        cmd.args(["run", s(&cfg), "--no-timing", "-o", s(&out_dir)]);
        match seed {
            Some(v) => cmd.env("METAFL_SEED", v),
            None => cmd.env_remove("METAFL_SEED"),
        };
        let out = cmd.output().unwrap();
        (code(&out), fs::read_to_string(out_dir.join("config_echo.toml")).ok())
    };
    let (c, echo) = run(Some("99"), "x");
    assert_eq!(c, 0);
    assert!(echo.unwrap().contains("seed = 99"));
    let (c, _) = run(Some("not-a-seed"), "y");
    assert_eq!(c, 2);
    let (c, echo) = run(None, "z");
    assert_eq!(c, 0);
    assert!(echo.unwrap().contains("seed = 1\n"));
}

#[test]
fn missing_key_exits_2_naming_it() {
    let dir = TempDir::new().unwrap();
    let cfg = small(&dir, "bad.toml", &[("rounds", "")]);
    let out = metafl(&["run", s(&cfg), "-o", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("rounds"), "{}", stderr(&out));
}

#[test]
fn validation_and_io_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let o = dir.path().join("o");
    let cases = [
        small(&dir, "a.toml", &[("partition.dirichlet_beta", "-1.0")]),
        small(&dir, "b.toml", &[("model.widht", "3")]),
        small(&dir, "c.toml", &[("aggregator", "\"median\"")]),
    ];
    for cfg in &cases {
        let out = metafl(&["run", s(cfg), "-o", s(&o)]);
        assert_eq!(code(&out), 2, "{}", stderr(&out));
    }
    let out = metafl(&["run", s(&dir.path().join("absent.toml")), "-o", s(&o)]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&metafl(&["frobnicate"])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = small(&dir, "nan.toml", &[("train.learning_rate", "1e300")]);
    let out = metafl(&["run", s(&cfg), "-o", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn compare_same_file_has_zero_diffs() {
    let dir = TempDir::new().unwrap();
    let cfg = small(&dir, "min.toml", &[]);
    let out_dir = dir.path().join("cmp");
    let out = metafl(&["compare", s(&cfg), s(&cfg), "-o", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("compare.csv")).unwrap();
    let mut rows = csv.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    let acc = header.iter().position(|h| *h == "accuracy_diff").unwrap();
    let loss = header.iter().position(|h| *h == "loss_diff").unwrap();
    let mut n = 0;
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[acc].parse::<f64>().unwrap(), 0.0);
        assert_eq!(cells[loss].parse::<f64>().unwrap(), 0.0);
        n += 1;
    }
    assert_eq!(n, 2);
    let summary = read_json(out_dir.join("compare_summary.json"));
    assert_eq!(summary["winner"], "tie");
}

#[test]
fn compare_rejects_different_seeds() {
    let dir = TempDir::new().unwrap();
    let a = small(&dir, "a.toml", &[]);
    let b = small(&dir, "b.toml", &[("seed", "2")]);
    let out = metafl(&["compare", s(&a), s(&b), "-o", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("configs must share data setup"));
}

#[test]
fn compare_preset_pair_reports_rounds_to_target() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("cmp");
    let out = metafl(&[
        "compare",
        "preset_noisy_clients",
        "preset_noisy_clients_fedavg",
        "-o",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("compare.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.contains("rounds_to_target_a"));
    assert!(header.contains("rounds_to_target_b"));
    assert_eq!(csv.lines().count(), 21);
}

fn diagnose(dir: &TempDir, cfg: &Path) -> Value {
    let out_dir = dir.path().join("diag");
    let out = metafl(&["diagnose", s(cfg), "-o", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    read_json(out_dir.join("diagnostics.json"))
}

#[test]
fn diagnose_iid_has_small_kl_and_nonnegative_gap() {
    let dir = TempDir::new().unwrap();
    let cfg = variant(&dir, "iid.toml", "preset_iid", &[]);
    let d = diagnose(&dir, &cfg);
    assert!(d["kl_diagnostic"].as_f64().unwrap() < 0.05);
    assert!(d["jensen_gap"].as_f64().unwrap() >= -1e-9);
    assert!(d["generalization_bound"].as_f64().unwrap() > 0.0);
    let c = d["contraction_estimate"].as_f64().unwrap();
    assert!(c > 0.0 && c < 1.0);
}

#[test]
fn diagnose_zero_step_reports_unit_contraction() {
    let dir = TempDir::new().unwrap();
    let cfg = small(&dir, "eta0.toml", &[("meta.eta", "0.0")]);
    let d = diagnose(&dir, &cfg);
    assert_eq!(d["contraction_estimate"].as_f64().unwrap(), 1.0);
}

#[test]
fn skew_preset_has_larger_kl_than_iid() {
    let dir = TempDir::new().unwrap();
    let iid = diagnose(&dir, Path::new("preset_iid"))["kl_diagnostic"].as_f64().unwrap();
    let skew = diagnose(&dir, Path::new("preset_skew"))["kl_diagnostic"].as_f64().unwrap();
    assert!(skew > 10.0 * iid, "skew {skew} iid {iid}");
}
