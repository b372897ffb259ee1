use std::path::Path;
use std::process::{Command, Output};

fn cpisac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpisac")).args(args).output().expect("binary runs")
}

fn config(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn write_small_experiment(dir: &Path, axis: &str, values: &str) -> String {
    let text = format!(
        r#"{{"scenario":{{"config":{{"fc":28e9,"delta_f":120e3,"N":128,"M":64,"N_cp":9,
            "noise_figure_dB":3,"T_temp":290,"constellation":"QPSK","seed":0,"snr_override_dB":0}},
            "targets":[{{"range_m":595.29,"velocity_mps":0,"rcs_m2":1}},{{"range_m":800.23,"velocity_mps":0,"rcs_m2":1}}]}},
          "sweep":{{"axis":"{axis}","values":{values}}},"algorithms":["dft","sic_dft"],"trials":2,"seed":9}}"#
    );
    let path = dir.join(format!("{axis}.json"));
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn validate_table_i() {
    let out = cpisac(&["validate", "--config", &config("tableI.json")]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["bandwidth_hz"], 15.36e6);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn every_shipped_config_validates() {
    for name in ["tableI.json", "fig3.json", "fig5.json", "fig6.json", "fig7.json"] {
        let out = cpisac(&["validate", "--config", &config(name)]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn missing_config_exits_1_with_path() {
    let out = cpisac(&["validate", "--config", "/nonexistent/scenario.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/scenario.json"));
}

#[test]
fn unknown_flags_print_usage_and_exit_1() {
    let out = cpisac(&["validate", "--config", &config("tableI.json"), "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(cpisac(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cpisac(&["sweep", "--config", &config("fig5.json"), "--axis", "range"]).status.code(), Some(1));
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"fc":28e9,"delta_f":120e3,"N":128,"M":64,"N_cp":9,"noise_figure_dB":3,"T_temp":290,"constellation":"BPSK","seed":0}"#).unwrap();
    let out = cpisac(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("BPSK"));
    // A bare configuration has no targets to simulate.
    assert_eq!(cpisac(&["simulate", "--config", &config("tableI.json"), "--out", dir.path().to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn cp_sweep_csv_schema_and_progress() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_small_experiment(dir.path(), "cp_length", "[0, 40, 82, 128]");
    let out = cpisac(&["sweep", "--config", &path]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "n_cp,sinr_theory_db,sinr_asymp_db,sinr_emp_db,pslr_theory_db,pslr_emp_db,config_hash");
    assert_eq!(lines.count(), 4);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().filter(|l| l.starts_with("n_cp=")).count(), 4);
}

#[test]
fn iteration_and_snr_sweeps_write_their_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_small_experiment(dir.path(), "iteration", "[0, 1, 2]");
    let out_csv = dir.path().join("iter.csv");
    let out = cpisac(&["sweep", "--config", &path, "--out", out_csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_csv).unwrap();
    assert!(text.starts_with("iter,algo,sinr_db,pslr_db,config_hash\n0,sic_dft,"));
    assert!(text.contains(",sufficient_cp,"));

    let out = cpisac(&["sweep", "--config", &path, "--axis", "snr", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    let labels: Vec<&str> = rows.iter().filter(|r| r["sweep_value"] == 0.0).map(|r| r["algorithm"].as_str().unwrap()).collect();
    assert_eq!(labels, ["dft", "sic_dft", "dft_sufficient_cp"]);

    let out = cpisac(&["sweep", "--config", &path, "--axis", "snr"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("snr_db,algo,range_rmse_m,vel_rmse_mps,config_hash\n"));
}

#[test]
fn sweep_outputs_depend_only_on_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_small_experiment(dir.path(), "iteration", "[0, 1]");
    let a = cpisac(&["sweep", "--config", &path]).stdout;
    let b = cpisac(&["sweep", "--config", &path]).stdout;
    let c = cpisac(&["sweep", "--config", &path, "--seed", "10"]).stdout;
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn simulate_writes_components() {
    let dir = tempfile::tempdir().unwrap();
    let out = cpisac(&["simulate", "--config", &config("fig6.json"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["S", "Y", "Y_free", "Y_ISI", "Y_ICI", "Z"] {
        let text = std::fs::read_to_string(dir.path().join(format!("{name}.csv"))).unwrap();
        assert!(text.starts_with("subcarrier,symbol,re,im\n"));
        assert_eq!(text.lines().count(), 1 + 128 * 64);
    }
    let truth: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["targets"].as_array().unwrap().len(), 3);

    let json_dir = dir.path().join("json");
    let out = cpisac(&["simulate", "--config", &config("fig6.json"), "--out", json_dir.to_str().unwrap(), "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let env: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json_dir.join("Y.json")).unwrap()).unwrap();
    assert_eq!(env["rows"], 128);
    assert_eq!(env["re"].as_array().unwrap().len(), 128 * 64);
}

#[test]
fn rdm_and_sic_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = cpisac(&["rdm", "--config", &config("fig6.json")]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("delay_tap,range_m,-32,"));
    assert_eq!(text.lines().count(), 2 + 128);

    let cmp = dir.path().join("cmp");
    let out = cpisac(&["rdm", "--compare", "--config", &config("fig6.json"), "--out", cmp.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for label in ["sic_dft_standard_cp", "dft_standard_cp", "dft_sufficient_cp"] {
        assert!(cmp.join(format!("rdm_{label}.csv")).exists());
    }

    let sic = dir.path().join("sic");
    let out = cpisac(&["sic-dft", "--config", &config("fig5.json"), "--out", sic.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sic.join("estimates.json")).unwrap()).unwrap();
    assert_eq!(report["estimates"].as_array().unwrap().len(), 2);
    let trace = std::fs::read_to_string(sic.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,sinr_dB,pslr_dB,energy_delta\n0,"));

    let out = cpisac(&["sic-esprit", "--config", &config("fig5.json")]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["algorithm"], "sic_esprit");
    let ranges: Vec<f64> = report["estimates"].as_array().unwrap().iter().map(|e| e["range_m"].as_f64().unwrap()).collect();
    for truth in [595.29, 800.23] {
        assert!(ranges.iter().any(|r| (r - truth).abs() < 5.0), "{ranges:?}");
    }
}
