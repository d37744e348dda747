//! End-to-end pipeline tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn remfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_remfit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = remfit(args);
    assert!(
        out.status.success(),
        "remfit {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Parses a CSV artifact written by the CLI: checks the config-hash comment,
/// returns (header, rows).
fn parse_artifact(path: &Path) -> (String, Vec<Vec<String>>) {
    let text = read(path);
    let mut lines = text.lines();
    let first = lines.next().unwrap();
    assert!(
        first.starts_with("# config_hash="),
        "{path:?} lacks a config hash"
    );
    let header = lines.next().unwrap().to_string();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn simulate_small(dir: &Path, seed: &str) {
    run_ok(&[
        "simulate",
        "--out-dir",
        dir.to_str().unwrap(),
        "--n-patents",
        "400",
        "--arrivals",
        "4.0",
        "--cites",
        "poisson:2.5",
        "--effect",
        "time_lag=sine:0.8:100",
        "--seed",
        seed,
    ]);
}

#[test]
fn pipeline_simulate_ingest_fit_baseline_report() {
    let dir = tmp("pipeline");
    simulate_small(&dir, "7");
    for f in [
        "events.csv",
        "attributes.csv",
        "truth_curves.csv",
        "manifest.json",
    ] {
        assert!(dir.join(f).exists(), "{f} missing");
    }

    let cache = dir.join("cache.bin");
    let out = run_ok(&[
        "ingest",
        dir.join("events.csv").to_str().unwrap(),
        dir.join("attributes.csv").to_str().unwrap(),
        "--out",
        cache.to_str().unwrap(),
    ]);
    assert!(out.contains("ingested"));

    let fit_dir = dir.join("fit");
    run_ok(&[
        "fit",
        "--cache",
        cache.to_str().unwrap(),
        "--out-dir",
        fit_dir.to_str().unwrap(),
        "--effects",
        "time_lag,textual_similarity",
        "--df",
        "6",
        "--batch-size",
        "256",
        "--max-epochs",
        "25",
        "--seed",
        "3",
    ]);
    let fit_json: serde_json::Value =
        serde_json::from_str(&read(&fit_dir.join("fit.json"))).unwrap();
    assert!(fit_json["final_nll"].as_f64().unwrap().is_finite());
    assert_eq!(fit_json["effects"].as_array().unwrap().len(), 2);
    let (header, rows) = parse_artifact(&fit_dir.join("trace.csv"));
    assert_eq!(header, "epoch,train_nll,val_nll,wall_seconds");
    assert!(!rows.is_empty());
    let (header, rows) = parse_artifact(&fit_dir.join("curve_time_lag.csv"));
    assert_eq!(header, "x,f_centered");
    assert_eq!(rows.len(), 200);

    let baseline_csv = dir.join("baseline.csv");
    run_ok(&[
        "baseline",
        "--cache",
        cache.to_str().unwrap(),
        "--fit",
        fit_dir.join("fit.json").to_str().unwrap(),
        "--out",
        baseline_csv.to_str().unwrap(),
    ]);
    let (header, rows) = parse_artifact(&baseline_csv);
    assert_eq!(header, "time,cumulative,pointwise,smoothed");
    assert!(rows.len() > 10);
    // Cumulative column is non-decreasing.
    let cum: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(cum.windows(2).all(|w| w[1] >= w[0]));

    let report_dir = dir.join("report");
    run_ok(&[
        "report",
        "--fit",
        fit_dir.join("fit.json").to_str().unwrap(),
        "--out-dir",
        report_dir.to_str().unwrap(),
        "--grid-points",
        "50",
    ]);
    let (_, rows) = parse_artifact(&report_dir.join("curve_textual_similarity.csv"));
    assert_eq!(rows.len(), 50);
}

#[test]
fn ingest_rejects_time_violation_and_allows_warnings() {
    let dir = tmp("ingest_violation");
    std::fs::write(
        dir.join("attributes.csv"),
        "node,pub_date,ipc_classes,embedding,outdegree\n\
         early,2000-01-01,A,,0\n\
         late,2010-01-01,A,,1\n\
         sender,2005-01-01,A,,2\n",
    )
    .unwrap();
    std::fs::write(
        dir.join("events.csv"),
        "sender,receiver,time\n\
         sender,early,2005-01-01\n\
         sender,late,2005-01-01\n",
    )
    .unwrap();
    let cache = dir.join("cache.bin");
    let out = remfit(&[
        "ingest",
        dir.join("events.csv").to_str().unwrap(),
        dir.join("attributes.csv").to_str().unwrap(),
        "--out",
        cache.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("violation"));
    assert!(!cache.exists());

    let out = remfit(&[
        "ingest",
        dir.join("events.csv").to_str().unwrap(),
        dir.join("attributes.csv").to_str().unwrap(),
        "--out",
        cache.to_str().unwrap(),
        "--allow-warnings",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("1 invalid events dropped"));
    assert!(cache.exists());
}

#[test]
fn replicate_bands_bracket_the_mean_curve() {
    let dir = tmp("bands");
    simulate_small(&dir, "11");
    let cache = dir.join("cache.bin");
    run_ok(&[
        "ingest",
        dir.join("events.csv").to_str().unwrap(),
        dir.join("attributes.csv").to_str().unwrap(),
        "--out",
        cache.to_str().unwrap(),
    ]);
    let fit_dir = dir.join("fit");
    run_ok(&[
        "fit",
        "--cache",
        cache.to_str().unwrap(),
        "--out-dir",
        fit_dir.to_str().unwrap(),
        "--effects",
        "time_lag",
        "--df",
        "5",
        "--batch-size",
        "256",
        "--max-epochs",
        "15",
        "--replicates",
        "3",
        "--seed",
        "5",
    ]);
    let (header, rows) = parse_artifact(&fit_dir.join("curve_time_lag.csv"));
    assert_eq!(header, "x,f_centered,band_lo,band_hi");
    for row in rows {
        let f: f64 = row[1].parse().unwrap();
        let lo: f64 = row[2].parse().unwrap();
        let hi: f64 = row[3].parse().unwrap();
        assert!(
            lo <= f && f <= hi,
            "band does not bracket the mean: {row:?}"
        );
    }
}

#[test]
fn fit_outputs_are_idempotent() {
    let dir = tmp("idempotent");
    simulate_small(&dir, "13");
    let cache = dir.join("cache.bin");
    run_ok(&[
        "ingest",
        dir.join("events.csv").to_str().unwrap(),
        dir.join("attributes.csv").to_str().unwrap(),
        "--out",
        cache.to_str().unwrap(),
    ]);
    let args_for = |out: &Path| {
        vec![
            "fit".to_string(),
            "--cache".into(),
            cache.to_str().unwrap().into(),
            "--out-dir".into(),
            out.to_str().unwrap().into(),
            "--effects".into(),
            "time_lag".into(),
            "--df".into(),
            "5".into(),
            "--batch-size".into(),
            "128".into(),
            "--max-epochs".into(),
            "12".into(),
            "--seed".into(),
            "21".into(),
        ]
    };
    fn to_refs(v: &[String]) -> Vec<&str> {
        v.iter().map(String::as_str).collect()
    }
    let (a, b) = (dir.join("fit_a"), dir.join("fit_b"));
    let args_a = args_for(&a);
    let args_b = args_for(&b);
    run_ok(&to_refs(&args_a));
    run_ok(&to_refs(&args_b));
    assert_eq!(read(&a.join("fit.json")), read(&b.join("fit.json")));
    assert_eq!(
        read(&a.join("curve_time_lag.csv")),
        read(&b.join("curve_time_lag.csv"))
    );
}

#[test]
fn baseline_rejects_mismatched_fit() {
    let dir = tmp("mismatch");
    simulate_small(&dir, "17");
    let other = tmp("mismatch_other");
    simulate_small(&other, "18");
    for (d, tag) in [(&dir, "a"), (&other, "b")] {
        run_ok(&[
            "ingest",
            d.join("events.csv").to_str().unwrap(),
            d.join("attributes.csv").to_str().unwrap(),
            "--out",
            d.join(format!("cache_{tag}.bin")).to_str().unwrap(),
        ]);
    }
    let fit_dir = dir.join("fit");
    run_ok(&[
        "fit",
        "--cache",
        dir.join("cache_a.bin").to_str().unwrap(),
        "--out-dir",
        fit_dir.to_str().unwrap(),
        "--effects",
        "time_lag",
        "--df",
        "4",
        "--batch-size",
        "256",
        "--max-epochs",
        "5",
    ]);
    let out = remfit(&[
        "baseline",
        "--cache",
        other.join("cache_b.bin").to_str().unwrap(),
        "--fit",
        fit_dir.join("fit.json").to_str().unwrap(),
        "--out",
        dir.join("baseline.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different data"));
}

#[test]
fn sigma_sweep_changes_only_the_smoothed_column() {
    let dir = tmp("sigma_sweep");
    simulate_small(&dir, "19");
    let cache = dir.join("cache.bin");
    run_ok(&[
        "ingest",
        dir.join("events.csv").to_str().unwrap(),
        dir.join("attributes.csv").to_str().unwrap(),
        "--out",
        cache.to_str().unwrap(),
    ]);
    let fit_dir = dir.join("fit");
    run_ok(&[
        "fit",
        "--cache",
        cache.to_str().unwrap(),
        "--out-dir",
        fit_dir.to_str().unwrap(),
        "--effects",
        "time_lag",
        "--df",
        "4",
        "--batch-size",
        "256",
        "--max-epochs",
        "5",
    ]);
    let mut tables = Vec::new();
    for sigma in ["10", "40"] {
        let out_csv = dir.join(format!("baseline_{sigma}.csv"));
        run_ok(&[
            "baseline",
            "--cache",
            cache.to_str().unwrap(),
            "--fit",
            fit_dir.join("fit.json").to_str().unwrap(),
            "--sigma",
            sigma,
            "--out",
            out_csv.to_str().unwrap(),
        ]);
        tables.push(parse_artifact(&out_csv).1);
    }
    let (a, b) = (&tables[0], &tables[1]);
    assert_eq!(a.len(), b.len());
    let mut smoothed_differs = false;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra[0], rb[0]);
        assert_eq!(ra[1], rb[1]);
        assert_eq!(ra[2], rb[2]);
        if ra[3] != rb[3] {
            smoothed_differs = true;
        }
    }
    assert!(smoothed_differs, "sigma change had no effect at all");
}

#[test]
fn nested_effect_sets_do_not_worsen_nll() {
    let dir = tmp("nested");
    let out_dir = dir.join("sim");
    run_ok(&[
        "simulate",
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--n-patents",
        "500",
        "--arrivals",
        "4.0",
        "--cites",
        "poisson:2.5",
        "--effect",
        "textual_similarity=linear:1.5",
        "--seed",
        "23",
    ]);
    let cache = dir.join("cache.bin");
    run_ok(&[
        "ingest",
        out_dir.join("events.csv").to_str().unwrap(),
        out_dir.join("attributes.csv").to_str().unwrap(),
        "--out",
        cache.to_str().unwrap(),
    ]);
    let mut nlls = Vec::new();
    for (name, effects) in [
        ("one", "receiver_pub_year"),
        ("two", "receiver_pub_year,textual_similarity"),
    ] {
        let fit_dir = dir.join(name);
        run_ok(&[
            "fit",
            "--cache",
            cache.to_str().unwrap(),
            "--out-dir",
            fit_dir.to_str().unwrap(),
            "--effects",
            effects,
            "--df",
            "5",
            "--batch-size",
            "512",
            "--max-epochs",
            "60",
            "--learning-rate",
            "0.005",
            "--seed",
            "2",
        ]);
        let fit_json: serde_json::Value =
            serde_json::from_str(&read(&fit_dir.join("fit.json"))).unwrap();
        nlls.push(fit_json["final_nll"].as_f64().unwrap());
    }
    assert!(
        nlls[1] <= nlls[0] + 1e-6,
        "adding an effect worsened the fit: {nlls:?}"
    );
}

#[test]
fn cv_selects_a_cell_and_is_deterministic() {
    let dir = tmp("cv");
    simulate_small(&dir, "29");
    let cache = dir.join("cache.bin");
    run_ok(&[
        "ingest",
        dir.join("events.csv").to_str().unwrap(),
        dir.join("attributes.csv").to_str().unwrap(),
        "--out",
        cache.to_str().unwrap(),
    ]);
    let run_cv_once = |out: &Path| {
        run_ok(&[
            "cv",
            "--cache",
            cache.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--effects",
            "time_lag",
            "--folds",
            "3",
            "--batch-sizes",
            "128,512",
            "--df-grid",
            "4:6",
            "--max-epochs",
            "10",
            "--seed",
            "31",
        ]);
    };
    let (a, b) = (dir.join("cv_a"), dir.join("cv_b"));
    run_cv_once(&a);
    run_cv_once(&b);
    let sel: serde_json::Value = serde_json::from_str(&read(&a.join("selected.json"))).unwrap();
    assert!(sel["batch_size"].as_u64().is_some());
    let df = sel["df"].as_u64().unwrap();
    assert!((4..=6).contains(&df));
    assert_eq!(
        read(&a.join("cv_results.csv")),
        read(&b.join("cv_results.csv"))
    );
    assert_eq!(
        read(&a.join("selected.json")),
        read(&b.join("selected.json"))
    );
    let (header, rows) = parse_artifact(&a.join("cv_results.csv"));
    assert_eq!(header, "batch_size,df,fold,rescaled_nll");
    assert_eq!(rows.len(), 2 * 3 * 3);
}

#[test]
fn covariate_cache_and_sampling_dumps() {
    let dir = tmp("cov_cache");
    simulate_small(&dir, "41");
    let cache = dir.join("cache.bin");
    run_ok(&[
        "ingest",
        dir.join("events.csv").to_str().unwrap(),
        dir.join("attributes.csv").to_str().unwrap(),
        "--out",
        cache.to_str().unwrap(),
    ]);
    let cov = dir.join("covariates.csv");
    let fit_args = |out: &Path| {
        vec![
            "fit".to_string(),
            "--cache".into(),
            cache.to_str().unwrap().into(),
            "--out-dir".into(),
            out.to_str().unwrap().into(),
            "--effects".into(),
            "time_lag,cumulative_citations".into(),
            "--df".into(),
            "4".into(),
            "--batch-size".into(),
            "256".into(),
            "--max-epochs".into(),
            "6".into(),
            "--seed".into(),
            "2".into(),
            "--covariates-cache".into(),
            cov.to_str().unwrap().into(),
            "--dump-controls".into(),
            "--candidates".into(),
            "3".into(),
        ]
    };
    fn to_refs(v: &[String]) -> Vec<&str> {
        v.iter().map(String::as_str).collect()
    }
    let (a, b) = (dir.join("fit_a"), dir.join("fit_b"));
    run_ok(&to_refs(&fit_args(&a)));
    assert!(cov.exists());
    assert!(cov.with_extension("meta.json").exists());
    let (header, rows) = parse_artifact(&a.join("controls.csv"));
    assert_eq!(header, "event_index,control");
    assert!(!rows.is_empty());
    let (header, rows) = parse_artifact(&a.join("candidates.csv"));
    assert_eq!(header, "event_index,slot,candidate");
    assert!(rows.iter().any(|r| r[1] == "2"), "expected slot 2 rows");

    // Second run hits the cache and reproduces the fit exactly.
    let before = read(&cov);
    run_ok(&to_refs(&fit_args(&b)));
    assert_eq!(before, read(&cov), "cache should be reused unchanged");
    assert_eq!(read(&a.join("fit.json")), read(&b.join("fit.json")));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let out = remfit(&[
        "fit",
        "--cache",
        "nowhere.bin",
        "--out-dir",
        "x",
        "--effects",
        "bogus_effect",
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "unknown effect should be a usage error"
    );
    let out = remfit(&["nonsense-subcommand"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_emits_group_criteria() {
    let dir = tmp("criteria");
    let sim = dir.join("sim");
    run_ok(&[
        "simulate",
        "--out-dir",
        sim.to_str().unwrap(),
        "--n-patents",
        "400",
        "--arrivals",
        "4.0",
        "--cites",
        "poisson:2.0",
        "--effect",
        "textual_similarity=linear:1.5",
        "--seed",
        "37",
    ]);
    let cache = dir.join("cache.bin");
    run_ok(&[
        "ingest",
        sim.join("events.csv").to_str().unwrap(),
        sim.join("attributes.csv").to_str().unwrap(),
        "--out",
        cache.to_str().unwrap(),
    ]);
    let fit_dir = dir.join("fit");
    run_ok(&[
        "fit",
        "--cache",
        cache.to_str().unwrap(),
        "--out-dir",
        fit_dir.to_str().unwrap(),
        "--effects",
        "similarity",
        "--df",
        "4",
        "--batch-size",
        "256",
        "--max-epochs",
        "5",
        "--seed",
        "1",
    ]);
    let report_dir = dir.join("report");
    run_ok(&[
        "report",
        "--fit",
        fit_dir.join("fit.json").to_str().unwrap(),
        "--cache",
        cache.to_str().unwrap(),
        "--out-dir",
        report_dir.to_str().unwrap(),
        "--groups",
        "receiver_pub_year;textual_similarity",
        "--df",
        "4",
        "--max-epochs",
        "20",
        "--seed",
        "1",
    ]);
    let (header, rows) = parse_artifact(&report_dir.join("criteria.csv"));
    assert_eq!(header, "group,P,nll,aic,bic");
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "receiver_pub_year");
    assert_eq!(rows[1][0], "receiver_pub_year+textual_similarity");
}
