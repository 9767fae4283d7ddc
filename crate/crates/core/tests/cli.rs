#![cfg(feature = "cli")]

use std::path::Path;

use ravl::cli::run;

fn ravl(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("ravl").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn gen_is_byte_identical_and_reports_v() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[world]\ncramers_v = 0.9\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (code, out, _) = ravl(&["gen", "--config", p(&cfg), "--seed", "7", "--out", p(&a)]);
    assert_eq!(code, 0);
    assert_eq!(ravl(&["gen", "--config", p(&cfg), "--seed", "7", "--out", p(&b)]).0, 0);
    for f in ["finetune.emb", "finetune.jsonl", "eval.emb", "eval.jsonl", "labels.emb", "labels.jsonl", "setting.json"]
    {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let achieved: f64 =
        out.split("achieved ").nth(1).and_then(|s| s.split_whitespace().next()).unwrap().parse().unwrap();
    assert!((achieved - 0.9).abs() <= 0.02);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 1\n").unwrap();
    let (code, _, err) = ravl(&["gen", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code, 2);
    assert!(err.contains("[world]"));
    assert_eq!(ravl(&["suite", "--config", p(&cfg)]).0, 2);
    assert_eq!(ravl(&["discover"]).0, 2);
    assert_eq!(ravl(&["frobnicate"]).0, 2);
    assert_eq!(ravl(&["mitigate", "--data", ".", "--mode", "bogus"]).0, 2);
}

#[test]
fn infeasible_world_names_feasible_range() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[world]\nfinetune_size = 4\ncramers_v = 0.3\n").unwrap();
    let (code, _, err) = ravl(&["gen", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_ne!(code, 0);
    assert!(err.contains("feasible range"), "{err}");
}

#[test]
fn discover_and_mitigate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    assert_eq!(ravl(&["gen", "--seed", "2", "--out", p(&data)]).0, 0);

    // ravl mode without a report is a missing dependency
    let (code, _, err) = ravl(&["mitigate", "--data", p(&data), "--mode", "ravl", "--out", p(&out)]);
    assert_eq!(code, 4, "{err}");

    let (code, _, _) = ravl(&["mitigate", "--data", p(&data), "--mode", "standard", "--seed", "2", "--out", p(&out)]);
    assert_eq!(code, 0);
    let metrics: serde_json::Value = serde_json::from_slice(&read(&out.join("metrics_standard.json"))).unwrap();
    let keys: Vec<&str> = metrics["metrics"].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["img_overall", "img_wg", "reg_overall", "reg_wg"]);
    assert_eq!(metrics["seed"], 2);
    assert!(metrics["config"].is_object());
    let log = String::from_utf8(read(&out.join("train_log_standard.csv"))).unwrap();
    assert!(log.starts_with("epoch,loss,contrastive,region,alignment,val_loss,val_accuracy"));

    let encoder = out.join("encoder_standard.emb");
    let rep = dir.path().join("rep");
    let (code, stdout, _) =
        ravl(&["discover", "--data", p(&data), "--encoder", p(&encoder), "--seed", "2", "--out", p(&rep)]);
    assert_eq!(code, 0);
    assert!(stdout.contains("red_rectangle"));
    let first = read(&rep.join("report_full.json"));
    ravl(&["discover", "--data", p(&data), "--encoder", p(&encoder), "--seed", "2", "--out", p(&rep)]);
    assert_eq!(first, read(&rep.join("report_full.json")));

    // standard mode ignores a supplied report
    let with = dir.path().join("with");
    let report = rep.join("report_full.json");
    ravl(&[
        "mitigate",
        "--data",
        p(&data),
        "--mode",
        "standard",
        "--seed",
        "2",
        "--report",
        p(&report),
        "--out",
        p(&with),
    ]);
    assert_eq!(read(&out.join("metrics_standard.json")), read(&with.join("metrics_standard.json")));
    assert_eq!(read(&out.join("encoder_standard.emb")), read(&with.join("encoder_standard.emb")));

    let (code, _, err) = ravl(&[
        "mitigate",
        "--data",
        p(&data),
        "--mode",
        "ravl",
        "--seed",
        "2",
        "--report",
        p(&report),
        "--encoder",
        p(&encoder),
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.join("metrics_ravl.json").exists());

    // unreachable pruning threshold
    let (code, stdout, _) =
        ravl(&["discover", "--data", p(&data), "--encoder", p(&encoder), "--tau-l", "1.01", "--out", p(&rep)]);
    assert_eq!(code, 0);
    assert!(stdout.contains("NoSpuriousClusterAboveThreshold"));
    let empty: serde_json::Value = serde_json::from_slice(&read(&rep.join("report_full.json"))).unwrap();
    assert_eq!(empty["report"]["status"], "no_spurious_cluster_above_threshold");
    assert!(empty["report"]["top_regions"].as_array().unwrap().is_empty());
}

#[test]
fn corrupt_embedding_file_exits_three_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(ravl(&["gen", "--out", p(&data)]).0, 0);
    let eval = data.join("eval.emb");
    let mut bytes = read(&eval);
    bytes[2] = b'?';
    std::fs::write(&eval, &bytes).unwrap();
    let (code, _, err) = ravl(&["discover", "--data", p(&data), "--out", p(dir.path())]);
    assert_eq!(code, 3);
    assert!(err.contains("byte 2"), "{err}");

    bytes[2] = b'V';
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&eval, &bytes).unwrap();
    assert_eq!(ravl(&["discover", "--data", p(&data), "--out", p(dir.path())]).0, 3);
}

#[test]
fn suite_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "seed = 4\n[world]\nfinetune_size = 160\neval_size = 80\n[train]\nepochs = 8\n[suite]\nsettings = 3\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (code, _, err) = ravl(&["suite", "--config", p(&cfg), "--threads", "2", "--out", p(&a)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(ravl(&["suite", "--config", p(&cfg), "--threads", "1", "--out", p(&b)]).0, 0);
    for f in ["suite_precision.csv", "suite_mitigation.csv", "suite_ledger.csv", "suite.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let precision = String::from_utf8(read(&a.join("suite_precision.csv"))).unwrap();
    assert_eq!(precision.lines().next().unwrap(), "variant,tau_10,tau_20,tau_30,tau_40");
    let ledger = String::from_utf8(read(&a.join("suite_ledger.csv"))).unwrap();
    assert!(ledger.starts_with("setting,seed,spurious_label,achieved_v,eps1,eps2,valid_10"));
    assert_eq!(ledger.lines().count(), 4);
}

#[test]
fn suite_without_valid_settings_still_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[world]\ncramers_v = 0.0\nfinetune_size = 120\neval_size = 40\n[train]\nepochs = 4\n[suite]\nsettings = 2\n",
    )
    .unwrap();
    let (code, out, _) = ravl(&["suite", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code, 0);
    assert!(out.contains("0 of 2 settings valid"));
    let m = String::from_utf8(read(&dir.path().join("suite_mitigation.csv"))).unwrap();
    assert!(m.contains("ravl,0,,,,"));
}

#[test]
fn example_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../ravl.example.toml");
    let cfg = ravl::config::RunConfig::load(&path).unwrap();
    let defaults = ravl::config::RunConfig::with_sections();
    assert_eq!(cfg.world, defaults.world);
    assert_eq!(cfg.train, defaults.train);
    assert_eq!(cfg.suite, defaults.suite);
    assert_eq!((cfg.tau_l, cfg.k, &cfg.tau_eval), (defaults.tau_l, defaults.k, &defaults.tau_eval));
}
