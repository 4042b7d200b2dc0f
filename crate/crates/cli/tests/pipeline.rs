use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use biaslab::training::{MetricsRecord, Split};
use biaslab_cli::config::{At, ExperimentConfig};
use biaslab_cli::manifest::{Manifest, RunStatus, MANIFEST_NAME};
use biaslab_cli::pipeline::run_experiment;
use biaslab_cli::sweep::{comparison_epoch, read_comparison, run_dir_name, sweep, SweepParam};
use biaslab_cli::CliError;
use sha2::{Digest, Sha256};

fn tiny_json() -> serde_json::Value {
    serde_json::json!({
        "schema_version": 1,
        "name": "tiny",
        "task": {
            "key_range": [15, 22],
            "mem_anchor_range": [1, 4],
            "rsn_anchor_range": [5, 8],
            "q": 2,
            "seq_len": 5,
            "masked_combos": [[5, 7], [7, 5]],
            "vocab_size": 40,
            "seed": 4
        },
        "n_samples": 80,
        "model": {
            "family": "DecoderTransformer",
            "d_vob": 40, "d_m": 12, "d_f": 16, "d_k": 6,
            "n_layers": 2, "n_heads": 1, "gamma": 0.5,
            "max_seq_len": 5, "seed": 4
        },
        "train": { "lr": 1e-3, "epochs": 4, "batch_size": 16, "eval_every": 2, "seed": 4 },
        "checkpoints": [{ "epoch": 2 }],
        "analyses": [
            { "kind": "similarity", "tokens": "rsn" },
            { "kind": "pca", "tokens": "keys" },
            { "kind": "svd", "matrix": "layer0.wv", "at": { "epoch": 2 } },
            { "kind": "attention_error", "split": "rsn_train", "max_sequences": 20 },
            { "kind": "last_row", "split": "rsn_test", "n_sequences": 2 },
            { "kind": "compare_theory", "tokens": "rsn", "form": "fitted" },
            { "kind": "compare_theory", "tokens": [5, 6, 7, 8], "form": "derived" }
        ],
        "output_dir": "runs"
    })
}

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_json(&tiny_json().to_string()).unwrap()
}

fn config_error(v: serde_json::Value) -> String {
    match ExperimentConfig::from_json(&v.to_string()) {
        Err(CliError::Config(m)) => m,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn malformed_configs_name_the_field() {
    let mut v = tiny_json();
    v["model"]["dropout"] = 0.1.into();
    assert!(config_error(v).contains("dropout"));

    let mut v = tiny_json();
    v["model"]["d_vob"] = 41.into();
    assert!(config_error(v).contains("model.d_vob"));

    let mut v = tiny_json();
    v["schema_version"] = 2.into();
    assert!(config_error(v).contains("schema_version"));

    let mut v = tiny_json();
    v["analyses"][2]["at"] = serde_json::json!({ "epoch": 3 });
    assert!(config_error(v).contains("analyses[2].at"));

    let mut v = tiny_json();
    v["analyses"][2]["matrix"] = "layer7.wv".into();
    assert!(config_error(v).contains("analyses[2].matrix"));

    let mut v = tiny_json();
    v["model"]["max_seq_len"] = 4.into();
    assert!(config_error(v).contains("model.max_seq_len"));

    let mut v = tiny_json();
    v["task"].as_object_mut().unwrap().remove("q");
    assert!(config_error(v).contains("`q`"));

    let mut v = tiny_json();
    v["train"]["batch_size"] = 0.into();
    assert!(config_error(v).starts_with("train"));
}

#[test]
fn bundled_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk_small.json", "full_scale.json"] {
        let cfg = ExperimentConfig::load(&root.join(name)).unwrap();
        assert_eq!(
            cfg.to_json(),
            ExperimentConfig::from_json(&cfg.to_json())
                .unwrap()
                .to_json()
        );
    }
    let full = ExperimentConfig::load(&root.join("full_scale.json")).unwrap();
    assert_eq!(
        (
            full.model.d_vob,
            full.model.d_m,
            full.model.d_f,
            full.model.d_k
        ),
        (200, 200, 512, 64)
    );
    assert_eq!(
        (full.n_samples, full.train.epochs, full.train.batch_size),
        (200_000, 1000, 100)
    );
    assert_eq!(full.train.lr, 1e-5);
    let desk = ExperimentConfig::load(&root.join("desk_small.json")).unwrap();
    assert_eq!(At::Fraction(0.2).resolve(desk.train.epochs), 40);
    assert!(desk.checkpoint_epochs().contains(&40));
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn run_produces_every_artifact_with_matching_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let summary = run_experiment(&tiny(), &dir).unwrap();
    assert_eq!(summary.epochs_run, 4);
    assert_eq!(summary.checkpoints, vec![2, 4]);

    let all = files(&dir);
    for want in [
        "config.json",
        "dataset.csv",
        "memory_table.csv",
        "metrics.csv",
        "checkpoints/epoch_0002.ckpt",
        "checkpoints/epoch_0004.ckpt",
        "analysis/00_similarity.csv",
        "analysis/01_pca.json",
        "analysis/02_svd.csv",
        "analysis/03_attention_error.json",
        "analysis/04_last_row.csv",
        "analysis/04_last_row_positions.csv",
        "analysis/05_compare_theory.csv",
        "analysis/06_compare_theory.json",
        "summary.json",
        MANIFEST_NAME,
    ] {
        assert!(all.contains_key(want), "missing {want}");
    }

    let m = Manifest::read(&dir).unwrap();
    assert_eq!(m.status, RunStatus::Complete);
    assert_eq!(m.artifacts.len(), all.len() - 1);
    for a in &m.artifacts {
        let bytes = &all[&a.path];
        let hex: String = Sha256::digest(bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(a.sha256, hex, "{}", a.path);
        assert_eq!(a.bytes as usize, bytes.len());
    }
    assert!(m.mismatches(&dir).unwrap().is_empty());

    // Metrics rows ordered by (epoch, split).
    let text = String::from_utf8(all["metrics.csv"].clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,split,loss,accuracy"));
    let keys: Vec<(usize, String)> = lines
        .map(|l| {
            let mut f = l.split(',');
            (
                f.next().unwrap().parse().unwrap(),
                f.next().unwrap().to_string(),
            )
        })
        .collect();
    let order = ["mem", "rsn_train", "rsn_test"];
    let rank = |k: &(usize, String)| (k.0, order.iter().position(|s| *s == k.1).unwrap());
    assert!(keys.windows(2).all(|w| rank(&w[0]) < rank(&w[1])));
    assert_eq!(
        keys.iter()
            .map(|k| k.0)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        3
    );

    let header = |name: &str| {
        String::from_utf8(all[name].clone())
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(header("analysis/00_similarity.csv"), "i,j,value");
    assert_eq!(header("analysis/02_svd.csv"), "rank,sigma");
    assert_eq!(header("analysis/01_pca.csv"), "token,pc1,pc2");
    assert_eq!(
        header("analysis/05_compare_theory.csv"),
        "s_i,s_j,distance,empirical,theory,abs_diff,near"
    );

    // Tampering is detected.
    std::fs::write(dir.join("dataset.csv"), b"tampered").unwrap();
    assert_eq!(
        Manifest::read(&dir).unwrap().mismatches(&dir).unwrap(),
        vec!["dataset.csv".to_string()]
    );
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_experiment(&tiny(), &a).unwrap();
    run_experiment(&tiny(), &b).unwrap();
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        // Wall-clock time is the only non-reproducible field.
        if name == "summary.json" || name == MANIFEST_NAME {
            continue;
        }
        assert!(bytes == &fb[name], "{name} differs between runs");
    }
}

#[test]
fn single_value_sweep_equals_run_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let direct = tmp.path().join("direct");
    run_experiment(&cfg, &direct).unwrap();
    let root = tmp.path().join("sweep");
    let report = sweep(&cfg, SweepParam::Gamma, &["0.5".into()], &root, 2).unwrap();
    assert_eq!(report.runs.len(), 1);
    let swept = root.join(run_dir_name(SweepParam::Gamma, "0.5"));
    let (fa, fb) = (files(&direct), files(&swept));
    for (name, bytes) in &fa {
        if name == "summary.json" || name == MANIFEST_NAME {
            continue;
        }
        assert!(bytes == &fb[name], "{name} differs");
    }
    let rows = read_comparison(&root.join("comparison.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    let header: Vec<&str> = rows[0].iter().map(|(h, _)| h.as_str()).collect();
    assert_eq!(
        &header[..4],
        [
            "value",
            "comparison_epoch",
            "delta_l_comparison",
            "delta_l_final"
        ]
    );
    assert!(header.contains(&"attention_median_error"));
    assert!(Manifest::read(&root)
        .unwrap()
        .mismatches(&root)
        .unwrap()
        .is_empty());
}

#[test]
fn sweeps_reject_duplicates_overlaps_and_unknown_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let root = tmp.path().join("s");
    assert!(matches!(
        sweep(
            &cfg,
            SweepParam::Gamma,
            &["0.5".into(), "0.50".into()],
            &root,
            1
        ),
        Err(CliError::Config(_))
    ));
    std::fs::create_dir_all(&root).unwrap();
    std::fs::write(root.join("keep.txt"), b"x").unwrap();
    assert!(matches!(
        sweep(&cfg, SweepParam::UseLayerNorm, &["true".into()], &root, 1),
        Err(CliError::Overlap(_))
    ));
    assert_eq!(std::fs::read(root.join("keep.txt")).unwrap(), b"x");
    assert!("dropout".parse::<SweepParam>().is_err());
    assert!(SweepParam::UseLayerNorm.apply(&cfg, "maybe").is_err());
    let (c, canon) = SweepParam::Lr.apply(&cfg, "5e-4").unwrap();
    assert_eq!((c.train.lr, canon.as_str()), (5e-4, "0.0005"));
}

#[test]
fn comparison_epoch_is_the_earliest_reasoning_crossing() {
    let rec = |epoch, accuracy| MetricsRecord {
        epoch,
        split: Split::RsnTrain,
        loss: 1.0,
        accuracy,
    };
    let a = vec![rec(0, 0.0), rec(5, 0.5), rec(10, 0.95)];
    let b = vec![rec(0, 0.0), rec(5, 0.91), rec(10, 0.99)];
    assert_eq!(comparison_epoch(&[a.clone(), b], 10), 5);
    assert_eq!(comparison_epoch(&[vec![rec(0, 0.1), rec(10, 0.2)]], 10), 10);
    assert_eq!(comparison_epoch(&[a], 10), 10);
}

#[test]
fn failed_stage_leaves_an_incomplete_manifest() {
    let mut v = tiny_json();
    // Memory anchors have no theoretical embedding, so the last stage fails.
    v["analyses"] =
        serde_json::json!([{ "kind": "compare_theory", "tokens": "mem", "form": "fitted" }]);
    let cfg = ExperimentConfig::from_json(&v.to_string()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    assert!(run_experiment(&cfg, &dir).is_err());
    let m = Manifest::read(&dir).unwrap();
    assert_eq!(m.status, RunStatus::Incomplete);
    assert!(m
        .error
        .as_deref()
        .unwrap()
        .contains("theoretical embedding"));
    assert!(m.artifacts.iter().any(|a| a.path == "metrics.csv"));
    assert!(m.mismatches(&dir).unwrap().is_empty());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_biaslab"))
}

#[test]
fn binary_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("tiny.json");
    std::fs::write(&cfg_path, tiny_json().to_string()).unwrap();
    let out_root = tmp.path().join("out");

    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg_path)
        .env("BIASLAB_OUTPUT_ROOT", &out_root)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = std::path::PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert!(run.starts_with(&out_root));
    assert!(run
        .file_name()
        .unwrap()
        .to_string_lossy()
        .starts_with("tiny-"));
    assert!(run.join("dataset.csv").exists() && run.join(MANIFEST_NAME).exists());
    let ok = bin().arg("check-manifest").arg(&run).output().unwrap();
    assert!(ok.status.success());

    let out = bin()
        .args(["oracle", "global", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("index,value"));
    let total: f64 = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(text.lines().count(), 41);

    let out = bin()
        .args([
            "oracle",
            "label",
            "--token",
            "6",
            "--role",
            "rsn-anchor",
            "--config",
        ])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(out.status.success());

    let out = bin().args(["verify", "cliff"]).output().unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    let out = bin().args(["verify", "everything"]).output().unwrap();
    assert!(!out.status.success());

    let mut bad = tiny_json();
    bad["train"]["epochs_total"] = 3.into();
    std::fs::write(&cfg_path, bad.to_string()).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs_total"));
}
