use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config(extra: &str) -> String {
    format!(
        r#"{{
  "name": "tiny",
  "world": {{
    "num_classes": 6, "dim": 8, "latent_dim": 4,
    "train_per_class": 20, "gallery_per_class": 8, "query_per_class": 3,
    "old_noise_sigma": 0.4, "new_noise_sigma": 0.1, "old_class_fraction": 0.5,
    "subgroup_spec": {{ "class_subgroups": [0, 0, 0, 0, 0, 1], "old_noise_multipliers": [1.0, 2.0] }}
  }},
  "head_train": {{ "epochs": 5, "batch_size": 32, "base_lr": 0.01, "warmup_epochs": 1 }},
  "align_train": {{ "epochs": 4, "batch_size": 32, "base_lr": 0.001, "warmup_epochs": 1 {extra} }},
  "policies": ["random", "sigma_desc", "cheat_loss_desc", "entropy_desc"],
  "alpha_grid_size": 5,
  "seeds": [3, 4]
}}"#
    )
}

fn fastfill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastfill"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_stage(stage: &str, cfg: &Path, out: &Path) -> Output {
    fastfill(&[
        stage,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn pipeline(cfg: &Path, out: &Path) {
    for stage in ["gen", "train", "backfill"] {
        let o = run_stage(stage, cfg, out);
        assert!(
            o.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

fn text_outputs(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(
                p.extension().and_then(|x| x.to_str()),
                Some("csv" | "json" | "ffs" | "ffn")
            ) {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(""));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&cfg, &a);
    pipeline(&cfg, &b);
    let (fa, fb) = (text_outputs(&a), text_outputs(&b));
    assert!(fa.len() > 20);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs", k.display());
    }
}

#[test]
fn outputs_carry_hash_and_cover_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(""));
    let out = tmp.path().join("run");
    pipeline(&cfg, &out);

    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    let hash = summary["config_hash"].as_str().unwrap().to_string();
    let rows = summary["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4 * 3);
    for policy in ["random", "sigma_desc", "cheat_loss_desc", "entropy_desc"] {
        for metric in ["cmc_top1", "cmc_top5", "map"] {
            let n = rows
                .iter()
                .filter(|r| r["policy"] == policy && r["metric"] == metric)
                .count();
            assert_eq!(n, 1, "{policy} {metric}");
        }
    }

    let csv = std::fs::read_to_string(out.join("seed-3/backfill/sigma_desc.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        format!("# config_hash={hash} seed=3 policy=sigma_desc")
    );
    assert_eq!(
        lines.next().unwrap(),
        "alpha,metric,value,subgroup,pos_flips,neg_flips"
    );
    let alphas: Vec<f64> = lines
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(alphas.first(), Some(&0.0));
    assert_eq!(alphas.last(), Some(&1.0));

    let loss = std::fs::read_to_string(out.join("seed-4/train_loss.csv")).unwrap();
    assert!(loss.starts_with(&format!("# config_hash={hash} seed=4\n")));
    for line in loss.lines().skip(2) {
        for v in line.split(',').skip(2) {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("seed-3/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], hash.as_str());
    assert_eq!(manifest["files"].as_object().unwrap().len(), 6);
}

#[test]
fn analyze_reports_three_correlations_and_flip_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(""));
    let out = tmp.path().join("run");
    pipeline(&cfg, &out);
    let o = fastfill(&["analyze", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("analysis.json")).unwrap()).unwrap();
    assert_eq!(a["flip_identity_holds"], true);
    for c in a["correlations"].as_array().unwrap() {
        for key in ["tau_l2_plus_disc", "tau_l2", "tau_disc"] {
            let t = c[key].as_f64().unwrap();
            assert!((-1.0..=1.0).contains(&t));
        }
    }
    let tau = std::fs::read_to_string(out.join("analysis_tau.csv")).unwrap();
    assert_eq!(tau.lines().count(), 2 + 2 * 3);
    let fractions = std::fs::read_to_string(out.join("analysis_fractions.csv")).unwrap();
    assert!(fractions.lines().count() > 2);
}

#[test]
fn seed_override_runs_one_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(""));
    let out = tmp.path().join("run");
    let o = fastfill(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed-override",
        "9",
        "--jobs",
        "2",
    ]);
    assert!(o.status.success());
    let manifests: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(manifests.as_array().unwrap().len(), 1);
    assert!(out.join("seed-9/world/gallery_new.ffs").exists());
    assert!(!out.join("seed-3").exists());
}

#[test]
fn missing_field_is_a_named_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = tiny_config("").replace("\"seeds\": [3, 4]", "\"seedz\": [3, 4]");
    let cfg = write_config(tmp.path(), &text);
    let o = run_stage("gen", &cfg, &tmp.path().join("run"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seedz"));

    let text = tiny_config("").replace("\"head_train\"", "\"head_trainer\"");
    let cfg = write_config(tmp.path(), &text);
    let o = run_stage("gen", &cfg, &tmp.path().join("run"));
    assert_eq!(o.status.code(), Some(2));

    let text = tiny_config("").replace("\"sigma_desc\"", "\"sigma\"");
    let cfg = write_config(tmp.path(), &text);
    let o = run_stage("gen", &cfg, &tmp.path().join("run"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma"));
}

#[test]
fn missing_inputs_are_io_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(""));
    let out = tmp.path().join("run");
    assert_eq!(run_stage("train", &cfg, &out).status.code(), Some(4));
    assert!(run_stage("gen", &cfg, &out).status.success());
    assert_eq!(run_stage("backfill", &cfg, &out).status.code(), Some(4));
    assert_eq!(
        fastfill(&[
            "analyze",
            "--out",
            tmp.path().join("nowhere").to_str().unwrap()
        ])
        .status
        .code(),
        Some(4)
    );
    assert_eq!(
        run_stage("gen", &tmp.path().join("absent.json"), &out)
            .status
            .code(),
        Some(4)
    );
}

#[test]
fn divergence_has_its_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let text = tiny_config("").replace("\"base_lr\": 0.001", "\"base_lr\": 1e300");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("run");
    assert!(run_stage("gen", &cfg, &out).status.success());
    let o = run_stage("train", &cfg, &out);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn fct_baseline_switch_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = r#", "loss": { "loss_kind": "l2", "uncertainty": false }"#;
    let cfg = write_config(tmp.path(), &tiny_config(extra));
    let out = tmp.path().join("run");
    pipeline(&cfg, &out);
}
