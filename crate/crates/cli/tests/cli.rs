use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const KINDS: [&str; 8] = [
    "LR-14",
    "LR-517",
    "LSTM",
    "LSTM+3xPers",
    "LSTM+TL",
    "LSTM+3xPers+TL",
    "Simple-EN",
    "Multi-EN",
];

fn hfnc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfnc"))
        .args(args)
        .env_remove("HFNC_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hfnc(args);
    assert!(
        out.status.success(),
        "hfnc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(
        &p,
        r#"{"hidden_sizes":[4,6,4],"max_epochs":2,"pretext_epochs":1,"pretext_seeds":[11,12],"finetune_seeds":[1,2]}"#,
    )
    .unwrap();
    p
}

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--patients",
        "60",
        "--trials",
        "70",
        "--seed",
        "3",
    ]);
    data
}

fn manifest_artifacts_exist(dir: &Path) {
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    let artifacts = m["artifacts"].as_array().unwrap();
    assert!(!artifacts.is_empty());
    for a in artifacts {
        assert!(
            dir.join(a.as_str().unwrap()).exists(),
            "{a} listed but missing"
        );
    }
}

#[test]
fn apnea_episode_is_excluded_with_reason() {
    let tmp = TempDir::new().unwrap();
    let generated = synth(tmp.path());
    let data = tmp.path().join("hand");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::copy(generated.join("catalog.json"), data.join("catalog.json")).unwrap();
    let mut obs = String::from("episode_id,time_min,variable,value\n");
    for ep in ["A1", "A2"] {
        for t in [0, 60, 120, 180, 240] {
            obs.push_str(&format!("{ep},{t},heart_rate,120\n"));
        }
        obs.push_str(&format!("{ep},60,hfnc,10\n{ep},200,hfnc,12\n"));
    }
    std::fs::write(data.join("observations.csv"), obs).unwrap();
    let header = |id: &str, tags: &str| {
        format!(
            r#"{{"episode_id":"{id}","patient_id":"P{id}","age_at_admission":4.0,"sex":"F","diagnosis_tags":[{tags}],"care_flags":[],"disposition":"Home","discharge_time":3000.0}}"#
        )
    };
    std::fs::write(
        data.join("episodes.jsonl"),
        format!(
            "{}\n{}\n",
            header("A1", r#""apnea""#),
            header("A2", r#""respiratory""#)
        ),
    )
    .unwrap();

    let seg = tmp.path().join("seg");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"split_ratios":[1.0,0.0,0.0]}"#).unwrap();
    ok(&[
        "segment",
        "--data",
        s(&data),
        "--out",
        s(&seg),
        "--config",
        s(&cfg),
    ]);
    let csv = std::fs::read_to_string(seg.join("exclusions.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows,
        [
            "episode_id,decision,reason",
            "A1,excluded,apnea",
            "A2,included,"
        ]
    );
    manifest_artifacts_exist(&seg);
}

#[test]
fn full_pipeline_writes_reports() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path());
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&[
        "segment",
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("seg")),
        "--config",
        s(&cfg),
    ]);
    for kind in &KINDS[..6] {
        ok(&[
            "train",
            "--data",
            s(&data),
            "--config",
            s(&cfg),
            "--run-dir",
            s(&run),
            "--kind",
            kind,
        ]);
    }
    ok(&[
        "ensemble",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--run-dir",
        s(&run),
        "--type",
        "simple",
    ]);
    ok(&[
        "ensemble",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--run-dir",
        s(&run),
        "--type",
        "multi",
        "--workers",
        "2",
    ]);
    for kind in KINDS {
        let slug = kind.to_lowercase().replace(['+', '-'], "_");
        assert!(
            run.join(format!("checkpoints/{slug}.json")).exists(),
            "{kind}"
        );
        assert!(
            run.join(format!("predictions/{slug}.jsonl")).exists(),
            "{kind}"
        );
    }

    let stdout = ok(&[
        "evaluate",
        "--data",
        s(&data),
        "--run",
        s(&run),
        "--kind",
        "LSTM+3xPers+TL",
        "--anchor",
        "2h",
    ]);
    assert!(stdout.contains("AUROC at 120 min"));
    let rep = run.join("reports/lstm_3xpers_tl/test_all");
    for f in [
        "roc_120.csv",
        "operating_120.csv",
        "auroc_sweep.csv",
        "ttf.csv",
    ] {
        assert!(rep.join(f).exists(), "{f}");
    }
    let sweep = std::fs::read_to_string(rep.join("auroc_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 49);

    ok(&["report", "--data", s(&data), "--run", s(&run)]);
    let table = std::fs::read_to_string(run.join("reports/auroc_by_model.csv")).unwrap();
    assert_eq!(
        table.lines().next().unwrap(),
        format!("t_h,n_eligible,n_fail,{}", KINDS.join(","))
    );
    manifest_artifacts_exist(&run);

    // Re-predicting from the checkpoint reproduces the training-time predictions.
    let again = tmp.path().join("again.jsonl");
    ok(&[
        "predict",
        "--data",
        s(&data),
        "--run",
        s(&run),
        "--kind",
        "LSTM+TL",
        "--out",
        s(&again),
    ]);
    assert_eq!(
        std::fs::read(&again).unwrap(),
        std::fs::read(run.join("predictions/lstm_tl.jsonl")).unwrap()
    );
}

#[test]
fn training_is_reproducible_across_runs() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path());
    let cfg = tiny_config(tmp.path());
    let runs = tmp.path().join("runs");
    let dirs: Vec<PathBuf> = ["a", "b"].iter().map(|d| tmp.path().join(d)).collect();
    for d in &dirs {
        for kind in ["LR-517", "LSTM+3xPers+TL"] {
            ok(&[
                "train",
                "--data",
                s(&data),
                "--config",
                s(&cfg),
                "--run-dir",
                s(d),
                "--kind",
                kind,
            ]);
        }
    }
    for f in [
        "checkpoints/lr_517.json",
        "checkpoints/lstm_3xpers_tl.json",
        "predictions/lstm_3xpers_tl.jsonl",
    ] {
        assert_eq!(
            std::fs::read(dirs[0].join(f)).unwrap(),
            std::fs::read(dirs[1].join(f)).unwrap(),
            "{f}"
        );
    }

    // Content-addressed directories: same config and data, same directory.
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--runs",
        s(&runs),
        "--kind",
        "LR-14",
    ]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--runs",
        s(&runs),
        "--kind",
        "LR-517",
    ]);
    assert_eq!(std::fs::read_dir(&runs).unwrap().count(), 1);
}

#[test]
fn exit_codes() {
    assert_eq!(hfnc(&["--help"]).status.code(), Some(0));
    assert_eq!(hfnc(&["train", "--bogus"]).status.code(), Some(1));

    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path());
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"reduce_rate":1.5}"#).unwrap();
    let out = hfnc(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--run-dir",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reduce_rate"));

    let out = hfnc(&[
        "train",
        "--data",
        s(&tmp.path().join("missing")),
        "--run-dir",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = hfnc(&[
        "evaluate",
        "--data",
        s(&data),
        "--run",
        s(&tmp.path().join("r")),
        "--kind",
        "NotAModel",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
