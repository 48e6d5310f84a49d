// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use kloc_cli::artifacts::{Stage, UpstreamError};
use kloc_cli::pipeline::{EditArtifact, TraceArtifact};
use kloc_cli::{ExperimentConfig, Lab, OutDir};
use serde_json::Value;

const SMALL: &str = r#"{
  "seed": 5,
  "world": {"n_entities": 16, "n_relations": 3, "n_facts": 24, "object_pool": 5},
  "model": {"n_layers": 3, "d_model": 32, "n_heads": 4, "d_ff": 64, "max_len": 16},
  "train": {"epochs": 300, "batch_size": 16, "lr": 0.003, "recall_target": 1.0},
  "trace": {"noise_samples": 2, "module_window": 3},
  "edit": {"edits": 4, "layer": 0, "preserve": 10, "finetune_edits": 1, "finetune_steps": 20}
}"#;

fn small() -> ExperimentConfig {
    serde_json::from_str(SMALL).unwrap()
}

fn lab(cfg: ExperimentConfig, dir: &Path) -> Lab {
    Lab::new(cfg, OutDir::new(dir).unwrap())
}

fn upstream_stage(err: &anyhow::Error) -> Stage {
    err.downcast_ref::<UpstreamError>()
        .unwrap_or_else(|| panic!("not an upstream error: {err:#}"))
        .stage
}

fn trained(dir: &Path) -> Lab {
    let lab = lab(small(), dir);
    lab.gen_world().unwrap();
    lab.train().unwrap();
    lab
}

#[test]
fn stages_name_their_missing_upstream() {
    let dir = tempfile::tempdir().unwrap();
    let lab = lab(small(), dir.path());
    assert_eq!(upstream_stage(&lab.train().unwrap_err()), Stage::GenWorld);
    lab.gen_world().unwrap();
    let err = lab
        .trace(
            &[kloc::world::Perspective::Relation],
            &[kloc::model::Site::Hidden],
        )
        .unwrap_err();
    assert_eq!(upstream_stage(&err), Stage::Train);
    assert!(err.to_string().contains("`train`"), "{err}");
    assert_eq!(
        upstream_stage(&lab.edit(&[kloc::world::Perspective::Entity]).unwrap_err()),
        Stage::Train
    );
    assert_eq!(upstream_stage(&lab.report().unwrap_err()), Stage::Train);
}

#[test]
fn binary_reports_missing_train_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, SMALL).unwrap();
    let kloc = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_kloc"))
            .args([
                "--quiet",
                "--config",
                config.to_str().unwrap(),
                "--out",
                dir.path().to_str().unwrap(),
            ])
            .args(args)
            .output()
            .unwrap()
    };
    assert!(kloc(&["gen-world"]).status.success());
    let out = kloc(&["trace", "--site", "hidden"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train"), "{stderr}");
    let out = kloc(&["trace", "--site", "nowhere"]);
    assert_eq!(out.status.code(), Some(2), "clap usage errors exit with 2");
    assert!(!kloc(&["--seed", "x", "gen-world"]).status.success());
}

#[test]
fn binary_exit_code_reflects_gates() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.trace.noise_multiplier = 0.0;
    let config = dir.path().join("config.json");
    std::fs::write(&config, serde_json::to_string(&cfg).unwrap()).unwrap();
    let kloc = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_kloc"))
            .args(["--quiet", "--config", config.to_str().unwrap()])
            .env("KLOC_OUT", dir.path())
            .args(args)
            .output()
            .unwrap()
    };
    assert_eq!(kloc(&["gen-world"]).status.code(), Some(0));
    assert_eq!(kloc(&["train"]).status.code(), Some(0));
    // Without noise the corrupted run equals the clean run.
    let out = kloc(&["trace", "--perspective", "relation", "--site", "hidden"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("aie.json").exists());
}

#[test]
fn stale_artifacts_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let lab = trained(dir.path());
    let p = [kloc::world::Perspective::Relation];
    let mut cfg = small();
    cfg.train.lr = 0.002;
    let err = self::lab(cfg, dir.path())
        .trace(&p, &[kloc::model::Site::Hidden])
        .unwrap_err();
    assert_eq!(upstream_stage(&err), Stage::Train);
    assert!(err.to_string().contains("stale"));

    let mut cfg = small();
    cfg.seed = 6;
    assert_eq!(
        upstream_stage(&self::lab(cfg, dir.path()).train().unwrap_err()),
        Stage::GenWorld
    );

    lab.edit(&p).ok();
    let mut cfg = small();
    cfg.edit.preserve = 5;
    assert_eq!(
        upstream_stage(&self::lab(cfg, dir.path()).eval().unwrap_err()),
        Stage::Edit
    );

    // A retrained checkpoint invalidates the edits even under the same config.
    std::fs::remove_file(dir.path().join("model.kloc")).unwrap();
    let mut cfg = small();
    cfg.train.epochs = 2;
    let other = self::lab(cfg.clone(), dir.path());
    other.train().ok();
    let bytes = std::fs::read(dir.path().join("model.kloc")).unwrap();
    let relabelled = {
        let (mut header, arrays): (
            kloc_cli::artifacts::CheckpointHeader,
            Vec<(String, kloc::tensor::Tensor<f32>)>,
        ) = kloc::model::checkpoint::decode(&bytes).unwrap();
        header.provenance.config_hash = small().train_hash();
        let named: Vec<(String, &kloc::tensor::Tensor<f32>)> =
            arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        kloc::model::checkpoint::encode(&header, &named).unwrap()
    };
    std::fs::write(dir.path().join("model.kloc"), relabelled).unwrap();
    assert_eq!(upstream_stage(&lab.eval().unwrap_err()), Stage::Train);
}

#[test]
fn partial_traces_accumulate() {
    use kloc::model::Site;
    use kloc::world::Perspective;
    let dir = tempfile::tempdir().unwrap();
    let lab = trained(dir.path());
    lab.trace(&[Perspective::Relation], &[Site::Hidden]).ok();
    lab.trace(&[Perspective::Relation], &[Site::MlpOut]).ok();
    let aie: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("aie.json")).unwrap()).unwrap();
    let keys: Vec<&String> = aie["grids"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["relation.hidden.none", "relation.mlp.none"]);
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(csv.contains(",relation,entity,mlp,none,"), "{csv}");
    assert!(csv.contains(",relation,entity,hidden,none,"));

    // A different trace configuration starts over.
    let mut cfg = small();
    cfg.trace.noise_samples = 3;
    let other = self::lab(cfg, dir.path());
    other.trace(&[Perspective::Entity], &[Site::AttnOut]).ok();
    let aie: kloc_cli::artifacts::Stamped<TraceArtifact> =
        serde_json::from_slice(&std::fs::read(dir.path().join("aie.json")).unwrap()).unwrap();
    assert_eq!(
        aie.body.grids.keys().collect::<Vec<_>>(),
        ["entity.attn.none"]
    );
}

#[test]
fn edit_layer_comes_from_the_mlp_trace() {
    use kloc::model::Site;
    use kloc::world::Perspective;
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.edit.layer = None;
    cfg.edit.edits = 1;
    cfg.edit.finetune_edits = 0;
    let lab = self::lab(cfg, dir.path());
    lab.gen_world().unwrap();
    lab.train().unwrap();
    lab.trace(&[Perspective::Entity], &[Site::Hidden]).ok();
    let err = lab.edit(&[Perspective::Entity]).unwrap_err();
    assert_eq!(upstream_stage(&err), Stage::Trace);
    lab.trace(&[Perspective::Entity], &[Site::MlpOut]).ok();
    lab.edit(&[Perspective::Entity]).ok();
    let aie: kloc_cli::artifacts::Stamped<TraceArtifact> =
        serde_json::from_slice(&std::fs::read(dir.path().join("aie.json")).unwrap()).unwrap();
    let peak = aie.body.grids["entity.mlp.none"].max.unwrap().layer;
    let edits: kloc_cli::artifacts::Stamped<EditArtifact> =
        serde_json::from_slice(&std::fs::read(dir.path().join("edit_trace.json")).unwrap())
            .unwrap();
    assert_eq!(edits.body.perspectives[&Perspective::Entity].layer, peak);
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.extension()
                .is_some_and(|x| x == "json" || x == "csv" || x == "svg")
        })
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn full_runs_are_byte_identical_and_self_describing() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    lab(small(), a.path()).run_all().ok();
    lab(small(), b.path()).run_all().ok();
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    for name in [
        "world.json",
        "train_report.json",
        "aie.json",
        "trace.csv",
        "sever.json",
        "sever.csv",
        "edit_trace.json",
        "metrics_report.json",
        "metrics.csv",
        "summary.json",
    ] {
        assert!(fa.contains_key(name), "missing {name}");
    }
    assert!(fa.keys().filter(|k| k.ends_with(".svg")).count() >= 10);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{name} differs between runs");
    }
    for bin in ["model.kloc", "edits.kloc"] {
        assert_eq!(
            std::fs::read(a.path().join(bin)).unwrap(),
            std::fs::read(b.path().join(bin)).unwrap()
        );
    }

    let ck = kloc_cli::config::file_hash(&a.path().join("model.kloc")).unwrap();
    for (name, bytes) in &fa {
        let text = String::from_utf8(bytes.clone()).unwrap();
        if name.ends_with(".json") {
            let v: Value = serde_json::from_str(&text).unwrap();
            let p = &v["provenance"];
            assert_eq!(p["seed"], 5, "{name}");
            assert_eq!(p["config_hash"].as_str().unwrap().len(), 64, "{name}");
            if name != "world.json" {
                assert_eq!(p["checkpoint_hash"], ck.as_str(), "{name}");
            }
        } else if name.ends_with(".csv") {
            assert!(
                text.starts_with("stage,seed,config_hash,checkpoint_hash,"),
                "{name}"
            );
            assert!(text.lines().skip(1).all(|l| l.contains(&ck)), "{name}");
        }
    }
}
