mod common;

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn scenepose(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scenepose"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("SCENEPOSE_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_config(dir: &Path, data: &Path, extra: &str) -> String {
    let cfg = common::tiny_config(data);
    let path = dir.join("config.toml");
    std::fs::write(&path, format!("{}\n{extra}", cfg.to_toml())).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn end_to_end_commands_succeed() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let out = scenepose(&["generate", "--out", data.to_str().unwrap(), "--train", "2", "--test", "1", "--seed", "4"], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = write_config(dir.path(), &data, "");
    let s1 = dir.path().join("s1.spck");
    let s2 = dir.path().join("s2.spck");
    let out = scenepose(&["train", "--stage", "1", "--config", &cfg, "--out", s1.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(s1.with_extension("log.tsv").exists());
    let out = scenepose(
        &["train", "--stage", "2", "--config", &cfg, "--stage1", s1.to_str().unwrap(), "--out", s2.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let report = dir.path().join("report");
    let out = scenepose(&["eval", "--checkpoint", s2.to_str().unwrap(), "--out", report.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report.join("report.json").exists() && report.join("report.txt").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("mpjpe_mm = "));

    let ep = data.join("test").join("seq_0000");
    let obs_path = dir.path().join("obs.txt");
    let (_, seqs) = scenepose_pipeline::train::load_sequences(&common::tiny_config(&data), scenepose_core::synthdata::Split::Test).unwrap();
    let obs = &seqs[0].stream.obs[..50 * 36];
    let text: Vec<String> = obs.chunks(36).map(|r| r.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")).collect();
    std::fs::write(&obs_path, text.join("\n")).unwrap();
    let pred = dir.path().join("pred");
    let out = scenepose(
        &[
            "infer",
            "--checkpoint",
            s2.to_str().unwrap(),
            "--input",
            obs_path.to_str().unwrap(),
            "--env",
            ep.join("cloud.pcld").to_str().unwrap(),
            "--epsilon",
            "sample",
            "--out",
            pred.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::metadata(pred.join("pose.f64")).unwrap().len(), 50 * 132 * 8);
    assert_eq!(std::fs::metadata(pred.join("positions.f64")).unwrap().len(), 50 * 22 * 3 * 8);

    let abl = dir.path().join("abl");
    let out = scenepose(&["ablate", "--config", &cfg, "--variants", "stage1_only,full", "--seeds", "1", "--out", abl.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(abl.join("ablation.json").exists());
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[optim]\nlr = -1.0\n").unwrap();
    assert_eq!(code(&scenepose(&["train", "--stage", "1", "--config", bad.to_str().unwrap()], &[])), 2);
    std::fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(code(&scenepose(&["train", "--stage", "1", "--config", bad.to_str().unwrap()], &[])), 2);
    assert_eq!(code(&scenepose(&["train", "--stage", "3"], &[])), 2);
    assert_eq!(code(&scenepose(&["train", "--stage", "1"], &[("SCENEPOSE_SEED", "not-a-number")])), 2);
    assert_eq!(code(&scenepose(&["ablate", "--variants", "bogus"], &[])), 2);
}

#[test]
fn missing_files_exit_with_4() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(code(&scenepose(&["train", "--stage", "1", "--dataset", missing.to_str().unwrap()], &[])), 4);
    assert_eq!(code(&scenepose(&["eval", "--checkpoint", missing.to_str().unwrap()], &[])), 4);
    assert_eq!(code(&scenepose(&["train", "--stage", "1", "--config", missing.to_str().unwrap()], &[])), 4);
}

#[test]
fn non_finite_training_exits_with_3_and_dumps_the_batch() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    common::dataset(&data, 2, 0, 5);
    let cfg = write_config(dir.path(), &data, "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("lr = 0.001", "lr = 1e30").replace("max_grad_norm = 1.0\n", "");
    std::fs::write(&cfg, text).unwrap();
    let ckpt = dir.path().join("m.spck");
    let out = scenepose(&["train", "--stage", "1", "--config", &cfg, "--out", ckpt.to_str().unwrap()], &[]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ckpt.with_extension("nan.json")).unwrap()).unwrap();
    assert_eq!(dump["stage"], 1);
    assert!(!dump["windows"].as_array().unwrap().is_empty());
}

#[test]
fn seed_override_reaches_the_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    common::dataset(&data, 1, 0, 6);
    let cfg = write_config(dir.path(), &data, "");
    let ckpt = dir.path().join("m.spck");
    let out = scenepose(&["train", "--stage", "1", "--config", &cfg, "--out", ckpt.to_str().unwrap()], &[("SCENEPOSE_SEED", "77")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(scenepose_pipeline::Checkpoint::load(&ckpt).unwrap().config.seed, 77);
}
