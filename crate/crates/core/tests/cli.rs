mod common;

use std::fs;
use std::path::{Path, PathBuf};

use clipdistill::cli::main_with_args;
use clipdistill::train::{checkpoint, RunConfig, CONFIG_VERSION};
use common::{bytes, small_config};

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("clipdistill").chain(args.iter().copied()))
}

fn write_config(dir: &Path, train: clipdistill::train::TrainConfig) -> PathBuf {
    let cfg = RunConfig {
        version: CONFIG_VERSION,
        train,
        out_dir: None,
        dump_corpus: false,
    };
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), small_config());
    let out = dir.path().join("run");
    assert_eq!(run(&["train", "--config", s(&config), "--out", s(&out)]), 0);
    assert!(out.join("resolved_config.json").exists());
    assert!(out.join("timing.csv").exists());
    let ckpt = out.join("checkpoint");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--out", s(&a)]), 0);
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--out", s(&b)]), 0);
    assert_eq!(bytes(&a), bytes(&b));
    let report: serde_json::Value = serde_json::from_slice(&bytes(&a)).unwrap();
    assert_eq!(report["checkpoint"], checkpoint::checkpoint_id(&ckpt).unwrap());
    assert_eq!(report["encoder"], "student");
    assert_eq!(report["keep_rate"], 0.7);

    let t = dir.path().join("t.json");
    assert_eq!(
        run(&["eval", "--checkpoint", s(&ckpt), "--encoder", "teacher", "--keep-rate", "1.0", "--out", s(&t)]),
        0
    );
    let teacher: serde_json::Value = serde_json::from_slice(&bytes(&t)).unwrap();
    assert_eq!(teacher["encoder"], "teacher");
}

#[test]
fn seed_override_and_resume_flag() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.checkpoint_every = 1;
    let config = write_config(dir.path(), cfg);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["train", "--config", s(&config), "--out", s(&a), "--seed", "4"]), 0);
    let resume = a.join("checkpoints").join("epoch_1");
    assert_eq!(
        run(&["train", "--config", s(&config), "--out", s(&b), "--seed", "4", "--resume", s(&resume)]),
        0
    );
    assert_eq!(
        bytes(&a.join("checkpoint").join("weights.bin")),
        bytes(&b.join("checkpoint").join("weights.bin"))
    );
    // a different seed is a different config
    let c = dir.path().join("c");
    assert_eq!(run(&["train", "--config", s(&config), "--out", s(&c), "--resume", s(&resume)]), 2);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["train", "--config", "/nonexistent/config.json", "--out", s(&out)]), 2);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"version": 1, "train": {"batch_sizes": 4}}"#).unwrap();
    assert_eq!(run(&["train", "--config", s(&bad), "--out", s(&out)]), 2);
    fs::write(&bad, r#"{"version": 7, "train": {}}"#).unwrap();
    assert_eq!(run(&["train", "--config", s(&bad), "--out", s(&out)]), 2);

    let mut cfg = small_config();
    cfg.teacher = false;
    let config = write_config(dir.path(), cfg);
    assert_eq!(run(&["train", "--config", s(&config), "--out", s(&out)]), 2);

    assert_eq!(run(&["eval", "--checkpoint", s(dir.path()), "--keep-rate", "1.5", "--out", s(&out)]), 2);
    assert_eq!(run(&["ablate", "--variants", "eclipse,bogus", "--config", s(&config), "--out", s(&out)]), 2);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    assert_eq!(run(&["eval", "--checkpoint", s(&dir.path().join("none")), "--out", s(&out)]), 1);
}

#[test]
fn bench_reports_every_keep_rate_and_enforces_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.epochs = 0;
    let config = write_config(dir.path(), cfg);
    let out = dir.path().join("run");
    assert_eq!(run(&["train", "--config", s(&config), "--out", s(&out)]), 0);
    let ckpt = out.join("checkpoint");
    let table = dir.path().join("bench.json");
    assert_eq!(
        run(&["bench", "--checkpoint", s(&ckpt), "--keep-rates", "1.0,0.5", "--batch", "4", "--warmup", "0", "--out", s(&table)]),
        0
    );
    let rows: serde_json::Value = serde_json::from_slice(&bytes(&table)).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["speedup"], 1.0);
    assert_eq!(run(&["bench", "--checkpoint", s(&ckpt), "--repeats", "5"]), 2);
}

#[test]
fn ablate_needs_text_ema_for_dual_momentum_and_uses_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.epochs = 1;
    let config = write_config(dir.path(), cfg.clone());
    let out = dir.path().join("abl");
    assert_eq!(run(&["ablate", "--variants", "eclipse,dual_momentum", "--config", s(&config), "--out", s(&out)]), 2);

    cfg.ema.text_ema = true;
    let config = write_config(dir.path(), cfg);
    assert_eq!(run(&["ablate", "--variants", "dual_momentum,eclipse", "--config", s(&config), "--out", s(&out)]), 0);
    let table = fs::read_to_string(out.join("ablation.md")).unwrap();
    let eclipse = table.find("| ECLIPSE |").unwrap();
    let dual = table.find("dual_momentum").unwrap();
    assert!(eclipse < dual, "{table}");
    let m = checkpoint::read_manifest(&out.join("dual_momentum").join("checkpoint")).unwrap();
    assert!(m.tensors.iter().any(|t| t.name.starts_with("text_teacher/")));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    assert_eq!(run(&["gradcheck", "--out", s(&report)]), 0);
    assert_eq!(run(&["gradcheck", "--inject-fault", "softmax"]), 1);
    // the fault is cleared afterwards
    assert_eq!(run(&["gradcheck"]), 0);
}
