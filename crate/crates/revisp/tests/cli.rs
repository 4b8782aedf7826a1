mod common;

use common::{revisp, s};
use revisp::checkpoint::Checkpoint;
use revisp::image_io::{load_raw_with_sidecar, load_rgb};
use revisp::manifest::Manifest;
use revisp_core::selector::Model;
use serde_json::Value;

fn stderr_record(out: &std::process::Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("not a JSON record: {text}"))
}

#[test]
fn missing_flags_are_usage_errors() {
    let out = revisp(&["convert", "--ckpt", "x.srisp"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_record(&out)["error"]["kind"], "usage");
    let out = revisp(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_record(&out)["error"]["kind"], "usage");
}

#[test]
fn help_and_version_succeed() {
    for flag in ["--help", "--version"] {
        let out = revisp(&[flag]);
        assert_eq!(out.status.code(), Some(0), "{flag}");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_revisp"))
        .args(["gradcheck"])
        .env("SRISP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failures_emit_a_machine_readable_record() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.srisp");
    std::fs::write(&bogus, b"SRISP001garbage").unwrap();
    let out = revisp(&["inspect-checkpoint", "--ckpt", s(&bogus)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_record(&out)["error"]["kind"], "format");
}

#[test]
fn incompatible_checkpoint_schema_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(0);
    let ckpt = Checkpoint::new(cfg.clone(), Model::init(cfg.train.model, 0).unwrap());
    let bytes = ckpt.to_bytes();
    let text = String::from_utf8_lossy(&bytes[16..]).into_owned();
    let patched = text.replacen("{\"schema\":1,", "{\"schema\":7,", 1);
    assert_ne!(patched, text);
    let mut out_bytes = bytes[..16].to_vec();
    out_bytes.extend_from_slice(patched.as_bytes());
    let p = dir.path().join("future.srisp");
    std::fs::write(&p, out_bytes).unwrap();
    let out = revisp(&["inspect-checkpoint", "--ckpt", s(&p)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_record(&out)["error"]["kind"], "schema");
}

#[test]
fn convert_with_identity_dictionaries_reproduces_the_input() {
    let dir = tempfile::tempdir().unwrap();
    common::write_paired(dir.path(), 2, 12, 16, 4);
    let cfg = common::tiny_config(0);
    let mut model = Model::init(cfg.train.model, 0).unwrap();
    model.set_identity_dictionaries().unwrap();
    let ckpt_path = dir.path().join("identity.srisp");
    Checkpoint::new(cfg, model).save(&ckpt_path).unwrap();

    let out = dir.path().join("out.png");
    let status = revisp(&[
        "convert",
        "--ckpt",
        s(&ckpt_path),
        "--input",
        s(&dir.path().join("rgb_00.png")),
        "--reference",
        s(&dir.path().join("raw_01.png")),
        "--out",
        s(&out),
    ]);
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let input = load_rgb(&dir.path().join("rgb_00.png")).unwrap();
    let (converted, sidecar) = load_raw_with_sidecar(&out).unwrap();
    assert_eq!(sidecar.camera_id, "cam-b");
    let step = 0.5 / (sidecar.white_level - sidecar.black_level) as f32;
    assert!(converted.max_abs_diff(&input).unwrap() <= step + 1e-6);
    assert!(out.with_extension("run.json").exists());
}

#[test]
fn eval_paired_with_perfect_predictions_hits_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::with_pred_equal_gt(&common::write_paired(dir.path(), 3, 10, 7, 2));
    let report = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    let out = revisp(&[
        "eval-paired",
        "--manifest",
        s(&manifest),
        "--out",
        s(&report),
        "--csv",
        s(&csv),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for row in rows {
        assert_eq!(row["psnr_db"], 99.0);
        assert_eq!(row["ae_deg"], 0.0);
    }
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(csv_text.lines().count(), 8);
    assert!(csv_text.lines().last().unwrap().starts_with("mean,99,0,"));
}

#[test]
fn eval_paired_needs_predictions_or_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_paired(dir.path(), 1, 4, 4, 2);
    let out = revisp(&["eval-paired", "--manifest", s(&manifest)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_paired_runs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_paired(dir.path(), 2, 8, 12, 5);
    let cfg = common::tiny_config(0);
    let ckpt = dir.path().join("m.srisp");
    Checkpoint::new(cfg.clone(), Model::init(cfg.train.model, 0).unwrap())
        .save(&ckpt)
        .unwrap();
    let out = revisp(&[
        "eval-paired",
        "--manifest",
        s(&manifest),
        "--ckpt",
        s(&ckpt),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["aggregate"]["count"], 4);
    assert_eq!(r["run"]["checkpoint_id"].as_str().unwrap().len(), 64);
}

#[test]
fn eval_hi_of_a_set_with_itself_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_paired(dir.path(), 3, 6, 6, 9);
    let out = revisp(&[
        "eval-hi",
        "--generated",
        s(&manifest),
        "--reference",
        s(&manifest),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["hi"], 1.0);
    assert_eq!(r["generated_images"], 3);
}

#[test]
fn gen_pseudo_is_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_paired(&dir.path().join("in"), 4, 9, 11, 1);
    let out = dir.path().join("pseudo");
    let run = |threads: &str| {
        let _ = std::fs::remove_dir_all(&out);
        let o = std::process::Command::new(env!("CARGO_BIN_EXE_revisp"))
            .args([
                "gen-pseudo",
                "--manifest",
                s(&manifest),
                "--out",
                s(&out),
                "--seed",
                "7",
            ])
            .env("SRISP_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        common::dir_snapshot(&out)
    };
    let first = run("1");
    assert_eq!(first.len(), 6, "four images, manifest, run record");
    assert_eq!(run("3"), first);

    let m = Manifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(m.raw_indices().len(), 4);
    assert_eq!(m.load_rgb(2).unwrap().shape(), &[9, 11, 3]);
}

#[test]
fn gen_pseudo_seed_changes_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_paired(&dir.path().join("in"), 2, 8, 8, 1);
    let files = |seed: &str| {
        let out = dir.path().join(seed);
        let o = revisp(&[
            "gen-pseudo",
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
            "--seed",
            seed,
        ]);
        assert!(o.status.success());
        std::fs::read(out.join("pseudo_00000.png")).unwrap()
    };
    assert_ne!(files("1"), files("2"));
}

#[test]
fn train_resume_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_paired(&dir.path().join("in"), 4, 16, 16, 3);
    let cfg_path = dir.path().join("cfg.json");
    common::write_config(&cfg_path, &common::tiny_config(0));

    let full = dir.path().join("full");
    let o = revisp(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&full),
        "--config",
        s(&cfg_path),
        "--seed",
        "11",
        "--epochs",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(full.join("metrics.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 4, "two steps per epoch");
    let record: Value =
        serde_json::from_slice(&std::fs::read(full.join("run_record.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 11);
    assert_eq!(record["config_hash"].as_str().unwrap().len(), 64);

    let part = dir.path().join("part");
    let o = revisp(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&part),
        "--config",
        s(&cfg_path),
        "--seed",
        "11",
        "--epochs",
        "1",
    ]);
    assert!(o.status.success());
    let o = revisp(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&part),
        "--epochs",
        "2",
        "--resume",
        s(&part.join("checkpoint.srisp")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read_to_string(part.join("metrics.ndjson")).unwrap(),
        log
    );
    assert_eq!(
        std::fs::read(part.join("checkpoint.srisp")).unwrap(),
        std::fs::read(full.join("checkpoint.srisp")).unwrap()
    );

    let o = revisp(&[
        "inspect-checkpoint",
        "--ckpt",
        s(&full.join("checkpoint.srisp")),
    ]);
    assert!(o.status.success());
    let info: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(info["epoch"], 2);
    assert_eq!(info["step"], 4);
    assert_eq!(info["model"]["k"], 5);
}

#[test]
fn train_uses_unpaired_rgb_for_teacher_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = common::write_paired(dir.path(), 4, 16, 16, 8);
    let mut m = Manifest::load(&manifest_path).unwrap();
    m.entries[3].raw_path = None;
    m.entries[3].meta_path = None;
    m.save(&manifest_path).unwrap();
    let mut cfg = common::tiny_config(2);
    cfg.train.warmup_epochs = 0;
    cfg.train.batch_size = 3;
    cfg.train.batch_pp_rand = 2;
    cfg.train.batch_pp_mt = 1;
    cfg.train.epochs = 1;
    let cfg_path = dir.path().join("cfg.json");
    common::write_config(&cfg_path, &cfg);
    let out = dir.path().join("run");
    let o = revisp(&[
        "train",
        "--manifest",
        s(&manifest_path),
        "--out",
        s(&out),
        "--config",
        s(&cfg_path),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("metrics.ndjson")).unwrap();
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["loss_pp_mt"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("cases.json");
    let o = revisp(&["gradcheck", "--seed", "1", "--out", s(&out_path)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
    let cases: Value = serde_json::from_slice(&std::fs::read(&out_path).unwrap()).unwrap();
    assert_eq!(cases.as_array().unwrap().len(), stdout.lines().count());
}
