//! End-to-end tests of the `pdanet` binary: artifacts, exit codes,
//! determinism, and format contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pdanet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn synth_dataset(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let out = run(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--image-size",
        "32",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir.join("manifest.csv")
}

fn quick_train(manifest: &Path, out_dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train".to_string(),
        format!("manifest={}", manifest.display()),
        format!("out_dir={}", out_dir.display()),
        "epochs=3".to_string(),
        "drop_at_epoch=2".to_string(),
        "batch_size=4".to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let out = bin().args(&args).output().expect("binary runs");
    out
}

#[test]
fn synth_writes_count_images_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&tmp.path().join("data"), 16, 7);
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().count(), 16);
    let images: Vec<_> = std::fs::read_dir(tmp.path().join("data/images"))
        .unwrap()
        .collect();
    assert_eq!(images.len(), 16);
}

#[test]
fn synth_same_seed_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let m1 = synth_dataset(&tmp.path().join("a"), 8, 5);
    let m2 = synth_dataset(&tmp.path().join("b"), 8, 5);
    assert_eq!(
        std::fs::read(&m1).unwrap(),
        std::fs::read(&m2).unwrap(),
        "manifests differ"
    );
    for entry in std::fs::read_dir(tmp.path().join("a/images")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(tmp.path().join("a/images").join(&name)).unwrap();
        let b = std::fs::read(tmp.path().join("b/images").join(&name)).unwrap();
        assert_eq!(a, b, "image {name:?} differs");
    }
}

#[test]
fn train_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&tmp.path().join("data"), 24, 11);
    let run_dir = tmp.path().join("run");
    let out = quick_train(&manifest, &run_dir, &["mode=S+CW", "loss=pcr", "pcr_lambda=0.5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for artifact in [
        "checkpoint.pdck",
        "history.csv",
        "report.txt",
        "report.kv",
        "config.effective.cfg",
    ] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }
    let history = std::fs::read_to_string(run_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4); // header + 3 epochs
}

#[test]
fn invalid_config_exits_2() {
    let out = run(&["train", "nonsense_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nonsense_key"));

    let out = run(&["train", "synth_count=8"]); // no out_dir
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["train", "manifest=/no/such/file.csv", "out_dir=/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&tmp.path().join("data"), 16, 3);
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    assert!(quick_train(&manifest, &r1, &[]).status.success());
    assert!(quick_train(&manifest, &r2, &[]).status.success());
    assert_eq!(
        std::fs::read(r1.join("history.csv")).unwrap(),
        std::fs::read(r2.join("history.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(r1.join("checkpoint.pdck")).unwrap(),
        std::fs::read(r2.join("checkpoint.pdck")).unwrap()
    );
}

#[test]
fn pcr_with_zero_lambda_reproduces_mse_history_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&tmp.path().join("data"), 16, 13);
    let (r1, r2) = (tmp.path().join("mse"), tmp.path().join("pcr0"));
    assert!(quick_train(&manifest, &r1, &["loss=mse"]).status.success());
    assert!(quick_train(&manifest, &r2, &["loss=pcr", "pcr_lambda=0"])
        .status
        .success());
    assert_eq!(
        std::fs::read(r1.join("history.csv")).unwrap(),
        std::fs::read(r2.join("history.csv")).unwrap(),
        "loss=pcr with lambda=0 must reproduce the mse history byte for byte"
    );
}

#[test]
fn effective_config_reloads_to_same_run() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&tmp.path().join("data"), 16, 17);
    let r1 = tmp.path().join("r1");
    assert!(quick_train(&manifest, &r1, &["mode=S"]).status.success());
    // rerun purely from the emitted effective config, into a fresh out_dir
    let r2 = tmp.path().join("r2");
    let out = bin()
        .args([
            "train",
            "--config",
            r1.join("config.effective.cfg").to_str().unwrap(),
            &format!("out_dir={}", r2.display()),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        std::fs::read(r1.join("history.csv")).unwrap(),
        std::fs::read(r2.join("history.csv")).unwrap()
    );
    // and the two effective configs differ only in out_dir
    let c1 = std::fs::read_to_string(r1.join("config.effective.cfg")).unwrap();
    let c2 = std::fs::read_to_string(r2.join("config.effective.cfg")).unwrap();
    let strip = |s: &str| {
        s.lines()
            .filter(|l| !l.starts_with("out_dir="))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&c1), strip(&c2));
}

#[test]
fn eval_prints_vadm_header_and_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&tmp.path().join("data"), 24, 19);
    let run_dir = tmp.path().join("run");
    assert!(quick_train(&manifest, &run_dir, &[]).status.success());
    let eval_dir = tmp.path().join("eval");
    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.pdck").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let header = text.lines().next().unwrap();
    let (v, a, d, m) = (
        header.find(" V").unwrap(),
        header.find(" A").unwrap(),
        header.find(" D").unwrap(),
        header.find(" M").unwrap(),
    );
    assert!(v < a && a < d && d < m, "V/A/D/M order violated: {header}");
    assert!(eval_dir.join("eval-report.txt").exists());
    assert!(eval_dir.join("eval-report.kv").exists());
}

#[test]
fn eval_empty_manifest_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&tmp.path().join("data"), 16, 23);
    let run_dir = tmp.path().join("run");
    assert!(quick_train(&manifest, &run_dir, &[]).status.success());
    let empty = tmp.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoint.pdck").to_str().unwrap(),
        "--manifest",
        empty.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn lambda_search_singleton_grid_chooses_it() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&tmp.path().join("data"), 16, 29);
    let out = bin()
        .args([
            "lambda-search",
            &format!("manifest={}", manifest.display()),
            "epochs=2",
            "drop_at_epoch=1",
            "batch_size=4",
            "lambda_grid=0",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("chosen lambda: 0"));
}

#[test]
fn lambda_search_table_has_dedup_rows_and_consistent_argmin() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&tmp.path().join("data"), 16, 31);
    let out = bin()
        .args([
            "lambda-search",
            &format!("manifest={}", manifest.display()),
            "epochs=2",
            "drop_at_epoch=1",
            "batch_size=4",
            "lambda_grid=1,0.5,1,0.5,2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text
        .lines()
        .skip(1)
        .take_while(|l| !l.starts_with("chosen"))
        .collect();
    assert_eq!(rows.len(), 3, "grid should deduplicate to 3 rows:\n{text}");

    let mut best = (f64::INFINITY, f64::INFINITY);
    for row in &rows {
        let mut parts = row.split(',');
        let lambda: f64 = parts.next().unwrap().parse().unwrap();
        let mse: f64 = parts.next().unwrap().parse().unwrap();
        if mse < best.1 {
            best = (lambda, mse);
        }
    }
    let chosen: f64 = text
        .lines()
        .find(|l| l.starts_with("chosen lambda:"))
        .unwrap()
        .rsplit(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(chosen, best.0, "chosen lambda must match the table argmin");
}

#[test]
fn gradcheck_passes_and_lists_each_op_once() {
    let out = run(&["gradcheck", "--seed", "42"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let mut names: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .map(|l| l.split_whitespace().nth(1).unwrap())
        .collect();
    let total = names.len();
    assert!(total >= 20, "suite should cover every op, got {total}");
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), total, "duplicate op lines");
}

#[test]
fn gradcheck_fault_injection_exits_3_and_names_the_op() {
    let out = run(&["gradcheck", "--seed", "42", "--inject-fault", "sigmoid"]);
    assert_eq!(out.status.code(), Some(3));
    let text = stdout(&out);
    let fail_line = text
        .lines()
        .find(|l| l.starts_with("FAIL"))
        .expect("one FAIL line");
    assert!(fail_line.contains("sigmoid"));
    assert!(stderr(&out).contains("sigmoid"));
}

#[test]
fn export_attention_outputs_match_feature_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&tmp.path().join("data"), 16, 37);
    let run_dir = tmp.path().join("run");
    assert!(quick_train(&manifest, &run_dir, &[]).status.success());
    let image = {
        let text = std::fs::read_to_string(&manifest).unwrap();
        let first = text.lines().next().unwrap().split(',').next().unwrap();
        tmp.path().join("data").join(first)
    };
    let att_dir = tmp.path().join("att");
    let out = run(&[
        "export-attention",
        "--checkpoint",
        run_dir.join("checkpoint.pdck").to_str().unwrap(),
        "--input",
        image.to_str().unwrap(),
        "--out",
        att_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    // 32x32 input through four stride-2 stages gives a 2x2 grid
    let pgm = std::fs::read(att_dir.join("attention.pgm")).unwrap();
    let header = String::from_utf8_lossy(&pgm[..pgm.len().min(32)]).to_string();
    assert!(header.starts_with("P5\n2 2\n255\n"), "header: {header:?}");

    let pred_line = stdout(&out);
    let v_part = pred_line
        .lines()
        .find(|l| l.starts_with("prediction:"))
        .unwrap();
    // four decimals per component
    for field in ["v=", "a=", "d="] {
        let idx = v_part.find(field).unwrap() + 2;
        let token: String = v_part[idx..]
            .chars()
            .take_while(|c| !c.is_whitespace())
            .collect();
        let decimals = token.split('.').nth(1).unwrap();
        assert_eq!(decimals.len(), 4, "{token}");
    }

    let csv = std::fs::read_to_string(att_dir.join("attention.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 2);
}

#[test]
fn export_attention_upsamples_heatmap_only() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&tmp.path().join("data"), 16, 41);
    let run_dir = tmp.path().join("run");
    assert!(quick_train(&manifest, &run_dir, &[]).status.success());
    let image = {
        let text = std::fs::read_to_string(&manifest).unwrap();
        let first = text.lines().next().unwrap().split(',').next().unwrap();
        tmp.path().join("data").join(first)
    };
    let att_dir = tmp.path().join("att");
    let out = run(&[
        "export-attention",
        "--checkpoint",
        run_dir.join("checkpoint.pdck").to_str().unwrap(),
        "--input",
        image.to_str().unwrap(),
        "--out",
        att_dir.to_str().unwrap(),
        "--upsample",
        "8",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let pgm = std::fs::read(att_dir.join("attention.pgm")).unwrap();
    let header = String::from_utf8_lossy(&pgm[..pgm.len().min(32)]).to_string();
    assert!(header.starts_with("P5\n16 16\n255\n"), "header: {header:?}");
    let csv = std::fs::read_to_string(att_dir.join("attention.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "csv stays at native resolution");
}

#[test]
fn train_then_resume_matches_single_run() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&tmp.path().join("data"), 16, 43);
    let full = tmp.path().join("full");
    assert!(
        quick_train(&manifest, &full, &["epochs=4", "drop_at_epoch=1"])
            .status
            .success()
    );
    let half = tmp.path().join("half");
    assert!(
        quick_train(&manifest, &half, &["epochs=2", "drop_at_epoch=1"])
            .status
            .success()
    );
    let resumed = tmp.path().join("resumed");
    let out = quick_train(
        &manifest,
        &resumed,
        &[
            "epochs=4",
            "drop_at_epoch=1",
            &format!("resume={}", half.join("checkpoint.pdck").display()),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let strip_cfg = |p: &Path| {
        // checkpoints embed only numeric config, identical across these runs
        std::fs::read(p.join("checkpoint.pdck")).unwrap()
    };
    assert_eq!(
        strip_cfg(&full),
        strip_cfg(&resumed),
        "resumed checkpoint must equal the unbroken run's"
    );
}
