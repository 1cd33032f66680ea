use std::path::Path;
use std::process::{Command, Output};

fn gradweave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradweave"))
        .args(args)
        .env("GRADWEAVE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 6] = ["--train-samples", "8", "--eval-samples", "4", "--batch-size", "4"];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--mode", "baseline", "--seed", "1", "--epochs", "5", "--out"];
    let out = out.to_str().unwrap();
    args.push(out);
    args.extend(SMALL);
    args.extend(extra);
    gradweave(&args)
}

fn parse_metrics(line: &str) -> (f64, f64) {
    let mut parts = line.trim().split(' ');
    let mae = parts.next().unwrap().strip_prefix("mae=").unwrap().parse().unwrap();
    let f = parts.next().unwrap().strip_prefix("max_f=").unwrap().parse().unwrap();
    (mae, f)
}

#[test]
fn train_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = train(&a, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["diag.csv", "model.ckpt", "summary.txt", "config.txt"] {
        assert!(a.join(name).exists(), "{name} missing");
    }
    let (mae, f) = parse_metrics(&stdout(&out));
    assert!((0.0..=1.0).contains(&mae) && (0.0..=1.0).contains(&f));
    assert!(train(&b, &[]).status.success());
    assert_eq!(std::fs::read(a.join("diag.csv")).unwrap(), std::fs::read(b.join("diag.csv")).unwrap());
    let diag = std::fs::read_to_string(a.join("diag.csv")).unwrap();
    assert_eq!(diag.lines().count(), 1 + 5 * 2);
    let config = std::fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(config.contains("mode = baseline\n"));
    assert!(config.contains("epochs = 5\n"));
}

#[test]
fn negative_eta_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), &["--eta", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--eta"), "{}", stderr(&out));
}

#[test]
fn unknown_mode_and_bad_config_file_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = gradweave(&["train", "--mode", "turbo", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--mode"));
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "speed = 11\n").unwrap();
    let out = gradweave(&["train", "--config", conf.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--config"));
}

#[test]
fn config_file_values_are_used_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "epochs = 1\neta = 0.5\nseed = 9\n").unwrap();
    let out_dir = dir.path().join("o");
    let out = train(&out_dir, &["--config", conf.to_str().unwrap(), "--eta", "0.25"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let config = std::fs::read_to_string(out_dir.join("config.txt")).unwrap();
    // --epochs 5 and --seed 1 come from the command line in `train`.
    assert!(config.contains("eta = 0.25\n"));
    assert!(config.contains("epochs = 5\n"));
    assert!(config.contains("seed = 1\n"));
}

#[test]
fn eval_improves_on_untrained_model_and_writes_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let trained = dir.path().join("trained");
    let untrained = dir.path().join("untrained");
    let args = ["--mode", "full", "--eta", "1.0", "--seed", "2", "--train-samples", "16", "--batch-size", "4"];
    let mut t = vec!["train", "--epochs", "6", "--out", trained.to_str().unwrap()];
    t.extend(args);
    assert!(gradweave(&t).status.success());
    let mut u = vec!["train", "--epochs", "1", "--eta", "1e-12", "--out", untrained.to_str().unwrap()];
    u.extend(args.iter().filter(|a| **a != "1.0" && **a != "--eta"));
    assert!(gradweave(&u).status.success());

    let eval = |ckpt: &Path, out: &Path| {
        gradweave(&[
            "eval", "--checkpoint", ckpt.join("model.ckpt").to_str().unwrap(), "--split", "train",
            "--seed", "2", "--train-samples", "16", "--out", out.to_str().unwrap(),
        ])
    };
    let e1 = eval(&trained, &dir.path().join("e1"));
    let e0 = eval(&untrained, &dir.path().join("e0"));
    assert!(e1.status.success(), "{}", stderr(&e1));
    assert!(e0.status.success(), "{}", stderr(&e0));
    let (mae1, _) = parse_metrics(&stdout(&e1));
    let (mae0, _) = parse_metrics(&stdout(&e0));
    assert!(mae1 < mae0, "{mae1} vs {mae0}");

    let metrics = std::fs::read_to_string(dir.path().join("e1/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 17);
    assert!(dir.path().join("e1/pred_00015.pgm").exists());
}

#[test]
fn eval_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = gradweave(&["eval", "--checkpoint", dir.path().join("none.ckpt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = gradweave(&["eval", "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_rejects_manifest_of_other_size() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train(&run, &[]).status.success());
    // A 16x16 image pair against a 32x32 model.
    let set = dir.path().join("set");
    std::fs::create_dir_all(&set).unwrap();
    let mut pgm = b"P5\n16 16\n255\n".to_vec();
    pgm.extend(std::iter::repeat_n(0u8, 256));
    for name in ["r.pgm", "t.pgm", "gt.pgm"] {
        std::fs::write(set.join(name), &pgm).unwrap();
    }
    std::fs::write(set.join("manifest.txt"), "index,path_R,path_T,path_GT\n0,r.pgm,t.pgm,gt.pgm\n").unwrap();
    let out = gradweave(&[
        "eval", "--checkpoint", run.join("model.ckpt").to_str().unwrap(),
        "--manifest", set.join("manifest.txt").to_str().unwrap(),
        "--out", dir.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_reports_eps() {
    let out = gradweave(&["gradcheck", "--eps", "1e-5", "--points", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().next().unwrap().contains("eps=1e-5"), "{text}");
    assert!(text.contains("gradcheck passed"));
}

#[test]
fn gradcheck_fault_injection_fails() {
    let out = gradweave(&["gradcheck", "--points", "2", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("path=theta_D.b2"), "{}", stderr(&out));
}

#[test]
fn gradcheck_rejects_bad_eps() {
    let out = gradweave(&["gradcheck", "--eps", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--eps"));
}

#[test]
fn ablate_writes_four_arm_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = gradweave(&[
        "ablate", "--seeds", "1", "--epochs", "1", "--train-samples", "4", "--eval-samples", "2",
        "--batch-size", "4", "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "arm,seeds,median_mae,median_max_f,median_grad_ratio");
    assert!(lines[2].starts_with("+unimodal+deconflict,1,"));
    assert!(dir.path().join("deconflict/seed0/diag.csv").exists());
    assert_eq!(stdout(&out), table);
}
