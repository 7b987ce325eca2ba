use std::path::Path;
use std::process::{Command, Output};

fn kukan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kukan")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&kukan(&[])), 1);
    assert_eq!(code(&kukan(&["gen-data", "--seed", "minus-one"])), 1);
    assert_eq!(code(&kukan(&["eval", "--data", "x"])), 1);
    assert_eq!(code(&kukan(&["--help"])), 0);
}

#[test]
fn config_files_are_strict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "phantoms = 3\nsplit = 1:1:1\nwarp_factor = 9\n").unwrap();
    let out = kukan(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_factor"));

    std::fs::write(dir.path().join("geom.cfg"), "h = 32\nk = 36\nradius = 2\n").unwrap();
    std::fs::write(&cfg, "phantoms = 3\ngeometry = geom.cfg\n").unwrap();
    assert_eq!(code(&kukan(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("d"))])), 1);
}

#[test]
fn gen_data_train_eval_and_diag_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(dir.path().join("geom.cfg"), "K = 8\n").unwrap();
    std::fs::write(&cfg, "# smoke run\nphantoms = 3\nsplit = 1:1:1\nepochs = 1\ngeometry = geom.cfg\n").unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));

    let out = kukan(&["gen-data", "--config", p(&cfg), "--seed", "12", "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(data.join("geometry.cfg")).unwrap().contains("K = 8"));
    assert!(std::fs::read_to_string(data.join("dataset.cfg")).unwrap().contains("seed = 12"));

    let out = kukan(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--quiet"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ckpt = run.join("best.ckpt");
    let out = kukan(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "val"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(run.join("eval").join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("sample_id,psnr_db,ssim,perc_dist\n"));
    assert_eq!(metrics.lines().count(), 4);

    let out = kukan(&["diag", "--checkpoint", p(&ckpt), "--trials", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("grad_all_passed = true"));
    assert!(run.join("diag").join("spectrum.csv").exists());
}

#[test]
fn mismatched_checkpoint_and_dataset_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.cfg"), dir.path().join("b.cfg"));
    std::fs::write(dir.path().join("geom.cfg"), "K = 8\n").unwrap();
    std::fs::write(&a, "phantoms = 3\nsplit = 1:1:1\nepochs = 1\n").unwrap();
    std::fs::write(&b, "phantoms = 3\nsplit = 1:1:1\nepochs = 1\ngeometry = geom.cfg\n").unwrap();
    let (da, db, run) = (dir.path().join("da"), dir.path().join("db"), dir.path().join("run"));
    assert_eq!(code(&kukan(&["gen-data", "--config", p(&a), "--out", p(&da)])), 0);
    assert_eq!(code(&kukan(&["gen-data", "--config", p(&b), "--out", p(&db)])), 0);
    assert_eq!(code(&kukan(&["train", "--config", p(&a), "--data", p(&da), "--out", p(&run), "--quiet"])), 0);
    let out = kukan(&["eval", "--checkpoint", p(&run.join("last.ckpt")), "--data", p(&db)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn numerical_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "phantoms = 3\nsplit = 1:1:1\nepochs = 4\nlr = 1e300\n").unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    assert_eq!(code(&kukan(&["gen-data", "--config", p(&cfg), "--out", p(&data)])), 0);
    let out = kukan(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--quiet"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("param_norms.csv").exists());
}

#[test]
fn grad_check_writes_its_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = kukan(&["grad-check", "--trials", "3", "--filter", "koopman", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("grad_check.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
    assert!(csv.lines().skip(1).all(|l| l.contains("koopman") && l.ends_with(",true")));
}
