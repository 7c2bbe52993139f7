use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn iagc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iagc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, count: usize, size: usize, seed: u64) {
    let size = size.to_string();
    let o = iagc(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--height",
        &size,
        "--width",
        &size,
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

const TINY: &[&str] = &[
    "--embed-dim",
    "4",
    "--heads",
    "2",
    "--depth",
    "1",
    "--window-size",
    "8",
    "--crop-size",
    "16",
    "--epochs",
    "2",
    "--checkpoint-every",
    "1",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data-dir", data.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    iagc(&args)
}

#[test]
fn eval_on_identical_directories() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), 2, 16, 3);
    let gt = d.path().join("gt");
    let o = iagc(&["eval", "--pred", gt.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    assert!(last.contains("PSNR 99.0000 dB"), "{last}");
    assert!(last.contains("SSIM 1.000000"), "{last}");
}

#[test]
fn gen_data_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), 3, 12, 9);
    gen(b.path(), 3, 12, 9);
    for f in ["manifest.csv", "low/0001.ppm", "gt/0002.ppm"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), 1, 16, 0);
    let data = d.path().to_str().unwrap();

    let o = iagc(&["train", "--data-dir", data, "--set", "lerning_rate=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("valid keys"), "{}", stderr(&o));

    let o = iagc(&["train", "--data-dir", data, "--heads", "4"]);
    assert_eq!(o.status.code(), Some(1));

    assert_eq!(iagc(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(iagc(&["--help"]).status.code(), Some(0));

    let missing = d.path().join("missing");
    let o = iagc(&["eval", "--pred", missing.to_str().unwrap(), "--gt", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let p3 = d.path().join("ascii.ppm");
    fs::write(&p3, "P3\n1 1\n255\n0 0 0\n").unwrap();
    let ck = d.path().join("none.iagc");
    fs::write(&ck, b"IAGC\x01\0\0\0\0\0\0\0").unwrap();
    let out = d.path().join("o.ppm");
    let o = iagc(&[
        "infer",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--input",
        p3.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn train_infer_and_resume() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    gen(&data, 2, 16, 1);

    let full = d.path().join("full");
    let o = train(&data, &full, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(full.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,lr,loss,psnr_s1,psnr_s2,psnr_s3");
    assert_eq!(log.lines().count(), 1 + 2);
    let echo = fs::read_to_string(full.join("config.txt")).unwrap();
    assert!(echo.contains("embed_dim = 4\n"));
    assert!(fs::read_to_string(full.join("run.log")).unwrap().contains("# lr = "));

    let split = d.path().join("split");
    assert!(train(&data, &split, &["--until", "1"]).status.success());
    assert_eq!(fs::read_to_string(split.join("loss_log.csv")).unwrap().lines().count(), 2);
    let o = train(&data, &split, &["--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(split.join("loss_log.csv")).unwrap(), log);
    assert_eq!(fs::read(split.join("checkpoint.iagc")).unwrap(), fs::read(full.join("checkpoint.iagc")).unwrap());

    let out = d.path().join("enhanced.ppm");
    let stages = d.path().join("stages");
    let attn = d.path().join("attn");
    let low = data.join("low/0000.ppm");
    let o = iagc(&[
        "infer",
        "--checkpoint",
        full.join("checkpoint.iagc").to_str().unwrap(),
        "--input",
        low.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--dump-stages",
        stages.to_str().unwrap(),
        "--dump-attn",
        attn.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&out).unwrap(), fs::read(stages.join("r_s3.ppm")).unwrap());
    for f in ["r_s1.ppm", "r_s2.ppm", "gamma_l.ppm", "gamma_g.txt"] {
        assert!(stages.join(f).exists(), "{f}");
    }
    for f in ["sam_input.ppm", "sam_stage1.ppm", "attention.iagc"] {
        assert!(attn.join(f).exists(), "{f}");
    }
    assert!(fs::read(&out).unwrap().starts_with(b"P6\n16 16\n255\n"));
}

#[test]
fn cli_overrides_beat_config_file() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    gen(&data, 1, 16, 2);
    let cfg = d.path().join("run.conf");
    fs::write(&cfg, "# test\nlr = 4e-4\nseed = 5\nepochs = 1\n").unwrap();
    let out = d.path().join("run");
    let o = train(&data, &out, &["--config", cfg.to_str().unwrap(), "--lr", "1e-3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("lr = 0.001\n"), "{echo}");
    assert!(echo.contains("seed = 5\n"), "{echo}");
    assert!(echo.contains("epochs = 2\n"), "{echo}");
}

#[test]
fn grad_check_subset() {
    let o = iagc(&["grad-check", "--filter", "softmax"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert_eq!(s.lines().filter(|l| l.starts_with("PASS")).count(), 2, "{s}");
    assert!(s.contains("all 2 cases passed"));
    assert_eq!(iagc(&["grad-check", "--filter", "no-such-case"]).status.code(), Some(1));
}

#[test]
fn grad_check_failure_exits_nonzero() {
    let o = iagc(&["grad-check", "--filter", "exp", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn ablate_single_variant_row() {
    let o = iagc(&["ablate", "--variant", "A2", "--size", "16", "--count", "2", "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    let rows: Vec<&str> = s.lines().skip(1).collect();
    assert_eq!(rows.len(), 1, "{s}");
    assert!(rows[0].starts_with("A2 "), "{s}");
    assert_eq!(iagc(&["ablate", "--variant", "B7"]).status.code(), Some(1));
}

#[test]
fn bench_gamma_report() {
    let d = tempfile::tempdir().unwrap();
    let csv = d.path().join("bench.csv");
    let o = iagc(&["bench-gamma", "--elements", "4096", "--iterations", "3", "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    for key in ["element_count=4096", "exact_total_ns=", "taylor_total_ns=", "taylor_not_slower="] {
        assert!(s.contains(key), "{key} missing from {s}");
    }
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 4);
}
