use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_quasipot"));
    c.env("RUST_LOG", "warn");
    c
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/smoke.cfg")
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    let mut c = bin();
    c.args(args).arg("--config").arg(config).arg("--out").arg(out);
    c.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with_steps(dir: &Path, steps: u64) -> PathBuf {
    let text = fs::read_to_string(smoke_config()).unwrap().replace("steps = 2000", &format!("steps = {steps}"));
    let path = dir.join(format!("steps{steps}.cfg"));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn stages_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = smoke_config();
    let started = std::time::Instant::now();
    for stage in ["sample", "train", "regress", "analyze"] {
        let o = run(&[stage], &cfg, &out);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    eprintln!("smoke pipeline took {:.1} s", started.elapsed().as_secs_f64());

    let telemetry = fs::read_to_string(out.join("telemetry.csv")).unwrap();
    assert_eq!(telemetry.lines().count(), 1 + 2000);
    assert!(telemetry.starts_with("step,data_loss,orth_loss,lr"));

    let coef = fs::read_to_string(out.join("coefficients.txt")).unwrap();
    assert!(coef.contains("\n[V]\n") && coef.contains("\n[g3]\n") && coef.contains("\n[f1]\n"));
    let summary = fs::read_to_string(out.join("report/summary.txt")).unwrap();
    let hash = summary.lines().next().unwrap().strip_prefix("config_hash ").unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for name in ["dataset.qpds", "model.qpnn", "telemetry.csv", "coefficients.txt", "report/summary.txt", "report/z_table.csv"] {
        let meta = fs::read_to_string(out.join(format!("{name}.meta.json"))).unwrap();
        assert!(meta.contains(&hash), "{name} sidecar lacks the config hash");
    }
    assert!(out.join("report/density_eps_1e-1.svg").exists());

    let first = fs::read(out.join("report/summary.txt")).unwrap();
    let o = run(&["analyze"], &cfg, &out);
    assert!(o.status.success());
    assert_eq!(fs::read(out.join("report/summary.txt")).unwrap(), first);
    assert_eq!(String::from_utf8_lossy(&o.stdout).as_bytes(), &first[..]);
}

#[test]
fn sampling_is_reproducible_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run(&["sample"], &cfg, &a).status.success());
    assert!(run(&["sample"], &cfg, &b).status.success());
    assert!(run(&["sample", "--seed", "12"], &cfg, &c).status.success());
    let bytes = fs::read(a.join("dataset.qpds")).unwrap();
    assert_eq!(&bytes[..5], b"QPDS1");
    assert_eq!(bytes.len(), 41 + 1000 * 6 * 8);
    assert_eq!(bytes, fs::read(b.join("dataset.qpds")).unwrap());
    assert_ne!(bytes, fs::read(c.join("dataset.qpds")).unwrap());
    let csv = fs::read_to_string(a.join("dataset.csv")).unwrap();
    assert!(csv.starts_with("x0_1,x0_2,x0_3,xh_1,xh_2,xh_3\n"));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let (short, long) = (with_steps(dir.path(), 300), with_steps(dir.path(), 500));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(run(&["sample"], &long, out).status.success());
    }
    assert!(run(&["train"], &long, &a).status.success());

    let o = run(&["train"], &short, &b);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = dir.path().join("k300.qpnn");
    fs::copy(b.join("model.qpnn"), &ckpt).unwrap();
    fs::copy(b.join("model.qpnn.meta.json"), dir.path().join("k300.qpnn.meta.json")).unwrap();
    let o = run(&["train", "--resume", ckpt.to_str().unwrap()], &long, &b);
    assert!(o.status.success(), "{}", stderr(&o));

    assert_eq!(fs::read(a.join("model.qpnn")).unwrap(), fs::read(b.join("model.qpnn")).unwrap());
    assert_eq!(fs::read(a.join("telemetry.csv")).unwrap(), fs::read(b.join("telemetry.csv")).unwrap());
}

#[test]
fn exit_codes_and_hash_guard() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = smoke_config();

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, fs::read_to_string(&cfg).unwrap().replace("h = 0.01", "h = -0.01")).unwrap();
    let o = run(&["sample"], &bad, &out);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("sampling"));

    let o = run(&["train"], &cfg, &out);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    assert!(run(&["sample"], &cfg, &out).status.success());
    let other = with_steps(dir.path(), 10);
    let reseeded = dir.path().join("reseeded.cfg");
    fs::write(&reseeded, fs::read_to_string(&other).unwrap().replace("seed = 11", "seed = 99")).unwrap();
    let o = run(&["train"], &reseeded, &out);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("hash"));
    let o = run(&["train", "--force"], &reseeded, &out);
    assert!(o.status.success(), "{}", stderr(&o));

    let data = out.join("dataset.qpds");
    let mut bytes = fs::read(&data).unwrap();
    bytes.truncate(100);
    fs::write(&data, bytes).unwrap();
    let o = run(&["train"], &other, &out);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("offset"), "{}", stderr(&o));

    let o = run(&["regress", "--resume", "x"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2));
}
