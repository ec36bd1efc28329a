use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
levels = 2
base_channels = 4
dropout_sites = [1]
[sampler]
epochs = 6
cycles = 2
restart_epochs = 1
stride = 1
burn_in = 0.5
[scene]
height = 16
width = 16
lv_radius = [2.0, 2.5]
myo_thickness = [1.0, 1.5]
rv_radius = [1.0, 1.5]
max_offset = 0.5
[counts]
train = 6
val = 4
test_in = 4
test_shift = 4
[protocol]
samples = 3
members = 2
[sweep]
temperatures = [0.0, 0.00001]
samples = 3
n_sigma = 2
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    Workspace { _dir: dir, root, config }
}

fn hmcseg(ws: &Workspace, out: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmcseg"))
        .args(args)
        .arg("--config")
        .arg(&ws.config)
        .arg("--out")
        .arg(ws.root.join(out))
        .env("HMCSEG_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn pipeline(ws: &Workspace, out: &str) {
    ok(&hmcseg(ws, out, &["gen-data"]));
    for p in ["sghmc-multi", "mc-dropout", "vanilla"] {
        ok(&hmcseg(ws, out, &["train", "--protocol", p]));
        for cmd in ["infer", "calibrate", "diversity", "failures"] {
            ok(&hmcseg(ws, out, &[cmd, "--protocol", p]));
        }
    }
    ok(&hmcseg(ws, out, &["report"]));
}

#[test]
fn pipeline_is_deterministic_and_report_is_idempotent() {
    let ws = workspace();
    pipeline(&ws, "a");
    pipeline(&ws, "b");
    let a = ws.root.join("a");
    let b = ws.root.join("b");

    let files = [
        "data/dataset.json",
        "runs/sghmc-multi/manifest.json",
        "runs/sghmc-multi/chain-0/final.sghc",
        "reports/calibration/sghmc-multi.csv",
        "reports/infer/mc-dropout.csv",
        "reports/diversity/sghmc-multi.csv",
        "reports/failures/vanilla.csv",
        "reports/schedule/sghmc-multi.csv",
        "summary/calibration.csv",
        "summary/failures.csv",
    ];
    for f in files {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs between identical runs");
    }

    let summary = read(&a.join("summary/calibration.csv"));
    ok(&hmcseg(&ws, "a", &["report"]));
    assert_eq!(read(&a.join("summary/calibration.csv")), summary);

    let text = String::from_utf8(summary).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("source,set,members,nll,nll_std,ece"), "{header}");
    for p in ["sghmc-multi", "mc-dropout", "vanilla"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{p},test_shift,"))), "{p}");
    }

    let ckpts: Vec<_> = std::fs::read_dir(a.join("runs/sghmc-multi/chain-0")).unwrap().collect();
    assert!(ckpts.len() >= 2);
    let prov: serde_json::Value =
        serde_json::from_slice(&read(&a.join("provenance/train-sghmc-multi.json"))).unwrap();
    assert_eq!(prov["command"], "train");
    assert_eq!(prov["extra"]["schedule"][0].as_array().unwrap().len(), 6);
    assert!(prov["config_hash"].as_str().unwrap().len() >= 16);
}

#[test]
fn provenance_config_reproduces_training() {
    let ws = workspace();
    ok(&hmcseg(&ws, "a", &["train", "--seed", "5", "--temperature", "0.0001"]));
    let snapshot = ws.root.join("a/provenance/train-sghmc-multi.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_hmcseg"))
        .args(["train", "--config"])
        .arg(&snapshot)
        .arg("--out")
        .arg(ws.root.join("b"))
        .output()
        .unwrap();
    ok(&out);
    for f in ["runs/sghmc-multi/chain-0/final.sghc", "reports/schedule/sghmc-multi.csv"] {
        assert_eq!(read(&ws.root.join("a").join(f)), read(&ws.root.join("b").join(f)), "{f}");
    }
}

#[test]
fn sweep_writes_one_row_per_setting() {
    let ws = workspace();
    ok(&hmcseg(&ws, "s", &["sweep"]));
    let text = String::from_utf8(read(&ws.root.join("s/reports/sweep/sweep.csv"))).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("temperature,augment,lambda,nll,ece,mean_dice"));
}

#[test]
fn oracle_passes_and_writes_checks() {
    let ws = workspace();
    let o = hmcseg(&ws, "o", &["oracle"]);
    ok(&o);
    let text = String::from_utf8(read(&ws.root.join("o/reports/oracle/oracle.csv"))).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")), "{text}");
}

#[test]
fn validation_errors_exit_with_one() {
    let ws = workspace();
    let bad = ws.root.join("bad.toml");
    std::fs::write(&bad, "[sampler]\nepocs = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hmcseg"))
        .args(["gen-data", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);

    assert_eq!(code(&hmcseg(&ws, "v", &["train", "--protocol", "bogus"])), 1);
    assert_eq!(code(&hmcseg(&ws, "v", &["train", "--samples", "0"])), 1);
    assert_eq!(code(&hmcseg(&ws, "v", &["not-a-command"])), 1);
    // evaluation before training
    assert_eq!(code(&hmcseg(&ws, "v", &["calibrate"])), 1);
    assert_eq!(code(&hmcseg(&ws, "v", &["report"])), 1);

    let threads = Command::new(env!("CARGO_BIN_EXE_hmcseg"))
        .arg("gen-data")
        .arg("--out")
        .arg(ws.root.join("t"))
        .env("HMCSEG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 1);
}

#[test]
fn mismatched_dataset_is_a_validation_error() {
    let ws = workspace();
    ok(&hmcseg(&ws, "d", &["gen-data"]));
    assert_eq!(code(&hmcseg(&ws, "d", &["train", "--seed", "2"])), 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let ws = workspace();
    ok(&hmcseg(&ws, "r", &["train", "--protocol", "vanilla"]));
    let ckpt = ws.root.join("r/runs/vanilla/chain-0/final.sghc");
    let mut bytes = read(&ckpt);
    let n = bytes.len();
    bytes[n - 8] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();
    let o = hmcseg(&ws, "r", &["infer", "--protocol", "vanilla"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("CRC"));
}
