use std::path::Path;
use std::process::{Command, Output};

const SPEC: &str = "num_classes = 3
height = 8
width = 8
in_channels = 3
class_means = 0,0,0; 1.5,1.5,1.5; -1.5,1.5,-1.5
noise_sigma = 0.5
region_style = voronoi
min_region = 4
regions = 3
class_weights = 1,1,1
";

const CONFIG: &str = "epochs = 2
batch_size = 4
num_classes = 3
channels = 4
blocks = 2
stride = 2
holdout = 4
";

fn mcibi(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcibi")).args(args).current_dir(cwd).output().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.txt"), SPEC).unwrap();
    std::fs::write(dir.path().join("run.cfg"), CONFIG).unwrap();
    let out = mcibi(&["gen-data", "--spec", "spec.txt", "--count", "16", "--seed", "3", "--out", "data"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn help_and_bad_flags_set_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let help = mcibi(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["gen-data", "train", "eval", "compare", "inspect-memory", "bench", "gradcheck"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    assert_eq!(mcibi(&["train", "--help"], dir.path()).status.code(), Some(0));
    assert_eq!(mcibi(&["--no-such-flag"], dir.path()).status.code(), Some(1));
    assert_eq!(mcibi(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(mcibi(&["eval", "--checkpoint", "missing.mct", "--data", "x"], dir.path()).status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.cfg"), "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let out = mcibi(&["train", "--config", "bad.cfg", "--data", "data", "--out", "t"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn train_eval_inspect_and_rerun_are_consistent() {
    let dir = setup();
    let p = dir.path();
    for out in ["a", "b"] {
        let o = mcibi(&["train", "--config", "run.cfg", "--data", "data", "--out", out], p);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "memory.csv", "eval.json"] {
        assert_eq!(std::fs::read(p.join("a").join(f)).unwrap(), std::fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
    let metrics = std::fs::read_to_string(p.join("a/metrics.csv")).unwrap();
    assert!(metrics.starts_with("iter,lr,m_t,loss_W,loss_M,loss_O,total\n"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["epochs"], 2);
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);

    let e = mcibi(&["eval", "--checkpoint", "a/checkpoint.mct", "--data", "data", "--out", "e"], p);
    assert!(e.status.success());
    assert!(String::from_utf8_lossy(&e.stdout).starts_with("mIoU,"));
    assert!(p.join("e/confusion.csv").is_file() && p.join("e/manifest.json").is_file());

    let m = mcibi(&["inspect-memory", "--checkpoint", "a/checkpoint.mct", "--out", "m"], p);
    assert!(m.status.success());
    let cos = std::fs::read_to_string(p.join("m/memory_cosine.csv")).unwrap();
    assert_eq!(cos.lines().count(), 4);
}

#[test]
fn compare_emits_the_table_header() {
    let dir = setup();
    let out = mcibi(&["compare", "--config", "run.cfg", "--data", "data", "--out", "c", "--seeds", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("c/compare.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("variant,mIoU,params,seconds"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn gradcheck_and_bench_succeed() {
    let dir = setup();
    let g = mcibi(&["gradcheck"], dir.path());
    assert_eq!(g.status.code(), Some(0), "{}", String::from_utf8_lossy(&g.stdout));
    std::fs::write(dir.path().join("bench.cfg"), "stride = 2\nchannels = 8\n").unwrap();
    let b = mcibi(&["bench", "--config", "bench.cfg", "--reps", "2"], dir.path());
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    assert!(String::from_utf8_lossy(&b.stdout).starts_with("variant,params,extra_params,ms_per_image\n"));
}
