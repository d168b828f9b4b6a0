use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn evoprompt(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evoprompt"));
    cmd.args(args);
    if let Some(o) = out {
        cmd.arg("--out").arg(o);
    }
    cmd.output().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    let o = evoprompt(&["bogus"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(evoprompt(&["train", "--frobnicate"], None).status.code(), Some(1));
    assert_eq!(evoprompt(&["ablate", "--variant", "no_everything"], None).status.code(), Some(1));
    assert_eq!(evoprompt(&["--help"], None).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = evoprompt(&["train", "--set", "loss.tau=-1"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1));
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "evolution.mu=4\nloss.unknown=1\n").unwrap();
    let o = evoprompt(&["train", "--config", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_tiny_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = evoprompt(&["gradcheck", "--config", "tiny"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradient check passed"));
}

#[test]
fn divergence_exits_2_after_writing_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = evoprompt(&["train", "--config", "tiny", "--set", "optim.lr=1e300"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("run.command=train\n"));
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn manifest_reproduces_outputs_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = evoprompt(&["train", "--config", "tiny", "--seed", "7"], Some(&first));
    assert!(o.status.success());
    for f in ["manifest.txt", "report.json", "epochs.csv", "alphas.csv", "checkpoint.bin"] {
        assert!(first.join(f).exists(), "{f}");
    }
    let manifest = first.join("manifest.txt");
    let saved = dir.path().join("manifest.txt");
    fs::copy(&manifest, &saved).unwrap();
    let text = fs::read_to_string(&saved).unwrap();
    assert!(text.contains("seed=7") && text.contains("artifact.epochs.csv="));

    fs::remove_dir_all(&first).unwrap();
    let o = evoprompt(&["train", "--config", saved.to_str().unwrap()], Some(&first));
    assert!(o.status.success());
    for f in ["report.json", "epochs.csv", "alphas.csv", "checkpoint.bin"] {
        let digest = text.lines().find_map(|l| l.strip_prefix(&format!("artifact.{f}="))).unwrap();
        use sha2::Digest;
        let now = hex::encode(sha2::Sha256::digest(fs::read(first.join(f)).unwrap()));
        assert_eq!(now, digest, "{f}");
    }
}

#[test]
fn ablate_all_writes_one_directory_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let o = evoprompt(&["ablate", "--variant", "all", "--config", "tiny"], Some(dir.path()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(summary.lines().count(), 8);
    for v in ["full", "no_mpp", "no_shared", "full_rank", "no_evolution", "no_kcl", "no_fgr"] {
        assert!(dir.path().join(v).join("epochs.csv").exists(), "{v}");
    }
}

#[test]
fn trace_alphas_from_report_and_param_count() {
    let dir = tempfile::tempdir().unwrap();
    assert!(evoprompt(&["train", "--config", "tiny"], Some(dir.path())).status.success());
    let report = dir.path().join("report.json");
    let o = evoprompt(&["trace-alphas", "--report", report.to_str().unwrap()], Some(dir.path()));
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 2 * 2);
    assert!(dir.path().join("alpha_trace.json").exists());

    let o = evoprompt(&["param-count", "--config", "tiny"], Some(dir.path()));
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("baseline"));
}

#[test]
fn eval_and_breakpoint_on_tiny() {
    let dir = tempfile::tempdir().unwrap();
    let o = evoprompt(&["eval", "--config", "tiny", "--export-task"], Some(dir.path()));
    assert!(o.status.success());
    assert!(dir.path().join("task.csv").exists() && dir.path().join("eval.json").exists());
    let o = evoprompt(&["breakpoint", "--config", "tiny", "--seeds", "2"], Some(dir.path()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("breakpoint.csv")).unwrap();
    // 2 seeds x 2 variants x 6 epochs plus header
    assert_eq!(csv.lines().count(), 25);
}
