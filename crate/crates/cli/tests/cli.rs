use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn metacl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metacl")).args(args).output().unwrap()
}

fn smoke_config(dir: &Path) -> PathBuf {
    let preset = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic-smoke.toml");
    let text = fs::read_to_string(preset).unwrap();
    let path = dir.join("smoke.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_summarize_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = metacl(&["run", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("learned"), "{stdout}");

    let out = metacl(&["summarize", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("sgd"));

    let ckpt = out_dir.join("checkpoints/seed-0.mcl");
    let out = metacl(&["inspect-checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("theta/learned/layer0.weight"));
}

#[test]
fn exit_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "lr_rate = 1\n").unwrap();
    let out = metacl(&["run", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr_rate"));

    let missing = dir.path().join("missing.toml");
    assert_eq!(metacl(&["run", missing.to_str().unwrap()]).status.code(), Some(3));

    let junk = dir.path().join("junk.mcl");
    fs::write(&junk, b"XXXX\x01\x00\x00\x00").unwrap();
    assert_eq!(metacl(&["inspect-checkpoint", junk.to_str().unwrap()]).status.code(), Some(3));

    let no_data = dir.path().join("nodata.toml");
    let text = format!(
        "kind = \"baseline\"\nseeds = [0]\noutput_dir = \"{}\"\n[data]\nmnist_dir = \"{}\"\n",
        dir.path().join("o").display(),
        dir.path().join("nowhere").display()
    );
    fs::write(&no_data, text).unwrap();
    assert_eq!(metacl(&["run", no_data.to_str().unwrap()]).status.code(), Some(3));

    let diverge = dir.path().join("diverge.toml");
    let text = format!(
        "kind = \"baseline\"\nseeds = [0]\nrules = [\"sgd\"]\noutput_dir = \"{}\"\n\
         [data]\nsource = \"synthetic\"\n[continual.rules]\nsgd_lr = 1e300\n",
        dir.path().join("d").display()
    );
    fs::write(&diverge, text).unwrap();
    let out = metacl(&["run", diverge.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
