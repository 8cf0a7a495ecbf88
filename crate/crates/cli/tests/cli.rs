use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ccdmr"));
    c.env_remove("CCDMR_OUT");
    c
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn help_lists_subcommands() {
    let o = bin().arg("--help").output().unwrap();
    assert!(o.status.success());
    let s = text(&o);
    for cmd in ["run", "ccdmr", "rabi", "echo", "scan", "fit", "validate"] {
        assert!(s.contains(cmd), "{cmd} missing from\n{s}");
    }
}

#[test]
fn run_writes_outputs_and_fit_reads_them_back() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().arg("run").arg(config("ccdmr_zero_field.toml")).arg("--out").arg(dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let csv = dir.path().join("ccdmr_zero_field.csv");
    assert!(csv.exists());
    let o = bin().arg("fit").arg(&csv).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["model"], "lorentzian");
    assert!((v["fit"]["values"][1].as_f64().unwrap() - 2870.0).abs() < 1.0);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (d, seed) in [(&a, "5"), (&b, "6")] {
        let o = bin().args(["rabi", "--seed", seed, "--out"]).arg(d.path()).output().unwrap();
        assert!(o.status.success(), "{}", text(&o));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("rabi.csv")).unwrap();
    assert_ne!(read(&a), read(&b));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["master_seed"], 5);
}

#[test]
fn output_directory_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().arg("echo").env("CCDMR_OUT", dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(dir.path().join("echo_fit.json").exists());
}

#[test]
fn split_field_gives_two_dips() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().args(["ccdmr", "--field", "4G", "--out"]).arg(dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("ccdmr_fit.json")).unwrap()).unwrap();
    let split = v["derived"]["split_mhz"].as_f64().unwrap();
    assert!((split - 22.42).abs() < 0.5, "{split}");
}

#[test]
fn scan_writes_map_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().args(["scan", "--png-data", "--out"]).arg(dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let names: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(names.iter().any(|n| n.ends_with("_png.csv")), "{names:?}");
}

#[test]
fn validate_reports_typo_with_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "seed = 1\n[[nv]]\nid = \"a\"\nposition = [\"0um\", \"0um\", \"4um\"]\n[[block]]\n[block.protocol]\nkind = \"ccdmr\"\nread = { lazer = \"3.5mW\" }\n").unwrap();
    let o = bin().arg("validate").arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let s = text(&o);
    assert!(s.contains("lazer") && s.contains("did you mean"), "{s}");
    let o = bin().arg("validate").arg(config("trap_storage.toml")).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn failed_block_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("short.toml");
    std::fs::write(&p, "seed = 1\n[[nv]]\nid = \"a\"\nposition = [\"0um\", \"0um\", \"4um\"]\n[[block]]\nname = \"few\"\n[block.protocol]\nkind = \"ccdmr\"\nfrequencies = { start = \"2.85GHz\", stop = \"2.89GHz\", points = 5 }\n").unwrap();
    let o = bin().arg("run").arg(&p).arg("--out").arg(dir.path().join("out")).output().unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("FAILED few"));
    assert!(dir.path().join("out/manifest.json").exists());
}
