use std::path::Path;
use std::process::{Command, Output};

fn phasekd(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phasekd")).args(args).env("PHASEKD_OUT", root).output().expect("spawn phasekd")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bad_dataset_size_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = phasekd(&["gen-data", "--n-per-class", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = phasekd(&["train", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.ckpt");
    let o = phasekd(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", "."], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere.ckpt"), "{}", stderr(&o));
}

#[test]
fn unknown_variant_fails_before_loading_anything() {
    let dir = tempfile::tempdir().unwrap();
    let o = phasekd(&["ablate", "--teacher", "x", "--data", "y", "--variants", "full_4ds,bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn invalid_config_value_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = phasekd(&["ablate", "--teacher", "x", "--data", "y", "--tau", "-1"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gen_data_is_deterministic_and_writes_a_manifest() {
    let root = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = root.path().join(name);
        let o =
            phasekd(&["gen-data", "--n-per-class", "4", "--seed", "9", "--out", out.to_str().unwrap()], root.path());
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["source.pkd", "target.pkd", "dataset.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn gradcheck_subset_reports_json_per_op() {
    let dir = tempfile::tempdir().unwrap();
    let o = phasekd(&["gradcheck", "--cases", "2", "--only", "idft2,phase"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let ops: Vec<serde_json::Value> =
        stdout.lines().filter(|l| l.starts_with('{')).map(|l| serde_json::from_str(l).unwrap()).collect();
    let names: Vec<&str> = ops.iter().map(|op| op["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["idft2", "phase"]);
    assert!(ops.iter().all(|op| op["passed"] == true));
}

#[test]
fn gradcheck_catches_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o =
        phasekd(&["gradcheck", "--cases", "2", "--only", "couple", "--inject-fault", "couple-sign-flip"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("couple"));
}
