use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gld"))
        .args(args)
        .env_remove("GLD_DATA_DIR")
        .output()
        .expect("spawn gld")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn sample_without_encoder_checkpoint_names_the_asset() {
    let dir = tempfile::tempdir().unwrap();
    let o = gld(&["sample", "--run-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error[missing-asset]"), "{err}");
    assert!(err.contains("--geo-ckpt"), "{err}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = gld(&["train-geo", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]"), "{}", stderr(&o));

    let o = gld(&["train-diff"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gld(&["train-diff", "--level", "4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let o = gld(&["show-config", "--set", "geo.no_such_key=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));
}

#[test]
fn show_config_reports_the_hash_and_overrides() {
    let a = gld(&["show-config"]);
    let b = gld(&["show-config", "--set", "seed=9"]);
    assert!(a.status.success() && b.status.success());
    let (a, b) = (String::from_utf8(a.stdout).unwrap(), String::from_utf8(b.stdout).unwrap());
    assert!(a.starts_with("# config_hash = "));
    assert_ne!(a.lines().next(), b.lines().next());
    assert!(b.contains("seed = 9"));
}

#[test]
fn missing_dataset_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = gld(&["train-geo", "--run-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[empty-dataset]"), "{}", stderr(&o));
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = gld(&["gen-data", "--scenes", "2", "--seed", "3", "--run-dir", d.path().to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let fa = files(&a.path().join("data"));
    let fb = files(&b.path().join("data"));
    assert!(fa.keys().any(|k| k.ends_with("manifest.json")));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert_eq!(v, &fb[k], "{} differs", k.display());
    }
}

#[test]
fn stages_refuse_a_dataset_from_other_settings() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().to_str().unwrap();
    let o = gld(&["gen-data", "--scenes", "1", "--run-dir", run]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gld(&["train-geo", "--run-dir", run, "--set", "data.scenes=2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[fingerprint-mismatch]"), "{}", stderr(&o));
}
