use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use dhbr_core::checkpoint::load_trained;
use dhbr_core::dataset::load_dataset;
use dhbr_core::mesh::{load_mesh, obj_string};

fn dhbr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhbr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dhbr(args);
    assert!(
        out.status.success(),
        "dhbr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Trained {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
    work: PathBuf,
}

/// Synthesizes 8 bodies, preps and trains for one epoch.
fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let ckpt = dir.path().join("model.ckpt");
        ok(&["synth", "--out", s(&data), "--count", "8", "--seed", "5"]);
        ok(&["prep", "--dataset", s(&data)]);
        let report = dir.path().join("report.json");
        ok(&[
            "train",
            "--dataset",
            s(&data),
            "--epochs",
            "1",
            "--out",
            s(&ckpt),
            "--report",
            s(&report),
        ]);
        let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(r["epochs"].as_array().unwrap().len(), 1);
        Trained {
            work: dir.path().to_path_buf(),
            _dir: dir,
            data,
            ckpt,
        }
    })
}

#[test]
fn prep_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["synth", "--out", s(&data), "--count", "3"]);
    ok(&["prep", "--dataset", s(&data)]);
    let first = std::fs::read(data.join("hierarchy.bin")).unwrap();
    ok(&["prep", "--dataset", s(&data)]);
    assert_eq!(first, std::fs::read(data.join("hierarchy.bin")).unwrap());
    for f in ["template.obj", "skeleton.json", "splits.json", "factors.json", "meshes/000.obj"] {
        assert!(data.join(f).is_file(), "{f}");
    }
}

#[test]
fn transfer_of_a_mesh_onto_itself_is_its_reconstruction() {
    let t = trained();
    let x = t.data.join("meshes/003.obj");
    let out = t.work.join("self.obj");
    ok(&[
        "transfer",
        "--checkpoint",
        s(&t.ckpt),
        "--dataset",
        s(&t.data),
        s(&x),
        s(&x),
        "--out",
        s(&out),
    ]);
    let d = load_dataset(&t.data).unwrap();
    let (model, _, _) = load_trained(&t.ckpt, &d).unwrap();
    let rec = model.reconstruct(&load_mesh(&x).unwrap()).unwrap();
    assert_eq!(std::fs::read_to_string(&out).unwrap(), obj_string(&rec));
}

#[test]
fn interp_single_cell_is_the_first_code() {
    let t = trained();
    let a = t.data.join("meshes/001.obj");
    let b = t.data.join("meshes/006.obj");
    let out = t.work.join("grid1");
    ok(&[
        "interp",
        "--checkpoint",
        s(&t.ckpt),
        "--dataset",
        s(&t.data),
        s(&a),
        s(&b),
        "--grid",
        "1x1",
        "--out",
        s(&out),
    ]);
    let d = load_dataset(&t.data).unwrap();
    let (model, _, _) = load_trained(&t.ckpt, &d).unwrap();
    let code = model.encode_full(&load_mesh(&a).unwrap()).unwrap();
    let expect = obj_string(&model.decode(&code).unwrap());
    assert_eq!(std::fs::read_to_string(out.join("interp_0_0.obj")).unwrap(), expect);
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 1);

    let out = t.work.join("grid23");
    ok(&[
        "interp",
        "--checkpoint",
        s(&t.ckpt),
        "--dataset",
        s(&t.data),
        s(&a),
        s(&b),
        "--grid",
        "2x3",
        "--out",
        s(&out),
    ]);
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 6);
    let last = obj_string(&model.decode(&model.encode_full(&load_mesh(&b).unwrap()).unwrap()).unwrap());
    assert_eq!(std::fs::read_to_string(out.join("interp_1_2.obj")).unwrap(), last);
}

#[test]
fn eval_writes_one_row_per_test_mesh() {
    let t = trained();
    let csv = t.work.join("eval.csv");
    let json = t.work.join("eval.json");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        s(&t.ckpt),
        "--dataset",
        s(&t.data),
        "--split",
        "all",
        "--csv",
        s(&csv),
        "--json",
        s(&json),
        "--pairs",
        "5",
    ]);
    assert!(stdout.contains("mean E_avd"));
    assert!(stdout.contains("baseline"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 8 + 1);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["mesh_count"], 8);
    assert!(v["transfer_e_avd_mm"].as_f64().unwrap() > 0.0);
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    for args in [
        vec!["prep", "--dataset", s(&missing)],
        vec!["synth", "--out", s(&missing), "--count", "0"],
        vec!["serve", "--checkpoint", s(&missing), "--dataset-dir", s(&missing)],
    ] {
        let out = dhbr(&args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "), "{err}");
    }
    let t = trained();
    let out = dhbr(&[
        "interp",
        "--checkpoint",
        s(&t.ckpt),
        "--dataset",
        s(&t.data),
        "a.obj",
        "b.obj",
        "--grid",
        "0x2",
        "--out",
        s(&missing),
    ]);
    assert!(!out.status.success());
}
