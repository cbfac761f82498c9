use dhbr_core::config::HierarchyConfig;
use dhbr_core::dataset::*;
use dhbr_core::mesh::{load_mesh, save_mesh, Mesh};
use dhbr_core::synth::{make_splits, GeneratorSpec};
use dhbr_core::Error;

#[test]
fn synthetic_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let written = write_synthetic(dir.path(), 5, 11, GeneratorSpec::default()).unwrap();
    let read = load_dataset(dir.path()).unwrap();
    assert_eq!(read.names, ["000", "001", "002", "003", "004"]);
    assert_eq!(read.splits, written.splits);
    assert_eq!(read.skeleton.hash(), written.skeleton.hash());
    // OBJ output is lossless.
    assert_eq!(read.meshes, written.meshes);
    assert_eq!(read.template, written.template);
    let f = read.factors.as_ref().unwrap();
    assert_eq!(f.seed, 11);
    assert_eq!(f.factors, written.factors.as_ref().unwrap().factors);
    assert_eq!(read.index_of("003"), Some(3));
    assert_eq!(read.index_of("3"), None);
}

#[test]
fn hierarchy_is_written_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let d = write_synthetic(dir.path(), 2, 0, GeneratorSpec::default()).unwrap();
    assert!(d.load_hierarchy().is_err());
    let h = prepare_hierarchy(&d, &HierarchyConfig::default()).unwrap();
    assert_eq!(d.load_hierarchy().unwrap().hash(), h.hash());
    assert_eq!(h.mesh_sizes()[0], d.template.vertex_count());
}

#[test]
fn foreign_topology_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), 3, 0, GeneratorSpec::default()).unwrap();
    let path = dir.path().join(MESH_DIR).join("001.obj");
    let m = load_mesh(&path).unwrap();
    let mut faces = m.faces.clone();
    faces.swap(0, 1);
    save_mesh(&Mesh::new(m.vertices, faces).unwrap(), &path).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("001.obj"), "{err}");
}

#[test]
fn optional_files() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), 6, 0, GeneratorSpec::default()).unwrap();
    std::fs::remove_file(dir.path().join(SPLITS_FILE)).unwrap();
    std::fs::remove_file(dir.path().join(FACTORS_FILE)).unwrap();
    let d = load_dataset(dir.path()).unwrap();
    assert_eq!(d.splits, make_splits(6, 0));
    assert!(d.factors.is_none());

    std::fs::write(dir.path().join(SPLITS_FILE), r#"{"train":[0,9],"val":[],"test":[]}"#).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
}

#[test]
fn missing_pieces_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains(TEMPLATE_FILE), "{err}");
    write_synthetic(dir.path(), 2, 0, GeneratorSpec::default()).unwrap();
    for f in std::fs::read_dir(dir.path().join(MESH_DIR)).unwrap() {
        std::fs::remove_file(f.unwrap().path()).unwrap();
    }
    assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("no .obj"));
}
