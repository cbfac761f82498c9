//! On-disk dataset directories.
//!
//! ```text
//! <dir>/template.obj      rest-pose template
//! <dir>/skeleton.json     joint regressor, part labels, bone groups
//! <dir>/meshes/NNN.obj    registered meshes, all with the template's faces
//! <dir>/splits.json       train/val/test indices (optional)
//! <dir>/factors.json      generator spec and per-mesh factors (synthetic only)
//! <dir>/hierarchy.bin     written by `prepare_hierarchy`
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::HierarchyConfig;
use crate::error::{Error, Result};
use crate::hierarchy::{build_hierarchy, SamplingHierarchy};
use crate::mesh::{load_mesh, save_mesh, validate_dataset_topology, Mesh};
use crate::skeleton::{load_skeleton, SkeletonSpec};
use crate::synth::{make_splits, sample_dataset, BodyFactors, BodyModel, GeneratorSpec, Splits};

pub const TEMPLATE_FILE: &str = "template.obj";
pub const SKELETON_FILE: &str = "skeleton.json";
pub const MESH_DIR: &str = "meshes";
pub const SPLITS_FILE: &str = "splits.json";
pub const FACTORS_FILE: &str = "factors.json";
pub const HIERARCHY_FILE: &str = "hierarchy.bin";

/// Ground truth for synthetic datasets, one factor record per mesh.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorManifest {
    pub generator: GeneratorSpec,
    pub seed: u64,
    pub factors: Vec<BodyFactors>,
}

impl FactorManifest {
    pub fn body_model(&self) -> Result<BodyModel> {
        BodyModel::new(self.generator.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub template: Mesh,
    pub skeleton: SkeletonSpec,
    /// File stems of `meshes/`, sorted; `meshes[i]` was read from `names[i]`.
    pub names: Vec<String>,
    pub meshes: Vec<Mesh>,
    pub splits: Splits,
    pub factors: Option<FactorManifest>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Generates `n` synthetic bodies and writes a complete dataset directory.
pub fn write_synthetic(dir: impl AsRef<Path>, n: usize, seed: u64, spec: GeneratorSpec) -> Result<Dataset> {
    let root = dir.as_ref().to_path_buf();
    let body = BodyModel::new(spec.clone())?;
    let data = sample_dataset(n, seed, &body)?;
    let mesh_dir = root.join(MESH_DIR);
    std::fs::create_dir_all(&mesh_dir).map_err(|e| Error::io(&mesh_dir, e))?;

    let template = body.template();
    let skeleton = body.emit_skeleton_spec();
    save_mesh(&template, root.join(TEMPLATE_FILE))?;
    skeleton.save(root.join(SKELETON_FILE))?;
    let width = (n - 1).to_string().len().max(3);
    let names: Vec<String> = (0..n).map(|i| format!("{i:0width$}")).collect();
    for (name, mesh) in names.iter().zip(&data.meshes) {
        save_mesh(mesh, mesh_dir.join(format!("{name}.obj")))?;
    }
    write_json(&root.join(SPLITS_FILE), &data.splits)?;
    let factors = FactorManifest {
        generator: spec,
        seed,
        factors: data.factors,
    };
    write_json(&root.join(FACTORS_FILE), &factors)?;
    Ok(Dataset {
        root,
        template,
        skeleton,
        names,
        meshes: data.meshes,
        splits: data.splits,
        factors: Some(factors),
    })
}

/// Reads and validates a dataset directory. Without `splits.json` the
/// default seeded 80/10/10 split is used.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let root = dir.as_ref().to_path_buf();
    let template = load_mesh(root.join(TEMPLATE_FILE))?;
    let skeleton = load_skeleton(root.join(SKELETON_FILE), &template)?;
    let mesh_dir = root.join(MESH_DIR);
    let mut names = Vec::new();
    for entry in std::fs::read_dir(&mesh_dir).map_err(|e| Error::io(&mesh_dir, e))? {
        let path = entry.map_err(|e| Error::io(&mesh_dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!("no .obj files in {}", mesh_dir.display())));
    }
    let meshes = names
        .iter()
        .map(|n| load_mesh(mesh_dir.join(format!("{n}.obj"))))
        .collect::<Result<Vec<_>>>()?;
    let mut all = Vec::with_capacity(meshes.len() + 1);
    all.push(template.clone());
    all.extend(meshes.iter().cloned());
    validate_dataset_topology(&all).map_err(|e| match e {
        // Index 0 is the template; report dataset positions.
        Error::TopologyMismatch(i) => Error::InvalidMesh(format!("{}.obj does not share the template topology", names[i - 1])),
        e => e,
    })?;

    let splits_path = root.join(SPLITS_FILE);
    let splits = if splits_path.exists() {
        let s: Splits = read_json(&splits_path)?;
        let n = meshes.len();
        if let Some(bad) = s.train.iter().chain(&s.val).chain(&s.test).find(|&&i| i >= n) {
            return Err(Error::Format(format!("{}: index {bad} ≥ {n} meshes", splits_path.display())));
        }
        s
    } else {
        make_splits(meshes.len(), 0)
    };
    let factors_path = root.join(FACTORS_FILE);
    let factors = if factors_path.exists() {
        let f: FactorManifest = read_json(&factors_path)?;
        if f.factors.len() != meshes.len() {
            return Err(Error::Format(format!(
                "{} has {} records for {} meshes",
                factors_path.display(),
                f.factors.len(),
                meshes.len()
            )));
        }
        Some(f)
    } else {
        None
    };
    Ok(Dataset {
        root,
        template,
        skeleton,
        names,
        meshes,
        splits,
        factors,
    })
}

impl Dataset {
    pub fn hierarchy_path(&self) -> PathBuf {
        self.root.join(HIERARCHY_FILE)
    }

    /// Loads `hierarchy.bin`, checking it was built on this template.
    pub fn load_hierarchy(&self) -> Result<SamplingHierarchy> {
        let h = SamplingHierarchy::load(self.hierarchy_path())?;
        h.check_template(&self.template)?;
        Ok(h)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&Mesh> {
        indices.iter().map(|&i| &self.meshes[i]).collect()
    }
}

/// Builds the sampling hierarchy for `dataset` and writes `hierarchy.bin`.
pub fn prepare_hierarchy(dataset: &Dataset, config: &HierarchyConfig) -> Result<SamplingHierarchy> {
    let h = build_hierarchy(&dataset.template, &dataset.skeleton, &config.ratios, &config.spiral_lengths)?;
    h.save(dataset.hierarchy_path())?;
    Ok(h)
}
