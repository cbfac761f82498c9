//! Anatomical priors: linear joint regressor, per-vertex part labels and
//! bone groups.
//!
//! On disk a skeleton is one JSON document:
//!
//! ```json
//! {
//!   "K": 12,
//!   "joints": ["root", "spine", ...],
//!   "regressor": [[joint, vertex, weight], ...],
//!   "part_labels": [0, 0, 3, ...],
//!   "groups": [[0, 1], [1, 2], ...],
//!   "group_names": ["pelvis", ...]
//! }
//! ```
//!
//! `group_names` is optional. Every regressor row must sum to one, every part
//! id in `0..K` must label at least one vertex and every joint must belong to
//! at least one group.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFile {
    #[serde(rename = "K")]
    pub k: usize,
    pub joints: Vec<String>,
    pub regressor: Vec<(usize, usize, f64)>,
    pub part_labels: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSpec {
    file: SkeletonFile,
    /// Sparse regressor rows, one per joint, sorted by vertex.
    rows: Vec<Vec<(usize, f64)>>,
}

impl SkeletonSpec {
    pub fn from_file(file: SkeletonFile, vertex_count: usize) -> Result<Self> {
        let nj = file.joints.len();
        if file.k == 0 {
            return Err(Error::Skeleton("K must be positive".into()));
        }
        if file.groups.len() != file.k {
            return Err(Error::Skeleton(format!(
                "{} groups listed for K = {}",
                file.groups.len(),
                file.k
            )));
        }
        if !file.group_names.is_empty() && file.group_names.len() != file.k {
            return Err(Error::Skeleton("group_names length differs from K".into()));
        }
        if file.part_labels.len() != vertex_count {
            return Err(Error::Skeleton(format!(
                "{} part labels for {} vertices",
                file.part_labels.len(),
                vertex_count
            )));
        }
        let mut rows = vec![Vec::new(); nj];
        for &(j, v, w) in &file.regressor {
            if j >= nj || v >= vertex_count {
                return Err(Error::Skeleton(format!(
                    "regressor entry ({j}, {v}) out of range"
                )));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Skeleton(format!(
                    "regressor entry ({j}, {v}) has weight {w}"
                )));
            }
            rows[j].push((v, w));
        }
        for (j, row) in rows.iter_mut().enumerate() {
            row.sort_by_key(|&(v, _)| v);
            let s: f64 = row.iter().map(|&(_, w)| w).sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Skeleton(format!("regressor row {j} sums to {s}")));
            }
        }
        let mut seen = vec![false; file.k];
        for (v, &l) in file.part_labels.iter().enumerate() {
            if l >= file.k {
                return Err(Error::Skeleton(format!(
                    "vertex {v} has part label {l}, outside 0..{}",
                    file.k
                )));
            }
            seen[l] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Skeleton(format!("part {k} labels no vertex")));
        }
        let mut used = vec![false; nj];
        for (g, members) in file.groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Skeleton(format!("group {g} is empty")));
            }
            for &j in members {
                if j >= nj {
                    return Err(Error::Skeleton(format!("group {g} references joint {j}")));
                }
                used[j] = true;
            }
        }
        if let Some(j) = used.iter().position(|u| !u) {
            return Err(Error::Skeleton(format!(
                "joint {j} is not referenced by any group"
            )));
        }
        Ok(SkeletonSpec { file, rows })
    }

    pub fn k(&self) -> usize {
        self.file.k
    }

    pub fn joint_count(&self) -> usize {
        self.rows.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.file.part_labels.len()
    }

    pub fn part_labels(&self) -> &[usize] {
        &self.file.part_labels
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.file.groups
    }

    pub fn regressor_rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn joint_names(&self) -> &[String] {
        &self.file.joints
    }

    pub fn group_names(&self) -> Vec<String> {
        if self.file.group_names.is_empty() {
            (0..self.file.k).map(|k| format!("group_{k}")).collect()
        } else {
            self.file.group_names.clone()
        }
    }

    pub fn file(&self) -> &SkeletonFile {
        &self.file
    }

    /// Width of the flat vector [`group_joint_vectors`] emits for group `g`.
    pub fn group_input_dim(&self, g: usize) -> usize {
        3 * (self.file.groups[g].len() + 1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("skeleton serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over the compact JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.file).expect("skeleton serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

pub fn load_skeleton(path: impl AsRef<Path>, mesh: &Mesh) -> Result<SkeletonSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SkeletonFile = serde_json::from_str(&text)
        .map_err(|e| Error::Skeleton(format!("{}: {e}", path.display())))?;
    SkeletonSpec::from_file(file, mesh.vertex_count())
}

pub fn regress_joints(mesh: &Mesh, spec: &SkeletonSpec) -> Result<Vec<Vec3>> {
    if mesh.vertex_count() != spec.vertex_count() {
        return Err(Error::Shape(format!(
            "mesh has {} vertices, skeleton expects {}",
            mesh.vertex_count(),
            spec.vertex_count()
        )));
    }
    Ok(spec
        .rows
        .iter()
        .map(|row| {
            let mut p = [0.0; 3];
            for &(v, w) in row {
                for k in 0..3 {
                    p[k] += w * mesh.vertices[v][k];
                }
            }
            p
        })
        .collect())
}

/// Per group: member joints relative to the group's first joint, then the
/// first joint's absolute position.
pub fn group_joint_vectors(joints: &[Vec3], spec: &SkeletonSpec) -> Result<Vec<Vec<f64>>> {
    if joints.len() != spec.joint_count() {
        return Err(Error::Shape(format!(
            "{} joints given, skeleton has {}",
            joints.len(),
            spec.joint_count()
        )));
    }
    Ok(spec
        .groups()
        .iter()
        .map(|members| {
            let origin = joints[members[0]];
            let mut out = Vec::with_capacity(3 * (members.len() + 1));
            for &j in members {
                for k in 0..3 {
                    out.push(joints[j][k] - origin[k]);
                }
            }
            out.extend_from_slice(&origin);
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures::icosahedron;

    fn simple_file() -> SkeletonFile {
        let mut regressor = vec![(0, 5, 1.0), (1, 0, 0.5), (1, 1, 0.5)];
        for v in 0..12 {
            regressor.push((2, v, 1.0 / 12.0));
        }
        SkeletonFile {
            k: 2,
            joints: vec!["a".into(), "b".into(), "c".into()],
            regressor,
            part_labels: (0..12).map(|v| v % 2).collect(),
            groups: vec![vec![0, 1], vec![2]],
            group_names: vec![],
        }
    }

    #[test]
    fn one_hot_and_midpoint_rows() {
        let m = icosahedron();
        let s = SkeletonSpec::from_file(simple_file(), 12).unwrap();
        let j = regress_joints(&m, &s).unwrap();
        assert_eq!(j[0], m.vertices[5]);
        for k in 0..3 {
            assert!((j[1][k] - 0.5 * (m.vertices[0][k] + m.vertices[1][k])).abs() < 1e-15);
        }
    }

    #[test]
    fn regression_is_translation_equivariant() {
        let m = icosahedron();
        let s = SkeletonSpec::from_file(simple_file(), 12).unwrap();
        let t = [0.1, 0.2, 0.3];
        let moved = m
            .with_vertices(m.vertices.iter().map(|v| crate::mesh::add(*v, t)).collect())
            .unwrap();
        let (a, b) = (regress_joints(&m, &s).unwrap(), regress_joints(&moved, &s).unwrap());
        for (p, q) in a.iter().zip(&b) {
            for k in 0..3 {
                assert!((q[k] - p[k] - t[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_row_sum_reported() {
        let mut f = simple_file();
        let mut regressor = vec![];
        for j in 0..8 {
            regressor.push((j, 0, if j == 7 { 0.9 } else { 1.0 }));
        }
        f.joints = (0..8).map(|j| format!("j{j}")).collect();
        f.groups = vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]];
        f.regressor = regressor;
        let e = SkeletonSpec::from_file(f, 12).unwrap_err();
        assert!(e.to_string().contains("regressor row 7 sums to 0.9"), "{e}");
    }

    #[test]
    fn label_out_of_range_and_unused_joint() {
        let mut f = simple_file();
        f.part_labels[3] = 2;
        assert!(SkeletonSpec::from_file(f, 12).is_err());
        let mut f = simple_file();
        f.groups = vec![vec![0], vec![2]];
        let e = SkeletonSpec::from_file(f, 12).unwrap_err();
        assert!(e.to_string().contains("joint 1"));
    }

    #[test]
    fn twenty_four_groups_accepted() {
        let n = 48;
        let f = SkeletonFile {
            k: 24,
            joints: (0..24).map(|j| format!("j{j}")).collect(),
            regressor: (0..24).map(|j| (j, 2 * j, 1.0)).collect(),
            part_labels: (0..n).map(|v| v / 2).collect(),
            groups: (0..24).map(|g| vec![g]).collect(),
            group_names: vec![],
        };
        let s = SkeletonSpec::from_file(f, n).unwrap();
        assert_eq!(s.k(), 24);
    }

    #[test]
    fn single_joint_group_vector() {
        let s = SkeletonSpec::from_file(simple_file(), 12).unwrap();
        let joints = vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let g = group_joint_vectors(&joints, &s).unwrap();
        assert_eq!(g[1], vec![0.0, 0.0, 0.0, 7.0, 8.0, 9.0]);
        assert_eq!(g[0], vec![0.0, 0.0, 0.0, 3.0, 3.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(g[0].len(), s.group_input_dim(0));
    }

    #[test]
    fn translation_only_moves_absolute_block() {
        let s = SkeletonSpec::from_file(simple_file(), 12).unwrap();
        let joints = vec![[1.0, 2.0, 3.0], [4.0, 5.5, 6.0], [7.0, 8.0, 9.0]];
        let moved: Vec<Vec3> = joints.iter().map(|j| crate::mesh::add(*j, [0.3, -1.0, 2.0])).collect();
        let (a, b) = (
            group_joint_vectors(&joints, &s).unwrap(),
            group_joint_vectors(&moved, &s).unwrap(),
        );
        for (ga, gb) in a.iter().zip(&b) {
            let n = ga.len();
            for i in 0..n - 3 {
                assert!((ga[i] - gb[i]).abs() < 1e-12);
            }
            assert!(ga[n - 3..] != gb[n - 3..]);
        }
    }

    #[test]
    fn json_round_trip() {
        let s = SkeletonSpec::from_file(simple_file(), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        s.save(&p).unwrap();
        let back = load_skeleton(&p, &icosahedron()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
    }

    proptest::proptest! {
        #[test]
        fn affine_combination_linearity(a in -2.0f64..3.0, seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = icosahedron();
            let s = SkeletonSpec::from_file(simple_file(), 12).unwrap();
            let y = m.with_vertices((0..12).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap();
            let b = 1.0 - a;
            let mix = m.with_vertices(m.vertices.iter().zip(&y.vertices)
                .map(|(p, q)| [a*p[0]+b*q[0], a*p[1]+b*q[1], a*p[2]+b*q[2]]).collect()).unwrap();
            let (jx, jy, jm) = (regress_joints(&m, &s).unwrap(), regress_joints(&y, &s).unwrap(), regress_joints(&mix, &s).unwrap());
            for j in 0..3 {
                for k in 0..3 {
                    proptest::prop_assert!((jm[j][k] - (a*jx[j][k] + b*jy[j][k])).abs() < 1e-9);
                }
            }
        }
    }
}
