//! Reconstruction and pose-transfer metrics.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{norm, sub, Mesh};
use crate::model::DhbrModel;
use crate::synth::{oracle_mesh, BodyFactors, BodyModel};

/// Mean per-vertex Euclidean distance in millimeters.
pub fn e_avd(a: &Mesh, b: &Mesh) -> Result<f64> {
    if !a.same_connectivity(b) {
        return Err(Error::Shape("E_avd needs meshes with identical connectivity".into()));
    }
    if a.vertices.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let s: f64 = a.vertices.iter().zip(&b.vertices).map(|(p, q)| norm(sub(*p, *q))).sum();
    Ok(1000.0 * s / a.vertex_count() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_e_avd: f64,
    pub per_mesh: Vec<f64>,
}

impl EvalReport {
    /// `name,e_avd_mm` rows, one per mesh.
    pub fn to_csv(&self, names: &[String]) -> Result<String> {
        if names.len() != self.per_mesh.len() {
            return Err(Error::Shape(format!("{} names for {} rows", names.len(), self.per_mesh.len())));
        }
        let mut out = String::from("mesh,e_avd_mm\n");
        for (n, e) in names.iter().zip(&self.per_mesh) {
            writeln!(out, "{n},{e:.6}").expect("string write");
        }
        Ok(out)
    }

    pub fn write_csv(&self, names: &[String], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv(names)?).map_err(|e| Error::io(path, e))
    }
}

/// E_avd of reconstruct(x) against x for each mesh.
pub fn evaluate(model: &DhbrModel, meshes: &[&Mesh]) -> Result<EvalReport> {
    if meshes.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let per_mesh = meshes
        .iter()
        .map(|x| e_avd(&model.reconstruct(x)?, x))
        .collect::<Result<Vec<_>>>()?;
    let mean_e_avd = per_mesh.iter().sum::<f64>() / per_mesh.len() as f64;
    Ok(EvalReport { mean_e_avd, per_mesh })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferPair {
    pub shape_index: usize,
    pub pose_index: usize,
    pub transfer_e_avd: f64,
    pub baseline_e_avd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Mean E_avd(pose_transfer(a, b), oracle(a, b)).
    pub mean_transfer: f64,
    /// Mean E_avd(mesh_a, oracle(a, b)): doing nothing.
    pub mean_baseline: f64,
    pub pairs: Vec<TransferPair>,
}

/// Scores pose transfer on `(a, b)` index pairs against the generator oracle.
pub fn eval_transfer_pairs(
    model: &DhbrModel,
    body: &BodyModel,
    meshes: &[Mesh],
    factors: &[BodyFactors],
    pairs: &[(usize, usize)],
) -> Result<TransferReport> {
    if meshes.len() != factors.len() {
        return Err(Error::Shape(format!("{} meshes but {} factor records", meshes.len(), factors.len())));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no transfer pairs".into()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        if a >= meshes.len() || b >= meshes.len() {
            return Err(Error::InvalidArgument(format!("pair ({a}, {b}) out of range")));
        }
        let oracle = oracle_mesh(&factors[a], &factors[b], body)?;
        let transfer = model.pose_transfer(&meshes[a], &meshes[b])?;
        out.push(TransferPair {
            shape_index: a,
            pose_index: b,
            transfer_e_avd: e_avd(&transfer, &oracle)?,
            baseline_e_avd: e_avd(&meshes[a], &oracle)?,
        });
    }
    let n = out.len() as f64;
    Ok(TransferReport {
        mean_transfer: out.iter().map(|p| p.transfer_e_avd).sum::<f64>() / n,
        mean_baseline: out.iter().map(|p| p.baseline_e_avd).sum::<f64>() / n,
        pairs: out,
    })
}

/// `count` seeded ordered pairs of distinct entries of `pool`.
pub fn sample_pairs(pool: &[usize], count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if pool.len() < 2 {
        return Err(Error::InvalidArgument("need at least two meshes for transfer pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let i = rng.gen_range(0..pool.len());
            let j = (i + rng.gen_range(1..pool.len())) % pool.len();
            (pool[i], pool[j])
        })
        .collect())
}
