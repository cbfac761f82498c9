//! As-rigid-as-possible deformation with uniform edge weights and hard
//! anchor constraints.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::{build_adjacency, Adjacency, Mesh, Vec3};

pub const DEFAULT_ANCHOR_FRACTION: f64 = 0.08;
pub const DEFAULT_ITERATIONS: usize = 1;

const CG_REL_TOL: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct ArapProblem<'a> {
    pub source: &'a Mesh,
    pub anchors: Vec<(usize, Vec3)>,
    pub iterations: usize,
}

impl ArapProblem<'_> {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("ARAP needs at least one iteration".into()));
        }
        let n = self.source.vertex_count();
        let mut seen = vec![false; n];
        for &(i, _) in &self.anchors {
            if i >= n {
                return Err(Error::InvalidArgument(format!("anchor {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("anchor {i} listed twice")));
            }
        }
        Ok(())
    }
}

/// `⌈fraction·V⌉` distinct vertex indices, sorted.
pub fn sample_anchors(mesh: &Mesh, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "anchor fraction {fraction} outside (0, 1]"
        )));
    }
    let n = mesh.vertex_count();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn arap_deform(problem: &ArapProblem) -> Result<Mesh> {
    let adj = build_adjacency(problem.source)?;
    arap_deform_with(problem, &adj)
}

/// Same as [`arap_deform`] with a precomputed adjacency of the source.
pub fn arap_deform_with(problem: &ArapProblem, adj: &Adjacency) -> Result<Mesh> {
    problem.validate()?;
    let src = &problem.source.vertices;
    let n = src.len();
    let mut anchored: Vec<Option<Vec3>> = vec![None; n];
    for &(i, t) in &problem.anchors {
        anchored[i] = Some(t);
    }
    check_components(adj, &anchored)?;

    let (rot, shift) = rigid_fit(src, &problem.anchors);
    let mut cur: Vec<Vec3> = src
        .iter()
        .zip(&anchored)
        .map(|(&p, a)| {
            a.unwrap_or_else(|| {
                let q = rot * Vector3::new(p[0], p[1], p[2]) + shift;
                [q[0], q[1], q[2]]
            })
        })
        .collect();
    let system = FreeSystem::new(adj, &anchored);
    for _ in 0..problem.iterations {
        let rots = local_rotations(src, &cur, adj);
        global_step(src, &rots, adj, &system, &mut cur);
    }
    problem.source.with_vertices(cur)
}

/// Least-squares rigid map of anchor sources onto anchor targets. Used as the
/// starting guess so a rigid anchor motion is a fixed point of the iteration.
fn rigid_fit(src: &[Vec3], anchors: &[(usize, Vec3)]) -> (Matrix3<f64>, Vector3<f64>) {
    let k = anchors.len() as f64;
    let v = |p: Vec3| Vector3::new(p[0], p[1], p[2]);
    let cs = anchors.iter().map(|&(i, _)| v(src[i])).sum::<Vector3<f64>>() / k;
    let ct = anchors.iter().map(|&(_, t)| v(t)).sum::<Vector3<f64>>() / k;
    let rot = if anchors.len() >= 3 {
        let mut cov = Matrix3::zeros();
        for &(i, t) in anchors {
            cov += (v(src[i]) - cs) * (v(t) - ct).transpose();
        }
        polar_rotation(&cov)
    } else {
        Matrix3::identity()
    };
    (rot, ct - rot * cs)
}

/// Σ_i min_R Σ_{j∈N(i)} ‖(v'_i − v'_j) − R(v_i − v_j)‖².
pub fn arap_energy(source: &Mesh, deformed: &Mesh) -> Result<f64> {
    if !source.same_connectivity(deformed) {
        return Err(Error::Shape("ARAP energy needs identical connectivity".into()));
    }
    let adj = build_adjacency(source)?;
    Ok(energy_with(&source.vertices, &deformed.vertices, &adj))
}

pub(crate) fn energy_with(src: &[Vec3], cur: &[Vec3], adj: &Adjacency) -> f64 {
    let rots = local_rotations(src, cur, adj);
    let mut e = 0.0;
    for (i, ring) in adj.rings.iter().enumerate() {
        for &j in ring {
            let d = edge(src, i, j);
            let dp = edge(cur, i, j);
            let r = rots[i] * d;
            e += (dp - r).norm_squared();
        }
    }
    e
}

fn edge(p: &[Vec3], i: usize, j: usize) -> Vector3<f64> {
    Vector3::new(p[i][0] - p[j][0], p[i][1] - p[j][1], p[i][2] - p[j][2])
}

/// Per-vertex best-fit rotation: polar factor of the 1-ring covariance.
fn local_rotations(src: &[Vec3], cur: &[Vec3], adj: &Adjacency) -> Vec<Matrix3<f64>> {
    adj.rings
        .iter()
        .enumerate()
        .map(|(i, ring)| {
            let mut cov = Matrix3::zeros();
            for &j in ring {
                cov += edge(src, i, j) * edge(cur, i, j).transpose();
            }
            polar_rotation(&cov)
        })
        .collect()
}

fn polar_rotation(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = cov.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let mut r = v_t.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        // Flip the axis of the smallest singular value.
        let k = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(2);
        let mut u2 = u;
        for row in 0..3 {
            u2[(row, k)] = -u2[(row, k)];
        }
        r = v_t.transpose() * u2.transpose();
    }
    r
}

fn check_components(adj: &Adjacency, anchored: &[Option<Vec3>]) -> Result<()> {
    let n = adj.rings.len();
    let mut comp = vec![usize::MAX; n];
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = s;
        let mut has_anchor = false;
        while let Some(v) = stack.pop() {
            has_anchor |= anchored[v].is_some();
            for &u in &adj.rings[v] {
                if comp[u] == usize::MAX {
                    comp[u] = s;
                    stack.push(u);
                }
            }
        }
        if !has_anchor {
            return Err(Error::Singular(s));
        }
    }
    Ok(())
}

/// Uniform Laplacian restricted to the free vertices.
struct FreeSystem {
    free: Vec<usize>,
    /// Index into `free` per vertex, or `usize::MAX` when anchored.
    slot: Vec<usize>,
    degree: Vec<f64>,
}

impl FreeSystem {
    fn new(adj: &Adjacency, anchored: &[Option<Vec3>]) -> Self {
        let free: Vec<usize> = (0..anchored.len()).filter(|&i| anchored[i].is_none()).collect();
        let mut slot = vec![usize::MAX; anchored.len()];
        for (k, &i) in free.iter().enumerate() {
            slot[i] = k;
        }
        let degree = free.iter().map(|&i| adj.rings[i].len() as f64).collect();
        FreeSystem { free, slot, degree }
    }

    fn apply(&self, adj: &Adjacency, x: &[f64], out: &mut [f64]) {
        for (k, &i) in self.free.iter().enumerate() {
            let mut s = self.degree[k] * x[k];
            for &j in &adj.rings[i] {
                let sj = self.slot[j];
                if sj != usize::MAX {
                    s -= x[sj];
                }
            }
            out[k] = s;
        }
    }
}

fn global_step(
    src: &[Vec3],
    rots: &[Matrix3<f64>],
    adj: &Adjacency,
    system: &FreeSystem,
    cur: &mut [Vec3],
) {
    let m = system.free.len();
    if m == 0 {
        return;
    }
    let mut rhs = vec![[0.0; 3]; m];
    for (k, &i) in system.free.iter().enumerate() {
        let mut b = Vector3::zeros();
        for &j in &adj.rings[i] {
            b += 0.5 * (rots[i] + rots[j]) * edge(src, i, j);
            if system.slot[j] == usize::MAX {
                // Anchored neighbor moves to the right-hand side.
                b += Vector3::new(cur[j][0], cur[j][1], cur[j][2]);
            }
        }
        rhs[k] = [b[0], b[1], b[2]];
    }
    for c in 0..3 {
        let b: Vec<f64> = rhs.iter().map(|r| r[c]).collect();
        let mut x: Vec<f64> = system.free.iter().map(|&i| cur[i][c]).collect();
        conjugate_gradient(system, adj, &b, &mut x);
        for (k, &i) in system.free.iter().enumerate() {
            cur[i][c] = x[k];
        }
    }
}

/// Jacobi-preconditioned CG, warm-started from `x`.
fn conjugate_gradient(system: &FreeSystem, adj: &Adjacency, b: &[f64], x: &mut [f64]) {
    let m = b.len();
    let mut ax = vec![0.0; m];
    system.apply(adj, x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&system.degree).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let mut ap = vec![0.0; m];
    for _ in 0..(10 * m).max(100) {
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= CG_REL_TOL * bnorm {
            break;
        }
        system.apply(adj, &p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for k in 0..m {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        for k in 0..m {
            z[k] = r[k] / system.degree[k];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..m {
            p[k] = z[k] + beta * p[k];
        }
    }
}
