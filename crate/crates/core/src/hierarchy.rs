//! Multi-resolution sampling hierarchy: quadric-error decimation with
//! selection-style downsampling, barycentric upsampling, and per-level spiral
//! orderings.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::{build_adjacency, cross, dot, norm, sub, Adjacency, Mesh, Vec3};
use crate::skeleton::SkeletonSpec;

/// Added to the cost of any collapse that merges two part labels, so each
/// label survives to the coarsest level.
const LABEL_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingLevel {
    pub coarse_mesh: Mesh,
    /// Fine vertex each coarse vertex survives from.
    pub down_map: Vec<usize>,
    /// Per fine vertex: coarse triangle and barycentric weights.
    pub up_map: Vec<(usize, [f64; 3])>,
}

impl SamplingLevel {
    pub fn fine_count(&self) -> usize {
        self.up_map.len()
    }

    pub fn coarse_count(&self) -> usize {
        self.down_map.len()
    }

    /// Row-mixing form of the downsampling map.
    pub fn down_rows(&self) -> Vec<Vec<(usize, f64)>> {
        self.down_map.iter().map(|&f| vec![(f, 1.0)]).collect()
    }

    /// Row-mixing form of the upsampling map; zero weights are dropped.
    pub fn up_rows(&self) -> Vec<Vec<(usize, f64)>> {
        self.up_map
            .iter()
            .map(|&(t, w)| {
                let tri = self.coarse_mesh.faces[t];
                (0..3)
                    .filter(|&k| w[k] != 0.0)
                    .map(|k| (tri[k], w[k]))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpiralTable {
    pub length: usize,
    pub sequences: Vec<Vec<usize>>,
}

impl SpiralTable {
    pub fn vertex_count(&self) -> usize {
        self.sequences.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingHierarchy {
    /// Level `i` maps mesh `i` to mesh `i + 1`; mesh 0 is the template.
    pub levels: Vec<SamplingLevel>,
    /// Spiral tables for meshes `0..levels.len()`.
    pub spirals: Vec<SpiralTable>,
    /// Part labels for meshes `0..=levels.len()`.
    pub labels: Vec<Vec<usize>>,
}

impl SamplingHierarchy {
    pub fn mesh_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.levels[0].fine_count()];
        s.extend(self.levels.iter().map(|l| l.coarse_count()));
        s
    }

    pub fn coarsest_labels(&self) -> &[usize] {
        self.labels.last().expect("hierarchy has labels")
    }
}

#[derive(Clone, Copy, Debug)]
struct Quadric([f64; 10]);

impl Quadric {
    fn zero() -> Self {
        Quadric([0.0; 10])
    }

    fn plane(n: Vec3, d: f64) -> Self {
        let [a, b, c] = n;
        Quadric([
            a * a,
            a * b,
            a * c,
            a * d,
            b * b,
            b * c,
            b * d,
            c * c,
            c * d,
            d * d,
        ])
    }

    fn add(&mut self, o: &Quadric) {
        for i in 0..10 {
            self.0[i] += o.0[i];
        }
    }

    fn eval(&self, p: Vec3) -> f64 {
        let q = &self.0;
        let [x, y, z] = p;
        let v = q[0] * x * x
            + 2.0 * q[1] * x * y
            + 2.0 * q[2] * x * z
            + 2.0 * q[3] * x
            + q[4] * y * y
            + 2.0 * q[5] * y * z
            + 2.0 * q[6] * y
            + q[7] * z * z
            + 2.0 * q[8] * z
            + q[9];
        v.max(0.0)
    }
}

#[derive(PartialEq)]
struct Candidate {
    cost: f64,
    remove: usize,
    keep: usize,
    stamp: (u64, u64),
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on cost, ties broken by the lower edge.
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| edge_key(other.remove, other.keep).cmp(&edge_key(self.remove, self.keep)))
            .then_with(|| other.remove.cmp(&self.remove))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

struct Decimator<'a> {
    pos: &'a [Vec3],
    labels: Option<&'a [usize]>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vert_faces: Vec<BTreeSet<usize>>,
    alive: Vec<bool>,
    quadrics: Vec<Quadric>,
    version: Vec<u64>,
    alive_count: usize,
}

impl<'a> Decimator<'a> {
    fn new(mesh: &'a Mesh, labels: Option<&'a [usize]>) -> Self {
        let n = mesh.vertex_count();
        let pos = &mesh.vertices[..];
        let mut quadrics = vec![Quadric::zero(); n];
        let mut vert_faces = vec![BTreeSet::new(); n];
        let mut edge_count = std::collections::BTreeMap::<(usize, usize), (usize, usize)>::new();
        for (fi, f) in mesh.faces.iter().enumerate() {
            let nrm = face_normal(pos, f);
            let len = norm(nrm);
            if len > 0.0 {
                let u = nrm.map(|c| c / len);
                let q = Quadric::plane(u, -dot(u, pos[f[0]]));
                for &v in f {
                    quadrics[v].add(&q);
                }
            }
            for k in 0..3 {
                vert_faces[f[k]].insert(fi);
                let e = edge_key(f[k], f[(k + 1) % 3]);
                let entry = edge_count.entry(e).or_insert((0, fi));
                entry.0 += 1;
            }
        }
        // Boundary edges get a perpendicular constraint plane so open borders
        // keep their outline.
        for (&(a, b), &(count, fi)) in &edge_count {
            if count != 1 {
                continue;
            }
            let nrm = face_normal(pos, &mesh.faces[fi]);
            let e = sub(pos[b], pos[a]);
            let p = cross(e, nrm);
            let len = norm(p);
            if len > 0.0 {
                let u = p.map(|c| c / len);
                let q = Quadric::plane(u, -dot(u, pos[a]));
                quadrics[a].add(&q);
                quadrics[b].add(&q);
            }
        }
        Decimator {
            pos,
            labels,
            faces: mesh.faces.clone(),
            face_alive: vec![true; mesh.face_count()],
            vert_faces,
            alive: vec![true; n],
            quadrics,
            version: vec![0; n],
            alive_count: n,
        }
    }

    fn neighbors(&self, v: usize) -> BTreeSet<usize> {
        let mut s = BTreeSet::new();
        for &fi in &self.vert_faces[v] {
            for &u in &self.faces[fi] {
                if u != v {
                    s.insert(u);
                }
            }
        }
        s
    }

    fn edge_face_count(&self, a: usize, b: usize) -> usize {
        self.vert_faces[a].intersection(&self.vert_faces[b]).count()
    }

    fn is_boundary_vertex(&self, v: usize) -> bool {
        self.neighbors(v)
            .into_iter()
            .any(|u| self.edge_face_count(v, u) == 1)
    }

    fn candidate(&self, a: usize, b: usize) -> Candidate {
        let mut q = self.quadrics[a];
        q.add(&self.quadrics[b]);
        let penalty = match self.labels {
            Some(l) if l[a] != l[b] => LABEL_PENALTY,
            _ => 0.0,
        };
        let keep_a = q.eval(self.pos[a]);
        let keep_b = q.eval(self.pos[b]);
        let (remove, keep, cost) = if keep_b < keep_a || (keep_b == keep_a && b < a) {
            (a, b, keep_b)
        } else {
            (b, a, keep_a)
        };
        Candidate {
            cost: cost + penalty,
            remove,
            keep,
            stamp: self.stamp(a, b),
        }
    }

    fn fresh(&self, c: &Candidate) -> bool {
        let (a, b) = (c.remove, c.keep);
        self.alive[a] && self.alive[b] && self.stamp(a, b) == c.stamp
    }

    fn stamp(&self, a: usize, b: usize) -> (u64, u64) {
        let (lo, hi) = edge_key(a, b);
        (self.version[lo], self.version[hi])
    }

    fn collapse_valid(&self, remove: usize, keep: usize) -> bool {
        let shared = self.edge_face_count(remove, keep);
        if shared == 0 {
            return false;
        }
        let nr = self.neighbors(remove);
        let nk = self.neighbors(keep);
        // Link condition: the only common neighbors are the edge's opposite vertices.
        if nr.intersection(&nk).count() != shared {
            return false;
        }
        if shared == 2 && self.is_boundary_vertex(remove) && self.is_boundary_vertex(keep) {
            return false;
        }
        if self.alive_count <= 4 {
            return false;
        }
        for &fi in &self.vert_faces[remove] {
            let f = self.faces[fi];
            if f.contains(&keep) {
                continue;
            }
            let before = face_normal(self.pos, &f);
            let moved = f.map(|v| if v == remove { keep } else { v });
            let after = face_normal(self.pos, &moved);
            let la = norm(after);
            if la < 1e-14 * (1.0 + norm(before)) || dot(before, after) <= 0.0 {
                return false;
            }
        }
        true
    }

    fn collapse(&mut self, remove: usize, keep: usize) {
        let q = self.quadrics[remove];
        self.quadrics[keep].add(&q);
        let incident: Vec<usize> = self.vert_faces[remove].iter().copied().collect();
        for fi in incident {
            let f = self.faces[fi];
            if f.contains(&keep) {
                self.face_alive[fi] = false;
                for &v in &f {
                    self.vert_faces[v].remove(&fi);
                }
            } else {
                self.faces[fi] = f.map(|v| if v == remove { keep } else { v });
                self.vert_faces[keep].insert(fi);
            }
        }
        self.vert_faces[remove].clear();
        self.alive[remove] = false;
        self.alive_count -= 1;
    }

    fn push_edges(&mut self, v: usize, heap: &mut BinaryHeap<Candidate>) {
        for u in self.neighbors(v) {
            heap.push(self.candidate(v, u));
        }
    }
}

fn face_normal(pos: &[Vec3], f: &[usize; 3]) -> Vec3 {
    cross(sub(pos[f[1]], pos[f[0]]), sub(pos[f[2]], pos[f[0]]))
}

pub fn qem_decimate(mesh: &Mesh, keep_ratio: f64) -> Result<SamplingLevel> {
    decimate(mesh, keep_ratio, None).map(|(l, _)| l)
}

/// Decimates with a label-crossing penalty; also returns the cost of each
/// executed collapse in order.
pub(crate) fn decimate(
    mesh: &Mesh,
    keep_ratio: f64,
    labels: Option<&[usize]>,
) -> Result<(SamplingLevel, Vec<f64>)> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep ratio {keep_ratio} outside (0, 1]"
        )));
    }
    let n = mesh.vertex_count();
    let target = (keep_ratio * n as f64).ceil() as usize;
    if target < 4 {
        return Err(Error::InvalidArgument(format!(
            "keep ratio {keep_ratio} leaves {target} < 4 vertices"
        )));
    }
    build_adjacency(mesh)?;
    let mut dec = Decimator::new(mesh, labels);
    let mut heap = BinaryHeap::new();
    for v in 0..n {
        for u in dec.neighbors(v) {
            if v < u {
                heap.push(dec.candidate(v, u));
            }
        }
    }
    let mut costs = Vec::new();
    while dec.alive_count > target {
        let Some(c) = heap.pop() else {
            return Err(Error::Decimation(format!(
                "no valid collapse left at {} vertices (target {target})",
                dec.alive_count
            )));
        };
        if !dec.fresh(&c) || !dec.collapse_valid(c.remove, c.keep) {
            continue;
        }
        let ring = dec.neighbors(c.remove);
        dec.collapse(c.remove, c.keep);
        costs.push(c.cost);
        dec.version[c.keep] += 1;
        for &u in &ring {
            dec.version[u] += 1;
        }
        dec.push_edges(c.keep, &mut heap);
        for &u in &ring {
            if u != c.keep {
                dec.push_edges(u, &mut heap);
            }
        }
    }

    let down_map: Vec<usize> = (0..n).filter(|&v| dec.alive[v]).collect();
    let mut coarse_index = vec![usize::MAX; n];
    for (i, &f) in down_map.iter().enumerate() {
        coarse_index[f] = i;
    }
    let faces: Vec<[usize; 3]> = dec
        .faces
        .iter()
        .zip(&dec.face_alive)
        .filter(|(_, &a)| a)
        .map(|(f, _)| f.map(|v| coarse_index[v]))
        .collect();
    let coarse_mesh = Mesh::new(down_map.iter().map(|&f| mesh.vertices[f]).collect(), faces)?;
    let up_map = upsample_map(mesh, &coarse_mesh, &coarse_index);
    Ok((
        SamplingLevel {
            coarse_mesh,
            down_map,
            up_map,
        },
        costs,
    ))
}

fn upsample_map(fine: &Mesh, coarse: &Mesh, coarse_index: &[usize]) -> Vec<(usize, [f64; 3])> {
    let mut first_face = vec![usize::MAX; coarse.vertex_count()];
    for (ti, f) in coarse.faces.iter().enumerate() {
        for &v in f {
            if first_face[v] == usize::MAX {
                first_face[v] = ti;
            }
        }
    }
    fine.vertices
        .iter()
        .enumerate()
        .map(|(v, &p)| {
            let c = coarse_index[v];
            if c != usize::MAX {
                let t = first_face[c];
                let tri = coarse.faces[t];
                let mut w = [0.0; 3];
                w[tri.iter().position(|&x| x == c).expect("incident")] = 1.0;
                return (t, w);
            }
            let mut best = (f64::INFINITY, 0usize, [1.0, 0.0, 0.0]);
            for (ti, tri) in coarse.faces.iter().enumerate() {
                let (q, w) = closest_point_on_triangle(
                    p,
                    coarse.vertices[tri[0]],
                    coarse.vertices[tri[1]],
                    coarse.vertices[tri[2]],
                );
                let d = norm(sub(p, q));
                if d < best.0 {
                    best = (d, ti, w);
                }
            }
            (best.1, best.2)
        })
        .collect()
}

/// Closest point on triangle `abc` to `p` with its barycentric weights.
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> (Vec3, [f64; 3]) {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, [1.0, 0.0, 0.0]);
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (lerp(a, b, v), [1.0 - v, v, 0.0]);
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (lerp(a, c, w), [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (lerp(b, c, w), [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    let u = 1.0 - v - w;
    let q = [
        u * a[0] + v * b[0] + w * c[0],
        u * a[1] + v * b[1] + w * c[1],
        u * a[2] + v * b[2] + w * c[2],
    ];
    (q, [u, v, w])
}

fn lerp(a: Vec3, b: Vec3, t: f64) -> Vec3 {
    [
        a[0] + t * (b[0] - a[0]),
        a[1] + t * (b[1] - a[1]),
        a[2] + t * (b[2] - a[2]),
    ]
}

/// Selects row `down_map[i]` for each coarse vertex `i`.
pub fn apply_down(level: &SamplingLevel, fine: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if fine.len() != level.fine_count() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} fine vertices",
            fine.len(),
            level.fine_count()
        )));
    }
    Ok(level.down_map.iter().map(|&f| fine[f].clone()).collect())
}

/// Barycentric interpolation of coarse rows onto every fine vertex.
pub fn apply_up(level: &SamplingLevel, coarse: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if coarse.len() != level.coarse_count() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} coarse vertices",
            coarse.len(),
            level.coarse_count()
        )));
    }
    let cols = coarse.first().map_or(0, Vec::len);
    Ok(level
        .up_map
        .iter()
        .map(|&(t, w)| {
            let tri = level.coarse_mesh.faces[t];
            let mut row = vec![0.0; cols];
            for k in 0..3 {
                if w[k] == 0.0 {
                    continue;
                }
                for (r, x) in row.iter_mut().zip(&coarse[tri[k]]) {
                    *r += w[k] * x;
                }
            }
            row
        })
        .collect())
}

pub fn compute_spirals(mesh: &Mesh, adjacency: &Adjacency, length: usize) -> Result<SpiralTable> {
    if length == 0 {
        return Err(Error::InvalidArgument("spiral length must be ≥ 1".into()));
    }
    let n = mesh.vertex_count();
    let mut sequences = Vec::with_capacity(n);
    for v in 0..n {
        let ring = adjacency.ring(v);
        if ring.is_empty() {
            return Err(Error::IsolatedVertex(v));
        }
        let p = mesh.vertices[v];
        let start = ring
            .iter()
            .enumerate()
            .min_by(|(_, &a), (_, &b)| {
                norm(sub(mesh.vertices[a], p)).total_cmp(&norm(sub(mesh.vertices[b], p)))
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut seq = vec![v];
        let mut visited = BTreeSet::from([v]);
        let mut current: Vec<usize> = ring[start..].iter().chain(&ring[..start]).copied().collect();
        for &u in &current {
            visited.insert(u);
        }
        seq.extend_from_slice(&current);
        while seq.len() < length {
            let mut next = Vec::new();
            for &u in &current {
                for &w in adjacency.ring(u) {
                    if visited.insert(w) {
                        next.push(w);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            seq.extend_from_slice(&next);
            current = next;
        }
        seq.truncate(length);
        let last = *seq.last().expect("non-empty");
        seq.resize(length, last);
        sequences.push(seq);
    }
    Ok(SpiralTable { length, sequences })
}

pub fn build_hierarchy(
    template: &Mesh,
    skeleton: &SkeletonSpec,
    ratios: &[f64],
    spiral_lengths: &[usize],
) -> Result<SamplingHierarchy> {
    if ratios.len() != spiral_lengths.len() || ratios.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} ratios and {} spiral lengths",
            ratios.len(),
            spiral_lengths.len()
        )));
    }
    if skeleton.vertex_count() != template.vertex_count() {
        return Err(Error::Shape("skeleton does not match template".into()));
    }
    let mut meshes = vec![template.clone()];
    let mut labels = vec![skeleton.part_labels().to_vec()];
    let mut levels = Vec::new();
    let mut spirals = Vec::new();
    for (i, (&ratio, &slen)) in ratios.iter().zip(spiral_lengths).enumerate() {
        let adj = build_adjacency(&meshes[i])?;
        spirals.push(compute_spirals(&meshes[i], &adj, slen)?);
        let (level, _) = decimate(&meshes[i], ratio, Some(&labels[i]))?;
        labels.push(level.down_map.iter().map(|&f| labels[i][f]).collect());
        meshes.push(level.coarse_mesh.clone());
        levels.push(level);
    }
    Ok(SamplingHierarchy {
        levels,
        spirals,
        labels,
    })
}

const HIER_MAGIC: &[u8; 8] = b"DHBRHIER";
const HIER_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: usize) {
        self.0.extend_from_slice(&(x as u32).to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, at: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")) as usize)
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn done(&self) -> bool {
        self.at == self.buf.len()
    }
}

impl SamplingHierarchy {
    /// Little-endian sidecar encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(HIER_MAGIC.to_vec());
        w.u32(HIER_VERSION as usize);
        w.u32(self.levels.len());
        w.u32(self.levels[0].fine_count());
        for level in &self.levels {
            let m = &level.coarse_mesh;
            w.u32(m.vertex_count());
            for v in &m.vertices {
                v.iter().for_each(|&x| w.f64(x));
            }
            w.u32(m.face_count());
            for f in &m.faces {
                f.iter().for_each(|&i| w.u32(i));
            }
            w.u32(level.down_map.len());
            level.down_map.iter().for_each(|&i| w.u32(i));
            w.u32(level.up_map.len());
            for &(t, b) in &level.up_map {
                w.u32(t);
                b.iter().for_each(|&x| w.f64(x));
            }
        }
        for s in &self.spirals {
            w.u32(s.vertex_count());
            w.u32(s.length);
            s.sequences.iter().flatten().for_each(|&i| w.u32(i));
        }
        w.u32(self.labels.len());
        for l in &self.labels {
            w.u32(l.len());
            l.iter().for_each(|&i| w.u32(i));
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(8)? != HIER_MAGIC {
            return Err(Error::Format("not a hierarchy file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != HIER_VERSION as usize {
            return Err(Error::Format(format!("unsupported hierarchy version {version}")));
        }
        let nlevels = r.u32()?;
        let _fine = r.u32()?;
        let mut levels = Vec::with_capacity(nlevels);
        for _ in 0..nlevels {
            let nv = r.u32()?;
            let mut vertices = Vec::with_capacity(nv);
            for _ in 0..nv {
                vertices.push([r.f64()?, r.f64()?, r.f64()?]);
            }
            let nf = r.u32()?;
            let mut faces = Vec::with_capacity(nf);
            for _ in 0..nf {
                faces.push([r.u32()?, r.u32()?, r.u32()?]);
            }
            let nd = r.u32()?;
            let down_map = (0..nd).map(|_| r.u32()).collect::<Result<_>>()?;
            let nu = r.u32()?;
            let mut up_map = Vec::with_capacity(nu);
            for _ in 0..nu {
                up_map.push((r.u32()?, [r.f64()?, r.f64()?, r.f64()?]));
            }
            levels.push(SamplingLevel {
                coarse_mesh: Mesh::new(vertices, faces)?,
                down_map,
                up_map,
            });
        }
        let mut spirals = Vec::with_capacity(nlevels);
        for _ in 0..nlevels {
            let n = r.u32()?;
            let length = r.u32()?;
            let mut sequences = Vec::with_capacity(n);
            for _ in 0..n {
                sequences.push((0..length).map(|_| r.u32()).collect::<Result<_>>()?);
            }
            spirals.push(SpiralTable { length, sequences });
        }
        let nl = r.u32()?;
        let mut labels = Vec::with_capacity(nl);
        for _ in 0..nl {
            let n = r.u32()?;
            labels.push((0..n).map(|_| r.u32()).collect::<Result<_>>()?);
        }
        if !r.done() {
            return Err(Error::Format("trailing bytes in hierarchy file".into()));
        }
        Ok(SamplingHierarchy {
            levels,
            spirals,
            labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Checks that the hierarchy was built on a mesh with `template`'s size.
    pub fn check_template(&self, template: &Mesh) -> Result<()> {
        if self.levels.is_empty() || self.levels[0].fine_count() != template.vertex_count() {
            return Err(Error::Shape("hierarchy was built for a different template".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn barycentric_ok(w: &[f64; 3]) -> bool {
        w.iter().all(|&x| x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() <= 1e-9
    }
    use crate::mesh::fixtures::{grid, icosahedron, tetrahedron};

    fn positions(m: &Mesh) -> Vec<Vec<f64>> {
        m.vertices.iter().map(|v| v.to_vec()).collect()
    }

    #[test]
    fn ratio_one_is_identity() {
        let m = icosahedron();
        let l = qem_decimate(&m, 1.0).unwrap();
        assert_eq!(l.coarse_mesh, m);
        assert_eq!(l.down_map, (0..12).collect::<Vec<_>>());
        for (v, &(t, w)) in l.up_map.iter().enumerate() {
            assert!(m.faces[t].contains(&v));
            assert_eq!(w.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(w.iter().filter(|&&x| x == 0.0).count(), 2);
        }
    }

    #[test]
    fn planar_grid_round_trip_is_exact() {
        let g = grid(10, 0.1);
        let l = qem_decimate(&g, 0.25).unwrap();
        assert_eq!(l.coarse_count(), 25);
        let down = apply_down(&l, &positions(&g)).unwrap();
        let up = apply_up(&l, &down).unwrap();
        for (a, b) in up.iter().zip(&g.vertices) {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            assert!(d < 1e-6, "{d}");
        }
        // Oracle: each fine vertex projects onto the coarse mesh with zero distance.
        let c = &l.coarse_mesh;
        for p in &g.vertices {
            let best = c
                .faces
                .iter()
                .map(|t| {
                    let (q, _) = closest_point_on_triangle(*p, c.vertices[t[0]], c.vertices[t[1]], c.vertices[t[2]]);
                    norm(sub(*p, q))
                })
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6);
        }
    }

    #[test]
    fn hundred_vertices_quarter_ratio() {
        let g = grid(10, 1.0);
        assert_eq!(qem_decimate(&g, 0.25).unwrap().coarse_count(), 25);
    }

    #[test]
    fn level_invariants() {
        let g = grid(12, 0.05);
        let l = qem_decimate(&g, 0.3).unwrap();
        for (_, w) in &l.up_map {
            assert!(barycentric_ok(w));
        }
        let set: BTreeSet<_> = l.down_map.iter().collect();
        assert_eq!(set.len(), l.down_map.len());
        build_adjacency(&l.coarse_mesh).unwrap();
    }

    #[test]
    fn down_selection_semantics() {
        let g = grid(8, 0.1);
        let l = qem_decimate(&g, 0.5).unwrap();
        let constant = vec![vec![2.5, -1.0]; 64];
        assert!(apply_down(&l, &constant).unwrap().iter().all(|r| r == &vec![2.5, -1.0]));
        assert!(apply_up(&l, &vec![vec![2.5]; l.coarse_count()])
            .unwrap()
            .iter()
            .all(|r| (r[0] - 2.5).abs() < 1e-12));
        let s = l.down_map[3];
        let mut one_hot = vec![vec![0.0]; 64];
        one_hot[s][0] = 1.0;
        let d = apply_down(&l, &one_hot).unwrap();
        assert_eq!(d[3][0], 1.0);
        assert_eq!(d.iter().map(|r| r[0]).sum::<f64>(), 1.0);
        // A surviving vertex reads back exactly its own coarse row.
        let coarse: Vec<Vec<f64>> = (0..l.coarse_count()).map(|i| vec![i as f64]).collect();
        let up = apply_up(&l, &coarse).unwrap();
        assert_eq!(up[s][0], 3.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        let g = grid(5, 0.1);
        let l = qem_decimate(&g, 0.5).unwrap();
        assert!(apply_down(&l, &vec![vec![0.0]; 3]).is_err());
        assert!(apply_up(&l, &vec![vec![0.0]; 3]).is_err());
    }

    #[test]
    fn executed_costs_accumulate_monotonically() {
        let m = icosahedron();
        let (_, costs) = decimate(&m, 0.5, None).unwrap();
        assert_eq!(costs.len(), 6);
        let mut total = 0.0;
        for c in costs {
            assert!(c >= 0.0);
            let next = total + c;
            assert!(next >= total);
            total = next;
        }
    }

    #[test]
    fn spirals_start_with_self_and_cover_ring() {
        let m = icosahedron();
        let adj = build_adjacency(&m).unwrap();
        let s = compute_spirals(&m, &adj, 6).unwrap();
        for v in 0..12 {
            assert_eq!(s.sequences[v][0], v);
            let mut got = s.sequences[v][1..].to_vec();
            got.sort();
            let mut ring = adj.ring(v).to_vec();
            ring.sort();
            assert_eq!(got, ring);
        }
    }

    #[test]
    fn tetrahedron_spiral_padding() {
        let m = tetrahedron();
        let adj = build_adjacency(&m).unwrap();
        let s = compute_spirals(&m, &adj, 8).unwrap();
        for seq in &s.sequences {
            assert_eq!(seq.len(), 8);
            assert!(seq[4..].iter().all(|&x| x == seq[3]));
        }
    }

    #[test]
    fn isolated_vertex_rejected() {
        let mut m = tetrahedron();
        m.vertices.push([5.0, 5.0, 5.0]);
        let adj = build_adjacency(&m).unwrap();
        assert!(matches!(compute_spirals(&m, &adj, 4), Err(Error::IsolatedVertex(4))));
    }

    proptest::proptest! {
        #[test]
        fn up_and_down_are_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..20) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = grid(6, 0.1);
            let l = qem_decimate(&g, 0.5).unwrap();
            let x: Vec<Vec<f64>> = (0..36).map(|_| vec![rng.gen(), rng.gen()]).collect();
            let y: Vec<Vec<f64>> = (0..36).map(|_| vec![rng.gen(), rng.gen()]).collect();
            let mix: Vec<Vec<f64>> = x.iter().zip(&y).map(|(p, q)| vec![a*p[0]+b*q[0], a*p[1]+b*q[1]]).collect();
            let (dx, dy, dm) = (apply_down(&l, &x).unwrap(), apply_down(&l, &y).unwrap(), apply_down(&l, &mix).unwrap());
            let (ux, uy, um) = (apply_up(&l, &dx).unwrap(), apply_up(&l, &dy).unwrap(), apply_up(&l, &dm).unwrap());
            for i in 0..dm.len() { for k in 0..2 {
                proptest::prop_assert!((dm[i][k] - (a*dx[i][k] + b*dy[i][k])).abs() < 1e-12);
            }}
            for i in 0..um.len() { for k in 0..2 {
                proptest::prop_assert!((um[i][k] - (a*ux[i][k] + b*uy[i][k])).abs() < 1e-12);
            }}
        }
    }
}
