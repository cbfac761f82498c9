//! Shared-topology triangle meshes: OBJ I/O, validation and 1-ring adjacency.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    /// Builds a mesh after checking the index invariants.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Mesh { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references a vertex outside [0, {n})"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} is degenerate")));
            }
        }
        Ok(())
    }

    /// Same connectivity, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Mesh> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Shape(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(Mesh {
            vertices,
            faces: self.faces.clone(),
        })
    }

    pub fn flat_positions(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Mesh> {
        if flat.len() != 3 * self.vertices.len() {
            return Err(Error::Shape(format!(
                "expected {} coordinates, got {}",
                3 * self.vertices.len(),
                flat.len()
            )));
        }
        self.with_vertices(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k];
            }
        }
        let n = self.vertices.len().max(1) as f64;
        c.map(|x| x / n)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        norm(sub(hi, lo))
    }

    pub fn same_connectivity(&self, other: &Mesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.faces == other.faces
    }
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

pub fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut vertices = Vec::new();
    let mut raw_faces: Vec<(usize, [i64; 3])> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let coords: Vec<f64> = toks
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(lineno, format!("bad vertex coordinate: {e}")))?;
                if coords.len() != 3 {
                    return Err(err(lineno, "vertex needs 3 coordinates".into()));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<i64> = toks
                    .map(|t| t.split('/').next().unwrap_or("").parse::<i64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(lineno, format!("bad face index: {e}")))?;
                if idx.len() != 3 {
                    return Err(err(lineno, "non-triangular face".into()));
                }
                raw_faces.push((lineno, [idx[0], idx[1], idx[2]]));
            }
            _ => {}
        }
    }
    let n = vertices.len() as i64;
    let mut faces = Vec::with_capacity(raw_faces.len());
    for (lineno, f) in raw_faces {
        let mut out = [0usize; 3];
        for k in 0..3 {
            // OBJ indices are 1-based; negative ones count back from the end.
            let resolved = if f[k] < 0 { n + f[k] } else { f[k] - 1 };
            if resolved < 0 || resolved >= n {
                return Err(err(lineno, format!("face index {} out of range", f[k])));
            }
            out[k] = resolved as usize;
        }
        faces.push(out);
    }
    let mesh = Mesh { vertices, faces };
    mesh.validate()?;
    Ok(mesh)
}

pub fn obj_string(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(48 * mesh.vertices.len() + 24 * mesh.faces.len());
    for v in &mesh.vertices {
        // Shortest representation that parses back to the same f64.
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    if mesh.vertices.is_empty() || mesh.faces.is_empty() {
        return Err(Error::EmptyMesh);
    }
    mesh.validate()?;
    let path = path.as_ref();
    std::fs::write(path, obj_string(mesh)).map_err(|e| Error::io(path, e))
}

/// 1-ring neighborhoods and the undirected edge list.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub rings: Vec<Vec<usize>>,
    pub edges: Vec<(usize, usize)>,
}

impl Adjacency {
    pub fn ring(&self, v: usize) -> &[usize] {
        &self.rings[v]
    }

    /// Number of directed (i, j) pairs, i.e. twice the edge count.
    pub fn directed_len(&self) -> usize {
        self.rings.iter().map(Vec::len).sum()
    }
}

/// Rings are ordered counterclockwise about the outward normal. At boundary
/// vertices the walk starts from the neighbor across the boundary edge.
pub fn build_adjacency(mesh: &Mesh) -> Result<Adjacency> {
    let n = mesh.vertex_count();
    let mut edge_faces: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    // fans[v] holds (a, b) for each face (v, a, b) in winding order.
    let mut fans: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for f in &mesh.faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            *edge_faces.entry((a.min(b), a.max(b))).or_default() += 1;
            fans[f[k]].push((f[(k + 1) % 3], f[(k + 2) % 3]));
        }
    }
    for (&(a, b), &count) in &edge_faces {
        if count > 2 {
            return Err(Error::NonManifoldEdge(a, b, count));
        }
    }
    let edges: Vec<(usize, usize)> = edge_faces.keys().copied().collect();

    let mut rings = Vec::with_capacity(n);
    for fan in &fans {
        rings.push(order_fan(fan));
    }
    Ok(Adjacency { rings, edges })
}

fn order_fan(fan: &[(usize, usize)]) -> Vec<usize> {
    let mut next: BTreeMap<usize, usize> = BTreeMap::new();
    let mut has_pred: BTreeMap<usize, bool> = BTreeMap::new();
    for &(a, b) in fan {
        next.insert(a, b);
        has_pred.entry(a).or_insert(false);
        has_pred.insert(b, true);
    }
    let mut ring = Vec::with_capacity(has_pred.len());
    let mut visited = std::collections::BTreeSet::new();
    while visited.len() < has_pred.len() {
        // Prefer the start of an open chain (a boundary edge), else the
        // first winding-order neighbor not yet seen.
        let start = has_pred
            .iter()
            .find(|(v, &p)| !p && !visited.contains(*v))
            .map(|(v, _)| *v)
            .or_else(|| {
                fan.iter()
                    .map(|&(a, _)| a)
                    .find(|a| !visited.contains(a))
            })
            .expect("unvisited neighbor exists");
        let mut cur = start;
        loop {
            if !visited.insert(cur) {
                break;
            }
            ring.push(cur);
            match next.get(&cur) {
                Some(&nx) => cur = nx,
                None => break,
            }
        }
    }
    ring
}

/// Succeeds iff every mesh carries the same face list as the first.
pub fn validate_dataset_topology(meshes: &[Mesh]) -> Result<()> {
    let first = meshes
        .first()
        .ok_or_else(|| Error::InvalidArgument("no meshes given".into()))?;
    for (i, m) in meshes.iter().enumerate().skip(1) {
        if !first.same_connectivity(m) {
            return Err(Error::TopologyMismatch(i));
        }
    }
    Ok(())
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn tetrahedron() -> Mesh {
        // Alternating cube corners scaled to unit edge length, outward winding.
        let c = 1.0 / (2.0 * 2f64.sqrt());
        let verts = vec![[c, c, c], [c, -c, -c], [-c, c, -c], [-c, -c, c]];
        Mesh::new(verts, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]).unwrap()
    }

    pub fn icosahedron() -> Mesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let verts = vec![
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ];
        let faces = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        Mesh::new(verts, faces).unwrap()
    }

    /// `n`×`n` vertex grid on the z = 0 plane with spacing `h`.
    pub fn grid(n: usize, h: f64) -> Mesh {
        let mut verts = Vec::new();
        for j in 0..n {
            for i in 0..n {
                verts.push([i as f64 * h, j as f64 * h, 0.0]);
            }
        }
        let mut faces = Vec::new();
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = j * n + i;
                let b = a + 1;
                let c = a + n;
                let d = c + 1;
                faces.push([a, b, d]);
                faces.push([a, d, c]);
            }
        }
        Mesh::new(verts, faces).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn tetrahedron_obj_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.obj");
        std::fs::write(
            &p,
            "# tet\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nvn 0 0 1\nf 1 3 2\nf 1 2 4\nf 1 4 3\nf 2 3 4\n",
        )
        .unwrap();
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.vertex_count(), 4);
        assert_eq!(m.face_count(), 4);
    }

    #[test]
    fn quad_face_rejected() {
        let e = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n", Path::new("q.obj"))
            .unwrap_err();
        assert!(e.to_string().contains("non-triangular face"), "{e}");
        assert!(e.to_string().contains(":5:"), "{e}");
    }

    #[test]
    fn out_of_range_index_rejected() {
        let e = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nf 1 2 9\n", Path::new("q.obj")).unwrap_err();
        assert!(e.to_string().contains("out of range"));
    }

    #[test]
    fn save_is_deterministic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = icosahedron();
        let (a, b) = (dir.path().join("a.obj"), dir.path().join("b.obj"));
        save_mesh(&m, &a).unwrap();
        save_mesh(&m, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let back = load_mesh(&a).unwrap();
        assert_eq!(back.faces, m.faces);
        for (p, q) in back.vertices.iter().zip(&m.vertices) {
            assert!(norm(sub(*p, *q)) < 1e-6);
        }
    }

    #[test]
    fn tetrahedron_file_line_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.obj");
        save_mesh(&tetrahedron(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 4);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 4);
    }

    #[test]
    fn empty_mesh_not_saved() {
        let m = Mesh {
            vertices: vec![],
            faces: vec![],
        };
        let e = save_mesh(&m, "/tmp/never.obj").unwrap_err();
        assert_eq!(e.to_string(), "empty mesh");
    }

    #[test]
    fn tetrahedron_rings() {
        let adj = build_adjacency(&tetrahedron()).unwrap();
        assert!(adj.rings.iter().all(|r| r.len() == 3));
        assert_eq!(adj.edges.len(), 6);
    }

    #[test]
    fn grid_interior_has_six_neighbors() {
        let adj = build_adjacency(&grid(5, 1.0)).unwrap();
        assert_eq!(adj.ring(12).len(), 6);
    }

    #[test]
    fn icosahedron_rings_match_face_enumeration() {
        let m = icosahedron();
        let adj = build_adjacency(&m).unwrap();
        // Oracle: neighbor sets straight from face incidences.
        for v in 0..12 {
            let mut expect: Vec<usize> = m
                .faces
                .iter()
                .filter(|f| f.contains(&v))
                .flat_map(|f| f.iter().copied())
                .filter(|&u| u != v)
                .collect();
            expect.sort();
            expect.dedup();
            let mut got = adj.ring(v).to_vec();
            got.sort();
            assert_eq!(got, expect);
            assert_eq!(got.len(), 5);
        }
        assert_eq!(adj.edges.len(), 30);
        // Euler characteristic of a sphere.
        assert_eq!(12 - 30 + 20, 2);
        let tet = build_adjacency(&tetrahedron()).unwrap();
        assert_eq!(4 - tet.edges.len() as i64 + 4, 2);
    }

    #[test]
    fn rings_are_counterclockwise() {
        let m = icosahedron();
        let adj = build_adjacency(&m).unwrap();
        for v in 0..12 {
            let r = adj.ring(v);
            let p = m.vertices[v];
            for k in 0..r.len() {
                let a = sub(m.vertices[r[k]], p);
                let b = sub(m.vertices[r[(k + 1) % r.len()]], p);
                // Outward normal of a sphere-like mesh is along p.
                assert!(dot(cross(a, b), p) > 0.0);
            }
        }
    }

    #[test]
    fn non_manifold_edge_named() {
        let m = Mesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]],
        )
        .unwrap();
        let e = build_adjacency(&m).unwrap_err();
        assert!(e.to_string().contains("(0, 1)"));
    }

    #[test]
    fn boundary_ring_starts_at_boundary_edge() {
        let g = grid(3, 1.0);
        let adj = build_adjacency(&g).unwrap();
        // Corner 0 touches faces (0,1,4) and (0,4,3): walk 1 -> 4 -> 3.
        assert_eq!(adj.ring(0), &[1, 4, 3]);
    }

    #[test]
    fn topology_validation() {
        let m = icosahedron();
        validate_dataset_topology(&[m.clone()]).unwrap();
        validate_dataset_topology(&[m.clone(), m.clone()]).unwrap();
        let mut p = m.clone();
        p.faces[3] = [p.faces[3][1], p.faces[3][2], p.faces[3][0]];
        let e = validate_dataset_topology(&[m, p]).unwrap_err();
        assert!(matches!(e, Error::TopologyMismatch(1)));
    }

    proptest::proptest! {
        #[test]
        fn adjacency_symmetric_on_grids(n in 2usize..8) {
            let adj = build_adjacency(&grid(n, 0.5)).unwrap();
            for (i, r) in adj.rings.iter().enumerate() {
                for &j in r {
                    proptest::prop_assert!(adj.rings[j].contains(&i));
                }
            }
        }
    }
}
