//! Procedural articulated bodies with known shape and pose factors.
//!
//! The body is one closed tube network: a vertical trunk (pelvis, two torso
//! segments, head) with two arm tubes grafted onto side patches and two leg
//! tubes hanging from a split crotch. Every joint sits at the center of a
//! uniformly spaced vertex ring, so the ring average recovers it exactly in
//! the rest pose. Vertices are posed with linear blend skinning.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};
use crate::skeleton::{SkeletonFile, SkeletonSpec};

pub const BONE_COUNT: usize = 12;
pub const MULT_RANGE: (f64, f64) = (0.7, 1.3);
pub const GIRTH_RANGE: (f64, f64) = (0.9, 1.1);

const TORSO_SIDES: usize = 16;
const ARM_SIDES: usize = 8;
const LEG_SIDES: usize = 12;
const SKIN_FALLOFF: f64 = 1.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bone {
    pub name: String,
    pub start: usize,
    pub end: usize,
    pub parent: Option<usize>,
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub joint_names: Vec<String>,
    pub joint_rest: Vec<Vec3>,
    pub bones: Vec<Bone>,
    /// Per-bone maximum rotation magnitude (radians).
    pub joint_limits: Vec<f64>,
    /// Axial spacing of limb rings (meters); controls tessellation density.
    pub ring_spacing: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let j = |name: &str, p: Vec3| (name.to_string(), p);
        let joints = [
            j("root", [0.0, 1.00, 0.0]),
            j("spine", [0.0, 1.12, 0.0]),
            j("chest", [0.0, 1.30, 0.0]),
            j("neck", [0.0, 1.53, 0.0]),
            j("head_top", [0.0, 1.73, 0.0]),
            j("l_shoulder", [0.20, 1.42, 0.0]),
            j("l_elbow", [0.47, 1.42, 0.0]),
            j("l_wrist", [0.72, 1.42, 0.0]),
            j("r_shoulder", [-0.20, 1.42, 0.0]),
            j("r_elbow", [-0.47, 1.42, 0.0]),
            j("r_wrist", [-0.72, 1.42, 0.0]),
            j("l_hip", [0.09, 0.92, 0.0]),
            j("l_knee", [0.09, 0.52, 0.0]),
            j("l_ankle", [0.09, 0.10, 0.0]),
            j("r_hip", [-0.09, 0.92, 0.0]),
            j("r_knee", [-0.09, 0.52, 0.0]),
            j("r_ankle", [-0.09, 0.10, 0.0]),
        ];
        let b = |name: &str, start, end, parent, radius| Bone {
            name: name.to_string(),
            start,
            end,
            parent,
            radius,
        };
        let bones = vec![
            b("pelvis", 0, 1, None, 0.15),
            b("torso_lower", 1, 2, Some(0), 0.15),
            b("torso_upper", 2, 3, Some(1), 0.15),
            b("head", 3, 4, Some(2), 0.10),
            b("l_upper_arm", 5, 6, Some(2), 0.05),
            b("l_lower_arm", 6, 7, Some(4), 0.043),
            b("r_upper_arm", 8, 9, Some(2), 0.05),
            b("r_lower_arm", 9, 10, Some(6), 0.043),
            b("l_upper_leg", 11, 12, Some(0), 0.075),
            b("l_lower_leg", 12, 13, Some(8), 0.055),
            b("r_upper_leg", 14, 15, Some(0), 0.075),
            b("r_lower_leg", 15, 16, Some(10), 0.055),
        ];
        GeneratorSpec {
            joint_names: joints.iter().map(|(n, _)| n.clone()).collect(),
            joint_rest: joints.iter().map(|(_, p)| *p).collect(),
            bones,
            joint_limits: vec![0.15, 0.3, 0.3, 0.4, 1.0, 0.9, 1.0, 0.9, 0.7, 0.8, 0.7, 0.8],
            ring_spacing: 0.03,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bones.len() != BONE_COUNT || self.joint_limits.len() != BONE_COUNT {
            return Err(Error::InvalidArgument(format!(
                "generator expects {BONE_COUNT} bones"
            )));
        }
        let roots = self.bones.iter().filter(|b| b.parent.is_none()).count();
        if roots != 1 {
            return Err(Error::InvalidArgument(format!("{roots} root bones")));
        }
        // Parents must precede children, which makes the tree acyclic.
        for (i, b) in self.bones.iter().enumerate() {
            if let Some(p) = b.parent {
                if p >= i {
                    return Err(Error::InvalidArgument(format!(
                        "bone {i} has parent {p} not listed before it"
                    )));
                }
            }
        }
        if !(self.ring_spacing > 0.0) {
            return Err(Error::InvalidArgument("ring spacing must be positive".into()));
        }
        Ok(())
    }

    fn length(&self, b: usize) -> f64 {
        let bone = &self.bones[b];
        crate::mesh::norm(crate::mesh::sub(
            self.joint_rest[bone.end],
            self.joint_rest[bone.start],
        ))
    }

    fn dir(&self, b: usize) -> Vec3 {
        let bone = &self.bones[b];
        let d = crate::mesh::sub(self.joint_rest[bone.end], self.joint_rest[bone.start]);
        crate::mesh::scale(d, 1.0 / crate::mesh::norm(d))
    }

    fn children(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.bones.len()).filter(move |&c| self.bones[c].parent == Some(b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub length: Vec<f64>,
    pub radius: Vec<f64>,
    pub girth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    /// Axis-angle rotation per bone, relative to its parent.
    pub rotations: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyFactors {
    pub shape: ShapeParams,
    pub pose: PoseParams,
}

impl BodyFactors {
    pub fn identity() -> Self {
        BodyFactors {
            shape: ShapeParams {
                length: vec![1.0; BONE_COUNT],
                radius: vec![1.0; BONE_COUNT],
                girth: 1.0,
            },
            pose: PoseParams {
                rotations: vec![[0.0; 3]; BONE_COUNT],
            },
        }
    }

    pub fn validate(&self, spec: &GeneratorSpec) -> Result<()> {
        let s = &self.shape;
        if s.length.len() != BONE_COUNT
            || s.radius.len() != BONE_COUNT
            || self.pose.rotations.len() != BONE_COUNT
        {
            return Err(Error::InvalidArgument("factor vectors need one entry per bone".into()));
        }
        let in_range = |x: f64, r: (f64, f64)| x >= r.0 && x <= r.1;
        for (i, (&l, &r)) in s.length.iter().zip(&s.radius).enumerate() {
            if !in_range(l, MULT_RANGE) || !in_range(r, MULT_RANGE) {
                return Err(Error::InvalidArgument(format!(
                    "bone {i} multiplier outside [{}, {}]",
                    MULT_RANGE.0, MULT_RANGE.1
                )));
            }
        }
        if !in_range(s.girth, GIRTH_RANGE) {
            return Err(Error::InvalidArgument(format!("girth {} out of range", s.girth)));
        }
        for (i, r) in self.pose.rotations.iter().enumerate() {
            if crate::mesh::norm(*r) > spec.joint_limits[i] + 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "bone {i} rotation exceeds its limit {}",
                    spec.joint_limits[i]
                )));
            }
        }
        Ok(())
    }

    pub fn sample(rng: &mut impl Rng, spec: &GeneratorSpec) -> Self {
        let length = (0..BONE_COUNT).map(|_| rng.gen_range(MULT_RANGE.0..=MULT_RANGE.1)).collect();
        let radius = (0..BONE_COUNT).map(|_| rng.gen_range(MULT_RANGE.0..=MULT_RANGE.1)).collect();
        let girth = rng.gen_range(GIRTH_RANGE.0..=GIRTH_RANGE.1);
        let rotations = spec
            .joint_limits
            .iter()
            .map(|&lim| {
                // Per-axis bound keeps the magnitude within the limit.
                let a = lim / 3f64.sqrt();
                [
                    rng.gen_range(-a..=a),
                    rng.gen_range(-a..=a),
                    rng.gen_range(-a..=a),
                ]
            })
            .collect();
        BodyFactors {
            shape: ShapeParams {
                length,
                radius,
                girth,
            },
            pose: PoseParams { rotations },
        }
    }
}

/// Per-vertex construction record: home bone and rest-frame coordinates.
#[derive(Debug, Clone)]
struct VertexRecord {
    bone: usize,
    axial: f64,
    radial: Vec3,
}

/// Fixed connectivity, rest geometry and skinning for one [`GeneratorSpec`].
#[derive(Debug, Clone)]
pub struct BodyModel {
    spec: GeneratorSpec,
    faces: Vec<[usize; 3]>,
    records: Vec<VertexRecord>,
    rest: Vec<Vec3>,
    /// Sparse skinning weights per vertex.
    weights: Vec<Vec<(usize, f64)>>,
    joint_rings: Vec<Vec<usize>>,
}

struct Builder {
    pos: Vec<Vec3>,
    bone: Vec<usize>,
    faces: Vec<[usize; 3]>,
}

impl Builder {
    fn vertex(&mut self, p: Vec3, bone: usize) -> usize {
        self.pos.push(p);
        self.bone.push(bone);
        self.pos.len() - 1
    }

    /// Adds quad (a, b, c, d) as two triangles, oriented so the normal points
    /// away from `inside`.
    fn quad(&mut self, q: [usize; 4], inside: Vec3) {
        let [a, b, c, d] = q;
        let n = tri_normal(&self.pos, [a, b, c]);
        let centroid = crate::mesh::scale(
            (0..4).fold([0.0; 3], |acc, i| crate::mesh::add(acc, self.pos[q[i]])),
            0.25,
        );
        if crate::mesh::dot(n, crate::mesh::sub(centroid, inside)) >= 0.0 {
            self.faces.push([a, b, c]);
            self.faces.push([a, c, d]);
        } else {
            self.faces.push([a, c, b]);
            self.faces.push([a, d, c]);
        }
    }

    fn tri(&mut self, t: [usize; 3], inside: Vec3) {
        let n = tri_normal(&self.pos, t);
        let c = crate::mesh::scale(
            crate::mesh::add(crate::mesh::add(self.pos[t[0]], self.pos[t[1]]), self.pos[t[2]]),
            1.0 / 3.0,
        );
        if crate::mesh::dot(n, crate::mesh::sub(c, inside)) >= 0.0 {
            self.faces.push(t);
        } else {
            self.faces.push([t[0], t[2], t[1]]);
        }
    }

    /// Builds a limb tube from an existing boundary loop. `stations` are
    /// (axial distance from `origin`, radius, bone, joint id if this ring is a
    /// joint ring). Returns the rings created, capped with a pole.
    fn limb(
        &mut self,
        loop_ids: &[usize],
        origin: Vec3,
        axis: Vec3,
        basis: (Vec3, Vec3),
        stations: &[(f64, f64, usize, Option<usize>)],
        joint_rings: &mut [Vec<usize>],
    ) {
        use crate::mesh::{add, dot, scale, sub};
        let n = loop_ids.len();
        let angle_of = |p: Vec3| {
            let d = sub(p, origin);
            dot(d, basis.1).atan2(dot(d, basis.0))
        };
        let a0 = angle_of(self.pos[loop_ids[0]]);
        let a1 = angle_of(self.pos[loop_ids[1]]);
        let mut step = a1 - a0;
        while step > PI {
            step -= 2.0 * PI;
        }
        while step < -PI {
            step += 2.0 * PI;
        }
        let dir = step.signum();
        let mut prev = loop_ids.to_vec();
        let mut prev_center = origin;
        for &(t, r, bone, joint) in stations {
            let center = add(origin, scale(axis, t));
            let ring: Vec<usize> = (0..n)
                .map(|k| {
                    let a = a0 + dir * 2.0 * PI * k as f64 / n as f64;
                    let p = add(
                        center,
                        add(scale(basis.0, r * a.cos()), scale(basis.1, r * a.sin())),
                    );
                    self.vertex(p, bone)
                })
                .collect();
            let inside = scale(add(center, prev_center), 0.5);
            for k in 0..n {
                let k1 = (k + 1) % n;
                self.quad([prev[k], prev[k1], ring[k1], ring[k]], inside);
            }
            if let Some(j) = joint {
                joint_rings[j] = ring.clone();
            }
            prev = ring;
            prev_center = center;
        }
        let &(t_last, r_last, bone, _) = stations.last().expect("stations");
        let tip_center = add(origin, scale(axis, t_last));
        // Hemispherical cap: two shrinking rings then a pole.
        for c in 1..=2 {
            let alpha = c as f64 * PI / 6.0;
            let center = add(tip_center, scale(axis, r_last * alpha.sin()));
            let r = r_last * alpha.cos();
            let ring: Vec<usize> = (0..n)
                .map(|k| {
                    let a = a0 + dir * 2.0 * PI * k as f64 / n as f64;
                    let p = add(center, add(scale(basis.0, r * a.cos()), scale(basis.1, r * a.sin())));
                    self.vertex(p, bone)
                })
                .collect();
            for k in 0..n {
                let k1 = (k + 1) % n;
                self.quad([prev[k], prev[k1], ring[k1], ring[k]], tip_center);
            }
            prev = ring;
        }
        let pole = self.vertex(add(tip_center, scale(axis, r_last)), bone);
        for k in 0..n {
            self.tri([prev[k], prev[(k + 1) % n], pole], tip_center);
        }
    }
}

fn tri_normal(pos: &[Vec3], t: [usize; 3]) -> Vec3 {
    crate::mesh::cross(
        crate::mesh::sub(pos[t[1]], pos[t[0]]),
        crate::mesh::sub(pos[t[2]], pos[t[0]]),
    )
}

/// Limb stations from `t0` to the end of `bones`, one ring per spacing step,
/// with joint rings at every bone boundary.
fn limb_stations(
    spec: &GeneratorSpec,
    bones: &[usize],
    radii: &[(f64, f64)],
) -> Vec<(f64, f64, usize, Option<usize>)> {
    let mut out = Vec::new();
    let mut offset = 0.0;
    for (i, &b) in bones.iter().enumerate() {
        let len = spec.length(b);
        let segs = (len / spec.ring_spacing).round().max(1.0) as usize;
        let (r0, r1) = radii[i];
        let start = if i == 0 { 0 } else { 1 };
        for s in start..=segs {
            let f = s as f64 / segs as f64;
            let joint = if s == 0 {
                Some(spec.bones[b].start)
            } else if s == segs {
                Some(spec.bones[b].end)
            } else {
                None
            };
            // The ring at a shared joint belongs to the child bone.
            let bone = if s == segs && i + 1 < bones.len() { bones[i + 1] } else { b };
            out.push((offset + f * len, r0 + f * (r1 - r0), bone, joint));
        }
        offset += len;
    }
    out
}

impl BodyModel {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let nj = spec.joint_rest.len();
        let mut joint_rings = vec![Vec::new(); nj];
        let mut b = Builder {
            pos: Vec::new(),
            bone: Vec::new(),
            faces: Vec::new(),
        };

        // Trunk rings: (height, radius, bone, joint).
        let trunk: [(f64, f64, usize, Option<usize>); 17] = [
            (1.00, 0.15, 0, Some(0)),
            (1.06, 0.15, 0, None),
            (1.12, 0.15, 1, Some(1)),
            (1.18, 0.15, 1, None),
            (1.24, 0.15, 1, None),
            (1.30, 0.15, 2, Some(2)),
            (1.36, 0.15, 2, None),
            (1.42, 0.15, 2, None),
            (1.48, 0.15, 2, None),
            (1.505, 0.11, 2, None),
            (1.53, 0.06, 3, Some(3)),
            (1.58, 0.085, 3, None),
            (1.63, 0.10, 3, None),
            (1.68, 0.10, 3, None),
            (1.73, 0.10, 3, Some(4)),
            (1.78, 0.0866, 3, None),
            (1.8166, 0.05, 3, None),
        ];
        const SHOULDER_RING: usize = 7;
        let (l_center, r_center) = (0usize, TORSO_SIDES / 2);
        let mut rings: Vec<Vec<Option<usize>>> = Vec::new();
        for (ri, &(y, r, bone, joint)) in trunk.iter().enumerate() {
            let ring: Vec<Option<usize>> = (0..TORSO_SIDES)
                .map(|i| {
                    if ri == SHOULDER_RING && (i == l_center || i == r_center) {
                        return None;
                    }
                    let a = 2.0 * PI * i as f64 / TORSO_SIDES as f64;
                    Some(b.vertex([r * a.cos(), y, r * a.sin()], bone))
                })
                .collect();
            if let Some(j) = joint {
                joint_rings[j] = ring.iter().flatten().copied().collect();
            }
            rings.push(ring);
        }
        for ri in 0..trunk.len() - 1 {
            let inside = [0.0, 0.5 * (trunk[ri].0 + trunk[ri + 1].0), 0.0];
            for i in 0..TORSO_SIDES {
                let i1 = (i + 1) % TORSO_SIDES;
                let q = [rings[ri][i], rings[ri][i1], rings[ri + 1][i1], rings[ri + 1][i]];
                if q.iter().all(Option::is_some) {
                    b.quad(q.map(Option::unwrap), inside);
                }
            }
        }
        let top_y = 1.83;
        let pole = b.vertex([0.0, top_y, 0.0], 3);
        let last = rings.last().expect("rings").clone();
        for i in 0..TORSO_SIDES {
            let t = [last[i].unwrap(), last[(i + 1) % TORSO_SIDES].unwrap(), pole];
            b.tri(t, [0.0, 1.78, 0.0]);
        }

        // Crotch divider from front (+z) to back (-z).
        let front = TORSO_SIDES / 4;
        let back = 3 * TORSO_SIDES / 4;
        let mids: Vec<usize> = [0.075, 0.0, -0.075]
            .iter()
            .map(|&z| b.vertex([0.0, 0.96, z], 0))
            .collect();
        let bottom = &rings[0];
        let ring_idx = |i: usize| bottom[i % TORSO_SIDES].unwrap();
        let mut left_loop: Vec<usize> = (back..=TORSO_SIDES + front).map(ring_idx).collect();
        left_loop.extend(mids.iter().copied());
        let mut right_loop: Vec<usize> = (front..=back).map(ring_idx).collect();
        right_loop.extend(mids.iter().rev().copied());
        debug_assert_eq!(left_loop.len(), LEG_SIDES);
        debug_assert_eq!(right_loop.len(), LEG_SIDES);

        // Arm patch loops around the removed shoulder-ring vertices.
        let patch = |center: usize, reversed: bool| -> Vec<usize> {
            let c = |ri: usize, d: isize| {
                let i = (center as isize + d).rem_euclid(TORSO_SIDES as isize) as usize;
                rings[ri][i].unwrap()
            };
            let (lo, mid, hi) = (SHOULDER_RING - 1, SHOULDER_RING, SHOULDER_RING + 1);
            let s: isize = if reversed { 1 } else { -1 };
            vec![
                c(lo, s),
                c(lo, 0),
                c(lo, -s),
                c(mid, -s),
                c(hi, -s),
                c(hi, 0),
                c(hi, s),
                c(mid, s),
            ]
        };
        let l_patch = patch(l_center, false);
        let r_patch = patch(r_center, true);
        debug_assert_eq!(l_patch.len(), ARM_SIDES);

        let arm_radii = [(0.05, 0.045), (0.045, 0.04)];
        for (side, loop_ids, bones) in [(1.0, &l_patch, [4usize, 5]), (-1.0, &r_patch, [6, 7])] {
            let origin = spec.joint_rest[spec.bones[bones[0]].start];
            let stations = limb_stations(&spec, &bones, &arm_radii);
            let axis = [side, 0.0, 0.0];
            b.limb(loop_ids, origin, axis, ([0.0, 0.0, 1.0], [0.0, 1.0, 0.0]), &stations, &mut joint_rings);
        }
        let leg_radii = [(0.075, 0.055), (0.055, 0.045)];
        for (loop_ids, bones) in [(&left_loop, [8usize, 9]), (&right_loop, [10, 11])] {
            let origin = spec.joint_rest[spec.bones[bones[0]].start];
            let stations = limb_stations(&spec, &bones, &leg_radii);
            b.limb(
                loop_ids,
                origin,
                [0.0, -1.0, 0.0],
                ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
                &stations,
                &mut joint_rings,
            );
        }

        let Builder { pos, bone, faces } = b;
        let records = pos
            .iter()
            .zip(&bone)
            .map(|(&p, &bn)| {
                let start = spec.joint_rest[spec.bones[bn].start];
                let d = crate::mesh::sub(p, start);
                let dir = spec.dir(bn);
                let axial = crate::mesh::dot(d, dir);
                let radial = crate::mesh::sub(d, crate::mesh::scale(dir, axial));
                VertexRecord {
                    bone: bn,
                    axial,
                    radial,
                }
            })
            .collect();
        let weights = skinning_weights(&spec, &pos, &bone);
        let model = BodyModel {
            spec,
            faces,
            records,
            rest: pos,
            weights,
            joint_rings,
        };
        Mesh::new(model.rest.clone(), model.faces.clone())?;
        Ok(model)
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn vertex_count(&self) -> usize {
        self.rest.len()
    }

    pub fn template(&self) -> Mesh {
        Mesh {
            vertices: self.rest.clone(),
            faces: self.faces.clone(),
        }
    }

    pub fn skinning_weights(&self) -> &[Vec<(usize, f64)>] {
        &self.weights
    }

    pub fn joint_rings(&self) -> &[Vec<usize>] {
        &self.joint_rings
    }

    fn rest_scale(&self, b: usize, shape: &ShapeParams) -> f64 {
        shape.radius[b] * shape.girth
    }

    /// Maps rest-frame coordinates of bone `b` through the shape factors.
    fn shaped_point(&self, b: usize, axial: f64, radial: Vec3, shape: &ShapeParams, starts: &[Vec3]) -> Vec3 {
        use crate::mesh::{add, scale};
        let len = self.spec.length(b);
        let inner = axial.clamp(0.0, len);
        let rs = self.rest_scale(b, shape);
        let a = inner * shape.length[b] + (axial - inner) * rs;
        add(
            starts[b],
            add(scale(self.spec.dir(b), a), scale(radial, rs)),
        )
    }

    /// Shaped rest positions of every bone's start joint and of all joints.
    fn shaped_joints(&self, shape: &ShapeParams) -> (Vec<Vec3>, Vec<Vec3>) {
        let spec = &self.spec;
        let mut starts = vec![[0.0; 3]; BONE_COUNT];
        let mut joints = spec.joint_rest.clone();
        for b in 0..BONE_COUNT {
            let bone = &spec.bones[b];
            starts[b] = match bone.parent {
                None => spec.joint_rest[bone.start],
                Some(p) => {
                    let pstart = spec.joint_rest[spec.bones[p].start];
                    let d = crate::mesh::sub(spec.joint_rest[bone.start], pstart);
                    let dir = spec.dir(p);
                    let axial = crate::mesh::dot(d, dir);
                    let radial = crate::mesh::sub(d, crate::mesh::scale(dir, axial));
                    self.shaped_point(p, axial, radial, shape, &starts)
                }
            };
            joints[bone.start] = starts[b];
            joints[bone.end] = self.shaped_point(b, spec.length(b), [0.0; 3], shape, &starts);
        }
        (starts, joints)
    }

    fn global_rotations(&self, pose: &PoseParams) -> Vec<Matrix3<f64>> {
        let mut g: Vec<Matrix3<f64>> = Vec::with_capacity(BONE_COUNT);
        for b in 0..BONE_COUNT {
            let r = pose.rotations[b];
            let local = Rotation3::new(Vector3::new(r[0], r[1], r[2])).into_inner();
            let m = match self.spec.bones[b].parent {
                Some(p) => g[p] * local,
                None => local,
            };
            g.push(m);
        }
        g
    }

    /// Posed joint positions (forward kinematics).
    pub fn posed_joints(&self, factors: &BodyFactors) -> Vec<Vec3> {
        let (starts, rest_joints) = self.shaped_joints(&factors.shape);
        let g = self.global_rotations(&factors.pose);
        let posed_starts = self.posed_starts(&starts, &g);
        let mut out = rest_joints.clone();
        for b in 0..BONE_COUNT {
            let bone = &self.spec.bones[b];
            out[bone.start] = posed_starts[b];
            out[bone.end] = transform(&g[b], starts[b], posed_starts[b], rest_joints[bone.end]);
        }
        out
    }

    fn posed_starts(&self, starts: &[Vec3], g: &[Matrix3<f64>]) -> Vec<Vec3> {
        let mut posed = vec![[0.0; 3]; BONE_COUNT];
        for b in 0..BONE_COUNT {
            posed[b] = match self.spec.bones[b].parent {
                None => starts[b],
                Some(p) => transform(&g[p], starts[p], posed[p], starts[b]),
            };
        }
        posed
    }

    pub fn generate(&self, factors: &BodyFactors) -> Result<Mesh> {
        factors.validate(&self.spec)?;
        let (starts, _) = self.shaped_joints(&factors.shape);
        let g = self.global_rotations(&factors.pose);
        let posed = self.posed_starts(&starts, &g);
        let vertices = self
            .records
            .iter()
            .zip(&self.weights)
            .map(|(rec, w)| {
                let rest = self.shaped_point(rec.bone, rec.axial, rec.radial, &factors.shape, &starts);
                let mut p = [0.0; 3];
                for &(b, wb) in w {
                    let q = transform(&g[b], starts[b], posed[b], rest);
                    for k in 0..3 {
                        p[k] += wb * q[k];
                    }
                }
                p
            })
            .collect();
        Ok(Mesh {
            vertices,
            faces: self.faces.clone(),
        })
    }

    pub fn emit_skeleton_spec(&self) -> SkeletonSpec {
        let mut regressor = Vec::new();
        for (j, ring) in self.joint_rings.iter().enumerate() {
            let w = 1.0 / ring.len() as f64;
            for &v in ring {
                regressor.push((j, v, w));
            }
        }
        let part_labels = self
            .weights
            .iter()
            .zip(&self.records)
            .map(|(w, rec)| {
                let mut best = (rec.bone, f64::NEG_INFINITY);
                for &(b, wb) in w {
                    if wb > best.1 || (wb == best.1 && b == rec.bone) {
                        best = (b, wb);
                    }
                }
                best.0
            })
            .collect();
        let file = SkeletonFile {
            k: BONE_COUNT,
            joints: self.spec.joint_names.clone(),
            regressor,
            part_labels,
            groups: self.spec.bones.iter().map(|b| vec![b.start, b.end]).collect(),
            group_names: self.spec.bones.iter().map(|b| b.name.clone()).collect(),
        };
        SkeletonSpec::from_file(file, self.vertex_count()).expect("generator emits a valid skeleton")
    }
}

fn transform(g: &Matrix3<f64>, rest_pivot: Vec3, posed_pivot: Vec3, p: Vec3) -> Vec3 {
    let d = Vector3::new(p[0] - rest_pivot[0], p[1] - rest_pivot[1], p[2] - rest_pivot[2]);
    let r = g * d;
    [r[0] + posed_pivot[0], r[1] + posed_pivot[1], r[2] + posed_pivot[2]]
}

fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    use crate::mesh::{dot, norm, scale, sub};
    let ab = sub(b, a);
    let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
    norm(sub(p, crate::mesh::add(a, scale(ab, t))))
}

/// Capsule-distance weights restricted to the home bone, its parent and its
/// children; each falls to zero `SKIN_FALLOFF` radii outside the capsule.
fn skinning_weights(spec: &GeneratorSpec, pos: &[Vec3], home: &[usize]) -> Vec<Vec<(usize, f64)>> {
    pos.iter()
        .zip(home)
        .map(|(&p, &h)| {
            let mut cands: Vec<usize> = vec![h];
            if let Some(par) = spec.bones[h].parent {
                cands.push(par);
            }
            cands.extend(spec.children(h));
            cands.sort_unstable();
            let mut w: Vec<(usize, f64)> = cands
                .into_iter()
                .filter_map(|b| {
                    let bone = &spec.bones[b];
                    let d = segment_distance(p, spec.joint_rest[bone.start], spec.joint_rest[bone.end]);
                    let outside = (d - bone.radius).max(0.0);
                    let x = 1.0 - outside / (SKIN_FALLOFF * bone.radius);
                    (x > 0.0).then_some((b, x * x))
                })
                .collect();
            if w.is_empty() {
                w.push((h, 1.0));
            }
            let s: f64 = w.iter().map(|&(_, x)| x).sum();
            for e in &mut w {
                e.1 /= s;
            }
            w
        })
        .collect()
}

pub fn generate_body(factors: &BodyFactors, model: &BodyModel) -> Result<Mesh> {
    model.generate(factors)
}

/// Body with the shape of `shape_of` and the pose of `pose_of`.
pub fn oracle_mesh(shape_of: &BodyFactors, pose_of: &BodyFactors, model: &BodyModel) -> Result<Mesh> {
    let f = BodyFactors {
        shape: shape_of.shape.clone(),
        pose: pose_of.pose.clone(),
    };
    model.generate(&f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub meshes: Vec<Mesh>,
    pub factors: Vec<BodyFactors>,
    pub splits: Splits,
}

/// 80/10/10 split of a seeded permutation.
pub fn make_splits(n: usize, seed: u64) -> Splits {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    idx.shuffle(&mut rng);
    let n_train = (n * 8) / 10;
    let n_val = (n - n_train) / 2;
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}

pub fn sample_dataset(n: usize, seed: u64, model: &BodyModel) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<BodyFactors> = (0..n).map(|_| BodyFactors::sample(&mut rng, model.spec())).collect();
    let meshes = factors.iter().map(|f| model.generate(f)).collect::<Result<_>>()?;
    Ok(SyntheticDataset {
        meshes,
        factors,
        splits: make_splits(n, seed),
    })
}
