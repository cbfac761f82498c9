//! Training objectives: reconstruction with edge regularization, and the
//! ARAP-mediated cross- and self-consistency losses.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arap::{arap_deform_with, sample_anchors, ArapProblem};
use crate::error::{Error, Result};
use crate::mesh::{Adjacency, Mesh};
use crate::model::{positions_tensor, CodeNodes, DhbrModel, LatentCode};
use crate::nn::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_e: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_e: 2e-4,
            lambda_c: 0.5,
            lambda_s: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("lambda_e", self.lambda_e), ("lambda_c", self.lambda_c), ("lambda_s", self.lambda_s)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{n} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Pose-preserving corruption: scaling about the centroid plus noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    pub noise_sigma: f64,
    pub scale_range: [f64; 2],
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            noise_sigma: 5e-3,
            scale_range: [0.9, 1.1],
        }
    }
}

impl TransformConfig {
    pub fn identity() -> Self {
        TransformConfig {
            noise_sigma: 0.0,
            scale_range: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_sigma = {}", self.noise_sigma)));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale_range = [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Everything the objective needs besides the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub transform: TransformConfig,
    pub anchor_fraction: f64,
    pub arap_iterations: usize,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            weights: LossWeights::default(),
            transform: TransformConfig::default(),
            anchor_fraction: crate::arap::DEFAULT_ANCHOR_FRACTION,
            arap_iterations: crate::arap::DEFAULT_ITERATIONS,
        }
    }
}

impl LossSettings {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.transform.validate()?;
        if !(self.anchor_fraction > 0.0 && self.anchor_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("anchor_fraction = {}", self.anchor_fraction)));
        }
        if self.arap_iterations == 0 {
            return Err(Error::InvalidArgument("arap_iterations must be ≥ 1".into()));
        }
        Ok(())
    }
}

fn check_same(x: &Mesh, y: &Mesh) -> Result<()> {
    if !x.same_connectivity(y) {
        return Err(Error::Shape("meshes do not share connectivity".into()));
    }
    Ok(())
}

/// Mean over vertices and coordinates of |x − x̂|.
pub fn vertex_loss(x: &Mesh, x_hat: &Mesh) -> Result<f64> {
    check_same(x, x_hat)?;
    let s: f64 = x
        .vertices
        .iter()
        .zip(&x_hat.vertices)
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
        .sum();
    Ok(s / (3 * x.vertex_count()) as f64)
}

/// Σ_i Σ_{j∈N(i)} ‖v_i − v_j‖², each edge counted from both ends.
pub fn edge_loss(x_hat: &Mesh, adjacency: &Adjacency) -> Result<f64> {
    if adjacency.rings.len() != x_hat.vertex_count() {
        return Err(Error::Shape("adjacency built for a different mesh".into()));
    }
    let v = &x_hat.vertices;
    Ok(adjacency
        .rings
        .iter()
        .enumerate()
        .flat_map(|(i, ring)| ring.iter().map(move |&j| (0..3).map(|k| (v[i][k] - v[j][k]).powi(2)).sum::<f64>()))
        .sum())
}

/// s·(x − c) + c + ε with s uniform in the scale range and ε ~ N(0, σ²).
pub fn transform_pose_preserving(x: &Mesh, cfg: &TransformConfig, seed: u64) -> Result<Mesh> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = cfg.scale_range;
    let s = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let c = x.centroid();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let verts = x
        .vertices
        .iter()
        .map(|p| {
            let mut q = [0.0; 3];
            for k in 0..3 {
                q[k] = c[k] + s * (p[k] - c[k]);
                if cfg.noise_sigma > 0.0 {
                    q[k] += noise.sample(&mut rng);
                }
            }
            q
        })
        .collect();
    x.with_vertices(verts)
}

/// Per-step seeds for anchor sampling and the two corruptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeeds {
    pub cross_anchors: u64,
    pub self_anchors: u64,
    pub transform_x1: u64,
    pub transform_x3: u64,
}

impl StepSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StepSeeds {
            cross_anchors: rng.gen(),
            self_anchors: rng.gen(),
            transform_x1: rng.gen(),
            transform_x3: rng.gen(),
        }
    }
}

/// Gradient-constant inputs of the consistency terms. Computing them once and
/// reusing them freezes the ARAP path.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrozenTargets {
    /// x̃₂′: x₂ deformed toward D(β₁, θ₂).
    pub x2_deformed: Option<Mesh>,
    /// 𝒯(x₁).
    pub x1_transformed: Option<Mesh>,
    /// x̃₃′: x₃ deformed toward D(β₃, θ₁).
    pub x3_deformed: Option<Mesh>,
    /// 𝒯(x̃₃′).
    pub x3_transformed: Option<Mesh>,
}

#[derive(Debug, Clone, Copy)]
pub struct Triplet<'a> {
    pub x1: &'a Mesh,
    pub x2: &'a Mesh,
    pub x3: &'a Mesh,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vertex: f64,
    pub edge: f64,
    pub reconstruction: f64,
    pub cross: f64,
    pub self_consistency: f64,
    pub total: f64,
}

/// Which encoder a mesh was fed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Shape,
    Pose,
}

/// A recorded objective ready for backpropagation.
#[derive(Debug)]
pub struct LossGraph {
    pub graph: Graph,
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    pub targets: FrozenTargets,
}

fn deform_toward(
    source: &Mesh,
    guide: &Mesh,
    adjacency: &Adjacency,
    settings: &LossSettings,
    seed: u64,
) -> Result<Mesh> {
    let idx = sample_anchors(guide, settings.anchor_fraction, seed)?;
    let problem = ArapProblem {
        source,
        anchors: idx.iter().map(|&i| (i, guide.vertices[i])).collect(),
        iterations: settings.arap_iterations,
    };
    arap_deform_with(&problem, adjacency)
}

fn read_code(g: &Graph, beta: NodeId, thetas: &[NodeId]) -> LatentCode {
    LatentCode {
        beta: g.value(beta).data().to_vec(),
        thetas: thetas.iter().map(|&n| g.value(n).data().to_vec()).collect(),
    }
}

/// Base plus residual, in the order the graph adds them.
fn add_base(residual: &[f64], base: &[f64]) -> Vec<f64> {
    base.iter().zip(residual).map(|(b, r)| b + r).collect()
}

struct Encoders<'m, F> {
    model: &'m DhbrModel,
    base: Option<CodeNodes>,
    trace: F,
}

impl<F: FnMut(Branch, &Mesh)> Encoders<'_, F> {
    fn shape(&mut self, g: &mut Graph, mesh: &Mesh) -> Result<NodeId> {
        (self.trace)(Branch::Shape, mesh);
        let r = self.model.shape_residual(g, mesh)?;
        match &self.base {
            Some(b) => g.add(b.beta, r),
            None => Ok(r),
        }
    }

    fn pose(&mut self, g: &mut Graph, mesh: &Mesh) -> Result<Vec<NodeId>> {
        (self.trace)(Branch::Pose, mesh);
        let r = self.model.pose_residuals(g, mesh)?;
        match &self.base {
            Some(b) => b.thetas.iter().zip(r).map(|(&b, r)| g.add(b, r)).collect(),
            None => Ok(r),
        }
    }
}

/// Records L = L_rec(x₁) + L_c(x₁, x₂) + L_s(x₁, x₃). Consistency terms with a
/// zero weight are skipped. Pass `frozen` to reuse earlier ARAP/𝒯 outputs.
pub fn loss_graph(
    model: &DhbrModel,
    triplet: Triplet,
    settings: &LossSettings,
    seed: u64,
    frozen: Option<FrozenTargets>,
) -> Result<LossGraph> {
    loss_graph_traced(model, triplet, settings, seed, frozen, |_, _| {})
}

/// [`loss_graph`] reporting every encoder input to `trace`.
pub fn loss_graph_traced(
    model: &DhbrModel,
    triplet: Triplet,
    settings: &LossSettings,
    seed: u64,
    frozen: Option<FrozenTargets>,
    trace: impl FnMut(Branch, &Mesh),
) -> Result<LossGraph> {
    settings.validate()?;
    let Triplet { x1, x2, x3 } = triplet;
    for x in [x1, x2, x3] {
        model.check_topology(x)?;
    }
    let w = settings.weights;
    let seeds = StepSeeds::derive(seed);
    let adjacency = model.adjacency();
    let mut g = Graph::new();
    let base = model.base_nodes(&mut g)?;
    let base_values = base.as_ref().map(|b| read_code(&g, b.beta, &b.thetas));
    let mut enc = Encoders { model, base, trace };
    let target_x1 = Arc::new(positions_tensor(x1));

    // Reconstruction of x₁.
    let beta1 = enc.shape(&mut g, x1)?;
    let theta1 = enc.pose(&mut g, x1)?;
    let x1_hat = model.decode_nodes(
        &mut g,
        &CodeNodes {
            beta: beta1,
            thetas: theta1.clone(),
        },
    )?;
    let l_v = g.mean_abs_diff(x1_hat, target_x1.clone())?;
    let l_e = g.edge_sq(x1_hat, model.edges().clone())?;
    let l_e_w = g.scale(l_e, w.lambda_e);
    let l_rec = g.add(l_v, l_e_w)?;
    let mut terms = vec![l_rec];
    let mut targets = frozen.unwrap_or_default();
    let mut breakdown = LossBreakdown {
        vertex: g.scalar(l_v),
        edge: g.scalar(l_e),
        reconstruction: g.scalar(l_rec),
        ..Default::default()
    };

    if w.lambda_c > 0.0 {
        if targets.x2_deformed.is_none() || targets.x1_transformed.is_none() {
            // x̃₂ = D(β₁, θ₂) with the current weights, outside the tape.
            let mut code = read_code(&g, beta1, &[]);
            code.thetas = model.encode_pose(x2)?;
            if let Some(b) = &base_values {
                code.thetas = code.thetas.iter().zip(&b.thetas).map(|(r, b)| add_base(r, b)).collect();
            }
            let x2_tilde = model.decode(&code)?;
            targets.x2_deformed = Some(deform_toward(x2, &x2_tilde, adjacency, settings, seeds.cross_anchors)?);
            targets.x1_transformed = Some(transform_pose_preserving(x1, &settings.transform, seeds.transform_x1)?);
        }
        let (Some(x2d), Some(x1t)) = (&targets.x2_deformed, &targets.x1_transformed) else {
            unreachable!()
        };
        let beta = enc.shape(&mut g, x2d)?;
        let thetas = enc.pose(&mut g, x1t)?;
        let out = model.decode_nodes(&mut g, &CodeNodes { beta, thetas })?;
        let l = g.mean_abs_diff(out, target_x1.clone())?;
        let l = g.scale(l, w.lambda_c);
        breakdown.cross = g.scalar(l);
        terms.push(l);
    }

    if w.lambda_s > 0.0 {
        if targets.x3_deformed.is_none() || targets.x3_transformed.is_none() {
            // x̃₃ = D(β₃, θ₁).
            let mut code = read_code(&g, beta1, &theta1);
            code.beta = model.encode_shape(x3)?;
            if let Some(b) = &base_values {
                code.beta = add_base(&code.beta, &b.beta);
            }
            let x3_tilde = model.decode(&code)?;
            let x3d = deform_toward(x3, &x3_tilde, adjacency, settings, seeds.self_anchors)?;
            targets.x3_transformed = Some(transform_pose_preserving(&x3d, &settings.transform, seeds.transform_x3)?);
            targets.x3_deformed = Some(x3d);
        }
        let Some(x3t) = &targets.x3_transformed else { unreachable!() };
        let thetas = enc.pose(&mut g, x3t)?;
        let out = model.decode_nodes(&mut g, &CodeNodes { beta: beta1, thetas })?;
        let l = g.mean_abs_diff(out, target_x1)?;
        let l = g.scale(l, w.lambda_s);
        breakdown.self_consistency = g.scalar(l);
        terms.push(l);
    }

    let total = g.sum(&terms)?;
    breakdown.total = g.scalar(total);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {breakdown:?}")));
    }
    Ok(LossGraph {
        graph: g,
        total,
        breakdown,
        targets,
    })
}

/// L_v(x, D(E(x))) + λ_e·L_e(D(E(x))).
pub fn reconstruction_loss(x: &Mesh, model: &DhbrModel, weights: &LossWeights) -> Result<f64> {
    let x_hat = model.reconstruct(x)?;
    Ok(vertex_loss(x, &x_hat)? + weights.lambda_e * edge_loss(&x_hat, model.adjacency())?)
}

fn only(settings: &LossSettings, c: bool, s: bool) -> LossSettings {
    let mut out = *settings;
    if !c {
        out.weights.lambda_c = 0.0;
    }
    if !s {
        out.weights.lambda_s = 0.0;
    }
    out
}

/// λ_c·mean-L1(D(E_s(x̃₂′), E_p(𝒯(x₁))) − x₁).
pub fn cross_consistency_loss(x1: &Mesh, x2: &Mesh, model: &DhbrModel, settings: &LossSettings, seed: u64) -> Result<f64> {
    let t = Triplet { x1, x2, x3: x1 };
    Ok(loss_graph(model, t, &only(settings, true, false), seed, None)?.breakdown.cross)
}

/// λ_s·mean-L1(D(E_s(x₁), E_p(𝒯(x̃₃′))) − x₁).
pub fn self_consistency_loss(x1: &Mesh, x3: &Mesh, model: &DhbrModel, settings: &LossSettings, seed: u64) -> Result<f64> {
    let t = Triplet { x1, x2: x1, x3 };
    Ok(loss_graph(model, t, &only(settings, false, true), seed, None)?.breakdown.self_consistency)
}

pub fn total_loss(triplet: Triplet, model: &DhbrModel, settings: &LossSettings, seed: u64) -> Result<LossBreakdown> {
    Ok(loss_graph(model, triplet, settings, seed, None)?.breakdown)
}
