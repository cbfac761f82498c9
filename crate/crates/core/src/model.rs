//! The disentangling autoencoder: a whole-body shape encoder, one pose head
//! per bone group, and a part-aware spiral decoder.

use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::SamplingHierarchy;
use crate::mesh::{build_adjacency, Adjacency, Mesh};
use crate::nn::{Dense, Graph, NodeId, ParamId, ParamStore, SparseRows, SpiralConv, Tensor};
use crate::skeleton::{group_joint_vectors, regress_joints, SkeletonSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub beta_dim: usize,
    pub theta_dim: usize,
    /// Output channels of the encoder's spiral convolutions, finest first.
    pub encoder_channels: Vec<usize>,
    /// Output channels of the decoder's spiral convolutions except the last
    /// (which emits xyz), coarsest first.
    pub decoder_channels: Vec<usize>,
    pub shape_hidden: usize,
    pub pose_hidden: Vec<usize>,
    pub pose_decoder_hidden: usize,
    pub pose_features: usize,
    pub shape_features: usize,
    /// θ = θ̄ + Δθ, β = β̄ + Δβ with base codes from the template. When off,
    /// the encoder outputs are used directly.
    pub template_residual: bool,
    /// The shape encoder sees positions relative to T and the decoder emits
    /// T plus an offset. When off, both work in absolute positions.
    pub template_relative: bool,
    /// Meters per network unit. The shape encoder sees (x − T)/scale and the
    /// decoder emits T + scale·out, or x/scale and scale·out when not
    /// template-relative.
    pub position_scale: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            beta_dim: 10,
            theta_dim: 8,
            encoder_channels: vec![16, 32, 32, 48],
            decoder_channels: vec![32, 32, 16],
            shape_hidden: 64,
            pose_hidden: vec![32, 16],
            pose_decoder_hidden: 16,
            pose_features: 8,
            shape_features: 8,
            template_residual: true,
            template_relative: true,
            position_scale: 1.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        let positive = [
            self.beta_dim,
            self.theta_dim,
            self.shape_hidden,
            self.pose_decoder_hidden,
            self.pose_features,
            self.shape_features,
        ];
        if positive.contains(&0)
            || self.encoder_channels.contains(&0)
            || self.decoder_channels.contains(&0)
            || self.pose_hidden.contains(&0)
        {
            return Err(Error::InvalidArgument("model widths must be positive".into()));
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("position_scale {}", self.position_scale)));
        }
        if self.encoder_channels.len() != levels || self.decoder_channels.len() + 1 != levels {
            return Err(Error::InvalidArgument(format!(
                "hierarchy has {levels} levels: need {levels} encoder and {} decoder widths",
                levels.saturating_sub(1)
            )));
        }
        Ok(())
    }
}

/// β and one θ per bone group. Used for both residual and full codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub beta: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
}

pub type BaseCodes = LatentCode;

impl LatentCode {
    pub fn zeros(beta_dim: usize, theta_dim: usize, k: usize) -> Self {
        LatentCode {
            beta: vec![0.0; beta_dim],
            thetas: vec![vec![0.0; theta_dim]; k],
        }
    }

    fn dims_match(&self, other: &LatentCode) -> bool {
        self.beta.len() == other.beta.len()
            && self.thetas.len() == other.thetas.len()
            && self.thetas.iter().zip(&other.thetas).all(|(a, b)| a.len() == b.len())
    }
}

/// θ = θ̄ + Δθ and β = β̄ + Δβ.
pub fn full_code(residual: &LatentCode, base: &BaseCodes) -> Result<LatentCode> {
    if !residual.dims_match(base) {
        return Err(Error::Shape("residual and base codes differ in size".into()));
    }
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
    Ok(LatentCode {
        beta: add(&residual.beta, &base.beta),
        thetas: residual.thetas.iter().zip(&base.thetas).map(|(a, b)| add(a, b)).collect(),
    })
}

/// Codes on a `rows × cols` grid. Row i uses s = i/(rows−1) for β and column
/// j uses t = j/(cols−1) for θ; a single row or column sits at 0.
pub fn interpolation_grid(a: &LatentCode, b: &LatentCode, rows: usize, cols: usize) -> Result<Vec<Vec<LatentCode>>> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("grid {rows}x{cols} is empty")));
    }
    let at = |i: usize, n: usize| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    (0..rows)
        .map(|i| (0..cols).map(|j| interpolate_code(a, b, at(i, rows), at(j, cols))).collect())
        .collect()
}

/// β from (1−s)·a + s·b and θ from (1−t)·a + t·b.
pub fn interpolate_code(a: &LatentCode, b: &LatentCode, s: f64, t: f64) -> Result<LatentCode> {
    for (name, v) in [("s", s), ("t", t)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
        }
    }
    if !a.dims_match(b) {
        return Err(Error::Shape("interpolated codes differ in size".into()));
    }
    let lerp = |x: &[f64], y: &[f64], w: f64| {
        x.iter().zip(y).map(|(p, q)| (1.0 - w) * p + w * q).collect::<Vec<_>>()
    };
    Ok(LatentCode {
        beta: lerp(&a.beta, &b.beta, s),
        thetas: a.thetas.iter().zip(&b.thetas).map(|(x, y)| lerp(x, y, t)).collect(),
    })
}

/// Graph handles for a code: β is 1×beta_dim, each θ_k is 1×theta_dim.
#[derive(Debug, Clone)]
pub struct CodeNodes {
    pub beta: NodeId,
    pub thetas: Vec<NodeId>,
}

#[derive(Debug, Clone)]
struct ShapeEncoder {
    convs: Vec<SpiralConv>,
    down: Vec<Arc<SparseRows>>,
    hidden: Dense,
    out: Dense,
}

#[derive(Debug, Clone)]
struct PoseEncoder {
    heads: Vec<Vec<Dense>>,
}

#[derive(Debug, Clone)]
struct Decoder {
    pose_fc: Vec<(Dense, Dense)>,
    group_sizes: Vec<usize>,
    shape_fc: (Dense, Dense),
    /// Stacked per-group rows → coarsest vertices in index order.
    scatter: Arc<SparseRows>,
    broadcast: Arc<SparseRows>,
    /// Coarsest first.
    up: Vec<Arc<SparseRows>>,
    convs: Vec<SpiralConv>,
}

#[derive(Debug)]
pub struct DhbrModel {
    config: ModelConfig,
    template: Mesh,
    skeleton: SkeletonSpec,
    hierarchy: SamplingHierarchy,
    params: ParamStore,
    shape_enc: ShapeEncoder,
    pose_enc: PoseEncoder,
    decoder: Decoder,
    template_positions: Arc<Tensor>,
    edges: Arc<[(usize, usize)]>,
    adjacency: Arc<Adjacency>,
    module_params: [Vec<ParamId>; 3],
    base_cache: OnceLock<BaseCodes>,
}

impl Clone for DhbrModel {
    fn clone(&self) -> Self {
        DhbrModel {
            config: self.config.clone(),
            template: self.template.clone(),
            skeleton: self.skeleton.clone(),
            hierarchy: self.hierarchy.clone(),
            params: self.params.clone(),
            shape_enc: self.shape_enc.clone(),
            pose_enc: self.pose_enc.clone(),
            decoder: self.decoder.clone(),
            template_positions: self.template_positions.clone(),
            edges: self.edges.clone(),
            adjacency: self.adjacency.clone(),
            module_params: self.module_params.clone(),
            base_cache: OnceLock::new(),
        }
    }
}

pub(crate) fn positions_tensor(mesh: &Mesh) -> Tensor {
    Tensor::matrix(mesh.vertex_count(), 3, mesh.flat_positions()).expect("V×3")
}

fn rows_of(n_in: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Arc<SparseRows>> {
    Ok(Arc::new(SparseRows::new(n_in, rows)?))
}

impl DhbrModel {
    pub fn new(
        config: ModelConfig,
        template: Mesh,
        skeleton: SkeletonSpec,
        hierarchy: SamplingHierarchy,
    ) -> Result<Self> {
        let n_levels = hierarchy.levels.len();
        config.validate(n_levels)?;
        hierarchy.check_template(&template)?;
        if skeleton.vertex_count() != template.vertex_count() {
            return Err(Error::Shape("skeleton does not match template".into()));
        }
        if hierarchy.labels[0] != skeleton.part_labels() {
            return Err(Error::Shape("hierarchy labels differ from skeleton labels".into()));
        }
        let k = skeleton.k();
        let coarse_labels = hierarchy.coarsest_labels().to_vec();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (v, &l) in coarse_labels.iter().enumerate() {
            members[l].push(v);
        }
        if let Some(g) = members.iter().position(Vec::is_empty) {
            return Err(Error::Shape(format!("part {g} has no vertex at the coarsest level")));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let sizes = hierarchy.mesh_sizes();

        // Shape encoder.
        let start = params.len();
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            let name = format!("shape_encoder.conv{i}");
            convs.push(SpiralConv::new(&mut params, &name, &hierarchy.spirals[i], c_in, c, &mut rng)?);
            c_in = c;
        }
        let down = hierarchy
            .levels
            .iter()
            .map(|l| rows_of(l.fine_count(), l.down_rows()))
            .collect::<Result<Vec<_>>>()?;
        let flat = sizes[n_levels] * c_in;
        let hidden = Dense::new(&mut params, "shape_encoder.fc0", flat, config.shape_hidden, &mut rng);
        let out = Dense::new(&mut params, "shape_encoder.fc1", config.shape_hidden, config.beta_dim, &mut rng);
        let shape_enc = ShapeEncoder {
            convs,
            down,
            hidden,
            out,
        };
        let shape_ids = (start..params.len()).map(ParamId).collect();

        // Pose encoder: one independent stack per bone group.
        let start = params.len();
        let heads = (0..k)
            .map(|g| {
                let mut widths = vec![skeleton.group_input_dim(g)];
                widths.extend(&config.pose_hidden);
                widths.push(config.theta_dim);
                widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| Dense::new(&mut params, &format!("pose_encoder.group{g}.fc{i}"), w[0], w[1], &mut rng))
                    .collect()
            })
            .collect();
        let pose_enc = PoseEncoder { heads };
        let pose_ids = (start..params.len()).map(ParamId).collect();

        // Decoder.
        let start = params.len();
        let pose_fc = (0..k)
            .map(|g| {
                let a = Dense::new(
                    &mut params,
                    &format!("decoder.group{g}.fc0"),
                    config.theta_dim,
                    config.pose_decoder_hidden,
                    &mut rng,
                );
                let b = Dense::new(
                    &mut params,
                    &format!("decoder.group{g}.fc1"),
                    config.pose_decoder_hidden,
                    members[g].len() * config.pose_features,
                    &mut rng,
                );
                (a, b)
            })
            .collect();
        let shape_fc = (
            Dense::new(&mut params, "decoder.shape.fc0", config.beta_dim, config.shape_hidden, &mut rng),
            Dense::new(&mut params, "decoder.shape.fc1", config.shape_hidden, config.shape_features, &mut rng),
        );
        let n_coarse = sizes[n_levels];
        let mut scatter = vec![Vec::new(); n_coarse];
        let mut offset = 0;
        for m in &members {
            for (i, &v) in m.iter().enumerate() {
                scatter[v] = vec![(offset + i, 1.0)];
            }
            offset += m.len();
        }
        let scatter = rows_of(n_coarse, scatter)?;
        let broadcast = rows_of(1, vec![vec![(0, 1.0)]; n_coarse])?;
        let up = hierarchy
            .levels
            .iter()
            .rev()
            .map(|l| rows_of(l.coarse_count(), l.up_rows()))
            .collect::<Result<Vec<_>>>()?;
        let mut dec_convs = Vec::new();
        let mut c_in = config.pose_features + config.shape_features;
        let outs: Vec<usize> = config.decoder_channels.iter().copied().chain([3]).collect();
        for (i, &c) in outs.iter().enumerate() {
            let level = n_levels - 1 - i;
            let name = format!("decoder.conv{i}");
            dec_convs.push(SpiralConv::new(&mut params, &name, &hierarchy.spirals[level], c_in, c, &mut rng)?);
            c_in = c;
        }
        // The decoder predicts offsets from the template; starting them at
        // zero keeps the first steps from saturating the hidden ELUs.
        let last = dec_convs.last().expect("at least one level").dense.weight;
        params.get_mut(last).data_mut().fill(0.0);
        let decoder = Decoder {
            pose_fc,
            group_sizes: members.iter().map(Vec::len).collect(),
            shape_fc,
            scatter,
            broadcast,
            up,
            convs: dec_convs,
        };
        let dec_ids = (start..params.len()).map(ParamId).collect();

        let adj = build_adjacency(&template)?;
        Ok(DhbrModel {
            template_positions: Arc::new(positions_tensor(&template)),
            edges: adj.edges.clone().into(),
            adjacency: Arc::new(adj),
            config,
            template,
            skeleton,
            hierarchy,
            params,
            shape_enc,
            pose_enc,
            decoder,
            module_params: [shape_ids, pose_ids, dec_ids],
            base_cache: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn template(&self) -> &Mesh {
        &self.template
    }

    pub fn skeleton(&self) -> &SkeletonSpec {
        &self.skeleton
    }

    pub fn hierarchy(&self) -> &SamplingHierarchy {
        &self.hierarchy
    }

    pub fn k(&self) -> usize {
        self.skeleton.k()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameters; invalidates the cached base codes.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.base_cache = OnceLock::new();
        &mut self.params
    }

    pub fn shape_encoder_params(&self) -> &[ParamId] {
        &self.module_params[0]
    }

    pub fn pose_encoder_params(&self) -> &[ParamId] {
        &self.module_params[1]
    }

    pub fn decoder_params(&self) -> &[ParamId] {
        &self.module_params[2]
    }

    /// Undirected template edges, for the edge regularizer.
    pub fn edges(&self) -> &Arc<[(usize, usize)]> {
        &self.edges
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn template_positions(&self) -> &Arc<Tensor> {
        &self.template_positions
    }

    pub fn check_topology(&self, mesh: &Mesh) -> Result<()> {
        if !self.template.same_connectivity(mesh) {
            return Err(Error::Shape(format!(
                "mesh with {} vertices / {} faces does not share the template connectivity",
                mesh.vertex_count(),
                mesh.face_count()
            )));
        }
        Ok(())
    }

    /// Inputs of each pose head: relative joint offsets plus the group origin.
    pub fn pose_inputs(&self, mesh: &Mesh) -> Result<Vec<Vec<f64>>> {
        self.check_topology(mesh)?;
        let joints = regress_joints(mesh, &self.skeleton)?;
        group_joint_vectors(&joints, &self.skeleton)
    }

    /// Δβ as a 1×beta_dim node.
    pub fn shape_residual(&self, g: &mut Graph, mesh: &Mesh) -> Result<NodeId> {
        self.check_topology(mesh)?;
        let enc = &self.shape_enc;
        let mut input = positions_tensor(mesh);
        let inv = 1.0 / self.config.position_scale;
        let rel = self.config.template_relative;
        for (a, t) in input.data_mut().iter_mut().zip(self.template_positions.data()) {
            *a = if rel { *a - t } else { *a } * inv;
        }
        let mut x = g.constant(input);
        for (conv, down) in enc.convs.iter().zip(&enc.down) {
            let y = conv.forward(g, &self.params, x)?;
            let y = g.elu(y);
            x = g.mix(y, down.clone())?;
        }
        let (rows, n) = (g.value(x).shape()[0], g.value(x).len());
        let flat = g.reshape(x, &[1, n])?;
        // Keeps the fc input at unit scale per coarse vertex; without it batch-1
        // Adam steps on the wide fc blow the shape code up.
        let flat = g.scale(flat, 1.0 / (rows as f64).sqrt());
        let h = enc.hidden.forward(g, &self.params, flat)?;
        let h = g.elu(h);
        enc.out.forward(g, &self.params, h)
    }

    /// Δθ_k as 1×theta_dim nodes, each in (−1, 1).
    pub fn pose_residuals(&self, g: &mut Graph, mesh: &Mesh) -> Result<Vec<NodeId>> {
        let inputs = self.pose_inputs(mesh)?;
        let n_layers = self.config.pose_hidden.len() + 1;
        self.pose_enc
            .heads
            .iter()
            .zip(inputs)
            .map(|(head, v)| {
                let d = v.len();
                let mut x = g.constant(Tensor::matrix(1, d, v)?);
                for (i, layer) in head.iter().enumerate() {
                    let y = layer.forward(g, &self.params, x)?;
                    x = if i + 1 == n_layers { g.tanh(y) } else { g.elu(y) };
                }
                Ok(x)
            })
            .collect()
    }

    /// Base codes from the template, or `None` without the residual scheme.
    pub fn base_nodes(&self, g: &mut Graph) -> Result<Option<CodeNodes>> {
        if !self.config.template_residual {
            return Ok(None);
        }
        Ok(Some(CodeNodes {
            beta: self.shape_residual(g, &self.template)?,
            thetas: self.pose_residuals(g, &self.template)?,
        }))
    }

    /// β = β̄ + Δβ(shape_src) and θ = θ̄ + Δθ(pose_src).
    pub fn full_code_nodes(
        &self,
        g: &mut Graph,
        base: Option<&CodeNodes>,
        shape_src: &Mesh,
        pose_src: &Mesh,
    ) -> Result<CodeNodes> {
        let beta = self.shape_residual(g, shape_src)?;
        let thetas = self.pose_residuals(g, pose_src)?;
        let Some(base) = base else {
            return Ok(CodeNodes { beta, thetas });
        };
        let beta = g.add(base.beta, beta)?;
        let thetas = base
            .thetas
            .iter()
            .zip(thetas)
            .map(|(&b, t)| g.add(b, t))
            .collect::<Result<_>>()?;
        Ok(CodeNodes { beta, thetas })
    }

    /// Decoded V×3 positions.
    pub fn decode_nodes(&self, g: &mut Graph, code: &CodeNodes) -> Result<NodeId> {
        let dec = &self.decoder;
        let p = &self.params;
        if code.thetas.len() != dec.pose_fc.len() {
            return Err(Error::Shape(format!(
                "{} pose codes for {} groups",
                code.thetas.len(),
                dec.pose_fc.len()
            )));
        }
        let mut blocks = Vec::with_capacity(code.thetas.len());
        for ((fc0, fc1), (&theta, &n)) in dec.pose_fc.iter().zip(code.thetas.iter().zip(&dec.group_sizes)) {
            let h = fc0.forward(g, p, theta)?;
            let h = g.elu(h);
            let f = fc1.forward(g, p, h)?;
            blocks.push(g.reshape(f, &[n, self.config.pose_features])?);
        }
        let stacked = g.concat_rows(&blocks)?;
        let pose = g.mix(stacked, dec.scatter.clone())?;
        let h = dec.shape_fc.0.forward(g, p, code.beta)?;
        let h = g.elu(h);
        let s = dec.shape_fc.1.forward(g, p, h)?;
        let shape = g.mix(s, dec.broadcast.clone())?;
        let mut x = g.concat_cols(&[pose, shape])?;
        let last = dec.convs.len() - 1;
        for (i, (up, conv)) in dec.up.iter().zip(&dec.convs).enumerate() {
            let u = g.mix(x, up.clone())?;
            let y = conv.forward(g, p, u)?;
            x = if i == last { y } else { g.elu(y) };
        }
        let x = g.scale(x, self.config.position_scale);
        if !self.config.template_relative {
            return Ok(x);
        }
        let t = g.constant((*self.template_positions).clone());
        g.add(x, t)
    }

    fn code_nodes(&self, g: &mut Graph, code: &LatentCode) -> Result<CodeNodes> {
        let (b, t, k) = (self.config.beta_dim, self.config.theta_dim, self.k());
        if code.beta.len() != b || code.thetas.len() != k || code.thetas.iter().any(|th| th.len() != t) {
            return Err(Error::Shape(format!("code must have beta[{b}] and thetas[{k}][{t}]")));
        }
        Ok(CodeNodes {
            beta: g.constant(Tensor::matrix(1, b, code.beta.clone())?),
            thetas: code
                .thetas
                .iter()
                .map(|th| Ok(g.constant(Tensor::matrix(1, t, th.clone())?)))
                .collect::<Result<_>>()?,
        })
    }

    fn read_code(g: &Graph, nodes: &CodeNodes) -> LatentCode {
        LatentCode {
            beta: g.value(nodes.beta).data().to_vec(),
            thetas: nodes.thetas.iter().map(|&n| g.value(n).data().to_vec()).collect(),
        }
    }

    /// Residual code (Δβ, Δθ) of a mesh.
    pub fn encode(&self, mesh: &Mesh) -> Result<LatentCode> {
        let mut g = Graph::new();
        let nodes = CodeNodes {
            beta: self.shape_residual(&mut g, mesh)?,
            thetas: self.pose_residuals(&mut g, mesh)?,
        };
        Ok(Self::read_code(&g, &nodes))
    }

    /// Δβ alone.
    pub fn encode_shape(&self, mesh: &Mesh) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.shape_residual(&mut g, mesh)?;
        Ok(g.value(b).data().to_vec())
    }

    /// Δθ alone.
    pub fn encode_pose(&self, mesh: &Mesh) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let t = self.pose_residuals(&mut g, mesh)?;
        Ok(t.iter().map(|&n| g.value(n).data().to_vec()).collect())
    }

    /// (β̄, θ̄); zero without the residual scheme. Cached until parameters change.
    pub fn base_codes(&self) -> Result<BaseCodes> {
        if let Some(b) = self.base_cache.get() {
            return Ok(b.clone());
        }
        let base = if self.config.template_residual {
            self.encode(&self.template)?
        } else {
            LatentCode::zeros(self.config.beta_dim, self.config.theta_dim, self.k())
        };
        Ok(self.base_cache.get_or_init(|| base).clone())
    }

    /// Full code β̄ + Δβ, θ̄ + Δθ of a mesh.
    pub fn encode_full(&self, mesh: &Mesh) -> Result<LatentCode> {
        full_code(&self.encode(mesh)?, &self.base_codes()?)
    }

    pub fn decode(&self, code: &LatentCode) -> Result<Mesh> {
        let mut g = Graph::new();
        let nodes = self.code_nodes(&mut g, code)?;
        let out = self.decode_nodes(&mut g, &nodes)?;
        self.template.from_flat(g.value(out).data())
    }

    pub fn reconstruct(&self, mesh: &Mesh) -> Result<Mesh> {
        self.decode(&self.encode_full(mesh)?)
    }

    /// Shape from `shape_src`, pose from `pose_src`.
    pub fn pose_transfer(&self, shape_src: &Mesh, pose_src: &Mesh) -> Result<Mesh> {
        let a = self.encode_full(shape_src)?;
        let b = self.encode_full(pose_src)?;
        self.decode(&LatentCode {
            beta: a.beta,
            thetas: b.thetas,
        })
    }

    pub fn bilinear_interpolate(&self, a: &LatentCode, b: &LatentCode, s: f64, t: f64) -> Result<Mesh> {
        self.decode(&interpolate_code(a, b, s, t)?)
    }
}
