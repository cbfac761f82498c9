use std::sync::Arc;

use rand::Rng;

use super::{glorot_uniform, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::hierarchy::SpiralTable;

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// y = xW + b.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot_uniform(rng, c_in, c_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Dense {
            weight,
            bias,
            c_in,
            c_out,
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        if g.value(x).cols() != self.c_in {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.c_in,
                g.value(x).cols()
            )));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }
}

/// Gathers each vertex's spiral of S neighbors into one row of length S·C_in
/// and applies a shared dense map.
#[derive(Debug, Clone, PartialEq)]
pub struct SpiralConv {
    pub dense: Dense,
    pub length: usize,
    index: Arc<[usize]>,
}

impl SpiralConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spirals: &SpiralTable,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spirals.sequences.iter().any(|s| s.len() != spirals.length) {
            return Err(Error::Shape("spiral table rows differ from its length".into()));
        }
        let dense = Dense::new(store, name, spirals.length * c_in, c_out, rng);
        Ok(SpiralConv {
            dense,
            length: spirals.length,
            index: spirals.sequences.concat().into(),
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.index.len() / self.length
    }

    pub fn c_in(&self) -> usize {
        self.dense.c_in / self.length
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let v = g.value(x).rows();
        if v != self.vertex_count() || g.value(x).cols() != self.c_in() {
            return Err(Error::Shape(format!(
                "spiral conv expects {}×{}, got {:?}",
                self.vertex_count(),
                self.c_in(),
                g.value(x).shape()
            )));
        }
        let gathered = g.gather(x, self.index.clone(), self.length)?;
        self.dense.forward(g, store, gathered)
    }
}
