use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::supernet::space::{in_degree, source_index, NodeId, SupernetSpec, OPERATORS};
use crate::tensor::Tensor;

pub fn alpha_name(node: NodeId) -> String {
    format!("alpha.{node}")
}

pub fn beta_name(node: NodeId) -> String {
    format!("beta.{node}")
}

/// Architecture parameters: operator logits per mixture layer and
/// connection logits per candidate edge, indexed by destination node.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    layers: usize,
    alpha: Vec<[f64; 6]>,
    beta: Vec<Vec<f64>>,
}

impl ArchParams {
    /// All logits zero.
    pub fn zeros(layers: usize) -> Self {
        let spec = SupernetSpec { layers, ..Default::default() };
        ArchParams {
            layers,
            alpha: vec![[0.0; 6]; spec.node_count()],
            beta: spec.nodes().map(|n| vec![0.0; in_degree(n)]).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    fn index(&self, node: NodeId) -> usize {
        assert!(node.layer >= 1 && node.layer <= self.layers && node.scale < 4, "no parameters for {node}");
        (node.layer - 1) * 4 + node.scale
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        let layers = self.layers;
        (1..=layers).flat_map(|l| (0..4).map(move |s| NodeId::new(s, l)))
    }

    pub fn alpha(&self, node: NodeId) -> &[f64; 6] {
        &self.alpha[self.index(node)]
    }

    pub fn alpha_mut(&mut self, node: NodeId) -> &mut [f64; 6] {
        let i = self.index(node);
        &mut self.alpha[i]
    }

    /// Logits of every incoming edge of `node`, in canonical source order.
    pub fn beta(&self, node: NodeId) -> &[f64] {
        &self.beta[self.index(node)]
    }

    pub fn beta_mut(&mut self, node: NodeId) -> &mut [f64] {
        let i = self.index(node);
        &mut self.beta[i]
    }

    pub fn edge_beta(&self, src: NodeId, dst: NodeId) -> f64 {
        self.beta(dst)[source_index(src)]
    }

    pub fn alpha_len(&self) -> usize {
        self.alpha.len()
    }

    pub fn edge_count(&self) -> usize {
        self.beta.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().flatten().chain(self.beta.iter().flatten()).all(|v| v.is_finite())
    }

    pub fn from_store(store: &ParamStore, layers: usize) -> Result<Self> {
        let mut out = Self::zeros(layers);
        for node in out.nodes().collect::<Vec<_>>() {
            let a = store.get(&alpha_name(node)).ok_or_else(|| Error::MissingParameter { name: alpha_name(node) })?;
            let b = store.get(&beta_name(node)).ok_or_else(|| Error::MissingParameter { name: beta_name(node) })?;
            if a.tensor.numel() != OPERATORS.len() || b.tensor.numel() != in_degree(node) {
                return Err(Error::InvalidArchitecture {
                    reason: format!("architecture parameters of {node} have the wrong size"),
                });
            }
            out.alpha_mut(node).copy_from_slice(a.tensor.data());
            out.beta_mut(node).copy_from_slice(b.tensor.data());
        }
        Ok(out)
    }

    /// Overwrites (or registers) the α and β tensors in `store`.
    pub fn write_to(&self, store: &mut ParamStore) {
        for node in self.nodes() {
            let a = Tensor::new(&[6], self.alpha(node).to_vec()).expect("six logits");
            store.insert(&alpha_name(node), ParamKind::Alpha, a);
            let b = Tensor::new(&[in_degree(node)], self.beta(node).to_vec()).expect("in-degree logits");
            store.insert(&beta_name(node), ParamKind::Beta, b);
        }
    }
}
