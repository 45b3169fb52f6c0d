use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{name_seed, Init, ParamId, ParamKind, ParamStore};
use crate::supernet::arch::{alpha_name, beta_name};
use crate::supernet::layers::{Alignment, Cx, Head, MbConv, Stem};
use crate::supernet::relax::{sample_paths, ChannelMask};
use crate::supernet::space::{in_degree, source_at, source_index, NodeId, SupernetSpec, OPERATORS, SCALES};

/// Softmax-weighted blend of the six MBConv operators, applied to the
/// masked channels only; the other channels bypass it unchanged.
#[derive(Clone, Debug)]
pub struct MixtureLayer {
    pub mask: ChannelMask,
    pub ops: Vec<MbConv>,
}

impl MixtureLayer {
    pub fn new(store: &mut ParamStore, node: NodeId, mask: ChannelMask) -> Self {
        let m = mask.selected().len();
        let ops = OPERATORS
            .iter()
            .enumerate()
            .map(|(i, &cfg)| MbConv::new(store, &format!("{node}.op{i}"), m, cfg))
            .collect();
        MixtureLayer { mask, ops }
    }

    /// `Σ_o w_o·o(S·x) + (1 − S)·x` with `w = softmax(alpha)`.
    pub fn forward(&self, cx: &mut Cx, x: Var, alpha: Var) -> Result<Var> {
        let c = cx.tape.value(x).shape().get(1).copied().unwrap_or(0);
        if c != self.mask.channels() {
            return Err(Error::ShapeMismatch {
                op: "mixture_layer",
                dim: "mask arity",
                expected: self.mask.channels(),
                found: c,
            });
        }
        let w = cx.tape.softmax(alpha, 0)?;
        let routed = if self.mask.is_full() {
            x
        } else {
            cx.tape.index_select(x, 1, self.mask.selected())?
        };
        let mut outs = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let y = op.forward(cx, routed)?;
            if cx.tape.value(y).shape() != cx.tape.value(routed).shape() {
                return Err(Error::InvalidArchitecture { reason: format!("operator {} changed the feature shape", op.config) });
            }
            outs.push(y);
        }
        let mixed = cx.tape.weighted_sum(&outs, w)?;
        if self.mask.is_full() {
            Ok(mixed)
        } else {
            cx.tape.index_replace(x, mixed, 1, self.mask.selected())
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionNode {
    pub id: NodeId,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub mixture: MixtureLayer,
}

/// How incoming connections are aggregated during a forward pass.
pub enum PathMode<'r> {
    /// Every candidate edge, weighted by `softmax(β)`.
    Full,
    /// `n_paths` edges per node drawn from `softmax(β/τ)` without
    /// replacement, blended by `softmax(β)` renormalized over the subset.
    Sampled {
        tau: f64,
        n_paths: usize,
        rng: &'r mut dyn RngCore,
    },
}

/// Result of [`Supernet::forward_trace`].
pub struct ForwardTrace {
    pub logits: Var,
    /// Output of every evaluated node, indexed by `layer·4 + scale`.
    pub outputs: Vec<Option<Var>>,
    /// Fused (pre-mixture) input of every evaluated searchable node, same indexing.
    pub inputs: Vec<Option<Var>>,
    /// Selected incoming edge positions per searchable node.
    pub selections: Vec<Vec<usize>>,
}

/// The continuously relaxed, densely connected supernet.
#[derive(Clone, Debug)]
pub struct Supernet {
    spec: SupernetSpec,
    stem: Stem,
    head: Head,
    nodes: Vec<FusionNode>,
    alignments: BTreeMap<(NodeId, NodeId), Alignment>,
}

impl Supernet {
    /// Registers every eagerly created parameter in `store` (or reuses the
    /// ones already there). Alignment branches are created on first use.
    pub fn new(spec: &SupernetSpec, store: &mut ParamStore) -> Result<Self> {
        spec.validate()?;
        let stem = Stem::new(store, spec);
        let head = Head::new(store, spec);
        let beta_std = 0.01;
        let nodes = spec
            .nodes()
            .map(|id| {
                let width = spec.width(id.scale);
                let mask_seed = name_seed(store.seed(), &format!("mask.{id}"));
                let mask = ChannelMask::random(width, spec.sampled_channels(width), mask_seed);
                let alpha = store.get_or_init(&alpha_name(id), ParamKind::Alpha, &[OPERATORS.len()], Init::Zeros);
                let beta = store.get_or_init(&beta_name(id), ParamKind::Beta, &[in_degree(id)], Init::Normal(beta_std));
                FusionNode {
                    id,
                    alpha,
                    beta,
                    mixture: MixtureLayer::new(store, id, mask),
                }
            })
            .collect();
        Ok(Supernet {
            spec: spec.clone(),
            stem,
            head,
            nodes,
            alignments: BTreeMap::new(),
        })
    }

    pub fn spec(&self) -> &SupernetSpec {
        &self.spec
    }

    pub fn node(&self, id: NodeId) -> &FusionNode {
        &self.nodes[self.spec.node_index(id)]
    }

    pub fn nodes(&self) -> &[FusionNode] {
        &self.nodes
    }

    pub fn alignment(&mut self, store: &mut ParamStore, src: NodeId, dst: NodeId) -> &Alignment {
        let spec = &self.spec;
        self.alignments
            .entry((src, dst))
            .or_insert_with(|| Alignment::new(store, spec, src, dst))
    }

    pub fn forward(&mut self, cx: &mut Cx, image: Var, mode: PathMode) -> Result<Var> {
        Ok(self.forward_trace(cx, image, mode)?.logits)
    }

    /// Evaluates nodes layer by layer, then the head. In sampled mode nodes
    /// that cannot reach the head through sampled edges are skipped.
    pub fn forward_trace(&mut self, cx: &mut Cx, image: Var, mode: PathMode) -> Result<ForwardTrace> {
        let spec = self.spec.clone();
        let selections: Vec<Vec<usize>> = match mode {
            PathMode::Full => spec.nodes().map(|n| (0..in_degree(n)).collect()).collect(),
            PathMode::Sampled { tau, n_paths, rng } => self
                .nodes
                .iter()
                .map(|n| sample_paths(cx.store.tensor(n.beta).data(), tau, n_paths, rng))
                .collect(),
        };

        let mut needed = vec![false; spec.node_count()];
        for f in spec.final_nodes() {
            needed[spec.node_index(f)] = true;
        }
        for (i, node) in spec.nodes().collect::<Vec<_>>().into_iter().enumerate().rev() {
            if !needed[i] {
                continue;
            }
            debug_assert_eq!(spec.node_index(node), i);
            for &j in &selections[i] {
                let src = source_at(j);
                if !src.is_stem() {
                    needed[spec.node_index(src)] = true;
                }
            }
        }

        let pyramid = self.stem.forward(cx, image)?;
        let mut outputs: Vec<Option<Var>> = vec![None; (spec.layers + 1) * SCALES];
        let mut inputs = outputs.clone();
        for (s, v) in pyramid.into_iter().enumerate() {
            outputs[s] = Some(v);
        }
        for i in 0..self.nodes.len() {
            if !needed[i] {
                continue;
            }
            let (id, alpha, beta) = {
                let n = &self.nodes[i];
                (n.id, n.alpha, n.beta)
            };
            let sel = &selections[i];
            let beta_var = cx.param(beta);
            let weights = if sel.len() == in_degree(id) {
                cx.tape.softmax(beta_var, 0)?
            } else {
                let sub = cx.tape.index_select(beta_var, 0, sel)?;
                cx.tape.softmax(sub, 0)?
            };
            let mut aligned = Vec::with_capacity(sel.len());
            for &j in sel {
                let src = source_at(j);
                let x = outputs[j].ok_or_else(|| Error::InvalidArchitecture {
                    reason: format!("{src} needed by {id} was not evaluated"),
                })?;
                let branch = self.alignment(cx.store, src, id).clone();
                aligned.push(branch.forward(cx, x)?);
            }
            let fused = cx.tape.weighted_sum(&aligned, weights)?;
            inputs[source_index(id)] = Some(fused);
            let alpha_var = cx.param(alpha);
            let out = self.nodes[i].mixture.forward(cx, fused, alpha_var)?;
            outputs[source_index(id)] = Some(out);
        }
        let finals = spec.final_nodes().map(|f| outputs[source_index(f)].expect("final nodes are always evaluated"));
        let logits = self.head.forward(cx, finals)?;
        Ok(ForwardTrace { logits, outputs, inputs, selections })
    }

    /// Instantiates every alignment branch (normally created lazily).
    pub fn materialize_alignments(&mut self, store: &mut ParamStore) {
        for (src, dst) in self.spec.edges() {
            self.alignment(store, src, dst);
        }
    }
}
