//! Discretizing a searched supernet and training the result stand-alone.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{augmented_batch, shuffled, Dataset, SegSample, IGNORE_INDEX};
use crate::error::{invalid, Error, Result};
use crate::metrics::evaluate_with;
use crate::optim::{LrSchedule, OptimizerConfig, Sgd};
use crate::params::{name_seed, ParamStore};
use crate::search::check_batching;
use crate::supernet::relax::softmax;
use crate::supernet::{
    source_at, source_index, Alignment, ArchParams, Cx, Head, MbConv, NodeId, OperatorConfig, Stem, SupernetSpec, OPERATORS,
    SCALES,
};
use crate::tensor::Tensor;

pub type Edge = (NodeId, NodeId);

/// Highest-logit operator per mixture layer; ties go to the lowest index.
pub fn select_operators(arch: &ArchParams) -> BTreeMap<NodeId, OperatorConfig> {
    arch.nodes()
        .map(|node| {
            let a = arch.alpha(node);
            let mut best = 0;
            for i in 1..a.len() {
                if a[i] > a[best] {
                    best = i;
                }
            }
            if a.iter().enumerate().any(|(i, &v)| i != best && v == a[best]) {
                log::debug!("operator tie at {node}, choosing {}", OPERATORS[best]);
            }
            (node, OPERATORS[best])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// A node left without any `β ≥ 0` input keeps its largest-β edge.
    #[default]
    Fallback,
    /// The literal worklist algorithm, which may strand nodes.
    Strict,
}

/// Kept edges and the nodes popped from the worklist, in pop order.
#[derive(Clone, Debug, PartialEq)]
pub struct Connections {
    pub edges: BTreeSet<Edge>,
    pub visited: Vec<NodeId>,
}

/// Backward traversal from the final nodes keeping every incoming edge
/// with `β ≥ 0`.
pub fn decode_connections(arch: &ArchParams, mode: DecodeMode) -> Connections {
    let layers = arch.layers();
    let mut queue: VecDeque<NodeId> = (0..SCALES).map(|s| NodeId::new(s, layers)).collect();
    let mut seen: BTreeSet<NodeId> = queue.iter().copied().collect();
    let mut edges = BTreeSet::new();
    let mut visited = Vec::new();
    while let Some(dst) = queue.pop_front() {
        visited.push(dst);
        let beta = arch.beta(dst);
        let mut keep: Vec<usize> = (0..beta.len()).filter(|&i| beta[i] >= 0.0).collect();
        if keep.is_empty() && mode == DecodeMode::Fallback {
            let best = (1..beta.len()).fold(0, |b, i| if beta[i] > beta[b] { i } else { b });
            log::debug!("{dst} has no non-negative connection; keeping its strongest");
            keep.push(best);
        }
        for i in keep {
            let src = source_at(i);
            edges.insert((src, dst));
            if !src.is_stem() && seen.insert(src) {
                queue.push_back(src);
            }
        }
    }
    Connections { edges, visited }
}

/// A discrete architecture: one operator per retained node and the kept
/// connections, with their β logits for input blending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ArchitectureFile", try_from = "ArchitectureFile")]
pub struct DecodedArchitecture {
    pub spec: SupernetSpec,
    pub nodes: Vec<DecodedNode>,
    pub edges: Vec<DecodedEdge>,
    /// Identifies the checkpoint this was decoded from.
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodedNode {
    pub id: NodeId,
    pub op: OperatorConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub beta: f64,
}

/// On-disk layout: edges as `[src, dst]` pairs, their β in a parallel list.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureFile {
    spec: SupernetSpec,
    nodes: Vec<DecodedNode>,
    edges: Vec<Edge>,
    edge_betas: Vec<f64>,
    provenance: String,
}

impl From<DecodedArchitecture> for ArchitectureFile {
    fn from(a: DecodedArchitecture) -> Self {
        ArchitectureFile {
            edges: a.edges.iter().map(|e| (e.src, e.dst)).collect(),
            edge_betas: a.edges.iter().map(|e| e.beta).collect(),
            spec: a.spec,
            nodes: a.nodes,
            provenance: a.provenance,
        }
    }
}

impl TryFrom<ArchitectureFile> for DecodedArchitecture {
    type Error = String;

    fn try_from(f: ArchitectureFile) -> core::result::Result<Self, String> {
        if f.edges.len() != f.edge_betas.len() {
            return Err(format!("{} edges but {} edge_betas", f.edges.len(), f.edge_betas.len()));
        }
        let edges = f.edges.iter().zip(&f.edge_betas).map(|(&(src, dst), &beta)| DecodedEdge { src, dst, beta }).collect();
        Ok(DecodedArchitecture { spec: f.spec, nodes: f.nodes, edges, provenance: f.provenance })
    }
}

/// Operator selection plus connection decoding.
pub fn decode(arch: &ArchParams, spec: &SupernetSpec, mode: DecodeMode, provenance: &str) -> Result<DecodedArchitecture> {
    spec.validate()?;
    if arch.layers() != spec.layers {
        return Err(invalid("decode", "architecture parameters do not match the spec's layer count"));
    }
    let ops = select_operators(arch);
    let conn = decode_connections(arch, mode);
    let mut retained = conn.visited.clone();
    retained.sort_by_key(|n| (n.layer, n.scale));
    let nodes = retained.into_iter().map(|id| DecodedNode { id, op: ops[&id] }).collect();
    let edges = conn
        .edges
        .iter()
        .map(|&(src, dst)| DecodedEdge { src, dst, beta: arch.edge_beta(src, dst) })
        .collect();
    Ok(DecodedArchitecture { spec: spec.clone(), nodes, edges, provenance: provenance.into() })
}

impl DecodedArchitecture {
    pub fn kept_edges(&self) -> BTreeSet<Edge> {
        self.edges.iter().map(|e| (e.src, e.dst)).collect()
    }

    pub fn chosen_ops(&self) -> BTreeMap<NodeId, OperatorConfig> {
        self.nodes.iter().map(|n| (n.id, n.op)).collect()
    }

    pub fn in_degree(&self, node: NodeId) -> usize {
        self.edges.iter().filter(|e| e.dst == node).count()
    }

    /// Checks the structural invariants required to build a network.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let bad = |reason: String| Err(Error::InvalidArchitecture { reason });
        let ops = self.chosen_ops();
        if ops.len() != self.nodes.len() {
            return bad("duplicate node entries".into());
        }
        for n in &self.nodes {
            if n.id.is_stem() || n.id.layer > self.spec.layers || n.id.scale >= SCALES {
                return bad(format!("node {} is outside the search space", n.id));
            }
        }
        for f in self.spec.final_nodes() {
            if !ops.contains_key(&f) {
                return bad(format!("final node {f} is not retained"));
            }
        }
        for e in &self.edges {
            if e.src.layer >= e.dst.layer || e.src.scale >= SCALES {
                return bad(format!("edge {} -> {} does not go forward", e.src, e.dst));
            }
            if !ops.contains_key(&e.dst) || !(e.src.is_stem() || ops.contains_key(&e.src)) {
                return bad(format!("edge {} -> {} touches a node that is not retained", e.src, e.dst));
            }
            if !e.beta.is_finite() {
                return bad(format!("edge {} -> {} has a non-finite weight", e.src, e.dst));
            }
        }
        if self.kept_edges().len() != self.edges.len() {
            return bad("duplicate edges".into());
        }
        for n in &self.nodes {
            if self.in_degree(n.id) == 0 {
                return bad(format!("node {} has no incoming connection", n.id));
            }
        }
        let mut reach: BTreeSet<NodeId> = self.spec.final_nodes().into_iter().collect();
        let mut frontier: Vec<NodeId> = reach.iter().copied().collect();
        while let Some(dst) = frontier.pop() {
            for e in self.edges.iter().filter(|e| e.dst == dst) {
                if !e.src.is_stem() && reach.insert(e.src) {
                    frontier.push(e.src);
                }
            }
        }
        if let Some(n) = self.nodes.iter().find(|n| !reach.contains(&n.id)) {
            return bad(format!("node {} cannot reach the head", n.id));
        }
        Ok(())
    }

    /// Architecture parameters whose decoding reproduces this architecture:
    /// chosen operators at `+margin`, kept edges at `+margin`, others at `−margin`.
    pub fn implied_params(&self, margin: f64) -> ArchParams {
        let mut arch = ArchParams::zeros(self.spec.layers);
        for node in arch.nodes().collect::<Vec<_>>() {
            arch.beta_mut(node).iter_mut().for_each(|b| *b = -margin);
        }
        for n in &self.nodes {
            arch.alpha_mut(n.id)[n.op.index()] = margin;
        }
        for e in &self.edges {
            arch.beta_mut(e.dst)[source_index(e.src)] = margin;
        }
        arch
    }

    /// Graphviz rendering with one cluster-free node per retained module.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph decoded {\n  rankdir=LR;\n");
        for n in &self.nodes {
            s += &format!("  \"{}\" [label=\"{}\\n{}\"];\n", n.id, n.id, n.op);
        }
        for e in &self.edges {
            s += &format!("  \"{}\" -> \"{}\" [label=\"{:.3}\"];\n", e.src, e.dst, e.beta);
        }
        s += "}\n";
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Fresh,
    Inherit,
}

#[derive(Clone, Debug)]
struct StandaloneNode {
    id: NodeId,
    op: MbConv,
    sources: Vec<(NodeId, Alignment)>,
    weights: Vec<f64>,
}

/// One MBConv per retained node; kept inputs are blended with fixed
/// `softmax(β)` weights over the kept edges.
#[derive(Clone, Debug)]
pub struct StandaloneNet {
    arch: DecodedArchitecture,
    stem: Stem,
    head: Head,
    nodes: Vec<StandaloneNode>,
}

impl StandaloneNet {
    /// Registers the network's parameters in `store`. With
    /// [`InitMode::Inherit`] every parameter is then copied by name from
    /// `checkpoint`, which must hold all of them at matching shapes.
    pub fn new(arch: &DecodedArchitecture, store: &mut ParamStore, init: InitMode, checkpoint: Option<&ParamStore>) -> Result<Self> {
        arch.validate()?;
        let spec = &arch.spec;
        let stem = Stem::new(store, spec);
        let head = Head::new(store, spec);
        let mut order: Vec<&DecodedNode> = arch.nodes.iter().collect();
        order.sort_by_key(|n| (n.id.layer, n.id.scale));
        let mut nodes = Vec::with_capacity(order.len());
        for n in order {
            let op = MbConv::new(store, &format!("{}.op{}", n.id, n.op.index()), spec.width(n.id.scale), n.op);
            let kept: Vec<&DecodedEdge> = arch.edges.iter().filter(|e| e.dst == n.id).collect();
            let betas: Vec<f64> = kept.iter().map(|e| e.beta).collect();
            let sources = kept.iter().map(|e| (e.src, Alignment::new(store, spec, e.src, e.dst))).collect();
            nodes.push(StandaloneNode { id: n.id, op, sources, weights: softmax(&betas) });
        }
        if init == InitMode::Inherit {
            let from = checkpoint.ok_or_else(|| invalid("standalone", "inherit mode needs a checkpoint"))?;
            let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
            for (id, name) in ids {
                let src = from.get(&name).ok_or_else(|| Error::MissingParameter { name: name.clone() })?;
                let dst = store.tensor_mut(id);
                if src.tensor.shape() != dst.shape() {
                    return Err(Error::InvalidArchitecture {
                        reason: format!("checkpoint tensor {name} has shape {:?}, expected {:?}", src.tensor.shape(), dst.shape()),
                    });
                }
                dst.data_mut().copy_from_slice(src.tensor.data());
            }
        }
        Ok(StandaloneNet { arch: arch.clone(), stem, head, nodes })
    }

    pub fn arch(&self) -> &DecodedArchitecture {
        &self.arch
    }

    pub fn forward(&self, cx: &mut Cx, image: Var) -> Result<Var> {
        let spec = &self.arch.spec;
        let mut outputs: BTreeMap<NodeId, Var> = BTreeMap::new();
        for (s, v) in self.stem.forward(cx, image)?.into_iter().enumerate() {
            outputs.insert(NodeId::new(s, 0), v);
        }
        for node in &self.nodes {
            let mut aligned = Vec::with_capacity(node.sources.len());
            for (src, branch) in &node.sources {
                let x = *outputs.get(src).ok_or_else(|| Error::InvalidArchitecture {
                    reason: format!("{src} needed by {} was not evaluated", node.id),
                })?;
                aligned.push(branch.forward(cx, x)?);
            }
            let w = cx.tape.constant(Tensor::new(&[node.weights.len()], node.weights.clone())?);
            let fused = cx.tape.weighted_sum(&aligned, w)?;
            let out = node.op.forward(cx, fused)?;
            outputs.insert(node.id, out);
        }
        let finals = spec.final_nodes().map(|f| outputs[&f]);
        self.head.forward(cx, finals)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init: InitMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            crop_size: 32,
            eval_batch_size: 10,
            lr: 0.01,
            momentum: 0.7,
            weight_decay: 1e-4,
            init: InitMode::Fresh,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_batching("train config", self.batch_size, self.crop_size)?;
        if self.eval_batch_size == 0 {
            return Err(invalid("train config", "eval_batch_size must be >= 1"));
        }
        self.sgd_config().validate()
    }

    pub fn sgd_config(&self) -> OptimizerConfig {
        OptimizerConfig::sgd(self.lr, self.momentum, self.weight_decay)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEpochMetrics {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Weights of the best validation epoch (the initialization for `epochs = 0`).
    pub best: ParamStore,
    pub best_epoch: usize,
    pub t_miou: f64,
    pub history: Vec<TrainEpochMetrics>,
}

/// Validation mIoU with BN in inference mode.
pub fn evaluate_standalone(net: &StandaloneNet, store: &mut ParamStore, val: &[SegSample], batch_size: usize) -> Result<f64> {
    let classes = net.arch.spec.num_classes;
    let cm = evaluate_with(val, batch_size, classes, |images| {
        let mut tape = Tape::new();
        let mut cx = Cx::new(&mut tape, store, false);
        let x = cx.tape.constant(images.clone());
        let y = net.forward(&mut cx, x)?;
        Ok(tape.value(y).clone())
    })?;
    cm.miou()
}

/// Cross-entropy training on trainA ∪ trainB with SGD and a poly schedule;
/// returns the best-by-validation weights and their mIoU.
pub fn train_standalone(net: &StandaloneNet, store: &mut ParamStore, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = data.train_all();
    if train.is_empty() || data.val.is_empty() {
        return Err(Error::Empty { what: "dataset split" });
    }
    if net.arch.spec.num_classes != data.spec.num_classes {
        return Err(invalid("train", "network and dataset disagree on num_classes"));
    }
    let bs = cfg.batch_size.min(train.len());
    let iters = train.len() / bs;
    let schedule = LrSchedule::poly(cfg.lr, cfg.epochs * iters);
    let mut sgd = Sgd::new(cfg.sgd_config());

    let init_miou = if cfg.epochs == 0 { Some(evaluate_standalone(net, store, &data.val, cfg.eval_batch_size)?) } else { None };
    let mut best: Option<(usize, f64, ParamStore)> = init_miou.map(|m| (0, m, store.clone()));
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), name_seed(cfg.seed, &format!("order/train/{epoch}")));
        let mut ce_sum = 0.0;
        for it in 0..iters {
            let g = epoch * iters + it;
            let seed = name_seed(cfg.seed, &format!("augment/train/{epoch}/{it}"));
            let batch = augmented_batch(&train, &order[it * bs..(it + 1) * bs], cfg.crop_size, seed)?;
            let mut tape = Tape::new();
            let mut cx = Cx::new(&mut tape, store, true);
            let x = cx.tape.constant(batch.images);
            let logits = net.forward(&mut cx, x)?;
            let ce = tape.cross_entropy(logits, &batch.labels, IGNORE_INDEX)?;
            let v = tape.value(ce).item();
            if !v.is_finite() {
                return Err(Error::NonFinite { what: format!("training cross-entropy (epoch {epoch}, step {g})") });
            }
            ce_sum += v;
            let grads = tape.backward(ce)?;
            store.zero_grad();
            grads.accumulate_into(store);
            sgd.step(store, schedule.lr(g))?;
            store.zero_grad();
        }
        let val_miou = evaluate_standalone(net, store, &data.val, cfg.eval_batch_size)?;
        log::info!("train epoch {epoch}: CE {:.4}, val mIoU {val_miou:.4}", ce_sum / iters as f64);
        history.push(TrainEpochMetrics { epoch, train_ce: ce_sum / iters as f64, val_miou });
        if best.as_ref().is_none_or(|b| val_miou > b.1) {
            best = Some((epoch + 1, val_miou, store.clone()));
        }
    }
    let (best_epoch, t_miou, best) = best.expect("at least one evaluation");
    Ok(TrainOutcome { best, best_epoch, t_miou, history })
}
