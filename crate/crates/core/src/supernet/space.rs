//! Structure of the densely connected search space: nodes, candidate
//! edges and the operator set.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Number of spatial scales (1/4, 1/8, 1/16, 1/32 of the input).
pub const SCALES: usize = 4;

/// Structural hyperparameters of the supernet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupernetSpec {
    /// Number of searchable layers `L` (the stem pyramid is layer 0).
    pub layers: usize,
    /// Channel width `F` of the 1/4 scale; scale `i` has width `F·2^i`.
    pub base_width: usize,
    /// Upper in-degree bound `k` used by the connectivity regularizer.
    pub max_in_degree: usize,
    /// Fraction of channels routed through the operator mixture.
    pub channel_ratio: f64,
    /// Connections sampled per fusion module; defaults to `max_in_degree`.
    pub n_paths: Option<usize>,
    pub num_classes: usize,
    /// Filters of the stem's leading 7×7 convolution.
    pub stem_width: usize,
    /// Filters of the head's 3×3 convolution; defaults to `base_width`.
    pub head_width: Option<usize>,
}

impl Default for SupernetSpec {
    fn default() -> Self {
        SupernetSpec {
            layers: 14,
            base_width: 8,
            max_in_degree: 3,
            channel_ratio: 0.25,
            n_paths: None,
            num_classes: 5,
            stem_width: 32,
            head_width: None,
        }
    }
}

impl SupernetSpec {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "supernet spec";
        if self.layers == 0 {
            return Err(invalid(OP, "layers must be >= 1"));
        }
        if self.base_width == 0 || self.stem_width == 0 {
            return Err(invalid(OP, "widths must be >= 1"));
        }
        if self.max_in_degree == 0 {
            return Err(invalid(OP, "max_in_degree must be >= 1"));
        }
        if !(self.channel_ratio > 0.0 && self.channel_ratio <= 1.0) {
            return Err(invalid(OP, format!("channel_ratio must lie in (0, 1], got {}", self.channel_ratio)));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(invalid(OP, "num_classes must lie in [2, 255]"));
        }
        if self.n_paths == Some(0) || self.head_width == Some(0) {
            return Err(invalid(OP, "n_paths and head_width must be >= 1"));
        }
        Ok(())
    }

    pub fn width(&self, scale: usize) -> usize {
        self.base_width << scale
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths.unwrap_or(self.max_in_degree)
    }

    pub fn head_width(&self) -> usize {
        self.head_width.unwrap_or(self.base_width)
    }

    /// Number of fusion modules with a mixture layer (`4·L`).
    pub fn node_count(&self) -> usize {
        SCALES * self.layers
    }

    /// All searchable nodes in evaluation order (layer-major, then scale).
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (1..=self.layers).flat_map(|l| (0..SCALES).map(move |s| NodeId::new(s, l)))
    }

    pub fn final_nodes(&self) -> [NodeId; SCALES] {
        core::array::from_fn(|s| NodeId::new(s, self.layers))
    }

    /// Position of a searchable node in [`SupernetSpec::nodes`].
    pub fn node_index(&self, n: NodeId) -> usize {
        debug_assert!(n.layer >= 1 && n.layer <= self.layers);
        (n.layer - 1) * SCALES + n.scale
    }

    /// Every candidate connection `(src, dst)`, grouped by destination.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.nodes()
            .flat_map(|dst| incoming(dst).map(move |src| (src, dst)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        8 * self.layers * (self.layers + 1)
    }

    /// Channels routed through the mixture at a node of the given width.
    pub fn sampled_channels(&self, width: usize) -> usize {
        let m = libm::round(self.channel_ratio * width as f64) as usize;
        m.clamp(1, width)
    }

    pub fn check_node(&self, n: NodeId) -> Result<()> {
        if n.scale >= SCALES || n.layer > self.layers {
            return Err(invalid("node", format!("{n} outside a {}-layer space", self.layers)));
        }
        Ok(())
    }
}

/// A fusion module position: scale index `0..4` (resolution `1/4·2^-i`)
/// and layer `0..=L`, where layer 0 is the stem pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub scale: usize,
    pub layer: usize,
}

impl NodeId {
    pub const fn new(scale: usize, layer: usize) -> Self {
        NodeId { scale, layer }
    }

    pub fn is_stem(self) -> bool {
        self.layer == 0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}_l{}", self.scale, self.layer)
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid("node id", format!("expected `s<scale>_l<layer>`, got `{s}`"));
        let rest = s.strip_prefix('s').ok_or_else(bad)?;
        let (scale, layer) = rest.split_once("_l").ok_or_else(bad)?;
        let scale: usize = scale.parse().map_err(|_| bad())?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        if scale >= SCALES {
            return Err(bad());
        }
        Ok(NodeId { scale, layer })
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Candidate sources of `dst` in canonical order: earlier layers first,
/// scales ascending within a layer. Position `i` has `layer = i / 4`.
pub fn incoming(dst: NodeId) -> impl Iterator<Item = NodeId> {
    (0..dst.layer).flat_map(|l| (0..SCALES).map(move |s| NodeId::new(s, l)))
}

pub fn in_degree(dst: NodeId) -> usize {
    SCALES * dst.layer
}

/// Position of `src` among the candidate sources of any later node.
pub fn source_index(src: NodeId) -> usize {
    src.layer * SCALES + src.scale
}

pub fn source_at(index: usize) -> NodeId {
    NodeId::new(index % SCALES, index / SCALES)
}

/// One MBConv configuration: kernel size and expansion ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OperatorConfig {
    pub kernel: usize,
    pub expansion: usize,
}

/// The operator space in its fixed order.
pub const OPERATORS: [OperatorConfig; 6] = [
    OperatorConfig { kernel: 3, expansion: 3 },
    OperatorConfig { kernel: 3, expansion: 6 },
    OperatorConfig { kernel: 5, expansion: 3 },
    OperatorConfig { kernel: 5, expansion: 6 },
    OperatorConfig { kernel: 7, expansion: 3 },
    OperatorConfig { kernel: 7, expansion: 6 },
];

impl OperatorConfig {
    pub fn index(self) -> usize {
        OPERATORS.iter().position(|&o| o == self).expect("operator from the fixed space")
    }

    pub fn name(self) -> String {
        format!("k{}e{}", self.kernel, self.expansion)
    }
}

impl fmt::Display for OperatorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}e{}", self.kernel, self.expansion)
    }
}

impl FromStr for OperatorConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OPERATORS
            .iter()
            .copied()
            .find(|o| o.name() == s)
            .ok_or_else(|| invalid("operator", format!("unknown operator `{s}`")))
    }
}

impl Serialize for OperatorConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OperatorConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
