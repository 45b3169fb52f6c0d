//! The densely connected search space and its continuous relaxation.

pub mod arch;
pub mod layers;
pub mod network;
pub mod relax;
pub mod space;

pub use arch::ArchParams;
pub use layers::{Alignment, Cx, Head, MbConv, Stem};
pub use network::{ForwardTrace, FusionNode, MixtureLayer, PathMode, Supernet};
pub use relax::{
    blend_weights, mixture_weights, sample_paths, tempered_probs, transmission_probs, ChannelMask,
    SamplerConfig,
};
pub use space::{in_degree, incoming, source_at, source_index, NodeId, OperatorConfig, SupernetSpec, OPERATORS, SCALES};
