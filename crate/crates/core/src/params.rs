//! Named parameter storage shared by the supernet, the stand-alone
//! networks, the optimizers and the checkpoint format.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a stored tensor is for; decides which optimizer touches it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Convolution kernels. The only kind that receives weight decay.
    ConvWeight,
    NormScale,
    NormShift,
    /// Operator logits of one mixture layer.
    Alpha,
    /// Connection logits of one fusion module's incoming edges.
    Beta,
    /// Batch-norm running mean and variance, stored as `[2, C]`.
    RunningStats,
}

impl ParamKind {
    pub fn is_architecture(self) -> bool {
        matches!(self, ParamKind::Alpha | ParamKind::Beta)
    }

    /// Weights updated by the network-weight optimizer.
    pub fn is_network_weight(self) -> bool {
        matches!(
            self,
            ParamKind::ConvWeight | ParamKind::NormScale | ParamKind::NormShift
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv_weight",
            ParamKind::NormScale => "norm_scale",
            ParamKind::NormShift => "norm_shift",
            ParamKind::Alpha => "alpha",
            ParamKind::Beta => "beta",
            ParamKind::RunningStats => "running_stats",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "conv_weight" => ParamKind::ConvWeight,
            "norm_scale" => ParamKind::NormScale,
            "norm_shift" => ParamKind::NormShift,
            "alpha" => ParamKind::Alpha,
            "beta" => ParamKind::Beta,
            "running_stats" => ParamKind::RunningStats,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// He initialization from the kernel's fan-in (`shape[1..]`).
    KaimingNormal,
}

/// Append-only store of named tensors.
///
/// Random initialization is seeded from `(seed, name)`, so the value of a
/// parameter never depends on the order in which parameters are created.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Returns the existing parameter called `name`, or registers a new one.
    pub fn get_or_init(&mut self, name: &str, kind: ParamKind, shape: &[usize], init: Init) -> ParamId {
        if let Some(&id) = self.by_name.get(name) {
            debug_assert_eq!(self.params[id.0].tensor.shape(), shape, "{name}");
            return id;
        }
        let tensor = self.initial_value(name, shape, init);
        self.insert(name, kind, tensor)
    }

    /// Registers (or overwrites the value of) a parameter.
    pub fn insert(&mut self, name: &str, kind: ParamKind, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(kind != ParamKind::RunningStats);
        if let Some(&id) = self.by_name.get(name) {
            self.params[id.0].tensor = tensor;
            self.params[id.0].kind = kind;
            return id;
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            kind,
            tensor,
        });
        self.by_name.insert(name.into(), id);
        id
    }

    fn initial_value(&self, name: &str, shape: &[usize], init: Init) -> Tensor {
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::full(shape, v),
            Init::Normal(std) => self.normal(name, shape, std),
            Init::KaimingNormal => {
                let fan_in: usize = shape[1..].iter().product();
                self.normal(name, shape, libm::sqrt(2.0 / fan_in.max(1) as f64))
            }
        }
    }

    fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let dist = Normal::new(0.0, std).expect("finite standard deviation");
        Tensor::from_fn(shape, |_| dist.sample(&mut rng))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::MissingParameter { name: name.into() })
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Parameters in name order; the canonical order for serialization.
    pub fn iter_sorted(&self) -> impl Iterator<Item = &Param> {
        self.by_name.values().map(|id| &self.params[id.0])
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Total element count of trainable network weights (conv and norm affine).
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.is_network_weight())
            .map(|p| p.tensor.numel())
            .sum()
    }
}

/// Mixes a name into a seed (FNV-1a followed by a splitmix finalizer).
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(h)
}

pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
