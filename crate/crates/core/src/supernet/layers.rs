//! Building blocks shared by the supernet and decoded stand-alone networks.
//!
//! Layers hold only [`ParamId`] handles; the values live in a
//! [`ParamStore`] and are brought onto the tape on every forward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::supernet::space::{NodeId, OperatorConfig, SupernetSpec, SCALES};
use crate::tensor::Tensor;

/// Everything a forward pass needs mutable access to.
pub struct Cx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    /// Batch statistics (and running-stat updates) when true.
    pub training: bool,
}

impl<'a> Cx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, training: bool) -> Self {
        Cx { tape, store, training }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvLayer {
    /// Registers a bias-free `k×k` convolution with "same" padding.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        init: Init,
    ) -> Self {
        let weight = store.get_or_init(
            &format!("{name}.weight"),
            ParamKind::ConvWeight,
            &[cout, cin / groups, kernel, kernel],
            init,
        );
        ConvLayer {
            weight,
            stride,
            padding: (kernel - 1) / 2,
            groups,
        }
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        cx.tape.conv2d(x, w, self.stride, self.padding, self.groups)
    }
}

/// Fan-in scaled normal init for convolutions not followed by a ReLU.
pub fn linear_init(cin_per_group: usize, kernel: usize) -> Init {
    Init::Normal(libm::sqrt(1.0 / (cin_per_group * kernel * kernel) as f64))
}

#[derive(Clone, Debug)]
pub struct NormLayer {
    pub scale: ParamId,
    pub shift: ParamId,
    pub stats: ParamId,
}

impl NormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, scale_init: f64) -> Self {
        let scale = store.get_or_init(
            &format!("{name}.scale"),
            ParamKind::NormScale,
            &[channels],
            Init::Constant(scale_init),
        );
        let shift = store.get_or_init(&format!("{name}.shift"), ParamKind::NormShift, &[channels], Init::Zeros);
        let stats_name = format!("{name}.stats");
        let stats = match store.id(&stats_name) {
            Some(id) => id,
            None => {
                let mut init = alloc::vec![0.0; 2 * channels];
                init[channels..].iter_mut().for_each(|v| *v = 1.0);
                let t = Tensor::new(&[2, channels], init).expect("consistent");
                store.insert(&stats_name, ParamKind::RunningStats, t)
            }
        };
        NormLayer { scale, shift, stats }
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let g = cx.param(self.scale);
        let b = cx.param(self.shift);
        let running = cx.store.tensor_mut(self.stats).data_mut();
        cx.tape.batch_norm(x, g, b, running, cx.training)
    }
}

/// Mobile inverted bottleneck: 1×1 expand → BN+ReLU → depthwise k×k →
/// BN+ReLU → 1×1 project → BN, plus an identity residual. Shape-preserving.
#[derive(Clone, Debug)]
pub struct MbConv {
    pub config: OperatorConfig,
    pub channels: usize,
    expand: ConvLayer,
    bn1: NormLayer,
    depthwise: ConvLayer,
    bn2: NormLayer,
    project: ConvLayer,
    bn3: NormLayer,
}

impl MbConv {
    /// The last norm's scale starts at zero so the block begins as the identity.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, config: OperatorConfig) -> Self {
        let hidden = channels * config.expansion;
        let k = config.kernel;
        MbConv {
            config,
            channels,
            expand: ConvLayer::new(store, &format!("{name}.expand"), channels, hidden, 1, 1, 1, Init::KaimingNormal),
            bn1: NormLayer::new(store, &format!("{name}.bn1"), hidden, 1.0),
            depthwise: ConvLayer::new(store, &format!("{name}.dw"), hidden, hidden, k, 1, hidden, Init::KaimingNormal),
            bn2: NormLayer::new(store, &format!("{name}.bn2"), hidden, 1.0),
            project: ConvLayer::new(store, &format!("{name}.project"), hidden, channels, 1, 1, 1, linear_init(hidden, 1)),
            bn3: NormLayer::new(store, &format!("{name}.bn3"), channels, 0.0),
        }
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let c = cx.tape.value(x).shape().get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(crate::Error::ShapeMismatch {
                op: "mbconv",
                dim: "channels",
                expected: self.channels,
                found: c,
            });
        }
        let h = self.expand.forward(cx, x)?;
        let h = self.bn1.forward(cx, h)?;
        let h = cx.tape.relu(h);
        let h = self.depthwise.forward(cx, h)?;
        let h = self.bn2.forward(cx, h)?;
        let h = cx.tape.relu(h);
        let h = self.project.forward(cx, h)?;
        let h = self.bn3.forward(cx, h)?;
        cx.tape.add(h, x)
    }

    /// Handles of every tensor the block owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for conv in [&self.expand, &self.depthwise, &self.project] {
            v.push(conv.weight);
        }
        for bn in [&self.bn1, &self.bn2, &self.bn3] {
            v.extend([bn.scale, bn.shift, bn.stats]);
        }
        v
    }
}

/// 7×7 stride-2 convolution followed by four chained stride-2 3×3
/// convolutions whose outputs form the layer-0 pyramid.
#[derive(Clone, Debug)]
pub struct Stem {
    conv7: ConvLayer,
    bn7: NormLayer,
    stages: Vec<(ConvLayer, NormLayer)>,
}

impl Stem {
    pub fn new(store: &mut ParamStore, spec: &SupernetSpec) -> Self {
        let conv7 = ConvLayer::new(store, "stem.conv7", 3, spec.stem_width, 7, 2, 1, Init::KaimingNormal);
        let bn7 = NormLayer::new(store, "stem.bn7", spec.stem_width, 1.0);
        let mut cin = spec.stem_width;
        let stages = (0..SCALES)
            .map(|s| {
                let cout = spec.width(s);
                let conv = ConvLayer::new(store, &format!("stem.down{s}"), cin, cout, 3, 2, 1, Init::KaimingNormal);
                let bn = NormLayer::new(store, &format!("stem.bn{s}"), cout, 1.0);
                cin = cout;
                (conv, bn)
            })
            .collect();
        Stem { conv7, bn7, stages }
    }

    /// Returns the four pyramid levels at 1/4, 1/8, 1/16 and 1/32 resolution.
    pub fn forward(&self, cx: &mut Cx, image: Var) -> Result<[Var; SCALES]> {
        let [_, c, h, w] = cx.tape.value(image).dims4("stem")?;
        if c != 3 {
            return Err(crate::Error::ShapeMismatch { op: "stem", dim: "image channels", expected: 3, found: c });
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(invalid("stem", format!("image size {h}x{w} is not divisible by 32")));
        }
        let x = self.conv7.forward(cx, image)?;
        let x = self.bn7.forward(cx, x)?;
        let mut x = cx.tape.relu(x);
        let mut out = [x; SCALES];
        for (s, (conv, bn)) in self.stages.iter().enumerate() {
            let y = conv.forward(cx, x)?;
            let y = bn.forward(cx, y)?;
            x = cx.tape.relu(y);
            out[s] = x;
        }
        Ok(out)
    }
}

/// Upsample the four final outputs to 1/4 scale, concatenate, 3×3 conv +
/// BN + ReLU, 1×1 conv to class logits, then ×4 bilinear upsampling.
#[derive(Clone, Debug)]
pub struct Head {
    conv3: ConvLayer,
    bn: NormLayer,
    classifier: ConvLayer,
}

impl Head {
    pub fn new(store: &mut ParamStore, spec: &SupernetSpec) -> Self {
        let cin: usize = (0..SCALES).map(|s| spec.width(s)).sum();
        let hw = spec.head_width();
        Head {
            conv3: ConvLayer::new(store, "head.conv3", cin, hw, 3, 1, 1, Init::KaimingNormal),
            bn: NormLayer::new(store, "head.bn", hw, 1.0),
            classifier: ConvLayer::new(store, "head.classifier", hw, spec.num_classes, 1, 1, 1, linear_init(hw, 1)),
        }
    }

    pub fn forward(&self, cx: &mut Cx, finals: [Var; SCALES]) -> Result<Var> {
        let mut parts = [finals[0]; SCALES];
        for (s, &v) in finals.iter().enumerate() {
            parts[s] = cx.tape.bilinear_upsample(v, 1 << s)?;
        }
        let x = cx.tape.concat(&parts, 1)?;
        let x = self.conv3.forward(cx, x)?;
        let x = self.bn.forward(cx, x)?;
        let x = cx.tape.relu(x);
        let x = self.classifier.forward(cx, x)?;
        cx.tape.bilinear_upsample(x, 4)
    }
}

/// Transforms the output of `src` to the resolution and width of `dst`.
#[derive(Clone, Debug)]
pub enum Alignment {
    /// Same scale: shapes already agree.
    Identity,
    /// One stride-2 3×3 convolution per octave, each doubling the width.
    Down(Vec<ConvLayer>),
    /// 1×1 channel projection followed by bilinear upsampling.
    Up { project: ConvLayer, factor: usize },
}

impl Alignment {
    pub fn param_prefix(src: NodeId, dst: NodeId) -> String {
        format!("{dst}.align.{src}")
    }

    pub fn new(store: &mut ParamStore, spec: &SupernetSpec, src: NodeId, dst: NodeId) -> Self {
        let prefix = Self::param_prefix(src, dst);
        if src.scale == dst.scale {
            Alignment::Identity
        } else if src.scale < dst.scale {
            let convs = (src.scale..dst.scale)
                .map(|s| {
                    let (cin, cout) = (spec.width(s), spec.width(s + 1));
                    ConvLayer::new(store, &format!("{prefix}.down{s}"), cin, cout, 3, 2, 1, linear_init(cin, 3))
                })
                .collect();
            Alignment::Down(convs)
        } else {
            let (cin, cout) = (spec.width(src.scale), spec.width(dst.scale));
            Alignment::Up {
                project: ConvLayer::new(store, &format!("{prefix}.project"), cin, cout, 1, 1, 1, linear_init(cin, 1)),
                factor: 1 << (src.scale - dst.scale),
            }
        }
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        match self {
            Alignment::Identity => Ok(x),
            Alignment::Down(convs) => {
                let mut x = x;
                for c in convs {
                    x = c.forward(cx, x)?;
                }
                Ok(x)
            }
            Alignment::Up { project, factor } => {
                let x = project.forward(cx, x)?;
                cx.tape.bilinear_upsample(x, *factor)
            }
        }
    }
}
