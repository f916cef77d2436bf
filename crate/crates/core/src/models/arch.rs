//! Architecture descriptions and the layer layout they induce.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Vdncnn,
    Vresnet,
    TinyVdncnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recurrence {
    NoneSingle,
    NoneMulti,
    FeatureShift,
    Frame,
    Feature,
    Rlsp,
}

impl Recurrence {
    pub const ALL: [Recurrence; 6] = [
        Recurrence::NoneSingle,
        Recurrence::NoneMulti,
        Recurrence::FeatureShift,
        Recurrence::Frame,
        Recurrence::Feature,
        Recurrence::Rlsp,
    ];

    /// Whether the state depends on earlier states (true feedback).
    pub fn is_recurrent(self) -> bool {
        matches!(
            self,
            Recurrence::Frame | Recurrence::Feature | Recurrence::Rlsp
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Recurrence::NoneSingle => "none_single",
            Recurrence::NoneMulti => "none_multi",
            Recurrence::FeatureShift => "feature_shift",
            Recurrence::Frame => "frame",
            Recurrence::Feature => "feature",
            Recurrence::Rlsp => "rlsp",
        }
    }
}

impl std::str::FromStr for Recurrence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recurrence::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown recurrence `{s}` (expected one of none_single, none_multi, feature_shift, frame, feature, rlsp)"
                ))
            })
    }
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Vdncnn => "vdncnn",
            Backbone::Vresnet => "vresnet",
            Backbone::TinyVdncnn => "tiny_vdncnn",
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vdncnn" => Ok(Backbone::Vdncnn),
            "vresnet" => Ok(Backbone::Vresnet),
            "tiny_vdncnn" => Ok(Backbone::TinyVdncnn),
            other => Err(Error::config(format!(
                "unknown backbone `{other}` (expected vdncnn, vresnet or tiny_vdncnn)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub backbone: Backbone,
    pub recurrence: Recurrence,
    pub channels: usize,
    /// Convolutions on the main path (DnCNN family) or residual blocks (ResNet).
    pub depth: usize,
    pub kernel_size: usize,
    pub in_channels: usize,
    /// Conv index (DnCNN) or block index (ResNet) whose output is fed back.
    /// `None` picks the default for the recurrence type.
    pub feature_tap: Option<usize>,
}

impl ArchitectureSpec {
    pub fn new(backbone: Backbone, recurrence: Recurrence) -> Self {
        let (channels, depth) = match backbone {
            Backbone::Vdncnn => (64, 10),
            Backbone::Vresnet => (64, 5),
            // input conv, one internal conv, output conv
            Backbone::TinyVdncnn => (16, 3),
        };
        Self {
            backbone,
            recurrence,
            channels,
            depth,
            kernel_size: 3,
            in_channels: 3,
            feature_tap: None,
        }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    /// `backbone-recurrence`, e.g. `tiny_vdncnn-rlsp`.
    pub fn name(&self) -> String {
        format!("{}-{}", self.backbone.name(), self.recurrence.name())
    }

    pub fn is_resnet(&self) -> bool {
        self.backbone == Backbone::Vresnet
    }

    /// Channel count of the recurrent state, if any.
    pub fn state_channels(&self) -> usize {
        match self.recurrence {
            Recurrence::NoneSingle | Recurrence::NoneMulti => 0,
            Recurrence::Frame => self.in_channels,
            _ => self.channels,
        }
    }

    /// Where the fed-back features are read. For the DnCNN family this is
    /// the post-ReLU output of a conv; for ResNet the output of a block.
    pub fn tap(&self) -> Option<usize> {
        if let Some(t) = self.feature_tap {
            if matches!(self.recurrence, Recurrence::Feature) {
                return Some(t);
            }
        }
        match (self.is_resnet(), self.recurrence) {
            (false, Recurrence::Feature) => Some((self.depth / 2).saturating_sub(1).max(1)),
            (false, Recurrence::Rlsp) => Some(self.depth - 2),
            (false, Recurrence::FeatureShift) => Some(0),
            (true, Recurrence::Feature) => Some(self.depth / 2),
            (true, Recurrence::Rlsp) => Some(self.depth - 1),
            // ResNet shifts the head output, before any block
            (true, Recurrence::FeatureShift) => None,
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let supported = "supported: backbones {vdncnn, vresnet, tiny_vdncnn} × recurrences \
                         {none_single, none_multi, feature_shift, frame, feature, rlsp}, \
                         odd kernel size, channels ≥ 1, DnCNN depth ≥ 3, ResNet depth ≥ 1";
        if self.channels == 0 || self.in_channels == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Unsupported(format!("{self:?}; {supported}")));
        }
        if self.is_resnet() {
            if self.depth == 0 {
                return Err(Error::Unsupported(format!("{self:?}; {supported}")));
            }
            if let Some(t) = self.tap() {
                if t >= self.depth {
                    return Err(Error::Unsupported(format!(
                        "feature tap block {t} out of range for {} blocks",
                        self.depth
                    )));
                }
            }
        } else {
            if self.depth < 3 {
                return Err(Error::Unsupported(format!("{self:?}; {supported}")));
            }
            if let Some(t) = self.tap() {
                let lo = if self.recurrence == Recurrence::Feature {
                    1
                } else {
                    0
                };
                if t < lo || t > self.depth - 2 {
                    return Err(Error::Unsupported(format!(
                        "feature tap conv {t} must lie in {lo}..={} for depth {}",
                        self.depth - 2,
                        self.depth
                    )));
                }
            }
        }
        Ok(())
    }

    /// Conv layers in execution order.
    pub fn layers(&self) -> Vec<LayerShape> {
        let (c, m, k) = (self.in_channels, self.channels, self.kernel_size);
        let r = self.recurrence;
        let mut first_in = if r == Recurrence::NoneMulti { 3 * c } else { c };
        if r == Recurrence::Frame {
            first_in += c;
        }
        let mut out = Vec::new();
        if self.is_resnet() {
            out.push(LayerShape::new("head", k, first_in, m));
            if self.has_fusion() {
                out.push(LayerShape::new("fusion", k, 2 * m, m));
            }
            for b in 0..self.depth {
                out.push(LayerShape::new(&format!("block{b}.a"), k, m, m));
                out.push(LayerShape::new(&format!("block{b}.b"), k, m, m));
            }
            out.push(LayerShape::new("tail", k, m, c));
        } else {
            if r == Recurrence::Rlsp {
                first_in += m;
            }
            let inject = self.inject_conv();
            for i in 0..self.depth {
                let mut m_in = if i == 0 { first_in } else { m };
                if Some(i) == inject && i > 0 {
                    m_in += m;
                }
                let m_out = if i + 1 == self.depth { c } else { m };
                out.push(LayerShape::new(&format!("conv{i}"), k, m_in, m_out));
            }
        }
        out
    }

    /// ResNet variants that mix a second feature map in after the head.
    pub fn has_fusion(&self) -> bool {
        self.is_resnet()
            && matches!(
                self.recurrence,
                Recurrence::Feature | Recurrence::Rlsp | Recurrence::FeatureShift
            )
    }

    /// DnCNN conv whose input receives the state.
    pub(crate) fn inject_conv(&self) -> Option<usize> {
        match self.recurrence {
            Recurrence::Feature | Recurrence::FeatureShift => Some(1),
            Recurrence::Rlsp | Recurrence::Frame => Some(0),
            _ => None,
        }
    }

    /// `(layer index, first input channel, channel count)` of the kernel
    /// slice that reads the state, for recurrent variants.
    pub fn feedback_slice(&self) -> Option<(usize, usize, usize)> {
        if !self.recurrence.is_recurrent() {
            return None;
        }
        let layers = self.layers();
        let sc = self.state_channels();
        let idx = if self.is_resnet() {
            match self.recurrence {
                Recurrence::Frame => 0,
                _ => 1,
            }
        } else {
            self.inject_conv()?
        };
        let m_in = layers[idx].m_in;
        Some((idx, m_in - sc, sc))
    }

    /// Layers traversed from the state back to the next state.
    pub fn recurrent_path(&self) -> Vec<PathFactor> {
        let r = self.recurrence;
        if !r.is_recurrent() {
            return Vec::new();
        }
        if self.is_resnet() {
            let block = |b: usize| {
                let base = if self.has_fusion() { 2 } else { 1 };
                PathFactor::Residual(base + 2 * b, base + 2 * b + 1)
            };
            match r {
                Recurrence::Frame => {
                    let mut p = vec![PathFactor::Layer(0)];
                    p.extend((0..self.depth).map(block));
                    p.push(PathFactor::Layer(self.layers().len() - 1));
                    p
                }
                _ => {
                    let tap = self.tap().unwrap_or(0);
                    let mut p = vec![PathFactor::Layer(1)];
                    p.extend((0..=tap).map(block));
                    p
                }
            }
        } else {
            match r {
                Recurrence::Frame => (0..self.depth).map(PathFactor::Layer).collect(),
                Recurrence::Rlsp => (0..=self.depth - 2).map(PathFactor::Layer).collect(),
                _ => {
                    let tap = self.tap().unwrap_or(1);
                    (1..=tap).map(PathFactor::Layer).collect()
                }
            }
        }
    }

    /// Index of the output convolution.
    pub fn output_layer(&self) -> usize {
        self.layers().len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub k: usize,
    pub m_in: usize,
    pub m_out: usize,
}

impl LayerShape {
    fn new(name: &str, k: usize, m_in: usize, m_out: usize) -> Self {
        Self {
            name: name.to_string(),
            k,
            m_in,
            m_out,
        }
    }
}

/// One factor of the Lipschitz bound along the recurrent path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathFactor {
    Layer(usize),
    /// `z + b(relu(a(z)))`, bounded by `1 + σ(a)·σ(b)`.
    Residual(usize, usize),
}
