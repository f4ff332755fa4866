//! Hierarchical feature extraction.
//!
//! Any encoder that maps a `[N, 3, H, W]` image to four feature maps at
//! strides 4/8/16/32 can drive the rest of the model; [`ToyConvEncoder`] is
//! the small convolutional pyramid used for desk-scale runs.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::params::{conv_specs, Binding, ParamSpec, ParamStore};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const NAMESPACE: &str = "backbone.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    ToyConv,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub channels: [usize; 4],
    pub variant: BackboneVariant,
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            variant: BackboneVariant::ToyConv,
        }
    }

    /// Same widths as a Swin-B pyramid; used for parameter accounting.
    pub fn paper_shaped() -> Self {
        Self {
            channels: [128, 256, 512, 1024],
            variant: BackboneVariant::ToyConv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "backbone.channels must all be >= 1, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Rejects spatial sizes the four-level pyramid cannot tile exactly.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    ensure!(
        h > 0 && w > 0 && h.is_multiple_of(32) && w.is_multiple_of(32),
        "input {h}x{w} is not divisible by 32; pad to {}x{}",
        h.div_ceil(32).max(1) * 32,
        w.div_ceil(32).max(1) * 32
    );
    Ok(())
}

/// An image encoder producing a four-level pyramid on the tape.
pub trait PyramidEncoder: Send + Sync {
    /// Parameters owned by the encoder; names must start with `backbone.`.
    fn param_specs(&self) -> Vec<ParamSpec>;

    /// Channel widths of the four levels.
    fn channels(&self) -> [usize; 4];

    /// Encodes `image: [N, 3, H, W]` into levels at strides 4, 8, 16, 32.
    fn encode(&self, graph: &mut Graph, params: &Binding, image: Var) -> [Var; 4];
}

/// Four conv stages; stage 1 reaches stride 4 with two stride-2 convs, the
/// others halve resolution once. Each stage ends in one residual block.
#[derive(Debug, Clone)]
pub struct ToyConvEncoder {
    channels: [usize; 4],
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
const RESIDUAL_GAIN: f64 = 0.5;

impl ToyConvEncoder {
    pub fn new(channels: [usize; 4]) -> Self {
        Self { channels }
    }

    fn conv(g: &mut Graph, p: &Binding, name: &str, x: Var, stride: usize) -> Var {
        let w = p.var(&format!("{name}.weight"));
        let b = p.var(&format!("{name}.bias"));
        g.conv2d(x, w, Some(b), stride, 1)
    }

    fn residual(g: &mut Graph, p: &Binding, prefix: &str, x: Var) -> Var {
        let h = Self::conv(g, p, &format!("{prefix}.conv1"), x, 1);
        let h = g.relu(h);
        let h = Self::conv(g, p, &format!("{prefix}.conv2"), h, 1);
        let s = g.add(x, h);
        g.relu(s)
    }
}

impl PyramidEncoder for ToyConvEncoder {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.channels;
        let mut specs = Vec::new();
        specs.extend(conv_specs("backbone.stage1.down0", 3, c[0], 3, RELU_GAIN));
        specs.extend(conv_specs("backbone.stage1.down1", c[0], c[0], 3, RELU_GAIN));
        for i in 0..4 {
            let stage = format!("backbone.stage{}", i + 1);
            if i > 0 {
                specs.extend(conv_specs(&format!("{stage}.down"), c[i - 1], c[i], 3, RELU_GAIN));
            }
            specs.extend(conv_specs(&format!("{stage}.res.conv1"), c[i], c[i], 3, RELU_GAIN));
            specs.extend(conv_specs(&format!("{stage}.res.conv2"), c[i], c[i], 3, RESIDUAL_GAIN));
        }
        specs
    }

    fn channels(&self) -> [usize; 4] {
        self.channels
    }

    fn encode(&self, g: &mut Graph, p: &Binding, image: Var) -> [Var; 4] {
        let mut x = Self::conv(g, p, "backbone.stage1.down0", image, 2);
        x = g.relu(x);
        x = Self::conv(g, p, "backbone.stage1.down1", x, 2);
        x = g.relu(x);
        x = Self::residual(g, p, "backbone.stage1.res", x);
        let mut levels = [x; 4];
        for (i, level) in levels.iter_mut().enumerate().skip(1) {
            let stage = format!("backbone.stage{}", i + 1);
            x = Self::conv(g, p, &format!("{stage}.down"), x, 2);
            x = g.relu(x);
            x = Self::residual(g, p, &format!("{stage}.res"), x);
            *level = x;
        }
        levels
    }
}

/// Builds the encoder a config names. The external variant has no built-in
/// implementation and must be supplied through [`crate::model::UniSod::with_encoder`].
pub fn encoder_from_config(config: &BackboneConfig) -> Result<Box<dyn PyramidEncoder>> {
    config.validate()?;
    match config.variant {
        BackboneVariant::ToyConv => Ok(Box::new(ToyConvEncoder::new(config.channels))),
        BackboneVariant::External => Err(Error::Config(
            "backbone.variant=external requires an encoder supplied by the caller".into(),
        )),
    }
}

/// Four feature maps at strides 4/8/16/32 of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Validates level count, strides and channel counts against the input size.
    pub fn new(levels: Vec<Tensor>, input_hw: (usize, usize), channels: [usize; 4]) -> Result<Self> {
        ensure!(levels.len() == 4, "pyramid needs 4 levels, got {}", levels.len());
        let batch = levels[0].shape()[0];
        for (i, l) in levels.iter().enumerate() {
            let s = l.shape();
            ensure!(s.len() == 4, "level {} must be [N,C,H,W], got {s:?}", i + 1);
            let expect = [
                batch,
                channels[i],
                input_hw.0 / STRIDES[i],
                input_hw.1 / STRIDES[i],
            ];
            ensure!(
                s == expect,
                "level {} has shape {s:?}, expected {expect:?}",
                i + 1
            );
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i - 1]
    }

    pub fn into_levels(self) -> Vec<Tensor> {
        self.levels
    }
}

fn batched(image: &Tensor) -> Result<Tensor> {
    match image.ndim() {
        3 => Ok(image.clone().insert_axis(ndarray::Axis(0))),
        4 => Ok(image.clone()),
        n => Err(Error::Contract(format!("image must be 3xHxW or Nx3xHxW, got rank {n}"))),
    }
}

/// Runs `encoder` on one image (`3xHxW`) or a batch (`Nx3xHxW`).
pub fn extract(encoder: &dyn PyramidEncoder, params: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
    let x = batched(image)?;
    let s = x.shape().to_vec();
    ensure!(s[1] == 3, "image must have 3 channels, got {}", s[1]);
    check_input_size(s[2], s[3])?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let xv = g.input(x);
    let levels = encoder.encode(&mut g, &p, xv);
    FeaturePyramid::new(
        levels.iter().map(|v| g.value(*v).clone()).collect(),
        (s[2], s[3]),
        encoder.channels(),
    )
}

/// Encodes both modalities with one parameter set.
pub fn shared_extract(
    encoder: &dyn PyramidEncoder,
    params: &ParamStore,
    rgb: &Tensor,
    aux: &Tensor,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    ensure!(
        rgb.shape() == aux.shape(),
        "rgb {:?} and aux {:?} shapes differ",
        rgb.shape(),
        aux.shape()
    );
    Ok((extract(encoder, params, rgb)?, extract(encoder, params, aux)?))
}
