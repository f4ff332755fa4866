//! The full model: shared encoder, optional prompt generation, per-level
//! transformer stacks and the top-down decoder.

use crate::autograd::{Graph, Tensor, Var};
use crate::backbone::{check_input_size, encoder_from_config, PyramidEncoder};
use crate::config::{ModelConfig, TrainMode};
use crate::decoder::Decoder;
use crate::error::{ensure, Result};
use crate::params::{Binding, ParamSpec, ParamStore};
use crate::partition::{partition_parameters, ParameterPartition};
use crate::spg::Spg;
use crate::transformer::{Injection, TransformerStack};

/// How auxiliary information reaches the frozen model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptPath {
    /// RGB stream only; the pre-trained model as it was trained.
    None,
    /// SPG prompts, injected by sum or by concatenation.
    Spg(Injection),
    /// Auxiliary features summed straight into the RGB stream, no SPG.
    RawAux,
}

impl From<TrainMode> for PromptPath {
    fn from(mode: TrainMode) -> Self {
        match mode {
            TrainMode::Pretrain => PromptPath::None,
            TrainMode::PromptTune | TrainMode::FullFinetune => PromptPath::Spg(Injection::Sum),
            TrainMode::PromptConcat => PromptPath::Spg(Injection::Concat),
            TrainMode::NoSpg => PromptPath::RawAux,
        }
    }
}

/// Handles to the interesting nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub saliency: Var,
    /// Pre-sigmoid map that `saliency` is computed from.
    pub logits: Var,
    pub pyramid_rgb: [Var; 4],
    pub pyramid_aux: Option<[Var; 4]>,
    pub prompts: Option<[Var; 4]>,
    pub transformed: [Var; 4],
}

pub struct UniSod {
    config: ModelConfig,
    encoder: Box<dyn PyramidEncoder>,
    transformer: TransformerStack,
    decoder: Decoder,
    spg: Spg,
}

impl std::fmt::Debug for UniSod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UniSod").field("config", &self.config).finish()
    }
}

impl UniSod {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let encoder = encoder_from_config(&config.backbone)?;
        Self::with_encoder(config, encoder)
    }

    /// Builds the model around a caller-supplied encoder.
    pub fn with_encoder(config: ModelConfig, encoder: Box<dyn PyramidEncoder>) -> Result<Self> {
        check_input_size(config.input_hw.0, config.input_hw.1)?;
        let channels = encoder.channels();
        ensure!(
            channels == config.backbone.channels,
            "encoder widths {channels:?} differ from configured {:?}",
            config.backbone.channels
        );
        Ok(Self {
            transformer: TransformerStack::new(config.layers, channels, config.input_hw),
            decoder: Decoder::new(channels, config.decoder_width),
            spg: Spg::new(channels),
            encoder,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &dyn PyramidEncoder {
        self.encoder.as_ref()
    }

    pub fn transformer(&self) -> &TransformerStack {
        &self.transformer
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn spg(&self) -> &Spg {
        &self.spg
    }

    /// Parameters of the pre-trained model (everything except SPG).
    pub fn base_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.encoder.param_specs();
        specs.extend(self.transformer.param_specs());
        specs.extend(self.decoder.param_specs());
        specs
    }

    pub fn spg_specs(&self) -> Vec<ParamSpec> {
        self.spg.param_specs()
    }

    /// Parameters the model has when run in `mode`.
    pub fn specs_for(&self, mode: TrainMode) -> Vec<ParamSpec> {
        let mut specs = self.base_specs();
        if mode.uses_spg() {
            specs.extend(self.spg_specs());
        }
        specs
    }

    /// Frozen/trainable split for `mode`, computed from declared shapes only.
    pub fn partition(&self, mode: TrainMode) -> Result<ParameterPartition> {
        partition_parameters(&self.specs_for(mode), mode)
    }

    /// `rgb`, `aux`: `[N, 3, H, W]`. For an RGB-only task `aux` is the RGB
    /// tensor itself.
    pub fn forward(&self, g: &mut Graph, p: &Binding, rgb: Var, aux: Var, path: PromptPath) -> Result<Forward> {
        let s = g.shape(rgb).to_vec();
        ensure!(
            s.len() == 4 && s[1] == 3,
            "rgb input must be [N,3,H,W], got {s:?}"
        );
        ensure!(
            (s[2], s[3]) == self.config.input_hw,
            "input {}x{} differs from the model's configured {}x{}",
            s[2],
            s[3],
            self.config.input_hw.0,
            self.config.input_hw.1
        );
        ensure!(
            g.shape(aux) == s.as_slice(),
            "aux input {:?} differs from rgb {s:?}",
            g.shape(aux)
        );
        let pyramid_rgb = self.encoder.encode(g, p, rgb);
        let (pyramid_aux, prompts, injection) = match path {
            PromptPath::None => (None, None, Injection::Sum),
            PromptPath::Spg(inj) => {
                let pa = self.encoder.encode(g, p, aux);
                let pr = self.spg.prompts(g, p, &pyramid_rgb, &pa)?;
                (Some(pa), Some(pr), inj)
            }
            PromptPath::RawAux => {
                let pa = self.encoder.encode(g, p, aux);
                (Some(pa), Some(pa), Injection::Sum)
            }
        };
        let transformed = self
            .transformer
            .encode_pyramid(g, p, pyramid_rgb, prompts, injection)?;
        let (saliency, trace) = self.decoder.decode(g, p, transformed)?;
        Ok(Forward {
            saliency,
            logits: trace.logits,
            pyramid_rgb,
            pyramid_aux,
            prompts,
            transformed,
        })
    }

    /// Inference: saliency maps `[N, 1, H, W]` in `[0, 1]`.
    pub fn predict(&self, params: &ParamStore, rgb: &Tensor, aux: &Tensor, path: PromptPath) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| false);
        let r = g.input(rgb.clone());
        let a = g.input(aux.clone());
        let out = self.forward(&mut g, &p, r, a, path)?;
        Ok(g.value(out.saliency).clone())
    }
}
