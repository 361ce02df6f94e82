//! Full segmentation model: encoder, an optional attention neck on the deep
//! features, and the pyramid decoder.

use crate::attention::{AttentionConfig, CpaBlock, CpaTrace, SelfAttention};
use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::layers::{Module, Phase, Slot};
use crate::rng;
use crate::tensor::Scalar;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Encoder and decoder only.
    Baseline,
    /// Single spatial self-attention block on the deep features.
    Sa,
    /// Full contextual pyramid attention.
    Cpa,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Baseline => "baseline",
            Variant::Sa => "sa",
            Variant::Cpa => "cpa",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "sa" => Ok(Variant::Sa),
            "cpa" => Ok(Variant::Cpa),
            other => Err(format!("unknown variant '{other}' (baseline|sa|cpa)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub pyramid_channels: usize,
    pub num_classes: usize,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Cpa,
            backbone: BackboneConfig::default(),
            attention: AttentionConfig::default(),
            pyramid_channels: 64,
            num_classes: 2,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Channel count the decoder sees at the deepest level.
    pub fn neck_out_channels(&self) -> usize {
        match self.variant {
            Variant::Baseline | Variant::Sa => self.backbone.c5_width(),
            Variant::Cpa => self.backbone.c5_width() / self.attention.compression,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let w = self.backbone.stage_widths;
        DecoderConfig {
            in_channels: [w[0], w[1], w[2], self.neck_out_channels()],
            pyramid_channels: self.pyramid_channels,
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        self.backbone.validate()?;
        self.attention.validate(self.backbone.c5_width())?;
        self.decoder_config().validate()
    }

    /// Canonical flat rendering; checkpoints digest this to detect loading
    /// weights into a differently-shaped model.
    pub fn canonical_string(&self) -> String {
        let b = &self.backbone;
        let a = &self.attention;
        let scales: Vec<String> = a.scales.iter().map(|s| s.to_string()).collect();
        format!(
            "variant={}\nwidths={:?}\ndepths={:?}\ndilations={:?}\nuse_se={}\nse_reduction={}\nscales=[{}]\ncompression={}\npyramid_channels={}\nnum_classes={}\n",
            self.variant,
            b.stage_widths,
            b.stage_depths,
            b.dilation_plan,
            b.use_se,
            b.se_reduction,
            scales.join(","),
            a.compression,
            self.pyramid_channels,
            self.num_classes
        )
    }
}

// One neck per model; the variants' size spread is irrelevant.
#[allow(clippy::large_enum_variant)]
enum Neck<T: Scalar> {
    None,
    Sa(SelfAttention<T>),
    Cpa(CpaBlock<T>),
}

/// Model output: logits at input resolution plus, for the CPA variant, the
/// attention traces captured during the pass.
pub struct SegOut {
    pub logits: NodeId,
    pub trace: Option<CpaTrace>,
}

pub struct SegModel<T: Scalar> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    neck: Neck<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self, TensorError> {
        config.validate()?;
        let mut r = rng::stream(config.init_seed, &[rng::derive(0x6d6f64656c, &[])]);
        let backbone = Backbone::new("enc", config.backbone.clone(), &mut r)?;
        let c5 = config.backbone.c5_width();
        let neck = match config.variant {
            Variant::Baseline => Neck::None,
            Variant::Sa => Neck::Sa(SelfAttention::new("sa", c5, &mut r)),
            Variant::Cpa => Neck::Cpa(CpaBlock::new("cpa", c5, config.attention.clone(), &mut r)?),
        };
        let decoder = Decoder::new("dec", config.decoder_config(), &mut r)?;
        Ok(SegModel {
            config,
            backbone,
            neck,
            decoder,
        })
    }

    /// Forward pass to logits at the input resolution.
    pub fn forward(&self, g: &mut Graph<T>, image: NodeId, phase: Phase) -> Result<SegOut, TensorError> {
        let s = g.value(image).shape();
        let pyr = self.backbone.encode(g, image, phase)?;
        let (c5, trace) = match &self.neck {
            Neck::None => (pyr.c5, None),
            Neck::Sa(sa) => (sa.forward(g, pyr.c5)?.out, None),
            Neck::Cpa(cpa) => {
                let out = cpa.forward(g, pyr.c5, phase)?;
                (out.out, Some(out.trace))
            }
        };
        let pyr = FeaturePyramid { c5, ..pyr };
        let logits = self.decoder.decode(g, &pyr, s.h, s.w, phase)?;
        Ok(SegOut { logits, trace })
    }

    pub fn cpa(&self) -> Option<&CpaBlock<T>> {
        match &self.neck {
            Neck::Cpa(b) => Some(b),
            _ => None,
        }
    }

    pub fn cpa_mut(&mut self) -> Option<&mut CpaBlock<T>> {
        match &mut self.neck {
            Neck::Cpa(b) => Some(b),
            _ => None,
        }
    }

    /// Smallest input extent multiple the encoder accepts.
    pub fn extent_multiple(&self) -> usize {
        // Stride 32 would be the classical constraint; the dilated encoder
        // stops at stride 8, but the deepest grid must still divide by the
        // largest attention scale, and the stem path needs /4. Use 32 so the
        // 8x8 deep grid of a 256 crop splits evenly across scales 1/2/4.
        32
    }
}

impl<T: Scalar> Module<T> for SegModel<T> {
    fn for_each(&mut self, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.backbone.for_each(f);
        match &mut self.neck {
            Neck::None => {}
            Neck::Sa(sa) => sa.for_each(f),
            Neck::Cpa(cpa) => cpa.for_each(f),
        }
        self.decoder.for_each(f);
    }
}
