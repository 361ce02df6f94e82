//! Semantic-FPN style decoder: 1×1 laterals onto a common width, top-down
//! accumulation, a 3×3 head per level, then summation of the resampled
//! levels at stride 4 and a 1×1 classifier upsampled to input resolution.

use crate::backbone::FeaturePyramid;
use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::layers::{BatchNorm2d, Conv2d, Module, Phase, Slot};
use crate::tensor::Scalar;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Channel count of each input level, shallow to deep (c2..c5).
    pub in_channels: [usize; 4],
    pub pyramid_channels: usize,
    pub num_classes: usize,
}

impl DecoderConfig {
    pub fn new(in_channels: [usize; 4]) -> Self {
        DecoderConfig {
            in_channels,
            pyramid_channels: 64,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.in_channels.contains(&0) {
            return Err(TensorError::Config("decoder input widths must be positive".into()));
        }
        if self.pyramid_channels == 0 {
            return Err(TensorError::Config("pyramid_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(TensorError::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// One merged level's refinement: 3×3 conv, ReLU, BN.
struct Head<T: Scalar> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

pub struct Decoder<T: Scalar> {
    pub config: DecoderConfig,
    /// Bias-free so zeroed laterals silence the content path entirely.
    laterals: Vec<Conv2d<T>>,
    heads: Vec<Head<T>>,
    classifier: Conv2d<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(name: &str, config: DecoderConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        config.validate()?;
        let p = config.pyramid_channels;
        let mut laterals = Vec::with_capacity(4);
        let mut heads = Vec::with_capacity(4);
        for (i, &c_in) in config.in_channels.iter().enumerate() {
            let level = i + 2;
            laterals.push(Conv2d::new(format!("{name}.lat{level}"), c_in, p, 1, 1, 0, 1, false, rng));
            heads.push(Head {
                conv: Conv2d::new(format!("{name}.head{level}"), p, p, 3, 1, 1, 1, false, rng),
                bn: BatchNorm2d::new(format!("{name}.head{level}_bn"), p),
            });
        }
        let classifier = Conv2d::new(format!("{name}.cls"), p, config.num_classes, 1, 1, 0, 1, true, rng);
        Ok(Decoder {
            config,
            laterals,
            heads,
            classifier,
        })
    }

    /// Match `x` to the target extents: identity when equal, bilinear resize
    /// otherwise.
    fn resize_to(g: &mut Graph<T>, x: NodeId, h: usize, w: usize) -> Result<NodeId, TensorError> {
        let s = g.value(x).shape();
        if (s.h, s.w) == (h, w) {
            Ok(x)
        } else {
            g.bilinear_resize(x, h, w)
        }
    }

    /// The four refined per-level maps, all resampled to c2's stride. Their
    /// sum feeds the classifier; exposing them keeps the fusion order
    /// testable.
    pub fn level_maps(
        &self,
        g: &mut Graph<T>,
        pyramid: &FeaturePyramid,
        phase: Phase,
    ) -> Result<[NodeId; 4], TensorError> {
        let levels = pyramid.levels();
        for (i, &level) in levels.iter().enumerate() {
            let s = g.value(level).shape();
            if s.c != self.config.in_channels[i] {
                return Err(TensorError::Shape {
                    op: "decode",
                    detail: format!(
                        "level c{} has {} channels, decoder expects {}",
                        i + 2,
                        s.c,
                        self.config.in_channels[i]
                    ),
                });
            }
        }
        // Top-down: deepest lateral first, each upper sum resampled onto the
        // next shallower lateral.
        let mut merged = [None; 4];
        let mut carry: Option<NodeId> = None;
        for i in (0..4).rev() {
            let mut m = self.laterals[i].forward(g, levels[i])?;
            if let Some(upper) = carry {
                let s = g.value(m).shape();
                let matched = Self::resize_to(g, upper, s.h, s.w)?;
                m = g.add(m, matched)?;
            }
            carry = Some(m);
            merged[i] = Some(m);
        }
        // Refine each merged level and bring everything to c2's stride.
        let target = g.value(merged[0].unwrap()).shape();
        let mut out = [merged[0].unwrap(); 4];
        for (i, head) in self.heads.iter().enumerate() {
            let h = head.conv.forward(g, merged[i].unwrap())?;
            let h = g.relu(h)?;
            let h = head.bn.forward(g, h, phase)?;
            out[i] = Self::resize_to(g, h, target.h, target.w)?;
        }
        Ok(out)
    }

    /// Classifier over already-fused stride-4 features, upsampled to the
    /// original extents.
    pub fn classify(
        &self,
        g: &mut Graph<T>,
        fused: NodeId,
        full_h: usize,
        full_w: usize,
    ) -> Result<NodeId, TensorError> {
        let logits = self.classifier.forward(g, fused)?;
        Self::resize_to(g, logits, full_h, full_w)
    }

    /// Logits at input resolution for a pyramid whose channel counts match
    /// the config. `full_h`/`full_w` give the original image extents.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        pyramid: &FeaturePyramid,
        full_h: usize,
        full_w: usize,
        phase: Phase,
    ) -> Result<NodeId, TensorError> {
        let maps = self.level_maps(g, pyramid, phase)?;
        let mut sum = maps[0];
        for &m in &maps[1..] {
            sum = g.add(sum, m)?;
        }
        self.classify(g, sum, full_h, full_w)
    }

    /// Zero every lateral weight; the output then depends only on head and
    /// classifier biases.
    pub fn zero_laterals(&mut self) {
        for lat in &mut self.laterals {
            for v in lat.weight.value.data_mut() {
                *v = T::zero();
            }
        }
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn for_each(&mut self, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for lat in &mut self.laterals {
            lat.for_each(f);
        }
        for head in &mut self.heads {
            head.conv.for_each(f);
            head.bn.for_each(f);
        }
        self.classifier.for_each(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::rng;
    use crate::tensor::{Shape, Tensor};

    fn toy_pyramid(g: &mut Graph<f32>, seed: u64) -> FeaturePyramid {
        let mut r = rng::stream(seed, &[7]);
        let bb = Backbone::<f32>::new("bb", BackboneConfig::default(), &mut r).unwrap();
        let data: Vec<f32> = {
            use rand::Rng;
            (0..3 * 64 * 64).map(|_| r.gen_range(0.0..1.0)).collect()
        };
        let x = g.leaf(Tensor::from_vec(Shape::new(1, 3, 64, 64), data).unwrap());
        bb.encode(g, x, Phase::eval()).unwrap()
    }

    #[test]
    fn logits_shape_matches_input() {
        let mut r = rng::stream(31, &[]);
        let dec = Decoder::<f32>::new("dec", DecoderConfig::new([16, 32, 64, 128]), &mut r).unwrap();
        let mut g = Graph::new();
        let pyr = toy_pyramid(&mut g, 31);
        let logits = dec.decode(&mut g, &pyr, 64, 64, Phase::eval()).unwrap();
        assert_eq!(g.value(logits).shape(), Shape::new(1, 2, 64, 64));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut r = rng::stream(32, &[]);
        let dec = Decoder::<f32>::new("dec", DecoderConfig::new([16, 32, 64, 32]), &mut r).unwrap();
        let mut g = Graph::new();
        let pyr = toy_pyramid(&mut g, 32);
        let err = dec.decode(&mut g, &pyr, 64, 64, Phase::eval()).unwrap_err();
        assert!(err.to_string().contains("c5"), "{err}");
    }

    #[test]
    fn zeroed_laterals_yield_flat_logits() {
        let mut r = rng::stream(33, &[]);
        let mut dec = Decoder::<f32>::new("dec", DecoderConfig::new([16, 32, 64, 128]), &mut r).unwrap();
        dec.zero_laterals();
        let mut g = Graph::new();
        let pyr = toy_pyramid(&mut g, 33);
        let logits = dec.decode(&mut g, &pyr, 64, 64, Phase::eval()).unwrap();
        let out = g.value(logits);
        for c in 0..2 {
            let first = out.at(0, c, 0, 0);
            for y in 0..64 {
                for x in 0..64 {
                    let v = out.at(0, c, y, x);
                    assert!((v - first).abs() < 1e-6, "class {c} at ({y},{x}): {v} vs {first}");
                }
            }
        }
    }

    #[test]
    fn fusion_order_is_immaterial() {
        let mut r = rng::stream(34, &[]);
        let dec = Decoder::<f32>::new("dec", DecoderConfig::new([16, 32, 64, 128]), &mut r).unwrap();
        let mut g = Graph::new();
        let pyr = toy_pyramid(&mut g, 34);
        let maps = dec.level_maps(&mut g, &pyr, Phase::eval()).unwrap();
        let fuse = |g: &mut Graph<f32>, order: [usize; 4]| {
            let mut sum = maps[order[0]];
            for &i in &order[1..] {
                sum = g.add(sum, maps[i]).unwrap();
            }
            dec.classify(g, sum, 64, 64).unwrap()
        };
        let a = fuse(&mut g, [0, 1, 2, 3]);
        let b = fuse(&mut g, [3, 1, 0, 2]);
        let diff = g.value(a).max_abs_diff(g.value(b)).unwrap();
        // Float addition is only commutative up to rounding.
        assert!(diff < 1e-4, "order change moved logits by {diff}");
    }

    #[test]
    fn rejects_single_class() {
        let mut r = rng::stream(35, &[]);
        let mut cfg = DecoderConfig::new([16, 32, 64, 128]);
        cfg.num_classes = 1;
        assert!(Decoder::<f32>::new("dec", cfg, &mut r).is_err());
    }
}
