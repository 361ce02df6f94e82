//! Toy-depth dilated residual encoder. Four basic-block stages behind a 7×7
//! stem; the last two stages trade their stride for dilation so deep
//! features keep 1/8 resolution. Optionally gates every residual branch with
//! squeeze-and-excitation.

use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::layers::{BatchNorm2d, Conv2d, Module, Phase, Slot};
use crate::tensor::Scalar;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_widths: [usize; 4],
    pub stage_depths: [usize; 4],
    pub dilation_plan: [usize; 4],
    pub use_se: bool,
    pub se_reduction: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_widths: [16, 32, 64, 128],
            stage_depths: [1, 1, 1, 1],
            dilation_plan: [1, 1, 2, 4],
            use_se: false,
            se_reduction: 16,
        }
    }
}

impl BackboneConfig {
    /// Width of the deep feature map F that attention consumes.
    pub fn c5_width(&self) -> usize {
        self.stage_widths[3]
    }

    /// Stage strides: the canonical plan halves resolution in stages 2–4,
    /// but a dilated stage keeps stride 1 (resolution retention).
    pub fn stage_strides(&self) -> [usize; 4] {
        let canonical = [1, 2, 2, 2];
        let mut s = [0; 4];
        for i in 0..4 {
            s[i] = if self.dilation_plan[i] > 1 { 1 } else { canonical[i] };
        }
        s
    }

    /// Overall output stride per stage (stem contributes 4).
    pub fn stage_output_strides(&self) -> [usize; 4] {
        let strides = self.stage_strides();
        let mut out = [0; 4];
        let mut acc = 4;
        for i in 0..4 {
            acc *= strides[i];
            out[i] = acc;
        }
        out
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.stage_output_strides()[3] != 8 {
            return Err(TensorError::Config(format!(
                "dilation plan {:?} does not yield a final stride of 8",
                self.dilation_plan
            )));
        }
        for (i, &w) in self.stage_widths.iter().enumerate() {
            if w == 0 || w % 4 != 0 {
                return Err(TensorError::Config(format!(
                    "stage {i} width {w} must be a positive multiple of 4"
                )));
            }
            if self.use_se && w % self.se_reduction != 0 {
                return Err(TensorError::Config(format!(
                    "stage {i} width {w} not divisible by se_reduction {}",
                    self.se_reduction
                )));
            }
        }
        if self.stage_depths.contains(&0) {
            return Err(TensorError::Config("stage depths must be positive".into()));
        }
        if self.dilation_plan.contains(&0) {
            return Err(TensorError::Config("dilations must be positive".into()));
        }
        Ok(())
    }
}

/// The four stage outputs; `c5` is F, the attention input.
pub struct FeaturePyramid {
    pub c2: NodeId,
    pub c3: NodeId,
    pub c4: NodeId,
    pub c5: NodeId,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [NodeId; 4] {
        [self.c2, self.c3, self.c4, self.c5]
    }
}

/// Squeeze-and-excitation: global pool, bottleneck, sigmoid gate.
pub struct SeBlock<T: Scalar> {
    squeeze: Conv2d<T>,
    excite: Conv2d<T>,
}

impl<T: Scalar> SeBlock<T> {
    pub fn new(name: &str, c: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        if reduction == 0 || !c.is_multiple_of(reduction) {
            return Err(TensorError::Config(format!(
                "se reduction {reduction} does not divide {c} channels"
            )));
        }
        let mid = c / reduction;
        Ok(SeBlock {
            squeeze: Conv2d::new(format!("{name}.squeeze"), c, mid, 1, 1, 0, 1, true, rng),
            excite: Conv2d::new(format!("{name}.excite"), mid, c, 1, 1, 0, 1, true, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId, TensorError> {
        let pooled = g.mean_hw(x)?;
        let h = self.squeeze.forward(g, pooled)?;
        let h = g.relu(h)?;
        let h = self.excite.forward(g, h)?;
        let gate = g.sigmoid(h)?;
        g.scale_channels(x, gate)
    }
}

impl<T: Scalar> Module<T> for SeBlock<T> {
    fn for_each(&mut self, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.squeeze.for_each(f);
        self.excite.for_each(f);
    }
}

/// Two-conv residual block with projection shortcut on width/stride change.
pub struct BasicBlock<T: Scalar> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    se: Option<SeBlock<T>>,
}

impl<T: Scalar> BasicBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        dilation: usize,
        se: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        let conv1 = Conv2d::new(
            format!("{name}.conv1"),
            c_in,
            c_out,
            3,
            stride,
            dilation,
            dilation,
            false,
            rng,
        );
        let conv2 = Conv2d::new(
            format!("{name}.conv2"),
            c_out,
            c_out,
            3,
            1,
            dilation,
            dilation,
            false,
            rng,
        );
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(format!("{name}.down"), c_in, c_out, 1, stride, 0, 1, false, rng),
                BatchNorm2d::new(format!("{name}.down_bn"), c_out),
            ))
        } else {
            None
        };
        let se = se
            .map(|r| SeBlock::new(&format!("{name}.se"), c_out, r, rng))
            .transpose()?;
        Ok(BasicBlock {
            conv1,
            bn1: BatchNorm2d::new(format!("{name}.bn1"), c_out),
            conv2,
            bn2: BatchNorm2d::new(format!("{name}.bn2"), c_out),
            shortcut,
            se,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, phase: Phase) -> Result<NodeId, TensorError> {
        let h = self.conv1.forward(g, x)?;
        let h = self.bn1.forward(g, h, phase)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, h)?;
        let mut branch = self.bn2.forward(g, h, phase)?;
        if let Some(se) = &self.se {
            branch = se.forward(g, branch)?;
        }
        let identity = match &self.shortcut {
            None => x,
            Some((conv, bn)) => {
                let s = conv.forward(g, x)?;
                bn.forward(g, s, phase)?
            }
        };
        let sum = g.add(branch, identity)?;
        g.relu(sum)
    }

    /// The last normalization before the residual add; zeroing its gamma
    /// silences the branch entirely.
    pub fn final_bn(&mut self) -> &mut BatchNorm2d<T> {
        &mut self.bn2
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn for_each(&mut self, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv1.for_each(f);
        self.bn1.for_each(f);
        self.conv2.for_each(f);
        self.bn2.for_each(f);
        if let Some((conv, bn)) = self.shortcut.as_mut() {
            conv.for_each(f);
            bn.for_each(f);
        }
        if let Some(se) = self.se.as_mut() {
            se.for_each(f);
        }
    }
}

pub struct Backbone<T: Scalar> {
    pub config: BackboneConfig,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stages: Vec<Vec<BasicBlock<T>>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(name: &str, config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        config.validate()?;
        let stem_conv = Conv2d::new(format!("{name}.stem"), 3, config.stage_widths[0], 7, 2, 3, 1, false, rng);
        let stem_bn = BatchNorm2d::new(format!("{name}.stem_bn"), config.stage_widths[0]);
        let strides = config.stage_strides();
        let mut stages = Vec::with_capacity(4);
        let mut c_in = config.stage_widths[0];
        for (s, &stage_stride) in strides.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.stage_depths[s]);
            for b in 0..config.stage_depths[s] {
                let stride = if b == 0 { stage_stride } else { 1 };
                let block = BasicBlock::new(
                    &format!("{name}.s{}.b{b}", s + 1),
                    c_in,
                    config.stage_widths[s],
                    stride,
                    config.dilation_plan[s],
                    config.use_se.then_some(config.se_reduction),
                    rng,
                )?;
                blocks.push(block);
                c_in = config.stage_widths[s];
            }
            stages.push(blocks);
        }
        Ok(Backbone {
            config,
            stem_conv,
            stem_bn,
            stages,
        })
    }

    pub fn encode(&self, g: &mut Graph<T>, image: NodeId, phase: Phase) -> Result<FeaturePyramid, TensorError> {
        let s = g.value(image).shape();
        if s.c != 3 {
            return Err(TensorError::Shape {
                op: "encode",
                detail: format!("expected RGB input, got {s}"),
            });
        }
        if !s.h.is_multiple_of(32) || !s.w.is_multiple_of(32) {
            return Err(TensorError::Config(format!(
                "input extents {}x{} must be divisible by 32",
                s.h, s.w
            )));
        }
        let h = self.stem_conv.forward(g, image)?;
        let h = self.stem_bn.forward(g, h, phase)?;
        let h = g.relu(h)?;
        // Parameter-free pooling keeps the stem fully checkable by finite
        // differences; the spec fixes only the stride.
        let mut x = g.avg_pool2d(h, 2, 2)?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(g, x, phase)?;
            }
            levels.push(x);
        }
        Ok(FeaturePyramid {
            c2: levels[0],
            c3: levels[1],
            c4: levels[2],
            c5: levels[3],
        })
    }

    /// Zero the final BN gamma of every residual block (silences branches).
    pub fn zero_residual_branches(&mut self) {
        for stage in &mut self.stages {
            for block in stage {
                let bn = block.final_bn();
                for v in bn.gamma.value.data_mut() {
                    *v = T::zero();
                }
            }
        }
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn for_each(&mut self, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.stem_conv.for_each(f);
        self.stem_bn.for_each(f);
        for stage in &mut self.stages {
            for block in stage {
                block.for_each(f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::trainable_count;
    use crate::rng;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn default_config_strides() {
        let c = BackboneConfig::default();
        assert_eq!(c.stage_strides(), [1, 2, 1, 1]);
        assert_eq!(c.stage_output_strides(), [4, 8, 8, 8]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_dilation_plan() {
        let c = BackboneConfig {
            dilation_plan: [1, 1, 1, 1],
            ..BackboneConfig::default()
        };
        // All-stride plan ends at stride 16, not 8.
        assert!(c.validate().is_err());
    }

    #[test]
    fn pyramid_shapes_for_64_input() {
        let mut r = rng::stream(20, &[]);
        let bb = Backbone::<f32>::new("bb", BackboneConfig::default(), &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 3, 64, 64)));
        let pyr = bb.encode(&mut g, x, Phase::eval()).unwrap();
        assert_eq!(g.value(pyr.c2).shape(), Shape::new(1, 16, 16, 16));
        assert_eq!(g.value(pyr.c3).shape(), Shape::new(1, 32, 8, 8));
        assert_eq!(g.value(pyr.c4).shape(), Shape::new(1, 64, 8, 8));
        assert_eq!(g.value(pyr.c5).shape(), Shape::new(1, 128, 8, 8));
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut r = rng::stream(21, &[]);
        let bb = Backbone::<f32>::new("bb", BackboneConfig::default(), &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 3, 48, 64)));
        assert!(bb.encode(&mut g, x, Phase::eval()).is_err());
    }

    #[test]
    fn zero_image_with_zeroed_branches_stays_zero() {
        let mut r = rng::stream(22, &[]);
        let mut bb = Backbone::<f32>::new("bb", BackboneConfig::default(), &mut r).unwrap();
        bb.zero_residual_branches();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 3, 64, 64)));
        let pyr = bb.encode(&mut g, x, Phase::eval()).unwrap();
        for level in pyr.levels() {
            assert!(g.value(level).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let mut r = rng::stream(23, &[]);
        let mut bb = Backbone::<f32>::new("bb", BackboneConfig::default(), &mut r).unwrap();
        // Hand count for defaults, depths [1,1,1,1], no SE:
        // stem 7x7x3x16 + its BN; per stage (cin->cout): conv1 9*cin*cout,
        // conv2 9*cout^2, BN gamma+beta 2*cout each. Stage 1 keeps width
        // and stride, so only stages 2-4 carry a projection (+ its BN).
        let dims = [(16usize, 16usize), (16, 32), (32, 64), (64, 128)];
        let mut want = 7 * 7 * 3 * 16 + 2 * 16;
        for (cin, cout) in dims {
            want += 9 * cin * cout + 9 * cout * cout + 2 * 2 * cout;
            if cin != cout {
                want += cin * cout + 2 * cout;
            }
        }
        assert_eq!(trainable_count(&mut bb), want);
    }

    #[test]
    fn se_gate_in_unit_interval_and_constant_pool() {
        let mut r = rng::stream(24, &[]);
        let se = SeBlock::<f32>::new("se", 8, 4, &mut r).unwrap();
        let mut g = Graph::new();
        // Constant per channel: channel c holds value c+1.
        let mut t = Tensor::zeros(Shape::new(1, 8, 4, 4));
        for c in 0..8 {
            for y in 0..4 {
                for x in 0..4 {
                    t.set(0, c, y, x, (c + 1) as f32);
                }
            }
        }
        let x = g.leaf(t);
        let pooled = g.mean_hw(x).unwrap();
        for c in 0..8 {
            assert_eq!(g.value(pooled).data()[c], (c + 1) as f32);
        }
        let y = se.forward(&mut g, x).unwrap();
        // Gate in (0,1): |out| <= |in| elementwise with matching sign.
        for (o, i) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!(o.abs() < i.abs() && o.signum() == i.signum());
        }
    }

    #[test]
    fn se_saturated_gate_is_identity() {
        let mut r = rng::stream(25, &[]);
        let mut se = SeBlock::<f32>::new("se", 4, 2, &mut r).unwrap();
        // Large positive excite bias saturates the sigmoid to ~1.
        for v in se.excite.bias.as_mut().unwrap().value.data_mut() {
            *v = 40.0;
        }
        for v in se.excite.weight.value.data_mut() {
            *v = 0.0;
        }
        let mut g = Graph::new();
        let data: Vec<f32> = (0..4 * 9).map(|i| (i as f32 * 0.1).sin()).collect();
        let x = g.leaf(Tensor::from_vec(Shape::new(1, 4, 3, 3), data).unwrap());
        let y = se.forward(&mut g, x).unwrap();
        for (o, i) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((o - i).abs() <= 1e-3 * i.abs().max(1.0), "{o} vs {i}");
        }
    }

    #[test]
    fn se_rejects_indivisible_reduction() {
        let mut r = rng::stream(26, &[]);
        assert!(SeBlock::<f32>::new("se", 6, 4, &mut r).is_err());
    }

    #[test]
    fn dilated_stages_preserve_extent() {
        // c4/c5 run dilated at stride 1: same extents as their inputs.
        let mut r = rng::stream(27, &[]);
        let bb = Backbone::<f32>::new("bb", BackboneConfig::default(), &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 3, 96, 64)));
        let pyr = bb.encode(&mut g, x, Phase::eval()).unwrap();
        let s3 = g.value(pyr.c3).shape();
        let s4 = g.value(pyr.c4).shape();
        let s5 = g.value(pyr.c5).shape();
        assert_eq!((s3.h, s3.w), (12, 8));
        assert_eq!((s4.h, s4.w), (12, 8));
        assert_eq!((s5.h, s5.w), (12, 8));
    }

    #[test]
    fn receptive_field_grows_with_depth() {
        // Impulse response support on c5 strictly contains c3's.
        let mut r = rng::stream(28, &[]);
        let bb = Backbone::<f32>::new("bb", BackboneConfig::default(), &mut r).unwrap();
        // 256² input: both supports fit inside the grid, so neither clips.
        let support = |level: usize| -> usize {
            let mut g = Graph::new();
            let zero = g.leaf(Tensor::zeros(Shape::new(1, 3, 256, 256)));
            let base = bb.encode(&mut g, zero, Phase::eval()).unwrap();
            let mut img = Tensor::zeros(Shape::new(1, 3, 256, 256));
            img.set(0, 0, 128, 128, 1.0);
            img.set(0, 1, 128, 128, 1.0);
            img.set(0, 2, 128, 128, 1.0);
            let x = g.leaf(img);
            let pyr = bb.encode(&mut g, x, Phase::eval()).unwrap();
            let (a, b) = match level {
                3 => (base.c3, pyr.c3),
                _ => (base.c5, pyr.c5),
            };
            let (va, vb) = (g.value(a), g.value(b));
            let s = va.shape();
            let mut touched = vec![false; s.h * s.w];
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        if (va.at(0, c, y, x) - vb.at(0, c, y, x)).abs() > 1e-6 {
                            touched[y * s.w + x] = true;
                        }
                    }
                }
            }
            let ys: Vec<usize> = (0..s.h)
                .filter(|&y| (0..s.w).any(|x| touched[y * s.w + x]))
                .collect();
            match (ys.first(), ys.last()) {
                (Some(&a), Some(&b)) => b - a + 1,
                _ => 0,
            }
        };
        let s3 = support(3);
        let s5 = support(5);
        assert!(s5 > s3, "c5 support {s5} must exceed c3 support {s3}");
    }
}
