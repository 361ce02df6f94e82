//! Contextual pyramid attention: spatial self-attention, the weighted
//! multi-scale pyramid over it, channel-wise attention, and their sum.
//!
//! Channel plan: the input is projected once by a 1×1 convolution to
//! `D = C / compression` channels and that projection feeds both branches.
//! The pyramid residual `F + SA(Conv(F))` and the final branch sum both
//! need matching channel counts, and compressing before attention is what
//! makes the affinity products affordable; the projection output is exactly
//! the `F_{1/c}` the channel branch normalizes over.

use crate::error::TensorError;
use crate::graph::{Graph, NodeId, Param};
use crate::layers::{BatchNorm2d, Conv2d, Module, Phase, Slot};
use crate::tensor::{lit, Scalar, Shape, Tensor};
use rand_chacha::ChaCha8Rng;

/// Structural configuration of a CPA block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Pyramid downsampling factors, ascending; affinity at scale `s` has
    /// `(HW/s²)²` entries.
    pub scales: Vec<usize>,
    /// Channel compression factor `c`; both branches run at `D = C/c`.
    pub compression: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            scales: vec![1, 2, 4],
            compression: 4,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, c_in: usize) -> Result<(), TensorError> {
        if self.scales.is_empty() {
            return Err(TensorError::Config("attention needs at least one scale".into()));
        }
        let mut prev = 0;
        for &s in &self.scales {
            if s == 0 {
                return Err(TensorError::Config("attention scale 0 is meaningless".into()));
            }
            if s <= prev {
                return Err(TensorError::Config(format!(
                    "attention scales must be strictly ascending, got {:?}",
                    self.scales
                )));
            }
            prev = s;
        }
        if self.compression == 0 || !c_in.is_multiple_of(self.compression) {
            return Err(TensorError::Config(format!(
                "compression {} does not divide {c_in} input channels",
                self.compression
            )));
        }
        Ok(())
    }
}

/// Snapshot of every learned attention scalar, for init checks and logging.
#[derive(Clone, Debug)]
pub struct AttentionParamsView {
    pub scales: Vec<usize>,
    pub compression: usize,
    pub gamma_s: Vec<f64>,
    pub w: Vec<f64>,
    pub gamma_c: f64,
}

/// Spatial self-attention with residual:
/// `f + γ · softmax_rows(K Qᵀ) V`, K/Q/V from 1×1 convolutions.
pub struct SelfAttention<T: Scalar> {
    conv_k: Conv2d<T>,
    conv_q: Conv2d<T>,
    conv_v: Conv2d<T>,
    pub gamma: Param<T>,
    name: String,
}

/// A forward result carrying the node to keep computing with plus the
/// affinity matrix of the first batch item for inspection and export.
pub struct Attended {
    pub out: NodeId,
    pub affinity: NodeId,
}

impl<T: Scalar> SelfAttention<T> {
    pub fn new(name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        // K/Q/V generators feed a softmax; no normalization on them.
        let conv_k = Conv2d::new(format!("{name}.k"), d, d, 1, 1, 0, 1, true, rng);
        let conv_q = Conv2d::new(format!("{name}.q"), d, d, 1, 1, 0, 1, true, rng);
        let conv_v = Conv2d::new(format!("{name}.v"), d, d, 1, 1, 0, 1, true, rng);
        SelfAttention {
            conv_k,
            conv_q,
            conv_v,
            gamma: Param::new(Tensor::full(Shape::scalar(), lit::<T>(0.05))),
            name: name.to_string(),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, f: NodeId) -> Result<Attended, TensorError> {
        let fs = g.value(f).shape();
        let d = fs.c;
        let n = fs.h * fs.w;
        let k = self.conv_k.forward(g, f)?;
        let q = self.conv_q.forward(g, f)?;
        let v = self.conv_v.forward(g, f)?;
        let gamma = g.param(&self.gamma);
        let mut outs = Vec::with_capacity(fs.b);
        let mut first_affinity = None;
        for b in 0..fs.b {
            let f_b = g.slice_batch(f, b)?;
            let k_dn = {
                let kb = g.slice_batch(k, b)?;
                g.reshape(kb, Shape::mat(d, n))?
            };
            let q_dn = {
                let qb = g.slice_batch(q, b)?;
                g.reshape(qb, Shape::mat(d, n))?
            };
            let v_dn = {
                let vb = g.slice_batch(v, b)?;
                g.reshape(vb, Shape::mat(d, n))?
            };
            // Rows of K Qᵀ index the query pixels; softmax normalizes each
            // row's weights over all key pixels. No 1/√d temperature — the
            // affinity is the raw dot-product softmax.
            let k_nd = g.transpose_mat(k_dn)?;
            let logits = g.matmul(k_nd, q_dn)?;
            let affinity = g.softmax_rows(logits)?;
            if b == 0 {
                first_affinity = Some(affinity);
            }
            let v_nd = g.transpose_mat(v_dn)?;
            let att = g.matmul(affinity, v_nd)?;
            let att_dn = g.transpose_mat(att)?;
            let att_img = g.reshape(att_dn, Shape::new(1, d, fs.h, fs.w))?;
            let scaled = g.mul_scalar(att_img, gamma)?;
            outs.push(g.add(f_b, scaled)?);
        }
        let out = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_batch(&outs)?
        };
        Ok(Attended {
            out,
            affinity: first_affinity.expect("at least one batch item"),
        })
    }
}

impl<T: Scalar> Module<T> for SelfAttention<T> {
    fn for_each(&mut self, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv_k.for_each(f);
        self.conv_q.for_each(f);
        self.conv_v.for_each(f);
        f(&format!("{}.gamma", self.name), Slot::Trainable(&mut self.gamma));
    }
}

/// One pyramid pathway: pool by `scale`, Conv/ReLU/BN, self-attention with
/// residual, Conv/ReLU/BN, upsample back.
pub struct Pathway<T: Scalar> {
    pub scale: usize,
    pre_conv: Conv2d<T>,
    pre_bn: BatchNorm2d<T>,
    pub sa: SelfAttention<T>,
    post_conv: Conv2d<T>,
    post_bn: BatchNorm2d<T>,
    /// w_s of the pathway sum.
    pub weight: Param<T>,
    name: String,
}

impl<T: Scalar> Pathway<T> {
    pub fn new(name: &str, d: usize, scale: usize, rng: &mut ChaCha8Rng) -> Self {
        Pathway {
            scale,
            pre_conv: Conv2d::new(format!("{name}.pre"), d, d, 3, 1, 1, 1, false, rng),
            pre_bn: BatchNorm2d::new(format!("{name}.pre_bn"), d),
            sa: SelfAttention::new(&format!("{name}.sa"), d, rng),
            post_conv: Conv2d::new(format!("{name}.post"), d, d, 3, 1, 1, 1, false, rng),
            post_bn: BatchNorm2d::new(format!("{name}.post_bn"), d),
            weight: Param::new(Tensor::full(Shape::scalar(), T::one())),
            name: name.to_string(),
        }
    }

    /// Unweighted pathway output at full resolution plus its affinity.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        fd: NodeId,
        phase: Phase,
    ) -> Result<Attended, TensorError> {
        let fs = g.value(fd).shape();
        if !fs.h.is_multiple_of(self.scale) || !fs.w.is_multiple_of(self.scale) {
            return Err(TensorError::Config(format!(
                "pathway {}: input {}x{} not divisible by scale {}",
                self.name, fs.h, fs.w, self.scale
            )));
        }
        let pooled = if self.scale == 1 {
            fd
        } else {
            g.avg_pool2d(fd, self.scale, self.scale)?
        };
        let h = self.pre_conv.forward(g, pooled)?;
        let h = g.relu(h)?;
        let h = self.pre_bn.forward(g, h, phase)?;
        let attended = self.sa.forward(g, h)?;
        let h = self.post_conv.forward(g, attended.out)?;
        let h = g.relu(h)?;
        let h = self.post_bn.forward(g, h, phase)?;
        let out = if self.scale == 1 {
            h
        } else {
            g.bilinear_resize(h, fs.h, fs.w)?
        };
        Ok(Attended {
            out,
            affinity: attended.affinity,
        })
    }
}

impl<T: Scalar> Module<T> for Pathway<T> {
    fn for_each(&mut self, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.pre_conv.for_each(f);
        self.pre_bn.for_each(f);
        self.sa.for_each(f);
        self.post_conv.for_each(f);
        self.post_bn.for_each(f);
        f(&format!("{}.w", self.name), Slot::Trainable(&mut self.weight));
    }
}

/// Affinity matrix of one pathway's first batch item, with the pooled
/// feature extents its rows unfold to.
pub struct SpatialTrace {
    pub scale: usize,
    pub affinity: NodeId,
    pub h: usize,
    pub w: usize,
}

/// Everything `export_affinity` and the shape tests need from one forward.
pub struct CpaTrace {
    pub spatial: Vec<SpatialTrace>,
    pub channel: NodeId,
}

/// The full CPA block: shared projection, contextual pyramid, channel
/// attention, branch sum.
pub struct CpaBlock<T: Scalar> {
    pub config: AttentionConfig,
    proj: Conv2d<T>,
    pub paths: Vec<Pathway<T>>,
    pub gamma_c: Param<T>,
    name: String,
}

pub struct CpaOut {
    pub out: NodeId,
    pub trace: CpaTrace,
}

impl<T: Scalar> CpaBlock<T> {
    pub fn new(
        name: &str,
        c_in: usize,
        config: AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        config.validate(c_in)?;
        let d = c_in / config.compression;
        let proj = Conv2d::new(format!("{name}.proj"), c_in, d, 1, 1, 0, 1, true, rng);
        let paths = config
            .scales
            .iter()
            .map(|&s| Pathway::new(&format!("{name}.path{s}"), d, s, rng))
            .collect();
        Ok(CpaBlock {
            config,
            proj,
            paths,
            gamma_c: Param::new(Tensor::full(Shape::scalar(), lit::<T>(0.05))),
            name: name.to_string(),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.proj.out_channels()
    }

    fn check_extents(&self, s: Shape) -> Result<(), TensorError> {
        let max_scale = *self.config.scales.last().expect("validated non-empty");
        if !s.h.is_multiple_of(max_scale) || !s.w.is_multiple_of(max_scale) {
            return Err(TensorError::Config(format!(
                "{}: spatial extents {}x{} must be divisible by the maximum scale {max_scale}",
                self.name, s.h, s.w
            )));
        }
        Ok(())
    }

    /// Shared projection `F -> F_{1/c}`.
    pub fn project(&self, g: &mut Graph<T>, f: NodeId) -> Result<NodeId, TensorError> {
        self.check_extents(g.value(f).shape())?;
        self.proj.forward(g, f)
    }

    /// Eq. 2 over an already-projected input: `Σ_s w_s · pathway_s(fd)`,
    /// reduced in ascending scale order.
    pub fn contextual_from_projection(
        &self,
        g: &mut Graph<T>,
        fd: NodeId,
        phase: Phase,
    ) -> Result<(NodeId, Vec<SpatialTrace>), TensorError> {
        let fs = g.value(fd).shape();
        let mut acc: Option<NodeId> = None;
        let mut traces = Vec::with_capacity(self.paths.len());
        for path in &self.paths {
            let att = path.forward(g, fd, phase)?;
            let w = g.param(&path.weight);
            let weighted = g.mul_scalar(att.out, w)?;
            acc = Some(match acc {
                None => weighted,
                Some(a) => g.add(a, weighted)?,
            });
            traces.push(SpatialTrace {
                scale: path.scale,
                affinity: att.affinity,
                h: fs.h / path.scale,
                w: fs.w / path.scale,
            });
        }
        Ok((acc.expect("at least one pathway"), traces))
    }

    /// Eq. 3 over an already-projected input:
    /// `F_{1/c} + γ_c · softmax_rows(F̃ F̃ᵀ) F̃` with `F̃` the D×N reshape.
    pub fn channel_from_projection(
        &self,
        g: &mut Graph<T>,
        fd: NodeId,
    ) -> Result<Attended, TensorError> {
        let fs = g.value(fd).shape();
        let (d, n) = (fs.c, fs.h * fs.w);
        let gamma = g.param(&self.gamma_c);
        let mut outs = Vec::with_capacity(fs.b);
        let mut first_affinity = None;
        for b in 0..fs.b {
            let fd_b = g.slice_batch(fd, b)?;
            let f_dn = g.reshape(fd_b, Shape::mat(d, n))?;
            let f_nd = g.transpose_mat(f_dn)?;
            let logits = g.matmul(f_dn, f_nd)?;
            let affinity = g.softmax_rows(logits)?;
            if b == 0 {
                first_affinity = Some(affinity);
            }
            let att = g.matmul(affinity, f_dn)?;
            let att_img = g.reshape(att, Shape::new(1, d, fs.h, fs.w))?;
            let scaled = g.mul_scalar(att_img, gamma)?;
            outs.push(g.add(fd_b, scaled)?);
        }
        let out = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_batch(&outs)?
        };
        Ok(Attended {
            out,
            affinity: first_affinity.expect("at least one batch item"),
        })
    }

    /// Standalone contextual branch from the raw feature map.
    pub fn contextual(
        &self,
        g: &mut Graph<T>,
        f: NodeId,
        phase: Phase,
    ) -> Result<(NodeId, Vec<SpatialTrace>), TensorError> {
        let fd = self.project(g, f)?;
        self.contextual_from_projection(g, fd, phase)
    }

    /// Standalone channel branch from the raw feature map.
    pub fn channel(&self, g: &mut Graph<T>, f: NodeId) -> Result<Attended, TensorError> {
        let fd = self.project(g, f)?;
        self.channel_from_projection(g, fd)
    }

    /// The CPA block: contextual + channel, sharing one projection.
    pub fn forward(&self, g: &mut Graph<T>, f: NodeId, phase: Phase) -> Result<CpaOut, TensorError> {
        let fd = self.project(g, f)?;
        let (ctx, spatial) = self.contextual_from_projection(g, fd, phase)?;
        let chan = self.channel_from_projection(g, fd)?;
        let out = g.add(ctx, chan.out)?;
        Ok(CpaOut {
            out,
            trace: CpaTrace {
                spatial,
                channel: chan.affinity,
            },
        })
    }

    /// Pathway affinity extents for a given input spatial size, without
    /// running a forward pass.
    pub fn affinity_rows(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.config
            .scales
            .iter()
            .map(|&s| (s, (h / s) * (w / s)))
            .collect()
    }

    /// Current values of every learned attention scalar.
    pub fn params_view(&self) -> AttentionParamsView {
        AttentionParamsView {
            scales: self.config.scales.clone(),
            compression: self.config.compression,
            gamma_s: self
                .paths
                .iter()
                .map(|p| p.sa.gamma.value.data()[0].to_f64().unwrap_or(f64::NAN))
                .collect(),
            w: self
                .paths
                .iter()
                .map(|p| p.weight.value.data()[0].to_f64().unwrap_or(f64::NAN))
                .collect(),
            gamma_c: self.gamma_c.value.data()[0].to_f64().unwrap_or(f64::NAN),
        }
    }
}

impl<T: Scalar> Module<T> for CpaBlock<T> {
    fn for_each(&mut self, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.proj.for_each(f);
        for p in &mut self.paths {
            p.for_each(f);
        }
        f(&format!("{}.gamma_c", self.name), Slot::Trainable(&mut self.gamma_c));
    }
}

/// One row of an affinity matrix as an 8-bit grayscale image of the pooled
/// feature grid: min-max normalized so the strongest response is 255.
/// A constant row (every key equally weighted) maps to all zeros.
pub fn affinity_row_to_gray<T: Scalar>(
    g: &Graph<T>,
    affinity: NodeId,
    query: usize,
    h: usize,
    w: usize,
) -> Result<Vec<u8>, TensorError> {
    let a = g.value(affinity);
    let s = a.shape();
    if s.b != 1 || s.c != 1 || s.h != s.w {
        return Err(TensorError::Shape {
            op: "affinity_row",
            detail: format!("expected square affinity matrix, got {s}"),
        });
    }
    if h * w != s.w {
        return Err(TensorError::Shape {
            op: "affinity_row",
            detail: format!("feature grid {h}x{w} does not unfold {} columns", s.w),
        });
    }
    if query >= s.h {
        return Err(TensorError::Data(format!(
            "query index {query} out of range for {} rows",
            s.h
        )));
    }
    let row = &a.data()[query * s.w..(query + 1) * s.w];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in row {
        let v = v.to_f64().unwrap_or(f64::NAN);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let pixels = row
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                0u8
            } else {
                let v = v.to_f64().unwrap_or(0.0);
                (((v - lo) / span) * 255.0).round() as u8
            }
        })
        .collect();
    Ok(pixels)
}
