//! Reverse-mode automatic differentiation over 4-D tensors.
//!
//! A `Graph` is a Wengert tape: forward calls append nodes (values plus the
//! record needed for their vector-Jacobian products), `backward` walks the
//! nodes in exact reverse execution order and accumulates gradients
//! additively, so a tensor consumed by several ops receives the sum of all
//! downstream contributions. Every op validates shapes up front and checks
//! its output for NaN/Inf; non-finite values are an error, never a state.
//!
//! Learned parameters register through [`Graph::param`]; registering the same
//! `Param` twice in one graph returns the same node, which is what makes
//! weight sharing accumulate correctly.

use crate::error::TensorError;
use crate::kernels::{self, ConvGeom};
use crate::tensor::{lit, Scalar, Shape, Tensor};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

pub type NodeId = usize;

/// Process-unique identity of a learned parameter tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(u64);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A learned parameter: a tensor plus a stable identity used to route
/// gradients back out of a graph.
#[derive(Debug)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    id: ParamId,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param {
            value,
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }
}

/// Integer class labels for a batch of rasters.
#[derive(Clone, Debug)]
pub struct Labels {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Labels {
    pub fn new(b: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self, TensorError> {
        if data.len() != b * h * w {
            return Err(TensorError::Data(format!(
                "label raster has {} values, expected {}x{}x{}",
                data.len(),
                b,
                h,
                w
            )));
        }
        Ok(Labels { b, h, w, data })
    }
}

enum Op<T> {
    Leaf,
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// Multiply by a compile-time constant.
    Scale {
        x: NodeId,
        c: T,
    },
    /// Multiply by a learned `[1,1,1,1]` tensor.
    MulScalar {
        x: NodeId,
        s: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    TransposeMat {
        x: NodeId,
    },
    SoftmaxRows {
        x: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    AvgPool {
        x: NodeId,
        k: usize,
        stride: usize,
    },
    Bilinear {
        x: NodeId,
    },
    CropHw {
        x: NodeId,
        y0: usize,
        x0: usize,
    },
    Reshape {
        x: NodeId,
    },
    SliceBatch {
        x: NodeId,
        index: usize,
    },
    ConcatBatch {
        xs: Vec<NodeId>,
    },
    MeanHw {
        x: NodeId,
    },
    ScaleChannels {
        x: NodeId,
        gate: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Labels,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// The tape. One per forward/backward pass; confined to one thread.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Gradient accumulated on a node, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        let n = &self.nodes[id];
        n.grad
            .as_ref()
            .map(|g| Tensor::from_vec(n.value.shape(), g.clone()).expect("grad shape matches"))
    }

    pub fn param_grad(&self, p: &Param<T>) -> Option<Tensor<T>> {
        self.params.get(&p.id()).and_then(|&id| self.grad(id))
    }

    pub fn param_node(&self, p: &Param<T>) -> Option<NodeId> {
        self.params.get(&p.id()).copied()
    }

    /// Constant input: no gradient will be tracked through it.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, false, Op::Leaf)
    }

    /// Input tensor, optionally participating in differentiation.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push_unchecked(value, requires_grad, Op::Leaf)
    }

    /// Register a learned parameter. Idempotent per graph: the same `Param`
    /// always maps to one node, so reuse accumulates gradients.
    pub fn param(&mut self, p: &Param<T>) -> NodeId {
        if let Some(&id) = self.params.get(&p.id()) {
            return id;
        }
        let id = self.push_unchecked(p.value.clone(), true, Op::Leaf);
        self.params.insert(p.id(), id);
        id
    }

    fn push_unchecked(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        id
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        parents: &[NodeId],
        op: Op<T>,
    ) -> Result<NodeId, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs = parents.iter().any(|&p| self.nodes[p].needs_grad);
        Ok(self.push_unchecked(value, needs, op))
    }

    // ── elementwise family ──────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op: "add",
                detail: format!("{sa} vs {sb}"),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(sa, data)?;
        self.push("add", out, &[a, b], Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op: "mul",
                detail: format!("{sa} vs {sb}"),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(sa, data)?;
        self.push("mul", out, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId, TensorError> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, &[x], Op::Scale { x, c })
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        let sv = self.value(s).item().map_err(|_| TensorError::Shape {
            op: "mul_scalar",
            detail: format!("scalar operand has shape {}", self.value(s).shape()),
        })?;
        let out = self.value(x).map(|v| v * sv);
        self.push("mul_scalar", out, &[x, s], Op::MulScalar { x, s })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, &[x], Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let one = T::one();
        let out = self.value(x).map(|v| one / (one + (-v).exp()));
        self.push("sigmoid", out, &[x], Op::Sigmoid { x })
    }

    // ── matrix ops (tensors shaped [1, 1, rows, cols]) ──────────────

    fn mat_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.value(id).shape();
        if s.b != 1 || s.c != 1 {
            return Err(TensorError::Shape {
                op,
                detail: format!("expected matrix [1,1,r,c], got {s}"),
            });
        }
        Ok((s.h, s.w))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.mat_dims(a, "matmul")?;
        let (kb, p) = self.mat_dims(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::Shape {
                op: "matmul",
                detail: format!(
                    "inner dimensions disagree: {} vs {}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, ka, p);
        let out = Tensor::from_vec(Shape::mat(m, p), data)?;
        self.push("matmul", out, &[a, b], Op::Matmul { a, b })
    }

    pub fn transpose_mat(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat_dims(x, "transpose")?;
        let data = kernels::transpose(self.value(x).data(), m, n);
        let out = Tensor::from_vec(Shape::mat(n, m), data)?;
        self.push("transpose", out, &[x], Op::TransposeMat { x })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat_dims(x, "softmax_rows")?;
        let data = kernels::softmax_rows(self.value(x).data(), m, n);
        let out = Tensor::from_vec(Shape::mat(m, n), data)?;
        self.push("softmax_rows", out, &[x], Op::SoftmaxRows { x })
    }

    // ── convolution / normalization / resampling ────────────────────

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if ws.c != xs.c {
            return Err(TensorError::Shape {
                op: "conv2d",
                detail: format!("input {xs} vs weight {ws}: channel counts disagree"),
            });
        }
        if ws.h != ws.w {
            return Err(TensorError::Config(format!(
                "conv2d kernel must be square, got {ws}"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(TensorError::Config(
                "conv2d stride and dilation must be positive".into(),
            ));
        }
        let k = ws.h;
        let out_h = kernels::conv_out_extent(xs.h, k, stride, pad, dilation);
        let out_w = kernels::conv_out_extent(xs.w, k, stride, pad, dilation);
        let (out_h, out_w) = match (out_h, out_w) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(TensorError::Config(format!(
                    "conv2d produces empty output: input {xs}, kernel {k}, stride {stride}, pad {pad}, dilation {dilation}"
                )))
            }
        };
        if let Some(bid) = bias {
            let bs = self.value(bid).shape();
            if bs != Shape::new(1, ws.b, 1, 1) {
                return Err(TensorError::Shape {
                    op: "conv2d",
                    detail: format!("bias {bs} does not match {} output channels", ws.b),
                });
            }
        }
        let geom = ConvGeom {
            c_in: xs.c,
            h: xs.h,
            w: xs.w,
            k,
            stride,
            pad,
            dilation,
            out_h,
            out_w,
        };
        let c_out = ws.b;
        let out_shape = Shape::new(xs.b, c_out, out_h, out_w);
        let mut out = vec![T::zero(); out_shape.numel()];
        let mut col = vec![T::zero(); geom.patch_len() * geom.out_len()];
        let plane_in = xs.c * xs.h * xs.w;
        let plane_out = c_out * out_h * out_w;
        let w_data = self.value(w).data();
        let x_data = self.value(x).data();
        for b in 0..xs.b {
            kernels::im2col(&x_data[b * plane_in..(b + 1) * plane_in], &geom, &mut col);
            kernels::matmul_acc(
                w_data,
                &col,
                &mut out[b * plane_out..(b + 1) * plane_out],
                c_out,
                geom.patch_len(),
                geom.out_len(),
            );
        }
        if let Some(bid) = bias {
            let b_data = self.value(bid).data().to_vec();
            for bi in 0..xs.b {
                for (co, &bv) in b_data.iter().enumerate() {
                    let base = bi * plane_out + co * out_h * out_w;
                    for v in &mut out[base..base + out_h * out_w] {
                        *v += bv;
                    }
                }
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        let mut parents = vec![x, w];
        if let Some(bid) = bias {
            parents.push(bid);
        }
        self.push("conv2d", out, &parents, Op::Conv2d { x, w, bias, geom })
    }

    /// Normalize with the supplied per-channel statistics. The caller decides
    /// whether they are batch statistics (train mode: backward differentiates
    /// through them) or running statistics (eval mode: treated as constants).
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Result<NodeId, TensorError> {
        let xs = self.value(x).shape();
        let c = xs.c;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(id).shape();
            if s != Shape::new(1, c, 1, 1) {
                return Err(TensorError::Shape {
                    op: "batchnorm",
                    detail: format!("{name} {s} does not match {c} channels"),
                });
            }
        }
        if mean.len() != c || inv_std.len() != c {
            return Err(TensorError::Shape {
                op: "batchnorm",
                detail: format!("statistics length {} vs {c} channels", mean.len()),
            });
        }
        let g = self.value(gamma).data().to_vec();
        let bta = self.value(beta).data().to_vec();
        let x_data = self.value(x).data();
        let plane = xs.h * xs.w;
        let mut out = vec![T::zero(); x_data.len()];
        for b in 0..xs.b {
            for ci in 0..c {
                let base = (b * c + ci) * plane;
                let (m, is, gc, bc) = (mean[ci], inv_std[ci], g[ci], bta[ci]);
                for i in 0..plane {
                    out[base + i] = (x_data[base + i] - m) * is * gc + bc;
                }
            }
        }
        let out = Tensor::from_vec(xs, out)?;
        self.push(
            "batchnorm",
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId, TensorError> {
        let xs = self.value(x).shape();
        if k == 0 || stride == 0 {
            return Err(TensorError::Config("avg_pool2d k and stride must be positive".into()));
        }
        if k > xs.h || k > xs.w {
            return Err(TensorError::Config(format!(
                "avg_pool2d window {k} exceeds input {xs} (no padding)"
            )));
        }
        let out_h = (xs.h - k) / stride + 1;
        let out_w = (xs.w - k) / stride + 1;
        let out_shape = Shape::new(xs.b, xs.c, out_h, out_w);
        let inv = T::one() / lit::<T>((k * k) as f64);
        let x_data = self.value(x).data();
        let mut out = vec![T::zero(); out_shape.numel()];
        for b in 0..xs.b {
            for c in 0..xs.c {
                let src_base = (b * xs.c + c) * xs.h * xs.w;
                let dst_base = (b * xs.c + c) * out_h * out_w;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut s = T::zero();
                        for ky in 0..k {
                            let row = src_base + (oy * stride + ky) * xs.w + ox * stride;
                            for kx in 0..k {
                                s += x_data[row + kx];
                            }
                        }
                        out[dst_base + oy * out_w + ox] = s * inv;
                    }
                }
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        self.push("avg_pool2d", out, &[x], Op::AvgPool { x, k, stride })
    }

    pub fn bilinear_resize(
        &mut self,
        x: NodeId,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId, TensorError> {
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Config(
                "bilinear_resize target extents must be positive".into(),
            ));
        }
        let xs = self.value(x).shape();
        let out_shape = Shape::new(xs.b, xs.c, out_h, out_w);
        let ty = tap_table::<T>(xs.h, out_h);
        let tx = tap_table::<T>(xs.w, out_w);
        let x_data = self.value(x).data();
        let mut out = vec![T::zero(); out_shape.numel()];
        for b in 0..xs.b {
            for c in 0..xs.c {
                let src = &x_data[(b * xs.c + c) * xs.h * xs.w..];
                let dst_base = (b * xs.c + c) * out_h * out_w;
                for oy in 0..out_h {
                    let (y0, y1, wy) = ty[oy];
                    for ox in 0..out_w {
                        let (x0, x1, wx) = tx[ox];
                        let one = T::one();
                        let v = (one - wy) * ((one - wx) * src[y0 * xs.w + x0] + wx * src[y0 * xs.w + x1])
                            + wy * ((one - wx) * src[y1 * xs.w + x0] + wx * src[y1 * xs.w + x1]);
                        out[dst_base + oy * out_w + ox] = v;
                    }
                }
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        self.push("bilinear_resize", out, &[x], Op::Bilinear { x })
    }

    /// Spatial window [y0, y0+h) x [x0, x0+w) of every plane.
    pub fn crop_hw(
        &mut self,
        x: NodeId,
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.value(x).shape();
        if h == 0 || w == 0 || y0 + h > xs.h || x0 + w > xs.w {
            return Err(TensorError::Shape {
                op: "crop_hw",
                detail: format!("window {w}x{h} at ({y0}, {x0}) does not fit {xs}"),
            });
        }
        let out_shape = Shape::new(xs.b, xs.c, h, w);
        let x_data = self.value(x).data();
        let mut out = vec![T::zero(); out_shape.numel()];
        for b in 0..xs.b {
            for c in 0..xs.c {
                let src_base = (b * xs.c + c) * xs.h * xs.w;
                let dst_base = (b * xs.c + c) * h * w;
                for y in 0..h {
                    let src_row = src_base + (y0 + y) * xs.w + x0;
                    let dst_row = dst_base + y * w;
                    out[dst_row..dst_row + w].copy_from_slice(&x_data[src_row..src_row + w]);
                }
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        self.push("crop_hw", out, &[x], Op::CropHw { x, y0, x0 })
    }

    // ── shape plumbing ──────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, shape: Shape) -> Result<NodeId, TensorError> {
        let out = self.value(x).reshaped(shape)?;
        self.push("reshape", out, &[x], Op::Reshape { x })
    }

    pub fn slice_batch(&mut self, x: NodeId, index: usize) -> Result<NodeId, TensorError> {
        let xs = self.value(x).shape();
        if index >= xs.b {
            return Err(TensorError::Shape {
                op: "slice_batch",
                detail: format!("index {index} out of range for {xs}"),
            });
        }
        let plane = xs.c * xs.h * xs.w;
        let data = self.value(x).data()[index * plane..(index + 1) * plane].to_vec();
        let out = Tensor::from_vec(Shape::new(1, xs.c, xs.h, xs.w), data)?;
        self.push("slice_batch", out, &[x], Op::SliceBatch { x, index })
    }

    pub fn concat_batch(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::Config("concat_batch of zero tensors".into()));
        }
        let first = self.value(xs[0]).shape();
        let mut data = Vec::with_capacity(first.numel() * xs.len());
        for &id in xs {
            let s = self.value(id).shape();
            if s != first {
                return Err(TensorError::Shape {
                    op: "concat_batch",
                    detail: format!("{s} vs {first}"),
                });
            }
            data.extend_from_slice(self.value(id).data());
        }
        let out = Tensor::from_vec(
            Shape::new(first.b * xs.len(), first.c, first.h, first.w),
            data,
        )?;
        self.push("concat_batch", out, xs, Op::ConcatBatch { xs: xs.to_vec() })
    }

    // ── reductions and gating ───────────────────────────────────────

    /// Spatial mean per (batch, channel): `[B,C,H,W] -> [B,C,1,1]`.
    pub fn mean_hw(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.value(x).shape();
        let plane = xs.h * xs.w;
        let inv = T::one() / lit::<T>(plane as f64);
        let x_data = self.value(x).data();
        let mut out = vec![T::zero(); xs.b * xs.c];
        for (i, o) in out.iter_mut().enumerate() {
            let s: T = x_data[i * plane..(i + 1) * plane].iter().copied().sum();
            *o = s * inv;
        }
        let out = Tensor::from_vec(Shape::new(xs.b, xs.c, 1, 1), out)?;
        self.push("mean_hw", out, &[x], Op::MeanHw { x })
    }

    /// Channelwise rescale: `x[b,c,:,:] * gate[b,c]`.
    pub fn scale_channels(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.value(x).shape();
        let gs = self.value(gate).shape();
        if gs != Shape::new(xs.b, xs.c, 1, 1) {
            return Err(TensorError::Shape {
                op: "scale_channels",
                detail: format!("gate {gs} does not match input {xs}"),
            });
        }
        let plane = xs.h * xs.w;
        let g = self.value(gate).data().to_vec();
        let x_data = self.value(x).data();
        let mut out = vec![T::zero(); x_data.len()];
        for (i, &gv) in g.iter().enumerate() {
            for j in 0..plane {
                out[i * plane + j] = x_data[i * plane + j] * gv;
            }
        }
        let out = Tensor::from_vec(xs, out)?;
        self.push("scale_channels", out, &[x, gate], Op::ScaleChannels { x, gate })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), &[x], Op::SumAll { x })
    }

    /// Mean cross-entropy over all pixels of `-log softmax(logits)[label]`,
    /// computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &Labels) -> Result<NodeId, TensorError> {
        let ls = self.value(logits).shape();
        if ls.b != labels.b || ls.h != labels.h || ls.w != labels.w {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                detail: format!(
                    "logits {ls} vs labels [{}, {}, {}]",
                    labels.b, labels.h, labels.w
                ),
            });
        }
        let classes = ls.c;
        let plane = ls.h * ls.w;
        let x = self.value(logits).data();
        let mut total = T::zero();
        for b in 0..ls.b {
            for y in 0..ls.h {
                for xx in 0..ls.w {
                    let label = labels.data[(b * ls.h + y) * ls.w + xx] as usize;
                    if label >= classes {
                        return Err(TensorError::Data(format!(
                            "label {label} out of range [0, {classes}) at pixel (batch {b}, y {y}, x {xx})"
                        )));
                    }
                    let base = b * classes * plane + y * ls.w + xx;
                    let mut max = T::neg_infinity();
                    for k in 0..classes {
                        max = max.max(x[base + k * plane]);
                    }
                    let mut sum = T::zero();
                    for k in 0..classes {
                        sum += (x[base + k * plane] - max).exp();
                    }
                    let lse = max + sum.ln();
                    total += lse - x[base + label * plane];
                }
            }
        }
        let n = lit::<T>((ls.b * plane) as f64);
        let out = Tensor::scalar(total / n);
        self.push(
            "cross_entropy",
            out,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.clone(),
            },
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Within the pass, a node feeding
    /// several consumers receives the sum of their contributions. One pass
    /// per graph: node gradients double as propagation state, so a second
    /// call would recount the first — build a fresh graph instead.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::State(
                "backward already ran on this graph".into(),
            ));
        }
        self.backward_done = true;
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {}", self.value(loss).shape()),
            });
        }
        self.accumulate(loss, &[T::one()]);
        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            self.backward_node(id);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, grad: &[T]) {
        let node = &mut self.nodes[id];
        debug_assert_eq!(grad.len(), node.value.numel());
        match &mut node.grad {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(grad.iter()) {
                    *a += b;
                }
            }
            None => node.grad = Some(grad.to_vec()),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn backward_node(&mut self, id: NodeId) {
        // Taking the upstream gradient by clone keeps borrows simple; the
        // buffers involved are the same ones the forward pass already paid for.
        let d_out = self.nodes[id].grad.clone().expect("grad present");
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.accumulate(a, &d_out);
                }
                if self.needs(b) {
                    self.accumulate(b, &d_out);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let g: Vec<T> = d_out
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.accumulate(a, &g);
                }
                if self.needs(b) {
                    let g: Vec<T> = d_out
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.accumulate(b, &g);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.needs(x) {
                    let g: Vec<T> = d_out.iter().map(|&d| d * c).collect();
                    self.accumulate(x, &g);
                }
            }
            Op::MulScalar { x, s } => {
                let (x, s) = (*x, *s);
                let sv = self.nodes[s].value.data()[0];
                if self.needs(x) {
                    let g: Vec<T> = d_out.iter().map(|&d| d * sv).collect();
                    self.accumulate(x, &g);
                }
                if self.needs(s) {
                    let ds: T = d_out
                        .iter()
                        .zip(self.nodes[x].value.data())
                        .map(|(&d, &v)| d * v)
                        .sum();
                    self.accumulate(s, &[ds]);
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if self.needs(x) {
                    // Subgradient 0 at exactly 0.
                    let g: Vec<T> = d_out
                        .iter()
                        .zip(self.nodes[x].value.data())
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    self.accumulate(x, &g);
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                if self.needs(x) {
                    let g: Vec<T> = d_out
                        .iter()
                        .zip(self.nodes[id].value.data())
                        .map(|(&d, &y)| d * y * (T::one() - y))
                        .collect();
                    self.accumulate(x, &g);
                }
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a].value.shape();
                let sb = self.nodes[b].value.shape();
                let (m, k, p) = (sa.h, sa.w, sb.w);
                if self.needs(a) {
                    // dA = dOut * B^T
                    let bt = kernels::transpose(self.nodes[b].value.data(), k, p);
                    let g = kernels::matmul(&d_out, &bt, m, p, k);
                    self.accumulate(a, &g);
                }
                if self.needs(b) {
                    // dB = A^T * dOut
                    let at = kernels::transpose(self.nodes[a].value.data(), m, k);
                    let g = kernels::matmul(&at, &d_out, k, m, p);
                    self.accumulate(b, &g);
                }
            }
            Op::TransposeMat { x } => {
                let x = *x;
                if self.needs(x) {
                    let s = self.nodes[id].value.shape();
                    let g = kernels::transpose(&d_out, s.h, s.w);
                    self.accumulate(x, &g);
                }
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                if self.needs(x) {
                    let s = self.nodes[id].value.shape();
                    let y = self.nodes[id].value.data();
                    let mut g = vec![T::zero(); y.len()];
                    for r in 0..s.h {
                        let row = &y[r * s.w..(r + 1) * s.w];
                        let drow = &d_out[r * s.w..(r + 1) * s.w];
                        let dot: T = row.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                        for c in 0..s.w {
                            g[r * s.w + c] = row[c] * (drow[c] - dot);
                        }
                    }
                    self.accumulate(x, &g);
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let (x, w, bias, geom) = (*x, *w, *bias, *geom);
                self.backward_conv(id, x, w, bias, geom, &d_out);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta, batch_stats) = (*x, *gamma, *beta, *batch_stats);
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                self.backward_batchnorm(x, gamma, beta, &mean, &inv_std, batch_stats, &d_out);
            }
            Op::AvgPool { x, k, stride } => {
                let (x, k, stride) = (*x, *k, *stride);
                if self.needs(x) {
                    let xs = self.nodes[x].value.shape();
                    let os = self.nodes[id].value.shape();
                    let inv = T::one() / lit::<T>((k * k) as f64);
                    let mut g = vec![T::zero(); xs.numel()];
                    for b in 0..xs.b {
                        for c in 0..xs.c {
                            let src_base = (b * xs.c + c) * os.h * os.w;
                            let dst_base = (b * xs.c + c) * xs.h * xs.w;
                            for oy in 0..os.h {
                                for ox in 0..os.w {
                                    let d = d_out[src_base + oy * os.w + ox] * inv;
                                    for ky in 0..k {
                                        let row = dst_base + (oy * stride + ky) * xs.w + ox * stride;
                                        for kx in 0..k {
                                            g[row + kx] += d;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, &g);
                }
            }
            Op::Bilinear { x } => {
                let x = *x;
                if self.needs(x) {
                    let xs = self.nodes[x].value.shape();
                    let os = self.nodes[id].value.shape();
                    let ty = tap_table::<T>(xs.h, os.h);
                    let tx = tap_table::<T>(xs.w, os.w);
                    let mut g = vec![T::zero(); xs.numel()];
                    for b in 0..xs.b {
                        for c in 0..xs.c {
                            let src_base = (b * xs.c + c) * os.h * os.w;
                            let dst_base = (b * xs.c + c) * xs.h * xs.w;
                            for oy in 0..os.h {
                                let (y0, y1, wy) = ty[oy];
                                for ox in 0..os.w {
                                    let (x0, x1, wx) = tx[ox];
                                    let d = d_out[src_base + oy * os.w + ox];
                                    let one = T::one();
                                    g[dst_base + y0 * xs.w + x0] += d * (one - wy) * (one - wx);
                                    g[dst_base + y0 * xs.w + x1] += d * (one - wy) * wx;
                                    g[dst_base + y1 * xs.w + x0] += d * wy * (one - wx);
                                    g[dst_base + y1 * xs.w + x1] += d * wy * wx;
                                }
                            }
                        }
                    }
                    self.accumulate(x, &g);
                }
            }
            Op::CropHw { x, y0, x0 } => {
                let (x, y0, x0) = (*x, *y0, *x0);
                if self.needs(x) {
                    let xs = self.nodes[x].value.shape();
                    let os = self.nodes[id].value.shape();
                    let mut g = vec![T::zero(); xs.numel()];
                    for b in 0..xs.b {
                        for c in 0..xs.c {
                            let src_base = (b * xs.c + c) * os.h * os.w;
                            let dst_base = (b * xs.c + c) * xs.h * xs.w;
                            for y in 0..os.h {
                                let src_row = src_base + y * os.w;
                                let dst_row = dst_base + (y0 + y) * xs.w + x0;
                                for xx in 0..os.w {
                                    g[dst_row + xx] += d_out[src_row + xx];
                                }
                            }
                        }
                    }
                    self.accumulate(x, &g);
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.needs(x) {
                    self.accumulate(x, &d_out);
                }
            }
            Op::SliceBatch { x, index } => {
                let (x, index) = (*x, *index);
                if self.needs(x) {
                    let xs = self.nodes[x].value.shape();
                    let plane = xs.c * xs.h * xs.w;
                    let mut g = vec![T::zero(); xs.numel()];
                    g[index * plane..(index + 1) * plane].copy_from_slice(&d_out);
                    self.accumulate(x, &g);
                }
            }
            Op::ConcatBatch { xs } => {
                let xs = xs.clone();
                let plane = self.nodes[xs[0]].value.numel();
                for (i, &src) in xs.iter().enumerate() {
                    if self.needs(src) {
                        self.accumulate(src, &d_out[i * plane..(i + 1) * plane]);
                    }
                }
            }
            Op::MeanHw { x } => {
                let x = *x;
                if self.needs(x) {
                    let xs = self.nodes[x].value.shape();
                    let plane = xs.h * xs.w;
                    let inv = T::one() / lit::<T>(plane as f64);
                    let mut g = vec![T::zero(); xs.numel()];
                    for (i, &d) in d_out.iter().enumerate() {
                        let dv = d * inv;
                        for j in 0..plane {
                            g[i * plane + j] = dv;
                        }
                    }
                    self.accumulate(x, &g);
                }
            }
            Op::ScaleChannels { x, gate } => {
                let (x, gate) = (*x, *gate);
                let xs = self.nodes[x].value.shape();
                let plane = xs.h * xs.w;
                if self.needs(x) {
                    let gv = self.nodes[gate].value.data();
                    let mut g = vec![T::zero(); xs.numel()];
                    for i in 0..xs.b * xs.c {
                        for j in 0..plane {
                            g[i * plane + j] = d_out[i * plane + j] * gv[i];
                        }
                    }
                    self.accumulate(x, &g);
                }
                if self.needs(gate) {
                    let xv = self.nodes[x].value.data();
                    let mut g = vec![T::zero(); xs.b * xs.c];
                    for (i, gi) in g.iter_mut().enumerate() {
                        let mut s = T::zero();
                        for j in 0..plane {
                            s += d_out[i * plane + j] * xv[i * plane + j];
                        }
                        *gi = s;
                    }
                    self.accumulate(gate, &g);
                }
            }
            Op::SumAll { x } => {
                let x = *x;
                if self.needs(x) {
                    let n = self.nodes[x].value.numel();
                    let g = vec![d_out[0]; n];
                    self.accumulate(x, &g);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                if self.needs(logits) {
                    let ls = self.nodes[logits].value.shape();
                    let classes = ls.c;
                    let plane = ls.h * ls.w;
                    let x = self.nodes[logits].value.data();
                    let scale = d_out[0] / lit::<T>((ls.b * plane) as f64);
                    let mut g = vec![T::zero(); x.len()];
                    for b in 0..ls.b {
                        for y in 0..ls.h {
                            for xx in 0..ls.w {
                                let label = labels.data[(b * ls.h + y) * ls.w + xx] as usize;
                                let base = b * classes * plane + y * ls.w + xx;
                                let mut max = T::neg_infinity();
                                for k in 0..classes {
                                    max = max.max(x[base + k * plane]);
                                }
                                let mut sum = T::zero();
                                for k in 0..classes {
                                    sum += (x[base + k * plane] - max).exp();
                                }
                                for k in 0..classes {
                                    let p = (x[base + k * plane] - max).exp() / sum;
                                    let onehot = if k == label { T::one() } else { T::zero() };
                                    g[base + k * plane] = (p - onehot) * scale;
                                }
                            }
                        }
                    }
                    self.accumulate(logits, &g);
                }
            }
        }
    }

    fn backward_conv(
        &mut self,
        out: NodeId,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
        d_out: &[T],
    ) {
        let xs = self.nodes[x].value.shape();
        let ws = self.nodes[w].value.shape();
        let os = self.nodes[out].value.shape();
        let c_out = ws.b;
        let plane_in = xs.c * xs.h * xs.w;
        let plane_out = c_out * os.h * os.w;
        let patch = geom.patch_len();
        let out_len = geom.out_len();

        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut dw = if need_w { vec![T::zero(); ws.numel()] } else { Vec::new() };
        let mut dx = if need_x { vec![T::zero(); xs.numel()] } else { Vec::new() };
        let mut col = vec![T::zero(); patch * out_len];
        let w_t = if need_x {
            kernels::transpose(self.nodes[w].value.data(), c_out, patch)
        } else {
            Vec::new()
        };
        for b in 0..xs.b {
            let d_b = &d_out[b * plane_out..(b + 1) * plane_out];
            if need_w {
                // dW += dOut_b · col^T  (col recomputed from the saved input)
                kernels::im2col(
                    &self.nodes[x].value.data()[b * plane_in..(b + 1) * plane_in],
                    &geom,
                    &mut col,
                );
                let col_t = kernels::transpose(&col, patch, out_len);
                kernels::matmul_acc(d_b, &col_t, &mut dw, c_out, out_len, patch);
            }
            if need_x {
                let d_col = kernels::matmul(&w_t, d_b, patch, c_out, out_len);
                kernels::col2im_acc(&d_col, &geom, &mut dx[b * plane_in..(b + 1) * plane_in]);
            }
        }
        if need_w {
            self.accumulate(w, &dw);
        }
        if need_x {
            self.accumulate(x, &dx);
        }
        if let Some(bid) = bias {
            if self.needs(bid) {
                let mut db = vec![T::zero(); c_out];
                for b in 0..xs.b {
                    for (co, dbv) in db.iter_mut().enumerate() {
                        let base = b * plane_out + co * os.h * os.w;
                        for i in 0..os.h * os.w {
                            *dbv += d_out[base + i];
                        }
                    }
                }
                self.accumulate(bid, &db);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
        d_out: &[T],
    ) {
        let xs = self.nodes[x].value.shape();
        let c = xs.c;
        let plane = xs.h * xs.w;
        let m = lit::<T>((xs.b * plane) as f64);
        let g_data = self.nodes[gamma].value.data().to_vec();

        // Per-channel reductions over the batch.
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        {
            let xv = self.nodes[x].value.data();
            for b in 0..xs.b {
                for ci in 0..c {
                    let base = (b * c + ci) * plane;
                    let (mu, is) = (mean[ci], inv_std[ci]);
                    let mut sd = T::zero();
                    let mut sdx = T::zero();
                    for i in 0..plane {
                        let d = d_out[base + i];
                        sd += d;
                        sdx += d * (xv[base + i] - mu) * is;
                    }
                    sum_dy[ci] += sd;
                    sum_dy_xhat[ci] += sdx;
                }
            }
        }
        if self.needs(x) {
            let xv = self.nodes[x].value.data();
            let mut g = vec![T::zero(); xs.numel()];
            for b in 0..xs.b {
                for ci in 0..c {
                    let base = (b * c + ci) * plane;
                    let (mu, is, ga) = (mean[ci], inv_std[ci], g_data[ci]);
                    if batch_stats {
                        let k = ga * is / m;
                        for i in 0..plane {
                            let xhat = (xv[base + i] - mu) * is;
                            g[base + i] =
                                k * (m * d_out[base + i] - sum_dy[ci] - xhat * sum_dy_xhat[ci]);
                        }
                    } else {
                        let k = ga * is;
                        for i in 0..plane {
                            g[base + i] = k * d_out[base + i];
                        }
                    }
                }
            }
            self.accumulate(x, &g);
        }
        if self.needs(gamma) {
            self.accumulate(gamma, &sum_dy_xhat);
        }
        if self.needs(beta) {
            self.accumulate(beta, &sum_dy);
        }
    }
}

/// Precompute bilinear taps for one axis, cast to the working precision.
fn tap_table<T: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T)> {
    (0..out_len)
        .map(|i| {
            let (i0, i1, w) = kernels::bilinear_taps(i, in_len, out_len);
            (i0, i1, lit::<T>(w))
        })
        .collect()
}
