//! Parameterized layers: convolution and batch normalization, plus the
//! visitor that exposes every learned tensor for the optimizer, checkpoint,
//! and gradient-check code.

use crate::error::TensorError;
use crate::graph::{Graph, NodeId, Param};
use crate::tensor::{lit, Scalar, Shape, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Mutex;

/// Which of the model's tensors a visitor is looking at.
pub enum Slot<'a, T: Scalar> {
    /// Optimized by gradient descent.
    Trainable(&'a mut Param<T>),
    /// Persisted state that is not optimized (batch-norm running statistics).
    Buffer(&'a mut Tensor<T>),
}

/// Anything holding learned state. Visit order is deterministic and is the
/// checkpoint record order.
pub trait Module<T: Scalar> {
    fn for_each(&mut self, f: &mut dyn FnMut(&str, Slot<'_, T>));
}

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    /// Batch statistics in normalization (vs running statistics).
    pub train: bool,
    /// Fold batch statistics into the running averages. Kept separate from
    /// `train` so finite-difference checks can use batch statistics without
    /// mutating state between probes.
    pub update_bn: bool,
}

impl Phase {
    pub fn train() -> Self {
        Phase { train: true, update_bn: true }
    }

    pub fn eval() -> Self {
        Phase { train: false, update_bn: false }
    }

    /// Train-mode math with frozen running statistics.
    pub fn train_frozen() -> Self {
        Phase { train: true, update_bn: false }
    }
}

/// He-initialized weights: zero-mean normal with `std = sqrt(2 / fan_in)`.
pub fn kaiming_normal<T: Scalar>(shape: Shape, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..shape.numel()).map(|_| lit::<T>(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("sized to shape")
}

/// 2-D convolution (cross-correlation), square kernel.
pub struct Conv2d<T: Scalar> {
    name: String,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = Param::new(kaiming_normal(
            Shape::new(c_out, c_in, k, k),
            c_in * k * k,
            rng,
        ));
        let bias = bias.then(|| Param::new(Tensor::zeros(Shape::new(1, c_out, 1, 1))));
        Conv2d {
            name: name.into(),
            weight,
            bias,
            stride,
            pad,
            dilation,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId, TensorError> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|p| g.param(p));
        g.conv2d(x, w, b, self.stride, self.pad, self.dilation)
            .map_err(|e| e.at(self.name.clone()))
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().b
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn for_each(&mut self, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        let name = format!("{}.weight", self.name);
        f(&name, Slot::Trainable(&mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            let name = format!("{}.bias", self.name);
            f(&name, Slot::Trainable(b));
        }
    }
}

struct BnState<T: Scalar> {
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    /// Batches folded in; [1,1,1,1] so it rides the checkpoint as a buffer.
    count: Tensor<T>,
}

/// Batch normalization over (batch, height, width) per channel.
///
/// Normalization uses biased variance; the running average stores unbiased
/// variance. Running statistics sit behind a mutex so a model can be shared
/// across inference threads; eval mode only reads them.
pub struct BatchNorm2d<T: Scalar> {
    name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    state: Mutex<BnState<T>>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: impl Into<String>, c: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            gamma: Param::new(Tensor::full(Shape::new(1, c, 1, 1), T::one())),
            beta: Param::new(Tensor::zeros(Shape::new(1, c, 1, 1))),
            state: Mutex::new(BnState {
                running_mean: Tensor::zeros(Shape::new(1, c, 1, 1)),
                running_var: Tensor::full(Shape::new(1, c, 1, 1), T::one()),
                count: Tensor::zeros(Shape::scalar()),
            }),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, phase: Phase) -> Result<NodeId, TensorError> {
        self.forward_inner(g, x, phase).map_err(|e| e.at(self.name.clone()))
    }

    fn forward_inner(&self, g: &mut Graph<T>, x: NodeId, phase: Phase) -> Result<NodeId, TensorError> {
        let xs = g.value(x).shape();
        let c = self.channels();
        if xs.c != c {
            return Err(TensorError::Shape {
                op: "batchnorm",
                detail: format!("input {xs} vs {c} normalized channels"),
            });
        }
        let eps = lit::<T>(self.eps);
        let (mean, inv_std) = if phase.train {
            let m = xs.b * xs.h * xs.w;
            if m < 2 {
                return Err(TensorError::Config(format!(
                    "batch statistics need at least 2 values per channel, got {m}"
                )));
            }
            let (mean, var_biased) = batch_moments(g.value(x));
            if phase.update_bn {
                let bessel = lit::<T>(m as f64 / (m as f64 - 1.0));
                let mut st = self.state.lock().expect("bn state lock");
                let mom = lit::<T>(self.momentum);
                let keep = T::one() - mom;
                for ci in 0..c {
                    let rm = st.running_mean.data()[ci];
                    st.running_mean.data_mut()[ci] = keep * rm + mom * mean[ci];
                    let rv = st.running_var.data()[ci];
                    st.running_var.data_mut()[ci] = keep * rv + mom * var_biased[ci] * bessel;
                }
                let cnt = st.count.data()[0];
                st.count.data_mut()[0] = cnt + T::one();
            }
            let inv_std = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv_std)
        } else {
            let st = self.state.lock().expect("bn state lock");
            let mean = st.running_mean.data().to_vec();
            let inv_std = st
                .running_var
                .data()
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            (mean, inv_std)
        };
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.batchnorm(x, gamma, beta, mean, inv_std, phase.train)
    }

    /// Batches folded into the running statistics so far.
    pub fn batches_seen(&self) -> f64 {
        self.state.lock().expect("bn state lock").count.data()[0]
            .to_f64()
            .unwrap_or(0.0)
    }

    pub fn running_stats(&self) -> (Vec<T>, Vec<T>) {
        let st = self.state.lock().expect("bn state lock");
        (st.running_mean.data().to_vec(), st.running_var.data().to_vec())
    }
}

/// Per-channel mean and biased variance over (batch, height, width).
pub(crate) fn batch_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let plane = s.h * s.w;
    let m = lit::<T>((s.b * plane) as f64);
    let data = x.data();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for (c, mc) in mean.iter_mut().enumerate() {
        let mut acc = T::zero();
        for b in 0..s.b {
            let base = (b * s.c + c) * plane;
            for i in 0..plane {
                acc += data[base + i];
            }
        }
        *mc = acc / m;
    }
    for (c, vc) in var.iter_mut().enumerate() {
        let mut acc = T::zero();
        for b in 0..s.b {
            let base = (b * s.c + c) * plane;
            for i in 0..plane {
                let d = data[base + i] - mean[c];
                acc += d * d;
            }
        }
        *vc = acc / m;
    }
    (mean, var)
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn for_each(&mut self, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        let base = self.name.clone();
        f(&format!("{base}.gamma"), Slot::Trainable(&mut self.gamma));
        f(&format!("{base}.beta"), Slot::Trainable(&mut self.beta));
        let st = self.state.get_mut().expect("bn state lock");
        f(&format!("{base}.running_mean"), Slot::Buffer(&mut st.running_mean));
        f(&format!("{base}.running_var"), Slot::Buffer(&mut st.running_var));
        f(&format!("{base}.batches"), Slot::Buffer(&mut st.count));
    }
}

/// Collect the names a module exposes, in visit order.
pub fn slot_names<T: Scalar>(m: &mut dyn Module<T>) -> Vec<String> {
    let mut names = Vec::new();
    m.for_each(&mut |name, _| names.push(name.to_string()));
    names
}

/// Total trainable scalars in a module.
pub fn trainable_count<T: Scalar>(m: &mut dyn Module<T>) -> usize {
    let mut n = 0;
    m.for_each(&mut |_, slot| {
        if let Slot::Trainable(p) = slot {
            n += p.value.numel();
        }
    });
    n
}
