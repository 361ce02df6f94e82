//! Central finite-difference verification of analytic gradients.
//!
//! Everything here runs in f64: the forward code is generic over the scalar
//! type, so the f64 path exercised under FD is the same code that trains in
//! f32 — only the storage width differs.

use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::layers::{Module, Slot};
use crate::tensor::{Shape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Relative error with an absolute floor, so gradients near zero do not
/// blow the ratio up on roundoff noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floored(a, b, 1e-6)
}

/// `rel_err` with a caller-chosen denominator floor. A floor of `f` makes
/// gradients below `f` pass on an absolute tolerance of `threshold * f`
/// instead of a ratio of two roundoff-sized numbers.
pub fn rel_err_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Anything whose parameters can be probed by finite differences.
///
/// `loss` must be a pure function of the current group values: two calls
/// without an intervening `nudge` must return the identical number. Stateful
/// layers (batch-norm running statistics) have to be frozen by the adapter.
pub trait FdTarget {
    /// Group names and shapes, fixing the group/index coordinate system.
    fn groups(&self) -> Vec<(String, Shape)>;
    /// Forward pass only.
    fn loss(&mut self) -> Result<f64, TensorError>;
    /// Forward + backward; analytic gradients in `groups` order.
    fn grads(&mut self) -> Result<Vec<Tensor<f64>>, TensorError>;
    /// Add `delta` to one element.
    fn nudge(&mut self, group: usize, idx: usize, delta: f64);
}

#[derive(Debug, Clone)]
pub struct FdRow {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// (analytic, finite-difference) at the worst element.
    pub worst_pair: (f64, f64),
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub rows: Vec<FdRow>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.rows.iter().map(|r| r.checked).sum()
    }
}

/// Central finite differences against analytic gradients.
///
/// Checks up to `sample_per_group` elements per group (all of them when the
/// group is small enough), drawn without replacement from a seeded RNG so
/// runs are repeatable.
pub fn check_target(
    target: &mut dyn FdTarget,
    eps: f64,
    sample_per_group: usize,
    seed: u64,
) -> Result<FdReport, TensorError> {
    check_target_floored(target, eps, sample_per_group, seed, 1e-6)
}

/// `check_target` with an explicit `rel_err_floored` denominator floor.
pub fn check_target_floored(
    target: &mut dyn FdTarget,
    eps: f64,
    sample_per_group: usize,
    seed: u64,
    floor: f64,
) -> Result<FdReport, TensorError> {
    let groups = target.groups();
    let analytic = target.grads()?;
    if analytic.len() != groups.len() {
        return Err(TensorError::State(format!(
            "target returned {} gradient tensors for {} groups",
            analytic.len(),
            groups.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::default();
    for (gi, (name, shape)) in groups.iter().enumerate() {
        if analytic[gi].shape() != *shape {
            return Err(TensorError::State(format!(
                "gradient shape {} does not match group {name} {shape}",
                analytic[gi].shape()
            )));
        }
        let n = shape.numel();
        let mut indices: Vec<usize> = (0..n).collect();
        if n > sample_per_group {
            indices.shuffle(&mut rng);
            indices.truncate(sample_per_group);
            indices.sort_unstable();
        }
        let mut row = FdRow {
            name: name.clone(),
            checked: indices.len(),
            max_rel_err: 0.0,
            worst_pair: (0.0, 0.0),
        };
        for &idx in &indices {
            target.nudge(gi, idx, eps);
            let plus = target.loss()?;
            target.nudge(gi, idx, -2.0 * eps);
            let minus = target.loss()?;
            target.nudge(gi, idx, eps);
            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic[gi].data()[idx];
            let e = rel_err_floored(an, fd, floor);
            if e > row.max_rel_err {
                row.max_rel_err = e;
                row.worst_pair = (an, fd);
            }
        }
        report.rows.push(row);
    }
    Ok(report)
}

/// FD target over plain input tensors and a graph-building closure: the
/// closure receives the inputs as differentiable nodes and returns the loss.
pub struct FnTarget<F> {
    inputs: Vec<(String, Tensor<f64>)>,
    build: F,
}

impl<F> FnTarget<F>
where
    F: FnMut(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    pub fn new(inputs: Vec<(String, Tensor<f64>)>, build: F) -> Self {
        FnTarget { inputs, build }
    }

    fn run(&mut self) -> Result<(Graph<f64>, NodeId), TensorError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self
            .inputs
            .iter()
            .map(|(_, t)| g.input(t.clone(), true))
            .collect();
        let loss = (self.build)(&mut g, &ids)?;
        Ok((g, loss))
    }
}

impl<F> FdTarget for FnTarget<F>
where
    F: FnMut(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    fn groups(&self) -> Vec<(String, Shape)> {
        self.inputs
            .iter()
            .map(|(n, t)| (n.clone(), t.shape()))
            .collect()
    }

    fn loss(&mut self) -> Result<f64, TensorError> {
        let (g, loss) = self.run()?;
        g.value(loss).item()
    }

    fn grads(&mut self) -> Result<Vec<Tensor<f64>>, TensorError> {
        let (mut g, loss) = self.run()?;
        g.backward(loss)?;
        let ids: Vec<NodeId> = (0..self.inputs.len()).collect();
        ids.iter()
            .map(|&id| {
                g.grad(id).ok_or_else(|| {
                    TensorError::State(format!(
                        "no gradient reached input group {}",
                        self.inputs[id].0
                    ))
                })
            })
            .collect()
    }

    fn nudge(&mut self, group: usize, idx: usize, delta: f64) {
        self.inputs[group].1.data_mut()[idx] += delta;
    }
}

/// FD target over every trainable parameter of a module.
///
/// `build` must run a pure forward to a scalar loss for the module's current
/// parameter values: drive stateful layers with a frozen phase so two calls
/// without a nudge agree bit-for-bit.
pub struct ModuleTarget<'a, M, F> {
    model: &'a mut M,
    build: F,
    groups: Vec<(String, Shape)>,
}

impl<'a, M, F> ModuleTarget<'a, M, F>
where
    M: Module<f64>,
    F: FnMut(&mut Graph<f64>, &M) -> Result<NodeId, TensorError>,
{
    pub fn new(model: &'a mut M, build: F) -> Self {
        let mut groups = Vec::new();
        model.for_each(&mut |name, slot| {
            if let Slot::Trainable(p) = slot {
                groups.push((name.to_string(), p.shape()));
            }
        });
        ModuleTarget {
            model,
            build,
            groups,
        }
    }
}

impl<M, F> FdTarget for ModuleTarget<'_, M, F>
where
    M: Module<f64>,
    F: FnMut(&mut Graph<f64>, &M) -> Result<NodeId, TensorError>,
{
    fn groups(&self) -> Vec<(String, Shape)> {
        self.groups.clone()
    }

    fn loss(&mut self) -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let loss = (self.build)(&mut g, self.model)?;
        g.value(loss).item()
    }

    fn grads(&mut self) -> Result<Vec<Tensor<f64>>, TensorError> {
        let mut g = Graph::new();
        let loss = (self.build)(&mut g, self.model)?;
        g.backward(loss)?;
        // A trainable that never entered the graph is itself a bug.
        let mut out = Vec::new();
        let mut missing = None;
        self.model.for_each(&mut |name, slot| {
            if let Slot::Trainable(p) = slot {
                match g.param_grad(p) {
                    Some(t) => out.push(t),
                    None => missing = Some(name.to_string()),
                }
            }
        });
        match missing {
            Some(name) => Err(TensorError::State(format!(
                "no gradient reached parameter {name}"
            ))),
            None => Ok(out),
        }
    }

    fn nudge(&mut self, group: usize, idx: usize, delta: f64) {
        let mut i = 0;
        self.model.for_each(&mut |_, slot| {
            if let Slot::Trainable(p) = slot {
                if i == group {
                    p.value.data_mut()[idx] += delta;
                }
                i += 1;
            }
        });
    }
}

/// Deterministic pseudo-random tensor for building check problems. Values in
/// `(lo, hi)`, never landing exactly on ReLU's kink.
pub fn fuzz_tensor(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel())
        .map(|_| rng.gen_range(lo..hi))
        .collect();
    Tensor::from_vec(shape, data).expect("sized to shape")
}

/// Random positive weights for a weighted-sum loss: breaks the permutation
/// symmetry that a plain `sum` loss would leave unchecked.
pub fn loss_weights(shape: Shape, seed: u64) -> Tensor<f64> {
    fuzz_tensor(shape, 0.1, 1.0, seed ^ 0x9e37_79b9_7f4a_7c15)
}
